// Typed client for the session gateway REST API.

import type { EditResponse, SessionResponse } from "./types.js";

export class GatewayError extends Error {
    readonly status: number;
    readonly stage: string | null;

    constructor(status: number, message: string, stage: string | null = null) {
        super(message);
        this.name = "GatewayError";
        this.status = status;
        this.stage = stage;
    }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function freshKey(): string {
    if (typeof crypto !== "undefined" && "randomUUID" in crypto) {
        return crypto.randomUUID();
    }
    return `key-${Date.now()}-${Math.random().toString(36).slice(2)}`;
}

async function errorFrom(response: Response): Promise<GatewayError> {
    let message = `HTTP ${response.status}`;
    let stage: string | null = null;
    try {
        const body = (await response.json()) as { error?: string; stage?: string };
        if (body.error) message = body.error;
        if (body.stage) stage = body.stage;
    } catch {
        // non-JSON error body: keep the generic message
    }
    return new GatewayError(response.status, message, stage);
}

export class GatewayClient {
    private readonly baseUrl: string;
    private readonly fetchImpl: FetchLike;

    constructor(baseUrl: string, fetchImpl?: FetchLike) {
        this.baseUrl = baseUrl.replace(/\/+$/, "");
        this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
    }

    /** Absolute URL for a gateway-relative artifact path. */
    resolve(path: string): string {
        return path.startsWith("http") ? path : this.baseUrl + path;
    }

    private async postJson(path: string, payload: unknown): Promise<unknown> {
        const response = await this.fetchImpl(this.baseUrl + path, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify(payload),
        });
        if (!response.ok) throw await errorFrom(response);
        return response.json();
    }

    async createSession(image: Blob, config?: Record<string, unknown>): Promise<string> {
        const form = new FormData();
        form.append("image", image, "upload.png");
        if (config) form.append("config", JSON.stringify(config));
        const response = await this.fetchImpl(this.baseUrl + "/sessions", {
            method: "POST",
            body: form,
        });
        if (!response.ok) throw await errorFrom(response);
        const body = (await response.json()) as { session_id: string };
        return body.session_id;
    }

    /** k omitted: auto-commit the judge's pick. k >= 2: surface candidates. */
    async edit(sessionId: string, instruction: string, k?: number): Promise<EditResponse> {
        const payload: Record<string, unknown> = {
            instruction,
            idempotency_key: freshKey(),
        };
        if (k !== undefined) payload.k = k;
        return (await this.postJson(
            `/sessions/${sessionId}/edit`,
            payload,
        )) as EditResponse;
    }

    async commit(sessionId: string, index: number): Promise<EditResponse> {
        return (await this.postJson(`/sessions/${sessionId}/commit`, {
            index,
            idempotency_key: freshKey(),
        })) as EditResponse;
    }

    async getSession(sessionId: string): Promise<SessionResponse> {
        const response = await this.fetchImpl(`${this.baseUrl}/sessions/${sessionId}`);
        if (!response.ok) throw await errorFrom(response);
        return (await response.json()) as SessionResponse;
    }

    async health(): Promise<boolean> {
        try {
            const response = await this.fetchImpl(this.baseUrl + "/healthz");
            return response.ok;
        } catch {
            return false;
        }
    }
}
