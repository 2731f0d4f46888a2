// Browser bootstrap: wires the DOM to the gateway client. All state lives
// server-side; after every mutation the session is re-fetched and
// re-rendered, so nothing here can drift from the gateway's truth.

import { GatewayClient, GatewayError } from "./api.js";
import {
    renderCandidateGrid,
    renderCurrentImage,
    renderDetailPanel,
    renderTimeline,
    renderToast,
} from "./render.js";
import { sessionViewFrom } from "./state.js";
import type { SessionView } from "./types.js";

function gatewayBase(): string {
    const params = new URLSearchParams(window.location.search);
    return params.get("gateway") ?? window.location.origin;
}

class App {
    private readonly client: GatewayClient;
    private sessionId: string | null;
    private view: SessionView | null = null;
    private detailRound: number | null = null;
    private showOverlay = true;
    private sliderPercent = 100;

    constructor() {
        this.client = new GatewayClient(gatewayBase());
        this.sessionId = new URLSearchParams(window.location.search).get("session");
    }

    private element<T extends HTMLElement>(selector: string): T {
        const node = document.querySelector<T>(selector);
        if (!node) throw new Error(`missing element ${selector}`);
        return node;
    }

    async start(): Promise<void> {
        this.element<HTMLFormElement>("#upload-form").addEventListener(
            "submit",
            (event) => {
                event.preventDefault();
                void this.onUpload();
            },
        );
        this.element<HTMLFormElement>("#edit-form").addEventListener(
            "submit",
            (event) => {
                event.preventDefault();
                void this.onEdit();
            },
        );
        document.addEventListener("click", (event) => {
            const target = event.target as HTMLElement;
            const card = target.closest<HTMLElement>(".candidate-card");
            if (card?.dataset.position !== undefined) {
                void this.onCommit(Number(card.dataset.position));
                return;
            }
            const entry = target.closest<HTMLElement>(".timeline-entry");
            if (entry?.dataset.round !== undefined) {
                this.detailRound = Number(entry.dataset.round);
                this.paint();
            }
        });
        document.addEventListener("input", (event) => {
            const target = event.target as HTMLInputElement;
            if (target.id === "compare-slider") {
                this.sliderPercent = Number(target.value);
                this.paint();
            }
        });
        document.addEventListener("change", (event) => {
            const target = event.target as HTMLInputElement;
            if (target.id === "overlay-toggle") {
                this.showOverlay = target.checked;
                this.paint();
            }
        });
        if (this.sessionId) await this.refresh();
    }

    private async refresh(): Promise<void> {
        if (!this.sessionId) return;
        const response = await this.client.getSession(this.sessionId);
        this.view = sessionViewFrom(this.sessionId, response);
        this.paint();
    }

    private toast(message: string, stage: string | null = null): void {
        this.element("#toasts").innerHTML = renderToast(message, stage);
        window.setTimeout(() => {
            this.element("#toasts").innerHTML = "";
        }, 6000);
    }

    private async guard(action: () => Promise<void>): Promise<void> {
        try {
            await action();
        } catch (error) {
            if (error instanceof GatewayError) {
                this.toast(error.message, error.stage);
            } else {
                this.toast(String(error));
            }
        }
    }

    private async onUpload(): Promise<void> {
        await this.guard(async () => {
            const input = this.element<HTMLInputElement>("#image-file");
            const file = input.files?.[0];
            if (!file) {
                this.toast("choose a PNG first");
                return;
            }
            this.sessionId = await this.client.createSession(file);
            const url = new URL(window.location.href);
            url.searchParams.set("session", this.sessionId);
            window.history.replaceState(null, "", url.toString());
            await this.refresh();
        });
    }

    private async onEdit(): Promise<void> {
        await this.guard(async () => {
            if (!this.sessionId) {
                this.toast("upload an image first");
                return;
            }
            const instruction =
                this.element<HTMLInputElement>("#instruction").value.trim();
            const k = Number(this.element<HTMLSelectElement>("#diversity").value);
            if (!instruction) {
                this.toast("write an instruction first");
                return;
            }
            if (k >= 2) {
                await this.client.edit(this.sessionId, instruction, k);
            } else {
                await this.client.edit(this.sessionId, instruction);
            }
            await this.refresh();
        });
    }

    private async onCommit(position: number): Promise<void> {
        await this.guard(async () => {
            if (!this.sessionId) return;
            await this.client.commit(this.sessionId, position);
            await this.refresh();
        });
    }

    private paint(): void {
        const view = this.view;
        if (!view) return;
        const resolve = (path: string) => this.client.resolve(path);
        this.element("#current").innerHTML = renderCurrentImage(view, resolve);
        this.element("#timeline").innerHTML = renderTimeline(view, resolve);
        this.element("#candidates").innerHTML = view.pending
            ? renderCandidateGrid(view.pending, resolve)
            : "";
        const detailHost = this.element("#detail");
        const entry = view.timeline.find((r) => r.round === this.detailRound);
        detailHost.innerHTML = entry
            ? renderDetailPanel(
                  entry,
                  { showOverlay: this.showOverlay, sliderPercent: this.sliderPercent },
                  resolve,
              )
            : "";
    }
}

window.addEventListener("DOMContentLoaded", () => {
    void new App().start();
});
