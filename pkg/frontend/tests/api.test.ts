import assert from "node:assert/strict";
import { test } from "node:test";

import { GatewayClient, GatewayError } from "../src/api.js";

interface Seen {
    url: string;
    init?: RequestInit;
}

function fakeFetch(status: number, body: unknown) {
    const seen: Seen[] = [];
    const impl = async (url: string, init?: RequestInit): Promise<Response> => {
        seen.push({ url, init });
        return new Response(JSON.stringify(body), {
            status,
            headers: { "Content-Type": "application/json" },
        });
    };
    return { impl, seen };
}

test("edit posts instruction, k and an idempotency key", async () => {
    const { impl, seen } = fakeFetch(200, { pending: null, rounds: 0 });
    const client = new GatewayClient("http://gw/", impl);
    await client.edit("sid", "do it", 5);
    assert.equal(seen[0].url, "http://gw/sessions/sid/edit");
    const payload = JSON.parse(String(seen[0].init?.body));
    assert.equal(payload.instruction, "do it");
    assert.equal(payload.k, 5);
    assert.ok(payload.idempotency_key.length > 8);
});

test("edit without k omits the field (auto-commit path)", async () => {
    const { impl, seen } = fakeFetch(200, { record: {}, rounds: 1 });
    const client = new GatewayClient("http://gw", impl);
    await client.edit("sid", "do it");
    const payload = JSON.parse(String(seen[0].init?.body));
    assert.ok(!("k" in payload));
});

test("commit posts the surfaced position", async () => {
    const { impl, seen } = fakeFetch(200, { record: {}, rounds: 1 });
    const client = new GatewayClient("http://gw", impl);
    await client.commit("sid", 2);
    assert.equal(seen[0].url, "http://gw/sessions/sid/commit");
    assert.equal(JSON.parse(String(seen[0].init?.body)).index, 2);
});

test("gateway errors carry status and stage", async () => {
    const { impl } = fakeFetch(502, { error: "segmenter died", stage: "localization" });
    const client = new GatewayClient("http://gw", impl);
    await assert.rejects(
        () => client.edit("sid", "x"),
        (error: unknown) => {
            assert.ok(error instanceof GatewayError);
            assert.equal(error.status, 502);
            assert.equal(error.stage, "localization");
            assert.match(error.message, /segmenter died/);
            return true;
        },
    );
});

test("resolve maps artifact paths onto the gateway base", () => {
    const client = new GatewayClient("http://gw:9000/");
    assert.equal(client.resolve("/artifacts/abc.png"), "http://gw:9000/artifacts/abc.png");
    assert.equal(client.resolve("http://cdn/x.png"), "http://cdn/x.png");
});
