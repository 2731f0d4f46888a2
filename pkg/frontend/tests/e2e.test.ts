// End-to-end acceptance flow against a real gateway process running the
// deterministic demo mocks: create a session, edit with k=5, inspect the
// candidate grid, commit card 2, verify the hash chain and that a reload
// reconstructs the identical timeline.

import assert from "node:assert/strict";
import { spawn, type ChildProcess } from "node:child_process";
import { createHash } from "node:crypto";
import { readFile } from "node:fs/promises";
import { createServer } from "node:net";
import { dirname, join } from "node:path";
import { after, before, test } from "node:test";
import { fileURLToPath } from "node:url";

import { GatewayClient } from "../src/api.js";
import { renderCandidateGrid, renderTimeline } from "../src/render.js";
import { sessionViewFrom } from "../src/state.js";

const here = dirname(fileURLToPath(import.meta.url)); // frontend/dist/tests
const frontendRoot = join(here, "..", "..");

async function freePort(): Promise<number> {
    return new Promise((resolve, reject) => {
        const probe = createServer();
        probe.once("error", reject);
        probe.listen(0, "127.0.0.1", () => {
            const address = probe.address();
            if (address === null || typeof address === "string") {
                reject(new Error("no port"));
                return;
            }
            const port = address.port;
            probe.close(() => resolve(port));
        });
    });
}

let gateway: ChildProcess | null = null;
let client: GatewayClient;

before(async () => {
    const port = await freePort();
    gateway = spawn(
        "python3",
        ["-m", "locedit.cli", "serve", "--demo", "--port", String(port), "--n", "5"],
        { stdio: ["ignore", "inherit", "inherit"] },
    );
    client = new GatewayClient(`http://127.0.0.1:${port}`);
    const deadline = Date.now() + 20000;
    while (Date.now() < deadline) {
        if (await client.health()) return;
        await new Promise((resolve) => setTimeout(resolve, 200));
    }
    throw new Error("gateway did not become healthy in 20s");
});

after(() => {
    gateway?.kill();
});

test("ui flow: edit with k=5, commit card 2, reload reconstructs", async () => {
    const png = await readFile(join(frontendRoot, "tests", "fixtures", "upload.png"));
    const sessionId = await client.createSession(
        new Blob([png], { type: "image/png" }),
    );
    assert.ok(sessionId.length > 0);

    // k=5 surfaces exactly five scored candidate cards and commits nothing
    const editResponse = await client.edit(sessionId, "replace the red block with a plant", 5);
    assert.equal(editResponse.rounds, 0);
    const pending = editResponse.pending;
    assert.ok(pending, "expected a pending candidate set");
    assert.equal(pending.candidates.length, 5);
    for (const candidate of pending.candidates) {
        assert.equal(typeof candidate.score, "number");
        assert.ok(candidate.image.hash.length === 64);
    }
    const gridHtml = renderCandidateGrid(pending, (p) => client.resolve(p));
    assert.equal((gridHtml.match(/candidate-card/g) ?? []).length, 5);
    assert.equal((gridHtml.match(/score-badge/g) ?? []).length, 5);

    // committing card 2 advances the timeline to that candidate
    const card2 = pending.candidates[2];
    const commitResponse = await client.commit(sessionId, 2);
    assert.equal(commitResponse.rounds, 1);
    const sessionAfter = await client.getSession(sessionId);
    assert.equal(sessionAfter.timeline.length, 1);
    assert.equal(sessionAfter.pending, null);
    assert.equal(sessionAfter.current_image.hash, card2.image.hash);
    assert.equal(
        sessionAfter.timeline[0].output_image.hash,
        card2.image.hash,
    );

    // the served artifact bytes hash to the advertised content address
    const artifact = await fetch(client.resolve(sessionAfter.current_image.url));
    assert.equal(artifact.status, 200);
    const digest = createHash("sha256")
        .update(Buffer.from(await artifact.arrayBuffer()))
        .digest("hex");
    assert.equal(digest, card2.image.hash);

    // a second, auto-committed round still reconstructs cleanly
    const secondEdit = await client.edit(sessionId, "brighten the scene");
    assert.equal(secondEdit.rounds, 2);

    // "page reload": rebuild the view from scratch twice and compare markup
    const reloadA = sessionViewFrom(sessionId, await client.getSession(sessionId));
    const reloadB = sessionViewFrom(sessionId, await client.getSession(sessionId));
    const htmlA = renderTimeline(reloadA, (p) => client.resolve(p));
    const htmlB = renderTimeline(reloadB, (p) => client.resolve(p));
    assert.equal(htmlA, htmlB);
    assert.equal((htmlA.match(/timeline-entry/g) ?? []).length, 2);
    assert.ok(htmlA.includes("replace the red block with a plant"));
});

test("gateway failure surfaces a 4xx the ui can toast", async () => {
    const png = await readFile(join(frontendRoot, "tests", "fixtures", "upload.png"));
    const sessionId = await client.createSession(
        new Blob([png], { type: "image/png" }),
    );
    // k beyond the configured reflective sample count is a client error
    await assert.rejects(
        () => client.edit(sessionId, "anything", 9),
        (error: Error & { status?: number }) => {
            assert.equal(error.name, "GatewayError");
            assert.equal(error.status, 400);
            return true;
        },
    );
    // the failed edit left no pending state behind
    const session = await client.getSession(sessionId);
    assert.equal(session.pending, null);
    assert.equal(session.timeline.length, 0);
});
