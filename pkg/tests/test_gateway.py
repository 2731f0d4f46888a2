from __future__ import annotations

import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from locedit.core import decode_image, encode_image
from locedit.gateway import create_app
from locedit.mocks import mock_backends
from locedit.pipeline import (
    PipelineConfig,
    commit_choice,
    edit_once,
    generate_diverse,
    new_session,
    session_document,
    strip_volatile,
)

from conftest import random_image, scripted_scenario

INSTRUCTION = "remove the red car"


@pytest.fixture
def client(rng):
    scenario = scripted_scenario(n=3, image_scores={0: 1, 1: 5, 2: 3})
    app = create_app(mock_backends(scenario), PipelineConfig(n_reflect=3))
    with TestClient(app) as test_client:
        yield test_client


def upload_png(rng, width=32, height=32) -> bytes:
    return encode_image(random_image(rng, width, height))


def create_session(client, rng, config: dict | None = None) -> str:
    files = {"image": ("input.png", upload_png(rng), "image/png")}
    data = {}
    if config is not None:
        data["config"] = json.dumps(config)
    response = client.post("/sessions", files=files, data=data)
    assert response.status_code == 201, response.text
    return response.json()["session_id"]


class TestCreateSession:
    def test_valid_upload(self, client, rng):
        session_id = create_session(client, rng)
        assert len(session_id) == 36  # uuid

    def test_distinct_ids(self, client, rng):
        assert create_session(client, rng) != create_session(client, rng)

    def test_malformed_image(self, client):
        response = client.post(
            "/sessions", files={"image": ("x.png", b"not a png", "image/png")}
        )
        assert response.status_code == 400

    def test_oversize_upload(self, rng):
        scenario = scripted_scenario(n=1)
        app = create_app(
            mock_backends(scenario), PipelineConfig(n_reflect=1), max_upload_bytes=1000
        )
        with TestClient(app) as client:
            data = upload_png(rng, 64, 64)
            assert len(data) > 1000
            response = client.post(
                "/sessions", files={"image": ("x.png", data, "image/png")}
            )
            assert response.status_code == 413

    def test_config_overrides(self, client, rng):
        session_id = create_session(client, rng, config={"n_reflect": 2})
        doc = client.get(f"/sessions/{session_id}").json()
        assert doc["session"]["config"]["n_reflect"] == 2

    def test_bad_config_overrides(self, client, rng):
        files = {"image": ("input.png", upload_png(rng), "image/png")}
        response = client.post(
            "/sessions", files=files, data={"config": json.dumps({"mode": "warp"})}
        )
        assert response.status_code == 400

    def test_missing_image_field(self, client):
        response = client.post("/sessions", data={"config": "{}"})
        assert response.status_code == 400


class TestEdit:
    def test_auto_commit_increments_round(self, client, rng):
        session_id = create_session(client, rng)
        response = client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION}
        )
        assert response.status_code == 200
        body = response.json()
        assert body["rounds"] == 1
        assert body["record"]["round"] == 0
        assert body["record"]["selection_source"] == "judge"

    def test_unknown_session(self, client):
        response = client.post("/sessions/nope/edit", json={"instruction": "x"})
        assert response.status_code == 404

    def test_diverse_returns_candidates_and_pends(self, client, rng):
        session_id = create_session(client, rng)
        response = client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION, "k": 3}
        )
        assert response.status_code == 200
        body = response.json()
        assert body["rounds"] == 0  # not committed
        candidates = body["pending"]["candidates"]
        assert len(candidates) == 3
        assert [c["candidate_index"] for c in candidates] == [1, 2, 0]
        assert all("score" in c and "image" in c for c in candidates)
        # second edit while pending
        again = client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION}
        )
        assert again.status_code == 409

    def test_backend_failure_names_stage(self, rng):
        scenario = scripted_scenario(n=1)

        class DeadSegmenter:
            backend_id = "dead"

            def segment(self, image, prompt, variant_seed):
                from locedit.backends import BackendUnavailable

                raise BackendUnavailable("segment server is down")

        backends = mock_backends(scenario)
        backends.segmenter = DeadSegmenter()
        app = create_app(backends, PipelineConfig(n_reflect=1))
        with TestClient(app) as client:
            session_id = create_session(client, rng)
            response = client.post(
                f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION}
            )
            assert response.status_code == 502
            body = response.json()
            assert body["stage"] == "localization"
            assert "down" in body["error"]

    def test_idempotency_key_replays(self, client, rng):
        session_id = create_session(client, rng)
        payload = {"instruction": INSTRUCTION, "idempotency_key": "abc"}
        first = client.post(f"/sessions/{session_id}/edit", json=payload)
        second = client.post(f"/sessions/{session_id}/edit", json=payload)
        assert first.status_code == second.status_code == 200
        assert first.json() == second.json()
        # the replay did not run a second round
        doc = client.get(f"/sessions/{session_id}").json()
        assert len(doc["session"]["records"]) == 1


class TestCommit:
    def test_commit_flow(self, client, rng):
        session_id = create_session(client, rng)
        edit = client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION, "k": 3}
        ).json()
        candidates = edit["pending"]["candidates"]
        chosen = candidates[2]
        response = client.post(f"/sessions/{session_id}/commit", json={"index": 2})
        assert response.status_code == 200
        record = response.json()["record"]
        assert record["selection_source"] == "human"
        assert record["output_image"]["hash"] == chosen["image"]["hash"]
        doc = client.get(f"/sessions/{session_id}").json()
        assert doc["current_image"]["hash"] == chosen["image"]["hash"]
        assert doc["pending"] is None

    def test_commit_without_pending(self, client, rng):
        session_id = create_session(client, rng)
        response = client.post(f"/sessions/{session_id}/commit", json={"index": 0})
        assert response.status_code == 409

    def test_commit_bad_index(self, client, rng):
        session_id = create_session(client, rng)
        client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION, "k": 3}
        )
        response = client.post(f"/sessions/{session_id}/commit", json={"index": 9})
        assert response.status_code == 422

    def test_commit_unknown_session(self, client):
        assert (
            client.post("/sessions/nope/commit", json={"index": 0}).status_code == 404
        )

    def test_commit_idempotency_key_replays(self, client, rng):
        session_id = create_session(client, rng)
        client.post(
            f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION, "k": 2}
        )
        payload = {"index": 0, "idempotency_key": "commit-1"}
        first = client.post(f"/sessions/{session_id}/commit", json=payload)
        second = client.post(f"/sessions/{session_id}/commit", json=payload)
        assert first.status_code == second.status_code == 200
        assert first.json() == second.json()
        doc = client.get(f"/sessions/{session_id}").json()
        assert len(doc["session"]["records"]) == 1


class TestArtifacts:
    def test_timeline_and_artifact_hashes(self, client, rng):
        session_id = create_session(client, rng)
        for _ in range(3):
            client.post(
                f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION}
            )
        doc = client.get(f"/sessions/{session_id}").json()
        assert len(doc["timeline"]) == 3
        for entry in doc["timeline"]:
            assert entry["localization_prompt"]
            assert entry["modification_plan"]
            for key in ("input_image", "output_image"):
                url = entry[key]["url"]
                png = client.get(url)
                assert png.status_code == 200
                import hashlib

                assert hashlib.sha256(png.content).hexdigest() == entry[key]["hash"]
            overlay = client.get(entry["mask"]["overlay_url"])
            assert overlay.status_code == 200
            decode_image(overlay.content)  # a valid PNG image

    def test_unknown_artifact(self, client):
        assert client.get("/artifacts/" + "0" * 64 + ".png").status_code == 404

    def test_unknown_session(self, client):
        assert client.get("/sessions/nope").status_code == 404

    def test_healthz(self, client):
        assert client.get("/healthz").json() == {"status": "ok"}


class TestThinAdapter:
    def test_http_and_direct_paths_agree(self, rng):
        """The same scenario driven over HTTP and via pipeline calls must
        produce identical session documents (volatile fields aside)."""
        image = random_image(rng, 32, 32)
        scenario = scripted_scenario(n=3, image_scores={0: 1, 1: 5, 2: 3})

        # direct pipeline path
        config = PipelineConfig(n_reflect=3)
        session = new_session(image, config, mock_backends(scenario), "fixed-id")
        edit_once(session, INSTRUCTION)
        generate_diverse(session, INSTRUCTION, k=2)
        commit_choice(session, 1)
        direct_doc = strip_volatile(session_document(session))

        # HTTP path
        app = create_app(mock_backends(scenario), config)
        with TestClient(app) as client:
            files = {"image": ("input.png", encode_image(image), "image/png")}
            session_id = client.post("/sessions", files=files).json()["session_id"]
            client.post(f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION})
            client.post(
                f"/sessions/{session_id}/edit", json={"instruction": INSTRUCTION, "k": 2}
            )
            client.post(f"/sessions/{session_id}/commit", json={"index": 1})
            http_doc = strip_volatile(
                client.get(f"/sessions/{session_id}").json()["session"]
            )
        http_doc["session_id"] = direct_doc["session_id"]
        assert http_doc == direct_doc
