"""HTTP session API: a thin adapter over the pipeline module.

Handlers hold no business logic; every behaviour is reachable through
pipeline calls alone. Sessions live in memory, one lock per session keeps
rounds from interleaving, and all raster artifacts are served
content-addressed under /artifacts/<sha256>.png. The edit and commit
endpoints accept client idempotency keys so retries are safe.
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import replace
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .backends import Backends
from .core import (
    BinaryMask,
    ImageBuf,
    LoceditError,
    decode_image,
    render_mask_overlay,
)
from .pipeline import (
    BadCandidateIndex,
    EmptyMaskPolicy,
    KTooLarge,
    NoPendingChoice,
    PendingChoiceExists,
    PipelineConfig,
    PipelineMode,
    PipelineStageError,
    Session,
    commit_choice,
    edit_once,
    generate_diverse,
    new_session,
    session_document,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_UPLOAD_BYTES = 32 * 1024 * 1024

__all__ = ["GatewayState", "create_app", "DEFAULT_MAX_UPLOAD_BYTES"]

_CONFIG_OVERRIDE_KEYS = {
    "mode",
    "n_reflect",
    "dilation_radius",
    "base_seed",
    "score_includes_instruction_for_masks",
    "relocalize_additions",
    "empty_mask_policy",
}


def apply_config_overrides(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    unknown = set(overrides) - _CONFIG_OVERRIDE_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict = {}
    if "mode" in overrides:
        kwargs["mode"] = PipelineMode(overrides["mode"])
    if "n_reflect" in overrides:
        kwargs["n_reflect"] = int(overrides["n_reflect"])
    if "dilation_radius" in overrides:
        kwargs["dilation_radius"] = int(overrides["dilation_radius"])
    if "base_seed" in overrides:
        kwargs["base_seed"] = int(overrides["base_seed"])
    if "score_includes_instruction_for_masks" in overrides:
        kwargs["score_includes_instruction_for_masks"] = bool(
            overrides["score_includes_instruction_for_masks"]
        )
    if "relocalize_additions" in overrides:
        kwargs["relocalize_additions"] = bool(overrides["relocalize_additions"])
    if "empty_mask_policy" in overrides:
        kwargs["empty_mask_policy"] = EmptyMaskPolicy(overrides["empty_mask_policy"])
    return replace(base, **kwargs)


class GatewayState:
    """In-memory sessions, artifacts and idempotency replay cache."""

    def __init__(
        self,
        backends: Backends,
        config: PipelineConfig,
        max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES,
    ):
        self.backends = backends
        self.config = config
        self.max_upload_bytes = max_upload_bytes
        self.sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._artifacts: dict[str, bytes] = {}
        self._overlays: dict[tuple[str, str], str] = {}
        self._replays: dict[str, tuple[int, dict]] = {}
        self._registry_lock = threading.Lock()

    def lock_for(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def register_image(self, image: ImageBuf) -> str:
        sha = image.sha256()
        with self._registry_lock:
            self._artifacts.setdefault(sha, image.to_png())
        return sha

    def register_mask(self, mask: BinaryMask) -> str:
        sha = mask.sha256()
        with self._registry_lock:
            self._artifacts.setdefault(sha, mask.to_png())
        return sha

    def artifact(self, sha: str) -> bytes | None:
        with self._registry_lock:
            return self._artifacts.get(sha)

    def overlay_sha(self, image: ImageBuf, mask: BinaryMask) -> str:
        """Register (once) and address the red-overlay render for a pair."""
        key = (image.sha256(), mask.sha256())
        with self._registry_lock:
            cached = self._overlays.get(key)
        if cached is not None:
            return cached
        sha = self.register_image(render_mask_overlay(image, mask))
        with self._registry_lock:
            self._overlays[key] = sha
        return sha

    def replay_key(self, session_id: str, endpoint: str, key: str) -> str:
        return f"{session_id}\x1f{endpoint}\x1f{key}"

    def stored_reply(self, replay_key: str) -> tuple[int, dict] | None:
        with self._registry_lock:
            return self._replays.get(replay_key)

    def store_reply(self, replay_key: str, status: int, body: dict) -> None:
        with self._registry_lock:
            self._replays[replay_key] = (status, body)


def _error(status: int, message: str, stage: str | None = None) -> JSONResponse:
    body: dict = {"error": message}
    if stage is not None:
        body["stage"] = stage
    return JSONResponse(body, status_code=status)


def _artifact_url(sha: str) -> str:
    return f"/artifacts/{sha}.png"


def _register_record(state: GatewayState, record) -> None:
    state.register_image(record.input_image)
    state.register_image(record.output_image)
    state.register_mask(record.mask_used)
    state.register_mask(record.localization.raw_mask)
    state.register_mask(record.localization.final_mask)
    for candidate in record.modification.image_candidates:
        state.register_image(candidate.payload)


def _record_summary(state: GatewayState, record) -> dict:
    overlay_sha = state.overlay_sha(record.input_image, record.mask_used)
    return {
        "round": record.round_index,
        "instruction": record.instruction.text,
        "mode": record.mode.value,
        "selection_source": record.selection_source,
        "localization_prompt": record.localization.selected_prompt.text,
        "modification_plan": record.modification.selected_plan.text,
        "input_image": {
            "hash": record.input_image_hash,
            "url": _artifact_url(record.input_image_hash),
        },
        "output_image": {
            "hash": record.output_image_hash,
            "url": _artifact_url(record.output_image_hash),
        },
        "mask": {
            "hash": record.mask_used.sha256(),
            "url": _artifact_url(record.mask_used.sha256()),
            "overlay_url": _artifact_url(overlay_sha),
        },
    }


def _pending_payload(state: GatewayState, session: Session) -> dict | None:
    pending = session.pending
    if pending is None:
        return None
    candidates = []
    for position, index in enumerate(pending.surfaced):
        candidate = pending.modification.image_candidates[index]
        sha = state.register_image(candidate.payload)
        candidates.append(
            {
                "position": position,
                "candidate_index": candidate.index,
                "score": candidate.score,
                "seed": candidate.seed,
                "image": {"hash": sha, "url": _artifact_url(sha)},
            }
        )
    return {"instruction": pending.instruction.text, "candidates": candidates}


def _timeline(state: GatewayState, session: Session) -> list[dict]:
    return [_record_summary(state, record) for record in session.records]


def create_app(
    backends: Backends,
    config: PipelineConfig | None = None,
    max_upload_bytes: int = DEFAULT_MAX_UPLOAD_BYTES,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    state = GatewayState(
        backends, config or PipelineConfig(), max_upload_bytes=max_upload_bytes
    )
    app = FastAPI(title="locedit gateway")
    app.state.gateway = state
    # the browser frontend may be served from another origin during development
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/sessions")
    async def create_session(request: Request) -> JSONResponse:
        form = await request.form()
        upload = form.get("image")
        if upload is None or isinstance(upload, str):
            return _error(400, "multipart field 'image' (a PNG file) is required")
        data = await upload.read()
        if len(data) > state.max_upload_bytes:
            return _error(
                413, f"upload exceeds {state.max_upload_bytes} bytes"
            )
        session_config = state.config
        raw_overrides = form.get("config")
        if raw_overrides:
            try:
                overrides = json.loads(raw_overrides)
                if not isinstance(overrides, dict):
                    raise ValueError("config must be a JSON object")
                session_config = apply_config_overrides(state.config, overrides)
            except (ValueError, KeyError) as exc:
                return _error(400, f"bad config overrides: {exc}")
        try:
            image = decode_image(data)
        except LoceditError as exc:
            return _error(400, f"bad image: {exc}")
        session = new_session(image, session_config, state.backends, str(uuid.uuid4()))
        state.sessions[session.session_id] = session
        state.register_image(image)
        return JSONResponse({"session_id": session.session_id}, status_code=201)

    @app.post("/sessions/{session_id}/edit")
    async def edit(session_id: str, request: Request) -> JSONResponse:
        session = state.sessions.get(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id}")
        try:
            body = await request.json()
        except ValueError:
            return _error(400, "request body must be JSON")
        instruction = body.get("instruction")
        if not isinstance(instruction, str) or not instruction.strip():
            return _error(400, "non-empty 'instruction' is required")
        k = body.get("k")
        if k is not None and (not isinstance(k, int) or isinstance(k, bool) or k < 2):
            return _error(400, "'k' must be an integer >= 2")
        idempotency_key = body.get("idempotency_key")
        replay_key = None
        if idempotency_key is not None:
            replay_key = state.replay_key(session_id, "edit", str(idempotency_key))
            stored = state.stored_reply(replay_key)
            if stored is not None:
                return JSONResponse(stored[1], status_code=stored[0])
        with state.lock_for(session_id):
            if session.pending is not None:
                return _error(409, "a pending choice exists; commit it first")
            try:
                if k is None:
                    record = edit_once(session, instruction)
                    _register_record(state, record)
                    payload = {
                        "record": _record_summary(state, record),
                        "rounds": len(session.records),
                    }
                else:
                    generate_diverse(session, instruction, k)
                    payload = {
                        "pending": _pending_payload(state, session),
                        "rounds": len(session.records),
                    }
            except KTooLarge as exc:
                return _error(400, str(exc))
            except PendingChoiceExists as exc:
                return _error(409, str(exc))
            except PipelineStageError as exc:
                return _error(502, str(exc.cause), stage=exc.stage)
            except LoceditError as exc:
                return _error(400, str(exc))
        if replay_key is not None:
            state.store_reply(replay_key, 200, payload)
        return JSONResponse(payload, status_code=200)

    @app.post("/sessions/{session_id}/commit")
    async def commit(session_id: str, request: Request) -> JSONResponse:
        session = state.sessions.get(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id}")
        try:
            body = await request.json()
        except ValueError:
            return _error(400, "request body must be JSON")
        index = body.get("index")
        if not isinstance(index, int) or isinstance(index, bool):
            return _error(400, "'index' must be an integer")
        idempotency_key = body.get("idempotency_key")
        replay_key = None
        if idempotency_key is not None:
            replay_key = state.replay_key(session_id, "commit", str(idempotency_key))
            stored = state.stored_reply(replay_key)
            if stored is not None:
                return JSONResponse(stored[1], status_code=stored[0])
        with state.lock_for(session_id):
            try:
                record = commit_choice(session, index)
            except NoPendingChoice as exc:
                return _error(409, str(exc))
            except BadCandidateIndex as exc:
                return _error(422, str(exc))
            _register_record(state, record)
            payload = {
                "record": _record_summary(state, record),
                "rounds": len(session.records),
            }
        if replay_key is not None:
            state.store_reply(replay_key, 200, payload)
        return JSONResponse(payload, status_code=200)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> JSONResponse:
        session = state.sessions.get(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id}")
        with state.lock_for(session_id):
            current_sha = state.register_image(session.current_image)
            payload = {
                "session": session_document(session),
                "timeline": _timeline(state, session),
                "pending": _pending_payload(state, session),
                "current_image": {
                    "hash": current_sha,
                    "url": _artifact_url(current_sha),
                },
            }
        return JSONResponse(payload)

    @app.get("/artifacts/{sha}.png")
    def get_artifact(sha: str) -> Response:
        data = state.artifact(sha)
        if data is None:
            return _error(404, f"unknown artifact {sha}")
        return Response(content=data, media_type="image/png")

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
