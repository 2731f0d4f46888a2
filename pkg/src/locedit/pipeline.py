"""End-to-end orchestration: modes, rounds, sessions, persistence.

A session is a linear chain of edit rounds over one image. Each round runs
the localization stage then the modification stage under the configured
mode (the ablation wirings live here), records full provenance including
per-stage wall time and backend call counts, and threads its output into
the next round. Sessions persist as a schema-versioned JSON document plus
content-addressed PNG artifacts, so any tampering is detectable on load.
"""

from __future__ import annotations

import json
import os
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .backends import (
    BackendEndpoint,
    BackendError,
    Backends,
    InpainterBackend,
    ReasonerBackend,
    SegmenterBackend,
    backend_name,
)
from .core import (
    BinaryMask,
    Candidate,
    CandidateSet,
    ImageBuf,
    Instruction,
    LoceditError,
    Prompt,
    PromptKind,
    PromptTemplates,
    decode_image,
    decode_mask,
    ensure_same_dims,
    full_mask,
    sha256_hex,
)
from .lcp import LocalizationResult, dilate, run_lcp
from .mcp import ModificationResult, relocalize_after_addition, run_mcp

SESSION_SCHEMA_VERSION = 1

__all__ = [
    "EditRecord",
    "EmptyMaskError",
    "EmptyMaskPolicy",
    "KTooLarge",
    "MissingGtMask",
    "PipelineConfig",
    "PipelineMode",
    "PipelineStageError",
    "Session",
    "SessionAborted",
    "SessionIntegrityError",
    "SchemaVersionMismatch",
    "commit_choice",
    "edit_once",
    "generate_diverse",
    "load_session",
    "new_session",
    "run_session",
    "save_session",
    "session_document",
    "strip_volatile",
]


class PipelineMode(str, Enum):
    """Pipeline wirings, including the ablation configurations."""

    FULL = "full"
    NO_REFLECT = "noreflect"
    NO_LCP = "nolcp"
    NO_MCP = "nomcp"
    NO_REASONING = "noreasoning"
    NO_REASONING_GT_MASK = "gtmask"


class EmptyMaskPolicy(str, Enum):
    ERROR = "error"
    FULL_MASK_FALLBACK = "full_mask_fallback"


class EmptyMaskError(LoceditError):
    """Localization selected an empty mask and policy says fail loudly."""


class MissingGtMask(LoceditError):
    """gtmask mode requires a caller-supplied mask."""


class KTooLarge(LoceditError):
    """Requested more diverse candidates than were generated."""


class PendingChoiceExists(LoceditError):
    """The session is waiting for a human choice; commit or discard first."""


class NoPendingChoice(LoceditError):
    """There is no pending choice to commit."""


class BadCandidateIndex(LoceditError):
    """Commit index outside the surfaced candidate list."""


class SchemaVersionMismatch(LoceditError):
    """Persisted session uses an unknown schema version."""


class SessionIntegrityError(LoceditError):
    """Persisted session artifacts or hash chain fail verification."""


class SessionAborted(LoceditError):
    """A round failed; the session's partial state is preserved on .session."""

    def __init__(self, session: "Session", round_index: int, cause: Exception):
        super().__init__(f"round {round_index} failed: {cause}")
        self.session = session
        self.round_index = round_index
        self.cause = cause


class PipelineStageError(LoceditError):
    """A backend failure, tagged with the pipeline stage that hit it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"backend failure in {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    mode: PipelineMode = PipelineMode.FULL
    n_reflect: int = 5
    dilation_radius: int = 20
    base_seed: int = 0
    score_includes_instruction_for_masks: bool = False
    relocalize_additions: bool = False
    empty_mask_policy: EmptyMaskPolicy = EmptyMaskPolicy.ERROR
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    reasoner_endpoint: BackendEndpoint | None = None
    segmenter_endpoint: BackendEndpoint | None = None
    inpainter_endpoint: BackendEndpoint | None = None
    metric_endpoint: BackendEndpoint | None = None

    def __post_init__(self) -> None:
        if self.n_reflect < 1:
            raise ValueError("n_reflect must be >= 1")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")

    @property
    def effective_n(self) -> int:
        """Reflective sample count after mode adjustment: the no-reflection
        ablation is exactly N forced to 1."""
        return 1 if self.mode is PipelineMode.NO_REFLECT else self.n_reflect


@dataclass(frozen=True)
class TimingBreakdown:
    """Per-round wall-clock decomposition, all in milliseconds."""

    lcp_ms: float
    mcp_ms: float
    backend_ms: float
    overhead_ms: float
    total_ms: float

    def __post_init__(self) -> None:
        for name in ("lcp_ms", "mcp_ms", "backend_ms", "overhead_ms", "total_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class CallMeter:
    """Counts backend calls and accumulates their wall time, so the
    orchestration overhead (total minus backend time) is separable."""

    GENERATE = "reasoner_generate"
    SCORE = "reasoner_score"
    JUDGE = "reasoner_judge"
    SEGMENT = "segment"
    INPAINT = "inpaint"

    def __init__(self) -> None:
        self.counts: dict[str, int] = {}
        self.seconds: float = 0.0

    def record(self, op: str, elapsed: float) -> None:
        self.counts[op] = self.counts.get(op, 0) + 1
        self.seconds += elapsed

    def reasoner_calls(self) -> int:
        return sum(
            self.counts.get(op, 0) for op in (self.GENERATE, self.SCORE, self.JUDGE)
        )


class _TimedReasoner(ReasonerBackend):
    def __init__(self, inner: ReasonerBackend, meter: CallMeter):
        self._inner = inner
        self._meter = meter

    @property
    def backend_id(self) -> str:
        return backend_name(self._inner)

    def _timed(self, op: str, fn, *args):
        t0 = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self._meter.record(op, time.perf_counter() - t0)

    def propose_localization(self, image, instruction, n, seed):
        return self._timed(
            CallMeter.GENERATE, self._inner.propose_localization, image, instruction, n, seed
        )

    def propose_modification(self, image, instruction, mask, n, seed):
        return self._timed(
            CallMeter.GENERATE,
            self._inner.propose_modification,
            image,
            instruction,
            mask,
            n,
            seed,
        )

    def score_candidates(self, stage, context, candidates):
        return self._timed(
            CallMeter.SCORE, self._inner.score_candidates, stage, context, candidates
        )

    def judge_success(self, original, edited, instruction):
        return self._timed(
            CallMeter.JUDGE, self._inner.judge_success, original, edited, instruction
        )


class _TimedSegmenter(SegmenterBackend):
    def __init__(self, inner: SegmenterBackend, meter: CallMeter):
        self._inner = inner
        self._meter = meter

    @property
    def backend_id(self) -> str:
        return backend_name(self._inner)

    def segment(self, image, prompt, variant_seed):
        t0 = time.perf_counter()
        try:
            return self._inner.segment(image, prompt, variant_seed)
        finally:
            self._meter.record(CallMeter.SEGMENT, time.perf_counter() - t0)


class _TimedInpainter(InpainterBackend):
    def __init__(self, inner: InpainterBackend, meter: CallMeter):
        self._inner = inner
        self._meter = meter

    @property
    def backend_id(self) -> str:
        return backend_name(self._inner)

    def inpaint(self, image, mask, prompt, seed):
        t0 = time.perf_counter()
        try:
            return self._inner.inpaint(image, mask, prompt, seed)
        finally:
            self._meter.record(CallMeter.INPAINT, time.perf_counter() - t0)


@dataclass(eq=True)
class EditRecord:
    """Full provenance of one committed round."""

    round_index: int
    instruction: Instruction
    mode: PipelineMode
    input_image: ImageBuf
    output_image: ImageBuf
    localization: LocalizationResult
    modification: ModificationResult
    mask_used: BinaryMask
    selection_source: str  # "judge" | "human"
    judge_verdict: tuple[bool, str] | None
    relocalized_mask: BinaryMask | None
    timings: TimingBreakdown
    call_counts: dict[str, int]

    @property
    def input_image_hash(self) -> str:
        return self.input_image.sha256()

    @property
    def output_image_hash(self) -> str:
        return self.output_image.sha256()


@dataclass
class PendingChoice:
    """A diverse generation awaiting a human pick."""

    instruction: Instruction
    localization: LocalizationResult
    modification: ModificationResult
    mask_used: BinaryMask
    surfaced: list[int]  # candidate indices, best first
    timings: TimingBreakdown
    call_counts: dict[str, int]


class Session:
    """One linear editing history plus the live backends driving it.

    The backend bundle is runtime wiring and is never serialized; loading a
    persisted session requires passing backends again.
    """

    def __init__(
        self,
        session_id: str,
        config: PipelineConfig,
        backends: Backends,
        initial_image: ImageBuf,
    ):
        self.session_id = session_id
        self.config = config
        self.backends = backends
        self.initial_image = initial_image
        self.current_image = initial_image
        self.records: list[EditRecord] = []
        self.pending: PendingChoice | None = None


def new_session(
    image: ImageBuf,
    config: PipelineConfig,
    backends: Backends,
    session_id: str | None = None,
) -> Session:
    return Session(session_id or str(uuid.uuid4()), config, backends, image)


def _as_instruction(instruction: str | Instruction) -> Instruction:
    if isinstance(instruction, Instruction):
        return instruction
    return Instruction(str(instruction))


def _synthetic_localization(
    prompt_text: str,
    mask: BinaryMask,
    radius: int,
    backend: str,
    seed: int,
    raw_mask: BinaryMask | None = None,
) -> LocalizationResult:
    prompt = Prompt(PromptKind.LOCALIZATION, prompt_text)
    raw = raw_mask if raw_mask is not None else mask
    return LocalizationResult(
        selected_prompt=prompt,
        prompt_candidates=CandidateSet.build([prompt], [seed], backend),
        mask_candidates=CandidateSet.build([raw], [seed], backend),
        raw_mask=raw,
        final_mask=mask,
        dilation_radius=radius,
        empty_mask=raw.popcount == 0,
    )


def _synthetic_modification(
    plan: Prompt, image: ImageBuf, seed: int, backend: str
) -> ModificationResult:
    image_set: CandidateSet[ImageBuf] = CandidateSet.build([image], [seed], backend)
    return ModificationResult(
        selected_plan=plan,
        plan_candidates=CandidateSet.build([plan], [seed], "direct"),
        image_candidates=image_set,
        selected_image=image_set[0].payload,
        selected_index=0,
        seeds_used=[seed],
    )


def _run_localization_phase(
    session: Session,
    instruction: Instruction,
    reasoner: ReasonerBackend,
    segmenter: SegmenterBackend,
    gt_mask: BinaryMask | None,
) -> LocalizationResult:
    config = session.config
    mode = config.mode
    image = session.current_image
    if mode in (PipelineMode.FULL, PipelineMode.NO_REFLECT, PipelineMode.NO_MCP):
        return run_lcp(
            image,
            instruction,
            reasoner,
            segmenter,
            n_reflect=config.effective_n,
            dilation_radius=config.dilation_radius,
            base_seed=config.base_seed,
            score_includes_instruction_for_masks=config.score_includes_instruction_for_masks,
        )
    if mode is PipelineMode.NO_LCP:
        # ablation: a mask that covers the entire image
        return _synthetic_localization(
            "the entire image",
            full_mask(image.width, image.height),
            config.dilation_radius,
            "full-mask",
            config.base_seed,
        )
    if mode is PipelineMode.NO_REASONING:
        # the raw instruction goes straight into the segmenter
        prompt = Prompt(PromptKind.LOCALIZATION, instruction.text)
        raw = segmenter.segment(image, prompt, 0)
        final = dilate(raw, config.dilation_radius)
        return _synthetic_localization(
            instruction.text,
            final,
            config.dilation_radius,
            backend_name(segmenter),
            config.base_seed,
            raw_mask=raw,
        )
    assert mode is PipelineMode.NO_REASONING_GT_MASK
    if gt_mask is None:
        raise MissingGtMask("gtmask mode requires a caller-supplied mask")
    ensure_same_dims(image, gt_mask)
    return _synthetic_localization(
        "caller-supplied ground-truth region", gt_mask, 0, "gt-mask", config.base_seed
    )


def _apply_empty_mask_policy(
    session: Session, localization: LocalizationResult
) -> BinaryMask:
    mask = localization.final_mask
    if mask.popcount > 0:
        return mask
    if session.config.empty_mask_policy is EmptyMaskPolicy.FULL_MASK_FALLBACK:
        image = session.current_image
        return full_mask(image.width, image.height)
    raise EmptyMaskError(
        f"selected mask is empty for prompt {localization.selected_prompt.text!r}"
    )


def _run_modification_phase(
    session: Session,
    instruction: Instruction,
    mask: BinaryMask,
    reasoner: ReasonerBackend,
    inpainter: InpainterBackend,
) -> ModificationResult:
    config = session.config
    mode = config.mode
    image = session.current_image
    if mode in (PipelineMode.FULL, PipelineMode.NO_REFLECT, PipelineMode.NO_LCP):
        return run_mcp(
            image,
            instruction,
            mask,
            reasoner,
            inpainter,
            n_reflect=config.effective_n,
            base_seed=config.base_seed,
        )
    # nomcp / noreasoning / gtmask: inpaint directly with the raw instruction
    plan = Prompt(PromptKind.MODIFICATION, instruction.text)
    edited = inpainter.inpaint(image, mask, plan, config.base_seed)
    return _synthetic_modification(plan, edited, config.base_seed, backend_name(inpainter))


def _validate_gt_mask_arg(mode: PipelineMode, gt_mask: BinaryMask | None) -> None:
    if mode is PipelineMode.NO_REASONING_GT_MASK:
        if gt_mask is None:
            raise MissingGtMask("gtmask mode requires a caller-supplied mask")
    elif gt_mask is not None:
        raise ValueError(f"gt_mask is only accepted in gtmask mode, not {mode.value}")


def edit_once(
    session: Session,
    instruction: str | Instruction,
    gt_mask: BinaryMask | None = None,
) -> EditRecord:
    """Run one round under the session's mode and commit it."""
    if session.pending is not None:
        raise PendingChoiceExists("commit or discard the pending choice first")
    instr = _as_instruction(instruction)
    config = session.config
    _validate_gt_mask_arg(config.mode, gt_mask)

    meter = CallMeter()
    reasoner = _TimedReasoner(session.backends.reasoner, meter)
    segmenter = _TimedSegmenter(session.backends.segmenter, meter)
    inpainter = _TimedInpainter(session.backends.inpainter, meter)

    t0 = time.perf_counter()
    try:
        localization = _run_localization_phase(
            session, instr, reasoner, segmenter, gt_mask
        )
        mask_used = _apply_empty_mask_policy(session, localization)
    except BackendError as exc:
        raise PipelineStageError("localization", exc) from exc
    t_lcp = time.perf_counter()
    try:
        modification = _run_modification_phase(
            session, instr, mask_used, reasoner, inpainter
        )
        relocalized = None
        if config.relocalize_additions:
            relocalized = relocalize_after_addition(
                session.current_image,
                modification.selected_image,
                instr,
                mask_used,
                reasoner,
                segmenter,
                enabled=True,
                n_reflect=config.effective_n,
                dilation_radius=config.dilation_radius,
                base_seed=config.base_seed,
            )
    except BackendError as exc:
        raise PipelineStageError("modification", exc) from exc
    t_end = time.perf_counter()

    total_ms = (t_end - t0) * 1000.0
    backend_ms = meter.seconds * 1000.0
    record = EditRecord(
        round_index=len(session.records),
        instruction=instr,
        mode=config.mode,
        input_image=session.current_image,
        output_image=modification.selected_image,
        localization=localization,
        modification=modification,
        mask_used=mask_used,
        selection_source="judge",
        judge_verdict=None,
        relocalized_mask=relocalized,
        timings=TimingBreakdown(
            lcp_ms=(t_lcp - t0) * 1000.0,
            mcp_ms=(t_end - t_lcp) * 1000.0,
            backend_ms=backend_ms,
            overhead_ms=max(total_ms - backend_ms, 0.0),
            total_ms=total_ms,
        ),
        call_counts=dict(meter.counts),
    )
    session.records.append(record)
    session.current_image = record.output_image
    return record


def run_session(
    initial_image: ImageBuf,
    instructions: list[str | Instruction],
    config: PipelineConfig,
    backends: Backends,
    session_id: str | None = None,
) -> Session:
    """Apply instructions sequentially, threading each output into the next
    input. The first failing round aborts with partial state preserved on
    the raised SessionAborted."""
    if not instructions:
        raise ValueError("at least one instruction required")
    session = new_session(initial_image, config, backends, session_id)
    for i, instruction in enumerate(instructions):
        try:
            edit_once(session, instruction)
        except Exception as exc:
            raise SessionAborted(session, i, exc) from exc
    return session


def generate_diverse(
    session: Session, instruction: str | Instruction, k: int
) -> list[Candidate[ImageBuf]]:
    """Run a full round but surface the top-k edited-image candidates
    (score desc, index asc) instead of auto-committing the argmax. The
    session advances only when commit_choice picks one."""
    if session.pending is not None:
        raise PendingChoiceExists("commit or discard the pending choice first")
    config = session.config
    if config.mode is not PipelineMode.FULL:
        raise ValueError("diverse generation requires full mode")
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > config.n_reflect:
        raise KTooLarge(f"k={k} exceeds n_reflect={config.n_reflect}")
    instr = _as_instruction(instruction)

    meter = CallMeter()
    reasoner = _TimedReasoner(session.backends.reasoner, meter)
    segmenter = _TimedSegmenter(session.backends.segmenter, meter)
    inpainter = _TimedInpainter(session.backends.inpainter, meter)

    t0 = time.perf_counter()
    try:
        localization = _run_localization_phase(session, instr, reasoner, segmenter, None)
        mask_used = _apply_empty_mask_policy(session, localization)
    except BackendError as exc:
        raise PipelineStageError("localization", exc) from exc
    t_lcp = time.perf_counter()
    try:
        modification = _run_modification_phase(
            session, instr, mask_used, reasoner, inpainter
        )
    except BackendError as exc:
        raise PipelineStageError("modification", exc) from exc
    t_end = time.perf_counter()

    scores = modification.image_candidates.scores
    ranked = sorted(
        range(len(scores)), key=lambda i: (-(scores[i] or 0.0), i)
    )
    surfaced = ranked[:k]
    total_ms = (t_end - t0) * 1000.0
    backend_ms = meter.seconds * 1000.0
    session.pending = PendingChoice(
        instruction=instr,
        localization=localization,
        modification=modification,
        mask_used=mask_used,
        surfaced=surfaced,
        timings=TimingBreakdown(
            lcp_ms=(t_lcp - t0) * 1000.0,
            mcp_ms=(t_end - t_lcp) * 1000.0,
            backend_ms=backend_ms,
            overhead_ms=max(total_ms - backend_ms, 0.0),
            total_ms=total_ms,
        ),
        call_counts=dict(meter.counts),
    )
    return [modification.image_candidates[i] for i in surfaced]


def commit_choice(session: Session, position: int) -> EditRecord:
    """Commit the candidate at the given position in the surfaced list."""
    pending = session.pending
    if pending is None:
        raise NoPendingChoice("no diverse generation is awaiting a choice")
    if not 0 <= position < len(pending.surfaced):
        raise BadCandidateIndex(
            f"position {position} outside surfaced candidates "
            f"(0..{len(pending.surfaced) - 1})"
        )
    chosen_index = pending.surfaced[position]
    chosen = pending.modification.image_candidates[chosen_index]
    modification = ModificationResult(
        selected_plan=pending.modification.selected_plan,
        plan_candidates=pending.modification.plan_candidates,
        image_candidates=pending.modification.image_candidates,
        selected_image=chosen.payload,
        selected_index=chosen_index,
        seeds_used=pending.modification.seeds_used,
    )
    record = EditRecord(
        round_index=len(session.records),
        instruction=pending.instruction,
        mode=session.config.mode,
        input_image=session.current_image,
        output_image=chosen.payload,
        localization=pending.localization,
        modification=modification,
        mask_used=pending.mask_used,
        selection_source="human",
        judge_verdict=None,
        relocalized_mask=None,
        timings=pending.timings,
        call_counts=pending.call_counts,
    )
    session.records.append(record)
    session.current_image = record.output_image
    session.pending = None
    return record


def discard_pending(session: Session) -> None:
    session.pending = None


# --- persistence --------------------------------------------------------------


def _endpoint_document(endpoint: BackendEndpoint | None) -> dict | None:
    if endpoint is None:
        return None
    # auth tokens are deployment secrets, never persisted
    return {
        "base_url": endpoint.base_url,
        "timeout_s": endpoint.timeout_s,
        "retries": endpoint.retries,
    }


def _endpoint_from_document(doc: dict | None) -> BackendEndpoint | None:
    if doc is None:
        return None
    return BackendEndpoint(
        base_url=doc["base_url"],
        timeout_s=float(doc.get("timeout_s", 120.0)),
        retries=int(doc.get("retries", 2)),
    )


def config_document(config: PipelineConfig) -> dict:
    return {
        "mode": config.mode.value,
        "n_reflect": config.n_reflect,
        "dilation_radius": config.dilation_radius,
        "base_seed": config.base_seed,
        "score_includes_instruction_for_masks": config.score_includes_instruction_for_masks,
        "relocalize_additions": config.relocalize_additions,
        "empty_mask_policy": config.empty_mask_policy.value,
        "templates": config.templates.to_mapping(),
        "endpoints": {
            "reasoner": _endpoint_document(config.reasoner_endpoint),
            "segmenter": _endpoint_document(config.segmenter_endpoint),
            "inpainter": _endpoint_document(config.inpainter_endpoint),
            "metric": _endpoint_document(config.metric_endpoint),
        },
    }


def config_from_document(doc: dict) -> PipelineConfig:
    endpoints = doc.get("endpoints", {})
    return PipelineConfig(
        mode=PipelineMode(doc.get("mode", "full")),
        n_reflect=int(doc.get("n_reflect", 5)),
        dilation_radius=int(doc.get("dilation_radius", 20)),
        base_seed=int(doc.get("base_seed", 0)),
        score_includes_instruction_for_masks=bool(
            doc.get("score_includes_instruction_for_masks", False)
        ),
        relocalize_additions=bool(doc.get("relocalize_additions", False)),
        empty_mask_policy=EmptyMaskPolicy(doc.get("empty_mask_policy", "error")),
        templates=PromptTemplates.from_mapping(doc.get("templates", {})),
        reasoner_endpoint=_endpoint_from_document(endpoints.get("reasoner")),
        segmenter_endpoint=_endpoint_from_document(endpoints.get("segmenter")),
        inpainter_endpoint=_endpoint_from_document(endpoints.get("inpainter")),
        metric_endpoint=_endpoint_from_document(endpoints.get("metric")),
    )


def _prompt_document(prompt: Prompt) -> dict:
    return {"kind": prompt.kind.value, "text": prompt.text}


def _prompt_from_document(doc: dict) -> Prompt:
    return Prompt(PromptKind(doc["kind"]), doc["text"])


def _candidate_documents(
    candidates: CandidateSet, payload_key: str, payload_fn
) -> list[dict]:
    return [
        {
            "index": c.index,
            payload_key: payload_fn(c.payload),
            "score": c.score,
            "seed": c.seed,
            "backend": c.backend,
        }
        for c in candidates
    ]


def _record_document(record: EditRecord) -> dict:
    loc = record.localization
    mod = record.modification
    judge = record.judge_verdict
    return {
        "round": record.round_index,
        "instruction": record.instruction.text,
        "mode": record.mode.value,
        "selection_source": record.selection_source,
        "judge": None
        if judge is None
        else {"verdict": judge[0], "rationale": judge[1]},
        "input_image": record.input_image_hash,
        "output_image": record.output_image_hash,
        "mask_used": record.mask_used.sha256(),
        "relocalized_mask": None
        if record.relocalized_mask is None
        else record.relocalized_mask.sha256(),
        "timings_ms": {
            "lcp": record.timings.lcp_ms,
            "mcp": record.timings.mcp_ms,
            "backend": record.timings.backend_ms,
            "overhead": record.timings.overhead_ms,
            "total": record.timings.total_ms,
        },
        "call_counts": dict(sorted(record.call_counts.items())),
        "localization": {
            "selected_prompt": _prompt_document(loc.selected_prompt),
            "prompt_candidates": _candidate_documents(
                loc.prompt_candidates, "text", lambda p: p.text
            ),
            "mask_candidates": _candidate_documents(
                loc.mask_candidates, "mask", lambda m: m.sha256()
            ),
            "raw_mask": loc.raw_mask.sha256(),
            "final_mask": loc.final_mask.sha256(),
            "dilation_radius": loc.dilation_radius,
            "empty_mask": loc.empty_mask,
        },
        "modification": {
            "selected_plan": _prompt_document(mod.selected_plan),
            "plan_candidates": _candidate_documents(
                mod.plan_candidates, "text", lambda p: p.text
            ),
            "image_candidates": _candidate_documents(
                mod.image_candidates, "image", lambda i: i.sha256()
            ),
            "selected_index": mod.selected_index,
            "seeds_used": list(mod.seeds_used),
        },
    }


def session_document(session: Session) -> dict:
    return {
        "schema_version": SESSION_SCHEMA_VERSION,
        "session_id": session.session_id,
        "config": config_document(session.config),
        "initial_image": session.initial_image.sha256(),
        "current_image": session.current_image.sha256(),
        "records": [_record_document(r) for r in session.records],
    }


def strip_volatile(doc: dict) -> dict:
    """Copy of a session or report document with wall-clock timings removed,
    for run-to-run byte comparisons."""
    out = json.loads(json.dumps(doc))
    for record in out.get("records", []):
        record.pop("timings_ms", None)
    out.pop("timings", None)
    return out


def _iter_session_artifacts(session: Session):
    yield session.initial_image
    for record in session.records:
        yield record.input_image
        yield record.output_image
        yield record.mask_used
        if record.relocalized_mask is not None:
            yield record.relocalized_mask
        loc = record.localization
        yield loc.raw_mask
        yield loc.final_mask
        for c in loc.mask_candidates:
            yield c.payload
        for c in record.modification.image_candidates:
            yield c.payload


def save_session(session: Session, path: str | Path) -> Path:
    """Persist to a session directory: session.json plus content-addressed
    artifacts/<sha256>.png. The JSON lands via write-temp-then-rename."""
    root = Path(path)
    artifacts = root / "artifacts"
    artifacts.mkdir(parents=True, exist_ok=True)
    for item in _iter_session_artifacts(session):
        data = item.to_png()
        target = artifacts / f"{item.sha256()}.png"
        if not target.exists():
            target.write_bytes(data)
    doc = session_document(session)
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    tmp = root / "session.json.tmp"
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, root / "session.json")
    return root


class _ArtifactLoader:
    """Reads and hash-verifies content-addressed artifacts, once each."""

    def __init__(self, root: Path):
        self._dir = root / "artifacts"
        self._images: dict[str, ImageBuf] = {}
        self._masks: dict[str, BinaryMask] = {}

    def _read(self, sha: str) -> bytes:
        path = self._dir / f"{sha}.png"
        if not path.exists():
            raise SessionIntegrityError(f"missing artifact {sha}")
        data = path.read_bytes()
        actual = sha256_hex(data)
        if actual != sha:
            raise SessionIntegrityError(
                f"artifact {sha} content hashes to {actual}: file was modified"
            )
        return data

    def image(self, sha: str) -> ImageBuf:
        if sha not in self._images:
            self._images[sha] = decode_image(self._read(sha))
        return self._images[sha]

    def mask(self, sha: str) -> BinaryMask:
        if sha not in self._masks:
            self._masks[sha] = decode_mask(self._read(sha))
        return self._masks[sha]


def _candidates_from_documents(
    docs: list[dict], payload_key: str, payload_fn
) -> CandidateSet:
    return CandidateSet(
        [
            Candidate(
                index=int(d["index"]),
                payload=payload_fn(d[payload_key]),
                score=None if d["score"] is None else float(d["score"]),
                seed=int(d["seed"]),
                backend=str(d["backend"]),
            )
            for d in docs
        ]
    )


def _record_from_document(doc: dict, loader: _ArtifactLoader) -> EditRecord:
    loc_doc = doc["localization"]
    mod_doc = doc["modification"]
    localization = LocalizationResult(
        selected_prompt=_prompt_from_document(loc_doc["selected_prompt"]),
        prompt_candidates=_candidates_from_documents(
            loc_doc["prompt_candidates"],
            "text",
            lambda t: Prompt(PromptKind.LOCALIZATION, t),
        ),
        mask_candidates=_candidates_from_documents(
            loc_doc["mask_candidates"], "mask", loader.mask
        ),
        raw_mask=loader.mask(loc_doc["raw_mask"]),
        final_mask=loader.mask(loc_doc["final_mask"]),
        dilation_radius=int(loc_doc["dilation_radius"]),
        empty_mask=bool(loc_doc["empty_mask"]),
    )
    image_candidates = _candidates_from_documents(
        mod_doc["image_candidates"], "image", loader.image
    )
    selected_index = int(mod_doc["selected_index"])
    modification = ModificationResult(
        selected_plan=_prompt_from_document(mod_doc["selected_plan"]),
        plan_candidates=_candidates_from_documents(
            mod_doc["plan_candidates"],
            "text",
            lambda t: Prompt(PromptKind.MODIFICATION, t),
        ),
        image_candidates=image_candidates,
        selected_image=image_candidates[selected_index].payload,
        selected_index=selected_index,
        seeds_used=[int(s) for s in mod_doc["seeds_used"]],
    )
    judge_doc = doc.get("judge")
    timings = doc["timings_ms"]
    return EditRecord(
        round_index=int(doc["round"]),
        instruction=Instruction(doc["instruction"]),
        mode=PipelineMode(doc["mode"]),
        input_image=loader.image(doc["input_image"]),
        output_image=loader.image(doc["output_image"]),
        localization=localization,
        modification=modification,
        mask_used=loader.mask(doc["mask_used"]),
        selection_source=str(doc["selection_source"]),
        judge_verdict=None
        if judge_doc is None
        else (bool(judge_doc["verdict"]), str(judge_doc["rationale"])),
        relocalized_mask=None
        if doc.get("relocalized_mask") is None
        else loader.mask(doc["relocalized_mask"]),
        timings=TimingBreakdown(
            lcp_ms=float(timings["lcp"]),
            mcp_ms=float(timings["mcp"]),
            backend_ms=float(timings["backend"]),
            overhead_ms=float(timings["overhead"]),
            total_ms=float(timings["total"]),
        ),
        call_counts={k: int(v) for k, v in doc["call_counts"].items()},
    )


def load_session(path: str | Path, backends: Backends) -> Session:
    """Load a persisted session, verifying schema version, artifact hashes
    and the input/output hash chain."""
    root = Path(path)
    doc_path = root / "session.json"
    if not doc_path.exists():
        raise FileNotFoundError(doc_path)
    doc = json.loads(doc_path.read_text(encoding="utf-8"))
    version = doc.get("schema_version")
    if version != SESSION_SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"session schema {version!r}, supported {SESSION_SCHEMA_VERSION}"
        )
    loader = _ArtifactLoader(root)
    config = config_from_document(doc["config"])
    session = Session(
        session_id=str(doc["session_id"]),
        config=config,
        backends=backends,
        initial_image=loader.image(doc["initial_image"]),
    )
    for record_doc in doc["records"]:
        session.records.append(_record_from_document(record_doc, loader))
    if session.records:
        session.current_image = session.records[-1].output_image
    expected_current = doc["current_image"]
    if session.current_image.sha256() != expected_current:
        raise SessionIntegrityError("current image does not match the last record")
    previous = session.initial_image.sha256()
    for record in session.records:
        if record.input_image_hash != previous:
            raise SessionIntegrityError(
                f"round {record.round_index} input breaks the hash chain"
            )
        previous = record.output_image_hash
    return session
