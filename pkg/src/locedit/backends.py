"""Backend interfaces and clients for the three external models.

The pipeline talks to three models: a multimodal reasoner (prompt
generation, candidate scoring, success judging), a text-prompted segmenter,
and a seeded inpainter. Each has an abstract interface, a JSON-over-HTTP
client, and (in locedit.mocks) a deterministic in-process mock.

Wire protocol (all images and masks travel as base64 PNG):

    POST {base}/v1/reason   {"task": "propose_localization" |
                             "propose_modification" | "score" | "judge",
                             "image": b64, "instruction": str, "mask": b64?,
                             "candidates": [...]?, "stage": str?, "n": int?,
                             "seed": int, "system": str}
        -> {"texts": [str]} | {"scores": [number]}
           | {"verdict": bool, "rationale": str}
    POST {base}/v1/segment  {"image": b64, "prompt": str, "seed": int}
        -> {"mask": b64}
    POST {base}/v1/inpaint  {"image": b64, "mask": b64, "prompt": str,
                             "seed": int} -> {"image": b64}
    POST {base}/v1/metric   {"kind": "lpips"|"clip", "image_a": b64,
                             "image_b": b64?, "text": str?}
        -> {"value": number}

Errors come back as non-2xx with {"error": str}.
"""

from __future__ import annotations

import abc
import base64
import logging
import re
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable

import requests

from .core import (
    BinaryMask,
    DimMismatch,
    ImageBuf,
    Instruction,
    LoceditError,
    Prompt,
    PromptKind,
    PromptTemplates,
    decode_image,
    decode_mask,
    encode_image,
    encode_mask,
    render_mask_overlay,
)

logger = logging.getLogger(__name__)

__all__ = [
    "BackendEndpoint",
    "BackendRefused",
    "BackendUnavailable",
    "Backends",
    "BadResponse",
    "ChatReasonerBackend",
    "EmptyGeneration",
    "HttpInpainterBackend",
    "HttpMetricBackend",
    "HttpReasonerBackend",
    "HttpSegmenterBackend",
    "InpainterBackend",
    "MetricBackend",
    "ReasonerBackend",
    "ScoreContext",
    "ScoreParseError",
    "ScoreStage",
    "SegmenterBackend",
]


class BackendError(LoceditError):
    """Base class for failures reported by or about a model backend."""


class BackendUnavailable(BackendError):
    """Transport failure or 5xx after exhausting retries."""


class BadResponse(BackendError):
    """The backend answered but violated the wire schema."""


class EmptyGeneration(BackendError):
    """The backend produced fewer usable texts than requested."""


class ScoreParseError(BackendError):
    """Judge output could not be parsed into scores after retries."""


class BackendRefused(BackendError):
    """The backend declined to process the content (safeguard refusal)."""


class ScoreStage(str, Enum):
    """Which of the four selection points a scoring call serves."""

    LOC_PROMPT = "loc_prompt"
    MASK = "mask"
    MDF_PROMPT = "mdf_prompt"
    EDITED_IMAGE = "edited_image"


@dataclass(frozen=True)
class ScoreContext:
    """Conditioning material for a scoring call.

    The text the judge is conditioned on differs per stage: region
    descriptions and edit plans are judged against the user instruction,
    masks against the selected localization prompt (the instruction is added
    only when explicitly configured), edited images against the instruction.
    """

    image: ImageBuf
    instruction: str | None = None
    prompt: Prompt | None = None
    mask: BinaryMask | None = None

    def conditioning_text(self) -> str:
        parts = []
        if self.instruction:
            parts.append(self.instruction)
        if self.prompt is not None:
            parts.append(self.prompt.text)
        return "\n".join(parts)


class ReasonerBackend(abc.ABC):
    """The multimodal reasoning model: plans, scores, judges."""

    @abc.abstractmethod
    def propose_localization(
        self, image: ImageBuf, instruction: Instruction, n: int, seed: int
    ) -> list[Prompt]:
        """Generate n region descriptions; order defines candidate indices."""

    @abc.abstractmethod
    def propose_modification(
        self,
        image: ImageBuf,
        instruction: Instruction,
        mask: BinaryMask,
        n: int,
        seed: int,
    ) -> list[Prompt]:
        """Generate n editing plans for the masked region."""

    @abc.abstractmethod
    def score_candidates(
        self,
        stage: ScoreStage,
        context: ScoreContext,
        candidates: list[Any],
    ) -> list[float]:
        """One finite score per candidate, order-aligned with the input."""

    @abc.abstractmethod
    def judge_success(
        self, original: ImageBuf, edited: ImageBuf, instruction: Instruction
    ) -> tuple[bool, str]:
        """Did the edit fulfil the instruction? Returns (verdict, rationale)."""


class SegmenterBackend(abc.ABC):
    """Text-prompted segmentation model."""

    @abc.abstractmethod
    def segment(
        self, image: ImageBuf, prompt: Prompt, variant_seed: int
    ) -> BinaryMask:
        """Map a localization prompt to a binary mask with the image's dims."""


class InpainterBackend(abc.ABC):
    """Mask-conditioned image generator."""

    @abc.abstractmethod
    def inpaint(
        self, image: ImageBuf, mask: BinaryMask, prompt: Prompt, seed: int
    ) -> ImageBuf:
        """Regenerate the masked region per the plan; dims are preserved."""


class MetricBackend(abc.ABC):
    """Optional service computing learned metrics (LPIPS, CLIP score)."""

    @abc.abstractmethod
    def lpips(self, image_a: ImageBuf, image_b: ImageBuf) -> float: ...

    @abc.abstractmethod
    def clip_score(self, image: ImageBuf, text: str) -> float: ...


@dataclass
class Backends:
    """The backend bundle a pipeline runs against."""

    reasoner: ReasonerBackend
    segmenter: SegmenterBackend
    inpainter: InpainterBackend
    metric: MetricBackend | None = None


@dataclass(frozen=True)
class BackendEndpoint:
    """Where one backend lives and how patiently we talk to it."""

    base_url: str
    timeout_s: float = 120.0
    retries: int = 2
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


def backend_name(backend: object) -> str:
    """Stable provenance id for a backend instance."""
    return getattr(backend, "backend_id", type(backend).__name__)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(data: str, what: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise BadResponse(f"{what} is not valid base64") from exc


def _post_json(
    endpoint: BackendEndpoint,
    path: str,
    payload: dict,
    session: requests.Session | None = None,
) -> dict:
    """POST with retries. Transport errors and 5xx retry; 4xx does not."""
    url = endpoint.base_url.rstrip("/") + path
    headers = {"Content-Type": "application/json"}
    if endpoint.auth_token:
        headers["Authorization"] = f"Bearer {endpoint.auth_token}"
    post = (session or requests).post
    last_error: Exception | None = None
    for attempt in range(endpoint.retries + 1):
        try:
            resp = post(url, json=payload, headers=headers, timeout=endpoint.timeout_s)
        except requests.RequestException as exc:
            last_error = exc
            logger.warning("POST %s failed (attempt %d): %s", url, attempt + 1, exc)
            if attempt < endpoint.retries:
                time.sleep(min(0.2 * 2**attempt, 2.0))
            continue
        if 200 <= resp.status_code < 300:
            try:
                body = resp.json()
            except ValueError as exc:
                raise BadResponse(f"{url} returned non-JSON body") from exc
            if not isinstance(body, dict):
                raise BadResponse(f"{url} returned a non-object JSON body")
            return body
        detail = _error_detail(resp)
        if resp.status_code >= 500:
            last_error = BackendUnavailable(f"{url} -> {resp.status_code}: {detail}")
            if attempt < endpoint.retries:
                time.sleep(min(0.2 * 2**attempt, 2.0))
            continue
        raise BadResponse(f"{url} -> {resp.status_code}: {detail}")
    raise BackendUnavailable(f"{url} unreachable after {endpoint.retries + 1} attempts: {last_error}")


def _error_detail(resp: requests.Response) -> str:
    try:
        body = resp.json()
        if isinstance(body, dict) and "error" in body:
            return str(body["error"])
    except ValueError:
        pass
    return resp.text[:200]


def _require_texts(body: dict, n: int) -> list[str]:
    texts = body.get("texts")
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise BadResponse("expected {'texts': [str]}")
    usable = [t for t in texts if t.strip()]
    if len(usable) < n:
        raise EmptyGeneration(f"backend returned {len(usable)} usable texts, need {n}")
    return usable[:n]


def _require_scores(body: dict, n: int) -> list[float]:
    scores = body.get("scores")
    if not isinstance(scores, list) or len(scores) != n:
        raise BadResponse(f"expected {{'scores': [number] * {n}}}")
    out: list[float] = []
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, (int, float)):
            raise BadResponse(f"non-numeric score {s!r}")
        value = float(s)
        if value != value or value in (float("inf"), float("-inf")):
            raise BadResponse(f"non-finite score {value!r}")
        out.append(value)
    return out


def _serialize_candidates(stage: ScoreStage, candidates: list[Any]) -> list[str]:
    if stage in (ScoreStage.LOC_PROMPT, ScoreStage.MDF_PROMPT):
        return [c.text if isinstance(c, Prompt) else str(c) for c in candidates]
    if stage is ScoreStage.MASK:
        return [_b64(encode_mask(m)) for m in candidates]
    return [_b64(encode_image(img)) for img in candidates]


class HttpReasonerBackend(ReasonerBackend):
    """Client for the native /v1/reason wire protocol."""

    def __init__(
        self,
        endpoint: BackendEndpoint,
        templates: PromptTemplates | None = None,
    ):
        self._endpoint = endpoint
        self._templates = templates or PromptTemplates()
        self._session = requests.Session()
        self.backend_id = f"http:{endpoint.base_url}"

    def propose_localization(
        self, image: ImageBuf, instruction: Instruction, n: int, seed: int
    ) -> list[Prompt]:
        if n < 1:
            raise ValueError("n must be >= 1")
        body = _post_json(
            self._endpoint,
            "/v1/reason",
            {
                "task": "propose_localization",
                "image": _b64(encode_image(image)),
                "instruction": instruction.text,
                "n": n,
                "seed": seed,
                "system": self._templates.localization,
            },
            self._session,
        )
        return [Prompt(PromptKind.LOCALIZATION, t) for t in _require_texts(body, n)]

    def propose_modification(
        self,
        image: ImageBuf,
        instruction: Instruction,
        mask: BinaryMask,
        n: int,
        seed: int,
    ) -> list[Prompt]:
        if n < 1:
            raise ValueError("n must be >= 1")
        # The mask is communicated as a red overlay baked into the image;
        # the raw mask travels alongside for backends that can use it.
        overlay = render_mask_overlay(image, mask)
        body = _post_json(
            self._endpoint,
            "/v1/reason",
            {
                "task": "propose_modification",
                "image": _b64(encode_image(overlay)),
                "instruction": instruction.text,
                "mask": _b64(encode_mask(mask)),
                "n": n,
                "seed": seed,
                "system": self._templates.modification,
            },
            self._session,
        )
        return [Prompt(PromptKind.MODIFICATION, t) for t in _require_texts(body, n)]

    def score_candidates(
        self,
        stage: ScoreStage,
        context: ScoreContext,
        candidates: list[Any],
    ) -> list[float]:
        if not candidates:
            raise ValueError("candidates must be non-empty")
        payload = {
            "task": "score",
            "stage": stage.value,
            "image": _b64(encode_image(context.image)),
            "instruction": context.conditioning_text(),
            "candidates": _serialize_candidates(stage, candidates),
            "seed": 0,
            "system": self._templates.reflection,
        }
        if context.mask is not None:
            payload["mask"] = _b64(encode_mask(context.mask))
        body = _post_json(self._endpoint, "/v1/reason", payload, self._session)
        return _require_scores(body, len(candidates))

    def judge_success(
        self, original: ImageBuf, edited: ImageBuf, instruction: Instruction
    ) -> tuple[bool, str]:
        if (original.width, original.height) != (edited.width, edited.height):
            raise DimMismatch("original and edited images differ in size")
        body = _post_json(
            self._endpoint,
            "/v1/reason",
            {
                "task": "judge",
                "image": _b64(encode_image(original)),
                "candidates": [_b64(encode_image(edited))],
                "instruction": instruction.text,
                "seed": 0,
                "system": self._templates.reflection,
            },
            self._session,
        )
        verdict = body.get("verdict")
        rationale = body.get("rationale", "")
        if not isinstance(verdict, bool) or not isinstance(rationale, str):
            raise BadResponse("expected {'verdict': bool, 'rationale': str}")
        return verdict, rationale


class HttpSegmenterBackend(SegmenterBackend):
    """Client for the /v1/segment wire protocol."""

    def __init__(self, endpoint: BackendEndpoint):
        self._endpoint = endpoint
        self._session = requests.Session()
        self.backend_id = f"http:{endpoint.base_url}"

    def segment(
        self, image: ImageBuf, prompt: Prompt, variant_seed: int
    ) -> BinaryMask:
        if prompt.kind is not PromptKind.LOCALIZATION:
            raise ValueError("segment requires a localization prompt")
        body = _post_json(
            self._endpoint,
            "/v1/segment",
            {
                "image": _b64(encode_image(image)),
                "prompt": prompt.text,
                "seed": variant_seed,
            },
            self._session,
        )
        raw = body.get("mask")
        if not isinstance(raw, str):
            raise BadResponse("expected {'mask': b64}")
        mask = decode_mask(_unb64(raw, "mask"))
        if not mask.matches(image):
            raise DimMismatch(
                f"segmenter returned {mask.width}x{mask.height} "
                f"for a {image.width}x{image.height} image"
            )
        return mask


class HttpInpainterBackend(InpainterBackend):
    """Client for the /v1/inpaint wire protocol."""

    def __init__(self, endpoint: BackendEndpoint):
        self._endpoint = endpoint
        self._session = requests.Session()
        self.backend_id = f"http:{endpoint.base_url}"

    def inpaint(
        self, image: ImageBuf, mask: BinaryMask, prompt: Prompt, seed: int
    ) -> ImageBuf:
        if prompt.kind is not PromptKind.MODIFICATION:
            raise ValueError("inpaint requires a modification prompt")
        if not mask.matches(image):
            raise DimMismatch("mask does not match image dims")
        body = _post_json(
            self._endpoint,
            "/v1/inpaint",
            {
                "image": _b64(encode_image(image)),
                "mask": _b64(encode_mask(mask)),
                "prompt": prompt.text,
                "seed": seed,
            },
            self._session,
        )
        raw = body.get("image")
        if not isinstance(raw, str):
            raise BadResponse("expected {'image': b64}")
        out = decode_image(_unb64(raw, "image"))
        if (out.width, out.height) != (image.width, image.height):
            raise DimMismatch(
                f"inpainter returned {out.width}x{out.height} "
                f"for a {image.width}x{image.height} image"
            )
        return out


class HttpMetricBackend(MetricBackend):
    """Client for the /v1/metric wire protocol."""

    def __init__(self, endpoint: BackendEndpoint):
        self._endpoint = endpoint
        self._session = requests.Session()

    def _call(self, payload: dict) -> float:
        body = _post_json(self._endpoint, "/v1/metric", payload, self._session)
        value = body.get("value")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadResponse(f"expected {{'value': number}}, got {value!r}")
        return float(value)

    def lpips(self, image_a: ImageBuf, image_b: ImageBuf) -> float:
        return self._call(
            {
                "kind": "lpips",
                "image_a": _b64(encode_image(image_a)),
                "image_b": _b64(encode_image(image_b)),
            }
        )

    def clip_score(self, image: ImageBuf, text: str) -> float:
        return self._call(
            {"kind": "clip", "image_a": _b64(encode_image(image)), "text": text}
        )


# --- chat-completion adapter -------------------------------------------------

_NUMBERED_LINE = re.compile(r"^\s*(\d+)\s*[.):\-]\s*(.+?)\s*$")
_INT_TOKEN = re.compile(r"-?\d+")


def parse_numbered_alternatives(text: str) -> list[str]:
    """Extract '1. ...' style alternatives from a completion, in order."""
    out: list[str] = []
    for line in text.splitlines():
        m = _NUMBERED_LINE.match(line)
        if m and m.group(2).strip():
            out.append(m.group(2).strip())
    return out


def parse_score_lines(text: str, n: int) -> list[float]:
    """First integer token per non-empty line; requires exactly n lines."""
    values: list[float] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _INT_TOKEN.search(line)
        if m is None:
            raise ScoreParseError(f"no integer in judge line {line!r}")
        values.append(float(m.group(0)))
    if len(values) != n:
        raise ScoreParseError(f"judge produced {len(values)} scores, expected {n}")
    return values


def _image_part(png: bytes) -> dict:
    return {
        "type": "image_url",
        "image_url": {"url": "data:image/png;base64," + _b64(png)},
    }


class ChatReasonerBackend(ReasonerBackend):
    """Adapter mapping the reasoner operations onto an OpenAI-style
    chat-completion endpoint with base64 image attachments.

    Candidate diversity uses one call requesting n numbered alternatives;
    if fewer than n parse, the remainder is filled by independent calls
    with incremented seeds. ``transport`` is injectable for tests.
    """

    def __init__(
        self,
        endpoint: BackendEndpoint,
        model: str,
        templates: PromptTemplates | None = None,
        transport: Callable[[BackendEndpoint, str, dict], dict] | None = None,
    ):
        self._endpoint = endpoint
        self._model = model
        self._templates = templates or PromptTemplates()
        self._session = requests.Session()
        self._transport = transport

    def _complete(self, system: str, content: list[dict], seed: int) -> str:
        payload = {
            "model": self._model,
            "seed": seed,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": content},
            ],
        }
        if self._transport is not None:
            body = self._transport(self._endpoint, "/v1/chat/completions", payload)
        else:
            body = _post_json(
                self._endpoint, "/v1/chat/completions", payload, self._session
            )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BadResponse("chat completion missing choices[0].message.content") from exc
        if not isinstance(text, str):
            raise BadResponse("chat completion content is not a string")
        return text

    def _generate(
        self,
        system: str,
        task_text: str,
        images: list[bytes],
        n: int,
        seed: int,
        kind: PromptKind,
    ) -> list[Prompt]:
        content: list[dict] = [{"type": "text", "text": task_text}]
        content += [_image_part(png) for png in images]
        if n == 1:
            text = self._complete(system, content, seed).strip()
            if not text:
                raise EmptyGeneration("backend returned an empty completion")
            return [Prompt(kind, text)]
        ask = dict(content[0])
        ask["text"] = (
            f"{task_text}\n\nProvide {n} distinct numbered alternatives, "
            f"formatted '1. ...' through '{n}. ...', one per line."
        )
        text = self._complete(system, [ask] + content[1:], seed)
        texts = parse_numbered_alternatives(text)[:n]
        extra_seed = seed
        while len(texts) < n:
            extra_seed += 1
            if extra_seed - seed > n:
                raise EmptyGeneration(
                    f"backend produced {len(texts)} alternatives, need {n}"
                )
            single = self._complete(system, content, extra_seed).strip()
            if single:
                texts.append(single)
        return [Prompt(kind, t) for t in texts]

    def propose_localization(
        self, image: ImageBuf, instruction: Instruction, n: int, seed: int
    ) -> list[Prompt]:
        return self._generate(
            self._templates.localization,
            f"Editing request: {instruction.text}\n"
            "Describe the region of the attached image that should change.",
            [encode_image(image)],
            n,
            seed,
            PromptKind.LOCALIZATION,
        )

    def propose_modification(
        self,
        image: ImageBuf,
        instruction: Instruction,
        mask: BinaryMask,
        n: int,
        seed: int,
    ) -> list[Prompt]:
        overlay = render_mask_overlay(image, mask)
        return self._generate(
            self._templates.modification,
            f"Editing request: {instruction.text}\n"
            "The editable region is highlighted in red in the attached image. "
            "Write the inpainting prompt for that region.",
            [encode_image(overlay)],
            n,
            seed,
            PromptKind.MODIFICATION,
        )

    def score_candidates(
        self,
        stage: ScoreStage,
        context: ScoreContext,
        candidates: list[Any],
    ) -> list[float]:
        if not candidates:
            raise ValueError("candidates must be non-empty")
        goal = context.conditioning_text()
        content: list[dict] = [
            {
                "type": "text",
                "text": f"Goal: {goal}\nScore each of the {len(candidates)} "
                "candidates below (0-10, one integer per line).",
            },
            _image_part(encode_image(context.image)),
        ]
        if stage in (ScoreStage.LOC_PROMPT, ScoreStage.MDF_PROMPT):
            listing = "\n".join(
                f"{i + 1}. {c.text if isinstance(c, Prompt) else c}"
                for i, c in enumerate(candidates)
            )
            content.append({"type": "text", "text": "Candidates:\n" + listing})
        elif stage is ScoreStage.MASK:
            for i, mask in enumerate(candidates):
                content.append({"type": "text", "text": f"Candidate {i + 1}:"})
                content.append(
                    _image_part(encode_image(render_mask_overlay(context.image, mask)))
                )
        else:
            for i, img in enumerate(candidates):
                content.append({"type": "text", "text": f"Candidate {i + 1}:"})
                content.append(_image_part(encode_image(img)))
        last: ScoreParseError | None = None
        for attempt in range(self._endpoint.retries + 1):
            text = self._complete(self._templates.reflection, content, attempt)
            try:
                return parse_score_lines(text, len(candidates))
            except ScoreParseError as exc:
                last = exc
                logger.warning("unparseable judge output (attempt %d): %s", attempt + 1, exc)
        raise last  # type: ignore[misc]

    def judge_success(
        self, original: ImageBuf, edited: ImageBuf, instruction: Instruction
    ) -> tuple[bool, str]:
        if (original.width, original.height) != (edited.width, edited.height):
            raise DimMismatch("original and edited images differ in size")
        content = [
            {
                "type": "text",
                "text": f"Instruction: {instruction.text}\n"
                "First image is the original, second is the edited result. "
                "Does the edit fulfil the instruction? Answer 'yes' or 'no' "
                "on the first line, then a one-sentence rationale.",
            },
            _image_part(encode_image(original)),
            _image_part(encode_image(edited)),
        ]
        text = self._complete(self._templates.reflection, content, 0).strip()
        first, _, rest = text.partition("\n")
        token = first.strip().strip(".,!").lower()
        if token not in ("yes", "no"):
            raise BadResponse(f"judge verdict not yes/no: {first!r}")
        return token == "yes", rest.strip() or first.strip()


def backends_from_endpoints(
    reasoner: BackendEndpoint,
    segmenter: BackendEndpoint,
    inpainter: BackendEndpoint,
    metric: BackendEndpoint | None = None,
    templates: PromptTemplates | None = None,
) -> Backends:
    """Wire protocol clients for all configured backends."""
    return Backends(
        reasoner=HttpReasonerBackend(reasoner, templates),
        segmenter=HttpSegmenterBackend(segmenter),
        inpainter=HttpInpainterBackend(inpainter),
        metric=HttpMetricBackend(metric) if metric else None,
    )
