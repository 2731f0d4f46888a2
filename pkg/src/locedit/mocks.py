"""Deterministic mock backends and fixture generators.

Mocks are pure functions of (inputs, seed, scenario): replayed calls are
byte-identical, call counters are thread-safe, and lookups that a scenario
does not script raise ScenarioMiss instead of inventing defaults. A scenario
may opt in to catch-all behaviour by scripting the explicit wildcard key
"*"; tests that want loud failures simply leave the wildcard out.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backends import (
    InpainterBackend,
    MetricBackend,
    ReasonerBackend,
    ScoreContext,
    ScoreStage,
    SegmenterBackend,
)
from .core import (
    BinaryMask,
    DimMismatch,
    ImageBuf,
    Instruction,
    LoceditError,
    Prompt,
    PromptKind,
    encode_image,
    encode_mask,
    ensure_same_dims,
)

SCENARIO_SCHEMA_VERSION = 1

WILDCARD = "*"

__all__ = [
    "GeometricSegmenter",
    "MockScenario",
    "ScenarioMiss",
    "ScriptedMetricBackend",
    "ScriptedReasoner",
    "StampInpainter",
    "build_demo_scenario",
    "make_fixture_dataset",
    "mock_backends",
    "stamp_color",
]


class ScenarioMiss(LoceditError):
    """A mock was asked for something the scenario does not script."""


@dataclass(frozen=True)
class Directive:
    """Geometric region directive: rect, circle or none."""

    kind: str  # "rect" | "circle" | "none"
    params: tuple[int, ...] = ()

    def rasterize(self, width: int, height: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        if self.kind == "none":
            return out
        if self.kind == "rect":
            x, y, w, h = self.params
            out[max(y, 0) : min(y + h, height), max(x, 0) : min(x + w, width)] = True
            return out
        if self.kind == "circle":
            cx, cy, r = self.params
            yy, xx = np.ogrid[:height, :width]
            return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        raise ValueError(f"unknown directive kind {self.kind!r}")

    @classmethod
    def rect(cls, x: int, y: int, w: int, h: int) -> "Directive":
        return cls("rect", (x, y, w, h))

    @classmethod
    def circle(cls, cx: int, cy: int, r: int) -> "Directive":
        return cls("circle", (cx, cy, r))

    @classmethod
    def none(cls) -> "Directive":
        return cls("none")


@dataclass
class MockScenario:
    """Everything the scripted backends are allowed to answer.

    loc_prompts / mdf_prompts / judge are keyed by instruction text; scores
    by scoring stage then candidate index (a scripted stage with a missing
    index defaults to 0, an unscripted stage is a miss); segmenter
    directives by (prompt text, variant seed) with (text, None) accepting
    any seed.
    """

    loc_prompts: dict[str, list[str]] = field(default_factory=dict)
    mdf_prompts: dict[str, list[str]] = field(default_factory=dict)
    scores: dict[ScoreStage, dict[int, float]] = field(default_factory=dict)
    directives: dict[tuple[str, int | None], Directive] = field(default_factory=dict)
    judge: dict[str, tuple[bool, str]] = field(default_factory=dict)
    metric_values: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "schema_version": SCENARIO_SCHEMA_VERSION,
            "loc_prompts": self.loc_prompts,
            "mdf_prompts": self.mdf_prompts,
            "scores": {
                stage.value: {str(i): v for i, v in table.items()}
                for stage, table in self.scores.items()
            },
            "directives": [
                {
                    "prompt": text,
                    "seed": seed,
                    "kind": d.kind,
                    "params": list(d.params),
                }
                for (text, seed), d in self.directives.items()
            ],
            "judge": {
                text: {"verdict": v, "rationale": r}
                for text, (v, r) in self.judge.items()
            },
            "metric_values": self.metric_values,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MockScenario":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != SCENARIO_SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario schema version {version!r}")
        scenario = cls(
            loc_prompts={k: list(v) for k, v in doc.get("loc_prompts", {}).items()},
            mdf_prompts={k: list(v) for k, v in doc.get("mdf_prompts", {}).items()},
            scores={
                ScoreStage(stage): {int(i): float(v) for i, v in table.items()}
                for stage, table in doc.get("scores", {}).items()
            },
            judge={
                k: (bool(v["verdict"]), str(v.get("rationale", "")))
                for k, v in doc.get("judge", {}).items()
            },
            metric_values={k: float(v) for k, v in doc.get("metric_values", {}).items()},
        )
        for entry in doc.get("directives", []):
            seed = entry.get("seed")
            key = (entry["prompt"], None if seed is None else int(seed))
            scenario.directives[key] = Directive(
                entry["kind"], tuple(int(p) for p in entry.get("params", []))
            )
        return scenario

    @classmethod
    def load(cls, path: str | Path) -> "MockScenario":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _lookup_keyed(table: dict[str, Any], key: str, what: str) -> Any:
    if key in table:
        return table[key]
    if WILDCARD in table:
        return table[WILDCARD]
    raise ScenarioMiss(f"scenario does not script {what} for {key!r}")


class _Counter:
    """Thread-safe per-operation call counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}

    def bump(self, op: str) -> None:
        with self._lock:
            self._counts[op] = self._counts.get(op, 0) + 1

    def get(self, op: str) -> int:
        with self._lock:
            return self._counts.get(op, 0)

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


class ScriptedReasoner(ReasonerBackend):
    """Reasoner that replays the scenario tables and counts calls."""

    def __init__(self, scenario: MockScenario, backend_id: str = "scripted-reasoner"):
        self.scenario = scenario
        self.backend_id = backend_id
        self.calls = _Counter()

    def propose_localization(
        self, image: ImageBuf, instruction: Instruction, n: int, seed: int
    ) -> list[Prompt]:
        self.calls.bump("propose_localization")
        texts = _lookup_keyed(
            self.scenario.loc_prompts, instruction.text, "localization prompts"
        )
        if len(texts) < n:
            raise ScenarioMiss(
                f"scenario scripts {len(texts)} localization prompts, need {n}"
            )
        return [Prompt(PromptKind.LOCALIZATION, t) for t in texts[:n]]

    def propose_modification(
        self,
        image: ImageBuf,
        instruction: Instruction,
        mask: BinaryMask,
        n: int,
        seed: int,
    ) -> list[Prompt]:
        self.calls.bump("propose_modification")
        ensure_same_dims(image, mask)
        texts = _lookup_keyed(
            self.scenario.mdf_prompts, instruction.text, "modification prompts"
        )
        if len(texts) < n:
            raise ScenarioMiss(
                f"scenario scripts {len(texts)} modification prompts, need {n}"
            )
        return [Prompt(PromptKind.MODIFICATION, t) for t in texts[:n]]

    def score_candidates(
        self,
        stage: ScoreStage,
        context: ScoreContext,
        candidates: list[Any],
    ) -> list[float]:
        self.calls.bump("score")
        if stage not in self.scenario.scores:
            raise ScenarioMiss(f"scenario does not script scores for stage {stage.value}")
        table = self.scenario.scores[stage]
        return [float(table.get(i, 0.0)) for i in range(len(candidates))]

    def judge_success(
        self, original: ImageBuf, edited: ImageBuf, instruction: Instruction
    ) -> tuple[bool, str]:
        self.calls.bump("judge")
        if (original.width, original.height) != (edited.width, edited.height):
            raise DimMismatch("original and edited images differ in size")
        verdict, rationale = _lookup_keyed(
            self.scenario.judge, instruction.text, "a judge verdict"
        )
        return verdict, rationale


class GeometricSegmenter(SegmenterBackend):
    """Segmenter that rasterizes scripted shapes, clipped to the image."""

    def __init__(self, scenario: MockScenario, backend_id: str = "geometric-segmenter"):
        self.scenario = scenario
        self.backend_id = backend_id
        self.calls = _Counter()

    def _directive(self, text: str, seed: int) -> Directive:
        for key in ((text, seed), (text, None), (WILDCARD, seed), (WILDCARD, None)):
            if key in self.scenario.directives:
                return self.scenario.directives[key]
        raise ScenarioMiss(f"no directive for prompt {text!r} seed {seed}")

    def segment(self, image: ImageBuf, prompt: Prompt, variant_seed: int) -> BinaryMask:
        self.calls.bump("segment")
        if prompt.kind is not PromptKind.LOCALIZATION:
            raise ValueError("segment requires a localization prompt")
        directive = self._directive(prompt.text, variant_seed)
        return BinaryMask(directive.rasterize(image.width, image.height))


def stamp_color(prompt_text: str, seed: int) -> tuple[int, int, int]:
    """Fill color of the stamp inpainter: first 3 bytes of
    SHA-256(prompt text || seed)."""
    digest = hashlib.sha256(f"{prompt_text}\x1f{seed}".encode("utf-8")).digest()
    return digest[0], digest[1], digest[2]


class StampInpainter(InpainterBackend):
    """Mask-respecting mock: fills mask==1 pixels with a hash-derived
    constant color and leaves every mask==0 pixel untouched."""

    def __init__(self, backend_id: str = "stamp-inpainter"):
        self.backend_id = backend_id
        self.calls = _Counter()

    def inpaint(
        self, image: ImageBuf, mask: BinaryMask, prompt: Prompt, seed: int
    ) -> ImageBuf:
        self.calls.bump("inpaint")
        if prompt.kind is not PromptKind.MODIFICATION:
            raise ValueError("inpaint requires a modification prompt")
        ensure_same_dims(image, mask)
        out = image.to_array().copy()
        out[mask.to_array()] = stamp_color(prompt.text, seed)
        return ImageBuf(out)


class ScriptedMetricBackend(MetricBackend):
    """Returns scripted constants for lpips / clip."""

    def __init__(self, scenario: MockScenario):
        self.scenario = scenario
        self.calls = _Counter()

    def _value(self, kind: str) -> float:
        if kind not in self.scenario.metric_values:
            raise ScenarioMiss(f"scenario does not script metric {kind!r}")
        return float(self.scenario.metric_values[kind])

    def lpips(self, image_a: ImageBuf, image_b: ImageBuf) -> float:
        self.calls.bump("lpips")
        return self._value("lpips")

    def clip_score(self, image: ImageBuf, text: str) -> float:
        self.calls.bump("clip")
        return self._value("clip")


def mock_backends(scenario: MockScenario) -> "Backends":
    """Bundle of scripted backends for one scenario."""
    from .backends import Backends

    return Backends(
        reasoner=ScriptedReasoner(scenario),
        segmenter=GeometricSegmenter(scenario),
        inpainter=StampInpainter(),
        metric=ScriptedMetricBackend(scenario) if scenario.metric_values else None,
    )


# --- fixture dataset ---------------------------------------------------------

_FIXTURE_COLORS = [
    ("red", (200, 30, 30)),
    ("green", (30, 180, 40)),
    ("blue", (40, 60, 210)),
    ("yellow", (220, 210, 40)),
    ("purple", (140, 40, 170)),
    ("orange", (230, 130, 30)),
]
_FIXTURE_SHAPES = ["square", "circle"]


def _fixture_sample(
    index: int, rng: np.random.Generator, size: int
) -> tuple[ImageBuf, BinaryMask, str, str]:
    color_name, color = _FIXTURE_COLORS[index % len(_FIXTURE_COLORS)]
    shape = _FIXTURE_SHAPES[(index // len(_FIXTURE_COLORS)) % len(_FIXTURE_SHAPES)]
    background = rng.integers(60, 200, size=3)
    arr = np.empty((size, size, 3), dtype=np.uint8)
    arr[:, :] = background
    # light per-row gradient so images are not trivially constant
    gradient = np.arange(size) // 8
    arr[:, :, 2] = np.clip(
        arr[:, :, 2].astype(np.int16) + gradient[:, None], 0, 255
    ).astype(np.uint8)
    extent = int(rng.integers(size // 8, size // 3))
    x = int(rng.integers(2, size - extent - 2))
    y = int(rng.integers(2, size - extent - 2))
    if shape == "square":
        gt = Directive.rect(x, y, extent, extent).rasterize(size, size)
    else:
        r = extent // 2
        gt = Directive.circle(x + r, y + r, r).rasterize(size, size)
    arr[gt] = color
    instruction = f"remove the {color_name} {shape}"
    if index >= len(_FIXTURE_COLORS) * len(_FIXTURE_SHAPES):
        instruction += f" (sample {index})"
    return ImageBuf(arr), BinaryMask(gt), instruction, shape


def make_fixture_dataset(
    n: int, seed: int, out_dir: str | Path, size: int = 64
) -> list[dict]:
    """Generate a procedural benchmark dataset under out_dir.

    Writes n images of flat scenes with one colored shape each, a GT mask
    equal to the shape footprint, and manifest.json. Fully reproducible
    from (n, seed, size).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tasks = ["understanding", "reasoning", "responsible", "other"]
    manifest = []
    for i in range(n):
        image, gt, instruction, _shape = _fixture_sample(i, rng, size)
        image_name = f"sample_{i:03d}.png"
        mask_name = f"sample_{i:03d}_mask.png"
        (root / image_name).write_bytes(encode_image(image))
        (root / mask_name).write_bytes(encode_mask(gt))
        manifest.append(
            {
                "id": f"sample_{i:03d}",
                "image": image_name,
                "instruction": instruction,
                "gt_mask": mask_name,
                "task": tasks[i % len(tasks)],
            }
        )
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def scenario_for_dataset(
    manifest: list[dict],
    dataset_root: str | Path,
    n_reflect: int,
    judge_success_all: bool = True,
) -> MockScenario:
    """Scenario that lets the scripted backends drive every manifest sample.

    Per sample: n_reflect localization prompts naming the sample, segment
    directives that shrink toward the GT rectangle as the variant seed
    grows, and modification plans. Scores favor the last candidate at every
    stage so reflective selection has something to do.
    """
    from .core import decode_mask as _decode_mask

    root = Path(dataset_root)
    scenario = MockScenario()
    scenario.scores = {
        stage: {i: float(i + 1) for i in range(n_reflect)} for stage in ScoreStage
    }
    for entry in manifest:
        instruction = entry["instruction"]
        sample_id = entry["id"]
        loc_texts = [
            f"{sample_id} region option {k}" for k in range(max(n_reflect, 1))
        ]
        scenario.loc_prompts[instruction] = loc_texts
        scenario.mdf_prompts[instruction] = [
            f"{sample_id} plan option {k}" for k in range(max(n_reflect, 1))
        ]
        scenario.judge[instruction] = (
            judge_success_all,
            "scripted verdict",
        )
        gt_path = entry.get("gt_mask")
        x, y, w, h = 4, 4, 8, 8
        if gt_path:
            gt = _decode_mask((root / gt_path).read_bytes())
            arr = gt.to_array()
            if arr.any():
                rows = np.flatnonzero(arr.any(axis=1))
                cols = np.flatnonzero(arr.any(axis=0))
                x, y = int(cols[0]), int(rows[0])
                w, h = int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)
        for text in loc_texts + [instruction]:
            for variant in range(max(n_reflect, 1)):
                # earlier variants overshoot the GT box; the last one is exact
                grow = (n_reflect - 1 - variant) * 2
                scenario.directives[(text, variant)] = Directive.rect(
                    max(x - grow, 0), max(y - grow, 0), w + 2 * grow, h + 2 * grow
                )
    return scenario


def build_demo_scenario(n_reflect: int = 5, size: int = 384) -> MockScenario:
    """Catch-all scenario for serving the gateway without real models."""
    scenario = MockScenario()
    scenario.loc_prompts[WILDCARD] = [
        f"suggested region {k + 1}" for k in range(max(n_reflect, 5))
    ]
    scenario.mdf_prompts[WILDCARD] = [
        f"suggested edit plan {k + 1}" for k in range(max(n_reflect, 5))
    ]
    scenario.scores = {
        ScoreStage.LOC_PROMPT: {i: float(5 + (i * 3) % 6) for i in range(10)},
        ScoreStage.MASK: {i: float(4 + (i * 5) % 7) for i in range(10)},
        ScoreStage.MDF_PROMPT: {i: float(3 + (i * 2) % 8) for i in range(10)},
        ScoreStage.EDITED_IMAGE: {i: float(2 + (i * 7) % 9) for i in range(10)},
    }
    quarter = size // 4
    for variant in range(max(n_reflect, 5)):
        offset = (variant * 13) % quarter
        scenario.directives[(WILDCARD, variant)] = Directive.rect(
            quarter + offset, quarter + offset, quarter, quarter
        )
    scenario.judge[WILDCARD] = (True, "demo judge always approves")
    scenario.metric_values = {"lpips": 0.05, "clip": 21.0}
    return scenario
