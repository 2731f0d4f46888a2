"""Dataset ingestion, batch benchmark runs, and report emission.

The harness runs each sample through the pipeline under one or more
configurations, measures consistency against the keep region (complement
of the ground-truth edit mask when present, full image otherwise), and
emits reports in the fixed column order PSNR / SSIM / LPIPS / CLIP / Succ
with a dash for metrics whose backend was not configured.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendRefused, Backends
from .core import BinaryMask, ImageBuf, Instruction, LoceditError, decode_image, decode_mask
from .metrics import (
    KeepRegion,
    MetricReport,
    clip_alignment,
    lpips,
    masked_psnr,
    masked_ssim,
    psnr_json_value,
)
from .pipeline import (
    PipelineConfig,
    PipelineMode,
    TimingBreakdown,
    edit_once,
    new_session,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

METRIC_COLUMNS = ("psnr", "ssim", "lpips", "clip", "succ")
TASK_TAGS = ("understanding", "reasoning", "responsible", "other")
PSNR_AGGREGATE_CAP_DB = 99.0

# en dash marks cells whose metric has no configured backend
DASH = "–"

__all__ = [
    "AllSamplesFailed",
    "BadSample",
    "BenchmarkResult",
    "EvalSample",
    "MissingManifest",
    "ModeResult",
    "SampleResult",
    "UnsupportedFormat",
    "emit_report",
    "load_dataset",
    "run_benchmark",
]


class MissingManifest(LoceditError):
    """The dataset root has no readable manifest.json."""


class BadSample(LoceditError):
    """A manifest entry failed validation; the message names the sample."""


class AllSamplesFailed(LoceditError):
    """Every sample errored under some configuration."""


class UnsupportedFormat(LoceditError):
    """Unknown report format."""


@dataclass(frozen=True)
class EvalSample:
    id: str
    image_path: Path
    instruction: str
    task: str
    gt_mask_path: Path | None
    image: ImageBuf
    gt_mask: BinaryMask | None


def load_dataset(root: str | Path) -> list[EvalSample]:
    """Read manifest.json and fail-fast validate every sample."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingManifest(f"no manifest.json under {root}")
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise MissingManifest(f"manifest.json unreadable: {exc}") from exc
    if not isinstance(entries, list):
        raise MissingManifest("manifest.json must be a JSON array of samples")
    samples: list[EvalSample] = []
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry:
            raise BadSample(f"manifest entry {position} has no id")
        sample_id = str(entry["id"])

        def bad(reason: str) -> BadSample:
            return BadSample(f"sample {sample_id!r}: {reason}")

        for key in ("image", "instruction", "task"):
            if key not in entry:
                raise bad(f"missing field {key!r}")
        task = str(entry["task"])
        if task not in TASK_TAGS:
            raise bad(f"unknown task tag {task!r}")
        if not str(entry["instruction"]).strip():
            raise bad("empty instruction")
        image_path = root / str(entry["image"])
        try:
            image = decode_image(image_path.read_bytes())
        except (OSError, LoceditError) as exc:
            raise bad(f"image unreadable: {exc}") from exc
        gt_mask = None
        gt_path = None
        if entry.get("gt_mask"):
            gt_path = root / str(entry["gt_mask"])
            try:
                gt_mask = decode_mask(gt_path.read_bytes())
            except (OSError, LoceditError) as exc:
                raise bad(f"gt mask unreadable: {exc}") from exc
            if not gt_mask.matches(image):
                raise bad(
                    f"gt mask {gt_mask.width}x{gt_mask.height} does not match "
                    f"image {image.width}x{image.height}"
                )
        samples.append(
            EvalSample(
                id=sample_id,
                image_path=image_path,
                instruction=str(entry["instruction"]),
                task=task,
                gt_mask_path=gt_path,
                image=image,
                gt_mask=gt_mask,
            )
        )
    return samples


@dataclass
class SampleResult:
    sample_id: str
    status: str  # "ok" | "error" | "refused"
    report: MetricReport | None = None
    error: str | None = None
    timings: TimingBreakdown | None = None

    def to_document(self) -> dict:
        doc: dict = {"sample_id": self.sample_id, "status": self.status}
        if self.error is not None:
            doc["error"] = self.error
        if self.report is not None:
            doc.update(
                {k: v for k, v in self.report.to_document().items() if k != "sample_id"}
            )
        return doc


@dataclass
class ModeResult:
    label: str
    config: PipelineConfig
    samples: list[SampleResult] = field(default_factory=list)

    def ok_samples(self) -> list[SampleResult]:
        return [s for s in self.samples if s.status == "ok"]

    def aggregates(self) -> dict:
        ok = self.ok_samples()
        reports = [s.report for s in ok if s.report is not None]

        def mean_of(values: list[float]) -> float | None:
            return sum(values) / len(values) if values else None

        psnr_values = [r.psnr_db for r in reports if r.psnr_db is not None]
        capped = [min(v, PSNR_AGGREGATE_CAP_DB) for v in psnr_values]
        psnr_capped = any(v >= PSNR_AGGREGATE_CAP_DB or math.isinf(v) for v in psnr_values)
        succ_values = [r.succ for r in reports if r.succ is not None]
        doc = {
            "psnr": mean_of(capped),
            "psnr_capped": bool(psnr_values) and psnr_capped,
            "ssim": mean_of([r.ssim for r in reports if r.ssim is not None]),
            "lpips": mean_of([r.lpips for r in reports if r.lpips is not None]),
            "clip": mean_of([r.clip for r in reports if r.clip is not None]),
            "succ": (
                sum(1 for v in succ_values if v) / len(succ_values)
                if succ_values
                else None
            ),
            "samples_total": len(self.samples),
            "samples_ok": len(ok),
            "samples_error": sum(1 for s in self.samples if s.status == "error"),
            "samples_refused": sum(1 for s in self.samples if s.status == "refused"),
            "consistency_samples": len(psnr_values),
        }
        return doc

    def timing_means(self) -> dict | None:
        timed = [s.timings for s in self.samples if s.timings is not None]
        if not timed:
            return None
        n = len(timed)
        return {
            "lcp_ms": sum(t.lcp_ms for t in timed) / n,
            "mcp_ms": sum(t.mcp_ms for t in timed) / n,
            "backend_ms": sum(t.backend_ms for t in timed) / n,
            "overhead_ms": sum(t.overhead_ms for t in timed) / n,
            "total_ms": sum(t.total_ms for t in timed) / n,
        }


@dataclass
class BenchmarkResult:
    modes: list[ModeResult]
    metric_flags: tuple[str, ...]
    baseline: str

    def mode(self, label: str) -> ModeResult:
        for mode in self.modes:
            if mode.label == label:
                return mode
        raise KeyError(label)


def _keep_region_for(sample: EvalSample) -> KeepRegion:
    if sample.gt_mask is not None:
        return KeepRegion.complement_of_edit_mask(sample.gt_mask)
    return KeepRegion.full()


def _evaluate_sample(
    sample: EvalSample,
    config: PipelineConfig,
    backends: Backends,
    metric_flags: tuple[str, ...],
) -> SampleResult:
    try:
        session = new_session(sample.image, config, backends)
        gt_arg = (
            sample.gt_mask
            if config.mode is PipelineMode.NO_REASONING_GT_MASK
            else None
        )
        record = edit_once(session, sample.instruction, gt_mask=gt_arg)
        edited = record.output_image

        instruction = Instruction(sample.instruction)
        verdict: bool | None = None
        want_succ = "succ" in metric_flags
        # the responsible-task rule needs a verdict even when the succ
        # column itself was not requested
        if want_succ or sample.task == "responsible":
            verdict, _rationale = backends.reasoner.judge_success(
                sample.image, edited, instruction
            )
        include_consistency = sample.task != "responsible" or verdict is True

        keep = _keep_region_for(sample)
        psnr_value = ssim_value = lpips_value = clip_value = None
        if include_consistency:
            if "psnr" in metric_flags:
                psnr_value = masked_psnr(sample.image, edited, keep)
            if "ssim" in metric_flags:
                ssim_value = masked_ssim(sample.image, edited, keep)
            if "lpips" in metric_flags and backends.metric is not None:
                lpips_value = lpips(sample.image, edited, keep, backends.metric)
        if "clip" in metric_flags and backends.metric is not None:
            clip_value = clip_alignment(edited, instruction, backends.metric)
        report = MetricReport(
            sample_id=sample.id,
            psnr_db=psnr_value,
            ssim=ssim_value,
            lpips=lpips_value,
            clip=clip_value,
            succ=verdict if want_succ else None,
        )
        return SampleResult(
            sample_id=sample.id, status="ok", report=report, timings=record.timings
        )
    except BackendRefused as exc:
        logger.warning("sample %s refused: %s", sample.id, exc)
        return SampleResult(sample_id=sample.id, status="refused", error=str(exc))
    except Exception as exc:
        logger.warning("sample %s failed: %s", sample.id, exc)
        return SampleResult(sample_id=sample.id, status="error", error=str(exc))


def _mode_labels(configs: list[PipelineConfig]) -> list[str]:
    seen: dict[str, int] = {}
    labels: list[str] = []
    for config in configs:
        base = config.mode.value
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def run_benchmark(
    samples: list[EvalSample],
    configs: list[PipelineConfig],
    backends: Backends,
    metric_flags: tuple[str, ...] = ("psnr", "ssim"),
    parallel: int = 4,
    baseline: str | None = None,
) -> BenchmarkResult:
    """Run every (sample, config) pair; per-sample failures are isolated to
    their own row, but a configuration with zero surviving samples aborts."""
    if not samples:
        raise ValueError("at least one sample required")
    if not configs:
        raise ValueError("at least one configuration required")
    for flag in metric_flags:
        if flag not in METRIC_COLUMNS:
            raise ValueError(f"unknown metric flag {flag!r}")
    labels = _mode_labels(configs)
    modes: list[ModeResult] = []
    for label, config in zip(labels, configs):
        mode = ModeResult(label=label, config=config)
        if parallel > 1:
            with ThreadPoolExecutor(max_workers=parallel) as pool:
                mode.samples = list(
                    pool.map(
                        lambda s: _evaluate_sample(s, config, backends, metric_flags),
                        samples,
                    )
                )
        else:
            mode.samples = [
                _evaluate_sample(s, config, backends, metric_flags) for s in samples
            ]
        if not mode.ok_samples():
            raise AllSamplesFailed(f"every sample failed under mode {label!r}")
        modes.append(mode)
    return BenchmarkResult(
        modes=modes, metric_flags=tuple(metric_flags), baseline=baseline or labels[0]
    )


def _result_document(result: BenchmarkResult, include_timings: bool) -> dict:
    doc: dict = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "columns": list(METRIC_COLUMNS),
        "metric_flags": list(result.metric_flags),
        "modes": {},
    }
    for mode in result.modes:
        doc["modes"][mode.label] = {
            "aggregates": mode.aggregates(),
            "samples": [s.to_document() for s in mode.samples],
        }
    if include_timings:
        doc["baseline"] = result.baseline
        timings: dict = {}
        baseline_total = None
        baseline_means = result.mode(result.baseline).timing_means()
        if baseline_means:
            baseline_total = baseline_means["total_ms"]
        for mode in result.modes:
            means = mode.timing_means()
            if means is None:
                continue
            entry = dict(means)
            if baseline_total:
                entry["ratio_vs_baseline"] = means["total_ms"] / baseline_total
            timings[mode.label] = entry
        doc["timings"] = timings
    return doc


def _format_cell(value, column: str) -> str:
    if value is None:
        return DASH
    if column == "psnr":
        rendered = psnr_json_value(value)
        if rendered == "inf":
            return "inf"
        return f"{rendered:.3f}"
    return f"{value:.3f}"


def _aggregate_row(mode: ModeResult) -> list[str]:
    aggregates = mode.aggregates()
    return [_format_cell(aggregates[column], column) for column in METRIC_COLUMNS]


def emit_report(
    result: BenchmarkResult,
    format: str = "json",
    include_timings: bool = False,
) -> bytes:
    """Render the benchmark as json, csv or markdown.

    Timings are excluded by default so reports are byte-identical across
    reruns; pass include_timings=True for the wall-clock section.
    """
    if format == "json":
        doc = _result_document(result, include_timings)
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["mode", *METRIC_COLUMNS])
        for mode in result.modes:
            writer.writerow([mode.label, *_aggregate_row(mode)])
        return buffer.getvalue().encode("utf-8")
    if format == "markdown":
        lines = [
            "| Mode | PSNR | SSIM | LPIPS | CLIP | Succ |",
            "|---|---|---|---|---|---|",
        ]
        capped = False
        for mode in result.modes:
            row = _aggregate_row(mode)
            lines.append("| " + " | ".join([mode.label, *row]) + " |")
            capped = capped or mode.aggregates()["psnr_capped"]
        if capped:
            lines.append("")
            lines.append(
                f"PSNR means are capped at {PSNR_AGGREGATE_CAP_DB} dB "
                "(some samples reached infinite PSNR)."
            )
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise UnsupportedFormat(f"unknown report format {format!r}")
