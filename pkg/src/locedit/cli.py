"""Command line interface: edit, bench, serve, session, metrics.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Backend failures
name the pipeline stage on stderr so scripted callers can tell a bad flag
from a dead model server.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BackendEndpoint, Backends, backends_from_endpoints
from .core import LoceditError, decode_image, decode_mask, encode_image
from .evalharness import emit_report, load_dataset, run_benchmark
from .metrics import KeepRegion, masked_psnr, masked_ssim, psnr_json_value
from .mocks import MockScenario, build_demo_scenario, mock_backends
from .pipeline import (
    PipelineConfig,
    PipelineMode,
    PipelineStageError,
    load_session,
    new_session,
    edit_once,
    save_session,
    session_document,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        raise _UsageError(message)


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", help="mock scenario JSON (GPU-free run)")
    parser.add_argument("--demo", action="store_true", help="built-in demo mocks")
    parser.add_argument("--reasoner-url")
    parser.add_argument("--segmenter-url")
    parser.add_argument("--inpainter-url")
    parser.add_argument("--metric-url")
    parser.add_argument("--timeout", type=float, default=120.0)
    parser.add_argument("--retries", type=int, default=2)


def _build_backends(args: argparse.Namespace) -> Backends:
    if args.demo:
        return mock_backends(build_demo_scenario())
    if args.scenario:
        return mock_backends(MockScenario.load(args.scenario))
    urls = (args.reasoner_url, args.segmenter_url, args.inpainter_url)
    if not all(urls):
        raise _UsageError(
            "either --scenario/--demo or all of --reasoner-url, "
            "--segmenter-url and --inpainter-url are required"
        )
    endpoint = lambda url: BackendEndpoint(  # noqa: E731
        url, timeout_s=args.timeout, retries=args.retries
    )
    return backends_from_endpoints(
        endpoint(args.reasoner_url),
        endpoint(args.segmenter_url),
        endpoint(args.inpainter_url),
        endpoint(args.metric_url) if args.metric_url else None,
    )


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig(
        mode=PipelineMode(args.mode),
        n_reflect=args.n,
        dilation_radius=args.dilation,
        base_seed=args.seed,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="locedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    edit = sub.add_parser("edit", help="apply one instruction to one image")
    edit.add_argument("-i", "--input", required=True)
    edit.add_argument("-c", "--instruction", required=True)
    edit.add_argument("-o", "--output", required=True)
    edit.add_argument("--mode", default="full", choices=[m.value for m in PipelineMode])
    edit.add_argument("--n", type=int, default=5, help="reflective samples")
    edit.add_argument("--seed", type=int, default=0)
    edit.add_argument("--dilation", type=int, default=20)
    edit.add_argument("--gt-mask", help="mask PNG, required for gtmask mode")
    edit.add_argument("--save-session", help="persist the session directory here")
    _add_backend_flags(edit)

    bench = sub.add_parser("bench", help="run the benchmark harness")
    bench.add_argument("--dataset", required=True)
    bench.add_argument("--mode", default="full", help="comma-separated modes")
    bench.add_argument("--n", type=int, default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--dilation", type=int, default=20)
    bench.add_argument("--out", help="write the report here (default stdout)")
    bench.add_argument(
        "--format", default="json", choices=["json", "csv", "markdown"]
    )
    bench.add_argument("--parallel", type=int, default=4)
    bench.add_argument(
        "--metrics",
        default="psnr,ssim",
        help="comma list from psnr,ssim,lpips,clip,succ",
    )
    bench.add_argument("--baseline", help="mode label for timing ratios")
    bench.add_argument(
        "--timings", action="store_true", help="include wall-clock section"
    )
    _add_backend_flags(bench)

    serve = sub.add_parser("serve", help="run the HTTP session gateway")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8321)
    serve.add_argument("--mode", default="full", choices=[m.value for m in PipelineMode])
    serve.add_argument("--n", type=int, default=5)
    serve.add_argument("--seed", type=int, default=0)
    serve.add_argument("--dilation", type=int, default=20)
    serve.add_argument("--max-upload-mib", type=int, default=32)
    serve.add_argument("--ui", help="directory with the built web frontend")
    _add_backend_flags(serve)

    session = sub.add_parser("session", help="inspect a saved session directory")
    session.add_argument("action", choices=["show", "verify"])
    session.add_argument("dir")
    _add_backend_flags(session)

    metrics = sub.add_parser("metrics", help="masked PSNR/SSIM between two PNGs")
    metrics.add_argument("--a", required=True, help="original image")
    metrics.add_argument("--b", required=True, help="edited image")
    metrics.add_argument("--keep", help="keep-region mask PNG (1 = evaluate)")

    return parser


def _cmd_edit(args: argparse.Namespace) -> int:
    backends = _build_backends(args)
    config = _pipeline_config(args)
    image = decode_image(Path(args.input).read_bytes())
    gt_mask = None
    if args.gt_mask:
        gt_mask = decode_mask(Path(args.gt_mask).read_bytes())
    session = new_session(image, config, backends)
    record = edit_once(session, args.instruction, gt_mask=gt_mask)
    Path(args.output).write_bytes(encode_image(record.output_image))
    if args.save_session:
        save_session(session, args.save_session)
    print(
        f"wrote {args.output} "
        f"(prompt: {record.localization.selected_prompt.text!r}, "
        f"plan: {record.modification.selected_plan.text!r})"
    )
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    backends = _build_backends(args)
    try:
        modes = [PipelineMode(m.strip()) for m in args.mode.split(",") if m.strip()]
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    if not modes:
        raise _UsageError("at least one mode required")
    configs = [
        PipelineConfig(
            mode=mode,
            n_reflect=args.n,
            dilation_radius=args.dilation,
            base_seed=args.seed,
        )
        for mode in modes
    ]
    metric_flags = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    samples = load_dataset(args.dataset)
    result = run_benchmark(
        samples,
        configs,
        backends,
        metric_flags=metric_flags,
        parallel=args.parallel,
        baseline=args.baseline,
    )
    payload = emit_report(result, format=args.format, include_timings=args.timings)
    if args.out:
        Path(args.out).write_bytes(payload)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(payload.decode("utf-8"))
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .gateway import create_app

    backends = _build_backends(args)
    app = create_app(
        backends,
        _pipeline_config(args),
        max_upload_bytes=args.max_upload_mib * 1024 * 1024,
        ui_dir=args.ui,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_session(args: argparse.Namespace) -> int:
    backends = _build_backends(args) if (args.demo or args.scenario) else None
    if backends is None:
        # inspection does not need live models; wire the demo mocks
        backends = mock_backends(build_demo_scenario())
    session = load_session(args.dir, backends)
    if args.action == "verify":
        print(f"session {session.session_id}: {len(session.records)} round(s), OK")
        return 0
    doc = session_document(session)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    a = decode_image(Path(args.a).read_bytes())
    b = decode_image(Path(args.b).read_bytes())
    keep = KeepRegion.full()
    if args.keep:
        keep = KeepRegion.from_keep_mask(decode_mask(Path(args.keep).read_bytes()))
    psnr = masked_psnr(a, b, keep)
    ssim = masked_ssim(a, b, keep)
    print(json.dumps({"psnr": psnr_json_value(psnr), "ssim": ssim}))
    return 0


_COMMANDS = {
    "edit": _cmd_edit,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
    "session": _cmd_session,
    "metrics": _cmd_metrics,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except PipelineStageError as exc:
        print(f"backend failure in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 2
    except (LoceditError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
