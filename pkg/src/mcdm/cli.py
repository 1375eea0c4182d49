"""Command line entry point: ``mcdm <subcommand> [--config F] [--seed N] [--out DIR]``.

Every subcommand ends with one ``status=... command=...`` line on stdout and
exits nonzero on error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import cache_root, load_config
from .errors import MCDMError, MissingArtifactError
from .metrics import MetricReport, render_comparison
from .pipeline import STAGES, Pipeline, run_ablation

log = logging.getLogger("mcdm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML file or profile name (default, micro, full)")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="artifact root (default: $MCDM_CACHE or ./.mcdm)")
    p.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdm", description="Motion-conditioned video diffusion pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage == "gen-flow":
            p.add_argument("--method", choices=["block_match", "import"])
            p.add_argument("--patch", type=int)
            p.add_argument("--search", type=int)
            p.add_argument("--stride", type=int)
            p.add_argument("--import-dir")
        if stage == "sample":
            p.add_argument("--cond-id", help="sample one clip conditioned on this video's motion vector")
            p.add_argument("--frames", type=int, default=16)
            p.add_argument("--sampler", choices=["ancestral", "deterministic"])
    p = sub.add_parser("run", help="run several stages in dependency order")
    _common(p)
    p.add_argument("--stages", nargs="+", choices=STAGES, default=None)
    p = sub.add_parser("ablate", help="λ1 x λ2 grid of held-out PSNR")
    _common(p)
    p.add_argument("--lambda-reid", type=float, nargs="+")
    p.add_argument("--lambda-flow", type=float, nargs="+")
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int)
    p = sub.add_parser("report", help="compare metric reports as a markdown table")
    _common(p)
    p.add_argument("reports", nargs="+", help="report JSON files written by `evaluate`")
    p.add_argument("--output", help="write the table here instead of stdout")
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.command == "gen-flow":
        pseudo = {k: v for k, v in (("flow_method", args.method), ("patch", args.patch), ("search", args.search),
                                     ("stride", args.stride), ("flow_import_dir", args.import_dir)) if v is not None}
        if pseudo:
            over["pseudo"] = pseudo
    return over


def _dispatch(args) -> str:
    if args.command == "report":
        table = render_comparison([MetricReport.load(p) for p in args.reports])
        if args.output:
            Path(args.output).write_text(table)
            return f"output={args.output}"
        print(table, end="")
        return f"reports={len(args.reports)}"
    cfg = load_config(args.config, _overrides(args))
    pipe = Pipeline(cfg, cache_root(args.out))
    if args.command == "ablate":
        result, out = run_ablation(pipe, args.lambda_reid, args.lambda_flow, args.steps, args.workers)
        print(result.to_markdown(), end="")
        failed = sum(s != "ok" for row in result.status for s in row)
        return f"cells={result.psnr.size} failed={failed} output={out}"
    if args.command == "run":
        results = pipe.run_stages(args.stages, force=args.force)
        ran = sum(r.status == "ran" for r in results)
        return f"ran={ran} skipped={len(results) - ran} root={pipe.root}"
    if args.command == "sample" and args.cond_id:
        path = pipe.sample_one(args.cond_id, args.frames, cfg.seed, args.sampler)
        return f"output={path}"
    res = pipe.run(args.command, force=args.force)
    if args.command == "evaluate":
        for txt in sorted(res.directory.glob("*.txt")):
            print(txt.read_text(), end="")
    return f"result={res.status} output={res.directory}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        detail = _dispatch(args)
    except MissingArtifactError as e:
        print(f"status=error command={args.command} missing_stage={e.stage} message={e}")
        return 2
    except (MCDMError, ValueError, KeyError, FileNotFoundError, ArithmeticError) as e:
        print(f"status=error command={args.command} error={type(e).__name__} message={e}")
        return 1
    print(f"status=ok command={args.command} {detail}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
