"""Command line entry point; each pipeline stage is its own subcommand.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import CfsteerError, ConfigError
from .config import RunConfig

log = logging.getLogger("cfsteer")


def _config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_changes(seed=args.seed, **{"steering.seed": args.seed})
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError("expected KEY=VALUE", "--set")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg = cfg.with_changes(**{key: value})
    return cfg.validate()


def cmd_dataset(args, cfg):
    from ..synthspur import save_dataset
    from .artifacts import make_datasets

    out = Path(args.out)
    for name, ds in zip(("train", "val", "test"), make_datasets(cfg.dataset)):
        save_dataset(ds, out / name)
        print(f"{name}: {len(ds)} images, agreement {ds.agreement_rate():.3f}, sha256 {ds.checksum()[:12]}")


def cmd_train_classifier(args, cfg):
    from ..models import accuracy
    from .artifacts import artifact_paths, ensure_classifier, make_datasets

    datasets = make_datasets(cfg.dataset)
    f = ensure_classifier(cfg, datasets, train=True)
    print(f"classifier {artifact_paths(cfg)['classifier']} val_acc {accuracy(f, datasets[1].images, datasets[1].labels):.4f}")


def cmd_train_ddpm(args, cfg):
    from .artifacts import artifact_paths, ensure_denoiser

    ensure_denoiser(cfg, train=True)
    print(f"denoiser {artifact_paths(cfg)['denoiser']}")


def cmd_fit_causal(args, cfg):
    from .artifacts import artifact_paths, ensure_causal

    projection, _ = ensure_causal(cfg, train=True)
    print(f"causal rank {projection.rank}; head {artifact_paths(cfg)['head']}")


def cmd_generate(args, cfg):
    from .run import run_experiment

    run_dir, report = run_experiment(cfg)
    print(run_dir)
    print(json.dumps(report.summary(), indent=1, sort_keys=True))


def cmd_evaluate(args, cfg):
    from .artifacts import load_artifacts
    from .run import evaluate, load_results

    run_dir = Path(args.run)
    cfg = RunConfig.load(run_dir / "config.json")
    report = evaluate(cfg, load_artifacts(cfg), load_results(run_dir))
    print(json.dumps(report.summary(), indent=1, sort_keys=True))


def cmd_sweep_alpha(args, cfg):
    from .sweep import sweep_alpha

    sweep_dir, summary = sweep_alpha(cfg, args.grid)
    print(sweep_dir)
    for row in summary["runs"]:
        print(f"alpha {row['alpha']:g}: fr {row['fr']:.3f} fid {row['fid']:.4f} cd {row['cd']:.3f}")


def cmd_judge(args, cfg):
    from .judge import JudgeConfig, save_judge_report, vlm_judge
    from .run import load_results

    run_dir = Path(args.run)
    jcfg = JudgeConfig(endpoint=args.endpoint, model=args.model, api_key_env=args.api_key_env)
    jcfg.api_key()
    report = vlm_judge(load_results(run_dir), args.kind, jcfg)
    path = save_judge_report(report, run_dir / "judge.json")
    print(path)
    print(json.dumps(report.summary(), indent=1, sort_keys=True))


def cmd_report(args, cfg):
    from .report import emit_report

    print(emit_report(args.run))


def build_parser():
    p = argparse.ArgumentParser(prog="cfsteer", description="Causally steered counterfactual explanations.")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the run and steering seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, JSON value")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("dataset", help="write train/val/test splits as PNG + manifest")
    sp.add_argument("--out", default="data")
    sp.set_defaults(fn=cmd_dataset)
    sub.add_parser("train-classifier", help="train the explained classifier").set_defaults(fn=cmd_train_classifier)
    sub.add_parser("train-ddpm", help="train the denoiser").set_defaults(fn=cmd_train_ddpm)
    sub.add_parser("fit-causal", help="fit the projection and the spurious head").set_defaults(fn=cmd_fit_causal)
    sub.add_parser("generate", help="full run: generate, refine, evaluate").set_defaults(fn=cmd_generate)
    sp = sub.add_parser("evaluate", help="recompute metrics for a run directory")
    sp.add_argument("run")
    sp.set_defaults(fn=cmd_evaluate)
    sp = sub.add_parser("sweep-alpha", help="one run per spurious weight")
    sp.add_argument("--grid", type=float, nargs="+", default=[0.0, 0.1, 0.5, 1.0, 5.0])
    sp.set_defaults(fn=cmd_sweep_alpha)
    sp = sub.add_parser("judge", help="score a run with a vision-language judge")
    sp.add_argument("run")
    sp.add_argument("--endpoint", required=True)
    sp.add_argument("--model", default="judge")
    sp.add_argument("--kind", default="synthspur")
    sp.add_argument("--api-key-env", default="CFSTEER_JUDGE_API_KEY")
    sp.set_defaults(fn=cmd_judge)
    sp = sub.add_parser("report", help="render report.html for a run or sweep directory")
    sp.add_argument("run")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        args.fn(args, cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (CfsteerError, OSError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
