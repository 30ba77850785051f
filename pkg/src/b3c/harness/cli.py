"""``b3c`` command line.

Failures print exactly one line to stderr::

    b3c-error kind=<kind> code=<exit code> message=<JSON string>

Exit codes: 0 success, 2 usage, 3 config, 4 missing/unreadable file,
5 corrupt file, 6 dimension mismatch, 7 incomparable logs, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import binfmt
from .. import dataset as ds
from ..algo.checkpoint import load_policies
from ..algo.tiers import TIER_NAMES, build_tier, plan_tiers
from ..algo.train import evaluate_policy, train_online
from ..dataset import IncompatibleDatasetError
from ..metrics import MetricsLog
from . import experiments as ex
from .config import ConfigError, RunConfig, apply_overrides, echo_config, load_config

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_FORMAT = 5
EXIT_DIMENSION = 6
EXIT_MISMATCH = 7


class UsageError(Exception):
    pass


def _fail(kind: str, code: int, message: str) -> int:
    print(f"b3c-error kind={kind} code={code} message={json.dumps(message)}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line instead of usage + message
        raise UsageError(message)


# -- argument helpers ----------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable), e.g. train.alpha=16")
    p.add_argument("--out", help="output directory (default: run.out_dir, from B3C_OUT_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="b3c", description="Offline multi-agent RL with BC regularization and critic clipping.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-online", help="online FACMAC run that produces tier checkpoints")
    _common(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-dataset", help="generate a quality-tier dataset")
    _common(p)
    p.add_argument("--tier", choices=TIER_NAMES)
    p.add_argument("--from-run", help="train-online output directory (not needed for random)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="dataset file (default: <out>/<tier>.b3cd)")

    p = sub.add_parser("stats", help="print dataset statistics as one CSV row")
    p.add_argument("dataset")
    p.add_argument("--header", action="store_true", help="print the column names first")

    p = sub.add_parser("train-offline", help="train B3C or BC on a dataset for each seed")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("evaluate", help="noise-free evaluation of a policy checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-episode", action="store_true")

    p = sub.add_parser("sweep", help="grid over alpha / beta / M / mixer / algorithm, all seeds")
    _common(p)
    p.add_argument("--dataset", action="append", default=[], help="dataset file (repeat for several tiers)")
    p.add_argument("--alpha", type=_floats)
    p.add_argument("--beta", type=_floats)
    p.add_argument("--M", dest="clip_scale", type=_floats, help="critic clipping scales; inf disables")
    p.add_argument("--mixer", type=_words)
    p.add_argument("--algorithm", type=_words)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("diagnose", help="compare BC and B3C metrics logs")
    _common(p)
    p.add_argument("--bc", nargs="+", required=True, help="metrics files or run directories")
    p.add_argument("--b3c", nargs="+", required=True, help="metrics files or run directories")
    return parser


def _resolve_config(args, extra: list[str] = ()) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, list(args.set) + list(extra))
    if args.out:
        cfg = replace(cfg, run=replace(cfg.run, out_dir=args.out))
    return cfg, Path(cfg.run.out_dir)


def _seed_override(seeds) -> list[str]:
    return [f"run.seeds={','.join(map(str, seeds))}"] if seeds else []


# -- commands -------------------------------------------------------------------

def cmd_train_online(args) -> int:
    extra = [f"train.seed={args.seed}"] if args.seed is not None else []
    cfg, out = _resolve_config(args, extra)
    echo_config(cfg, out)
    result = train_online(cfg.env, cfg.train)
    ex.save_online_run(result, out, cfg.train.seed)
    for c in result.checkpoints:
        print(f"checkpoint step={c.step} eval_return={c.eval_return!r}")
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    extra = []
    for flag, key in ((args.tier, "data.tier"), (args.episodes, "data.n_episodes"),
                      (args.noise, "data.noise_std"), (args.seed, "data.seed")):
        if flag is not None:
            extra.append(f"{key}={flag}")
    cfg, out = _resolve_config(args, extra)
    d = cfg.data
    online = ex.load_online_run(args.from_run) if args.from_run else None
    if online is None and d.tier != "random":
        raise UsageError(f"tier {d.tier!r} needs --from-run")
    plan = plan_tiers(online, cfg.env, seed=d.seed) if online is not None and d.tier != "random" else None
    dataset = build_tier(d.tier, online, cfg.env, d.n_episodes, d.seed, d.noise_std, plan)
    path = Path(args.output) if args.output else out / f"{d.tier}.b3cd"
    path.parent.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, path.parent)
    ds.save(dataset, path)
    if plan is not None:
        print(f"# random_return={plan.random_return!r} threshold={plan.threshold!r} "
              f"medium_step={plan.medium.step} expert_step={plan.expert.step}")
    print(ds.compute_stats(dataset).csv_row())
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.header:
        print(ds.STATS_HEADER)
    print(ds.compute_stats(ds.load(args.dataset)).csv_row())
    return EXIT_OK


def _dataset_path(args_dataset, cfg: RunConfig) -> str:
    path = args_dataset or cfg.run.dataset
    if not path:
        raise UsageError("no dataset given (use --dataset or run.dataset)")
    return path


def cmd_train_offline(args) -> int:
    extra = _seed_override(args.seeds)
    if args.dataset:
        extra.append(f"run.dataset={Path(args.dataset).resolve()}")
    cfg, out = _resolve_config(args, extra)
    dataset = ds.load(_dataset_path(None, cfg))
    r_star_note(cfg, dataset)
    for path in ex.run_seeds(dataset, cfg, out, workers=args.workers):
        lg = MetricsLog.read(path)
        print(f"{path.name} final_return={lg.final_return!r} diverged_at={lg.diverged_at}")
    return EXIT_OK


def r_star_note(cfg: RunConfig, dataset) -> None:
    if cfg.train.algorithm == "b3c":
        from ..algo.core import compute_r_star

        r_star = compute_r_star(dataset, cfg.train.clip_scale)
        sign = "positive" if r_star > 0 else ("zero" if r_star == 0 else "negative")
        logging.getLogger("b3c").info("R* = %r (%s)", r_star, sign)


def cmd_evaluate(args) -> int:
    cfg, _ = _resolve_config(args)
    policies, _ = load_policies(args.checkpoint)
    mean, returns = evaluate_policy(policies, cfg.env, args.episodes, args.seed)
    print(f"mean_return={mean!r}")
    if args.per_episode:
        for i, r in enumerate(returns):
            print(f"episode={i} return={float(r)!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    grid = {k: getattr(args, k) for k in ("alpha", "beta", "clip_scale", "mixer", "algorithm")
            if getattr(args, k)}
    if not grid:
        raise UsageError("nothing to sweep; give at least one of --alpha --beta --M --mixer --algorithm")
    cfg, out = _resolve_config(args, _seed_override(args.seeds))
    paths = args.dataset or ([cfg.run.dataset] if cfg.run.dataset else [])
    if not paths:
        raise UsageError("no dataset given (use --dataset or run.dataset)")
    datasets = [ds.load(p) for p in paths]
    tags = [d.meta.tag for d in datasets]
    if len(set(tags)) < len(tags):
        raise UsageError(f"datasets must have distinct tier tags, got {tags}")
    by_tier: dict[str, list] = {}
    for p, dataset in zip(paths, datasets):
        tier_out = out / dataset.meta.tag if len(paths) > 1 else out
        dcfg = replace(cfg, run=replace(cfg.run, dataset=str(Path(p).resolve())))
        summaries = ex.run_sweep(dataset, dcfg, grid, tier_out, workers=args.workers)
        (tier_out / "sweep_summary.csv").write_text(ex.summary_csv(summaries))
        (tier_out / "fig4.csv").write_text(ex.fig4_csv(summaries))
        by_tier[dataset.meta.tag] = summaries
        print(f"# dataset={p} tier={dataset.meta.tag}")
        print(ex.summary_csv(summaries), end="")
    mixers = set(grid.get("mixer", []))
    if {"vdn", "mono", "nonmono"} <= mixers and len(grid) == 1:
        means = {(t, s.params["mixer"]): s.mean for t, sums in by_tier.items() for s in sums}
        (out / "fig6.csv").write_text(ex.fig6_csv(ex.fig6_rows(means)))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _, out = _resolve_config(args)
    report = ex.diagnose(ex.collect_logs(args.bc), ex.collect_logs(args.b3c))
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnose.txt").write_text(report.to_text())
    (out / "diagnose.csv").write_text(report.to_csv())
    (out / "fig5.csv").write_text(ex.fig5_csv(ex.collect_logs(args.bc), ex.collect_logs(args.b3c)))
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "train-online": cmd_train_online,
    "gen-dataset": cmd_gen_dataset,
    "stats": cmd_stats,
    "train-offline": cmd_train_offline,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except IncompatibleDatasetError as exc:
        return _fail("dimension", EXIT_DIMENSION, str(exc))
    except ex.DiagnoseError as exc:
        return _fail("mismatch", EXIT_MISMATCH, str(exc))
    except binfmt.FormatError as exc:
        return _fail(type(exc).__name__, EXIT_FORMAT, str(exc))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        msg = f"{exc.strerror}: {exc.filename}" if exc.strerror else str(exc)
        return _fail("io", EXIT_IO, msg)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
