"""Multi-seed orchestration, sweeps, divergence diagnosis and figure data files.

Every CSV written here starts with a ``# schema=<name>/<version>`` line.
Column meanings:

fig4 (``b3c-fig4/1``)
    one row per sweep arm: the swept parameters, ``mean_return``,
    ``std_return`` (population std over seeds), ``n_seeds``.
fig5 (``b3c-fig5/1``)
    ``step, return_bc, return_b3c, target_bc, target_b3c``; seed means of
    ``eval_return`` and ``target_q_mean`` at each logged step, blank where no
    seed of that variant logged the step.
fig6 (``b3c-fig6/1``)
    ``dataset_tier, vdn_minus_nonmono, mono_minus_nonmono``; percentage
    differences of mean final return relative to ``|nonmono|``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import dataset as ds
from ..algo.checkpoint import load_policies, save_policies
from ..algo.train import Checkpoint, train_offline
from ..metrics import MetricsLog
from .config import RunConfig, echo_config, format_config

FIG4_SCHEMA = "b3c-fig4/1"
FIG5_SCHEMA = "b3c-fig5/1"
FIG6_SCHEMA = "b3c-fig6/1"
SUMMARY_SCHEMA = "b3c-sweep/1"
DIAGNOSE_SCHEMA = "b3c-diagnose/1"

SWEEPABLE = {"alpha": float, "beta": float, "clip_scale": float, "mixer": str, "algorithm": str}


class DiagnoseError(ValueError):
    """The logs handed to ``diagnose`` do not describe comparable runs."""


def metrics_filename(seed: int) -> str:
    return f"metrics_seed{seed}.csv"


def policy_filename(seed: int) -> str:
    return f"policy_seed{seed}.b3cp"


# -- running ---------------------------------------------------------------

def run_one_seed(dataset: ds.OfflineDataset, cfg: RunConfig, seed: int, out_dir) -> Path:
    """Train one seed and write its metrics and final policy under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train_offline(dataset, replace(cfg.train, seed=seed), cfg.env)
    path = result.metrics.write(out / metrics_filename(seed))
    save_policies(result.policies, out / policy_filename(seed),
                  {"seed": seed, "step": result.metrics.records[-1].step if result.metrics.records else 0})
    return path


def _worker(args):
    dataset_bytes, config_text, seed, out_dir = args
    from .config import parse_config

    return run_one_seed(ds.from_bytes(dataset_bytes), parse_config(config_text), seed, out_dir)


def run_seeds(dataset: ds.OfflineDataset, cfg: RunConfig, out_dir, seeds=None, workers: int = 1) -> list[Path]:
    """One run per seed; the resolved config is echoed into ``out_dir`` first."""
    seeds = list(cfg.run.seeds if seeds is None else seeds)
    echo_config(cfg, out_dir)
    if workers <= 1:
        return [run_one_seed(dataset, cfg, s, out_dir) for s in seeds]
    blob, text = ds.to_bytes(dataset), format_config(cfg)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, [(blob, text, s, str(out_dir)) for s in seeds]))


def arm_name(params: dict) -> str:
    return "_".join(f"{k}-{_fmt(v)}" for k, v in params.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def sweep_arms(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class ArmSummary:
    params: dict
    finals: list[float]
    divergences: int
    max_target_q: float
    directory: str = ""

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def std(self) -> float:
        return float(np.std(self.finals))

    @property
    def worst(self) -> float:
        return float(np.min(self.finals))


def summarize(logs: list[MetricsLog], params: dict | None = None, directory: str = "") -> ArmSummary:
    if not logs:
        raise ValueError("no metrics logs to summarize")
    return ArmSummary(
        params=dict(params or {}),
        finals=[lg.final_return for lg in logs],
        divergences=sum(1 for lg in logs if divergence_events(lg)),
        max_target_q=max(lg.max_target_q() for lg in logs),
        directory=directory,
    )


def run_sweep(dataset: ds.OfflineDataset, cfg: RunConfig, grid: dict[str, list], out_dir,
              seeds=None, workers: int = 1) -> list[ArmSummary]:
    """Train every arm of ``grid`` for every seed; one sub-directory per arm."""
    for k in grid:
        if k not in SWEEPABLE:
            raise ValueError(f"cannot sweep {k!r}; choose from {sorted(SWEEPABLE)}")
    out = Path(out_dir)
    seeds = list(cfg.run.seeds if seeds is None else seeds)
    summaries = []
    for params in sweep_arms(grid):
        arm_cfg = RunConfig(cfg.env, replace(cfg.train, **params), cfg.data, replace(cfg.run, seeds=tuple(seeds)))
        arm_dir = out / arm_name(params)
        paths = run_seeds(dataset, arm_cfg, arm_dir, seeds, workers)
        summaries.append(summarize([MetricsLog.read(p) for p in paths], params, str(arm_dir)))
    return summaries


# -- diagnosis ---------------------------------------------------------------

@dataclass
class DivergenceEvent:
    seed: str
    step: int
    kind: str  # "halt" or "target"


def divergence_events(log: MetricsLog) -> list[DivergenceEvent]:
    """Halts, plus logged windows whose max target exceeded the run's threshold."""
    seed = log.meta.get("seed", "?")
    events = []
    if log.diverged_at is not None:
        events.append(DivergenceEvent(seed, log.diverged_at, "halt"))
    thr = float(log.meta.get("divergence_threshold", "inf"))
    for r in log.records:
        if not math.isnan(r.target_q_max) and abs(r.target_q_max) > thr:
            events.append(DivergenceEvent(seed, r.step, "target"))
            break
    return events


def pct_difference(value: float, reference: float) -> float:
    """``100 * (value - reference) / |reference|``; 0 when both are equal."""
    if value == reference:
        return 0.0
    if reference == 0:
        return math.copysign(math.inf, value - reference)
    return 100.0 * (value - reference) / abs(reference)


@dataclass
class Diagnosis:
    events: dict[str, list[DivergenceEvent]]
    worst: dict[str, float]
    max_target_q: dict[str, float]
    worst_pct_difference: float  # B3C relative to BC
    n_seeds: dict[str, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for v in ("bc", "b3c"):
            ev = self.events[v]
            desc = ", ".join(f"seed {e.seed} step {e.step} ({e.kind})" for e in ev) or "none"
            lines.append(f"{v}: seeds={self.n_seeds[v]} divergence_events={len(ev)} [{desc}]")
            lines.append(f"{v}: worst_seed_final_return={self.worst[v]!r} max_target_q={self.max_target_q[v]!r}")
        lines.append(f"worst_seed_pct_difference_b3c_vs_bc={self.worst_pct_difference!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={DIAGNOSE_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seeds", "divergence_events", "first_event_step", "worst_final_return",
                    "max_target_q", "worst_pct_difference_vs_bc"])
        for v in ("bc", "b3c"):
            ev = self.events[v]
            w.writerow([v, self.n_seeds[v], len(ev), ev[0].step if ev else "", repr(self.worst[v]),
                        repr(self.max_target_q[v]), repr(0.0 if v == "bc" else self.worst_pct_difference)])
        return buf.getvalue()


def _check_comparable(logs: list[MetricsLog]) -> None:
    for key in ("dataset_crc", "env"):
        seen = {lg.meta[key] for lg in logs if key in lg.meta}
        if len(seen) > 1:
            raise DiagnoseError(f"logs disagree on {key}: {sorted(seen)}")


def diagnose(bc_logs: list[MetricsLog], b3c_logs: list[MetricsLog]) -> Diagnosis:
    if not bc_logs or not b3c_logs:
        raise DiagnoseError("need at least one seed per variant")
    _check_comparable(bc_logs + b3c_logs)
    groups = {"bc": bc_logs, "b3c": b3c_logs}
    worst = {v: min(lg.final_return for lg in logs) for v, logs in groups.items()}
    return Diagnosis(
        events={v: [e for lg in logs for e in divergence_events(lg)] for v, logs in groups.items()},
        worst=worst,
        max_target_q={v: max(lg.max_target_q() for lg in logs) for v, logs in groups.items()},
        worst_pct_difference=pct_difference(worst["b3c"], worst["bc"]),
        n_seeds={v: len(logs) for v, logs in groups.items()},
    )


# -- figure data -------------------------------------------------------------

def _seed_mean_by_step(logs: list[MetricsLog], column: str) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for lg in logs:
        for r in lg.records:
            acc.setdefault(r.step, []).append(getattr(r, column))
    return {s: float(np.mean(v)) for s, v in acc.items()}


def fig5_csv(bc_logs: list[MetricsLog], b3c_logs: list[MetricsLog]) -> str:
    cols = {
        "return_bc": _seed_mean_by_step(bc_logs, "eval_return"),
        "return_b3c": _seed_mean_by_step(b3c_logs, "eval_return"),
        "target_bc": _seed_mean_by_step(bc_logs, "target_q_mean"),
        "target_b3c": _seed_mean_by_step(b3c_logs, "target_q_mean"),
    }
    steps = sorted(set().union(*cols.values()))
    buf = io.StringIO()
    buf.write(f"# schema={FIG5_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", *cols])
    for s in steps:
        w.writerow([s, *(repr(c[s]) if s in c else "" for c in cols.values())])
    return buf.getvalue()


def fig4_csv(summaries: list[ArmSummary]) -> str:
    keys = list(summaries[0].params) if summaries else []
    buf = io.StringIO()
    buf.write(f"# schema={FIG4_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*keys, "mean_return", "std_return", "n_seeds"])
    for s in summaries:
        w.writerow([*(_fmt(s.params[k]) for k in keys), repr(s.mean), repr(s.std), len(s.finals)])
    return buf.getvalue()


def summary_csv(summaries: list[ArmSummary]) -> str:
    keys = list(summaries[0].params) if summaries else []
    buf = io.StringIO()
    buf.write(f"# schema={SUMMARY_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", *keys, "n_seeds", "mean_return", "std_return", "worst_return", "divergences",
                "max_target_q"])
    for s in summaries:
        w.writerow([arm_name(s.params), *(_fmt(s.params[k]) for k in keys), len(s.finals), repr(s.mean),
                    repr(s.std), repr(s.worst), s.divergences, repr(s.max_target_q)])
    return buf.getvalue()


def fig6_rows(means: dict[tuple[str, str], float]) -> list[tuple[str, float, float]]:
    """``means[(tier, mixer)]`` -> rows of percentage differences against nonmono."""
    tiers = sorted({t for t, _ in means})
    rows = []
    for t in tiers:
        try:
            ref = means[(t, "nonmono")]
            rows.append((t, pct_difference(means[(t, "vdn")], ref), pct_difference(means[(t, "mono")], ref)))
        except KeyError as exc:
            raise ValueError(f"tier {t!r} lacks a {exc.args[0][1]} arm") from None
    return rows


def fig6_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={FIG6_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset_tier", "vdn_minus_nonmono", "mono_minus_nonmono"])
    for t, a, b in rows:
        w.writerow([t, repr(a), repr(b)])
    return buf.getvalue()


def read_plot_csv(text: str) -> tuple[str, list[dict]]:
    """Inverse of the fig/summary writers: (schema, rows as string dicts)."""
    lines = text.splitlines()
    m = re.fullmatch(r"# schema=(\S+)", lines[0]) if lines else None
    if m is None:
        raise ValueError("missing schema line")
    return m.group(1), list(csv.DictReader(lines[1:]))


def collect_logs(paths) -> list[MetricsLog]:
    """Metrics logs from files or from directories holding ``metrics_seed*.csv``."""
    logs = []
    for p in map(Path, paths):
        files = sorted(p.glob("metrics_seed*.csv")) if p.is_dir() else [p]
        if not files:
            raise FileNotFoundError(f"no metrics files under {p}")
        logs += [MetricsLog.read(f) for f in files]
    return logs


# -- online runs on disk -------------------------------------------------------

HISTORY_FILENAME = "history.b3cd"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class OnlineRun:
    """What tier construction needs from a finished online run."""

    checkpoints: list
    history: ds.OfflineDataset


def save_online_run(result, out_dir, seed: int) -> Path:
    out = Path(out_dir)
    (out / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    for c in result.checkpoints:
        save_policies(c.policies, out / CHECKPOINT_DIR / f"step_{c.step:07d}.b3cp",
                      {"step": c.step, "eval_return": c.eval_return, "seed": seed})
    ds.save(result.history, out / HISTORY_FILENAME)
    return result.metrics.write(out / metrics_filename(seed))


def load_online_run(run_dir) -> OnlineRun:
    run = Path(run_dir)
    files = sorted((run / CHECKPOINT_DIR).glob("step_*.b3cp"))
    if not files:
        raise FileNotFoundError(f"no checkpoints under {run / CHECKPOINT_DIR}")
    checkpoints = []
    for f in files:
        policies, header = load_policies(f)
        checkpoints.append(Checkpoint(int(header["step"]), policies, float(header["eval_return"])))
    return OnlineRun(checkpoints, ds.load(run / HISTORY_FILENAME))
