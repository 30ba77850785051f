import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b3c import dataset as ds
from b3c.algo.train import TrainConfig
from b3c.env import EnvConfig
from b3c.harness import cli
from b3c.harness import experiments as ex
from b3c.harness.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    format_config,
    load_config,
    parse_config,
)
from b3c.metrics import MetricsLog, MetricsRecord

TINY = ["--set", "env.n_agents=2", "--set", "env.episode_len=5", "--set", "train.total_steps=30",
        "--set", "train.eval_every=10", "--set", "train.eval_episodes=2", "--set", "train.final_eval_episodes=2",
        "--set", "train.batch_size=8", "--set", "train.hidden_width=8", "--set", "train.hidden_layers=1",
        "--set", "train.mixer_embed=4"]


# -- config -----------------------------------------------------------------------

def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg.env == EnvConfig() and cfg.train == TrainConfig()
    assert cfg.run.seeds == (0, 1, 2, 3, 4)


def test_alpha_16_parses():
    assert parse_config("alpha = 16\n").train.alpha == 16.0


def test_sections_comments_and_alias():
    text = "# header\n[env]\nn_agents = 4   # four\n[train]\nM = inf\nmixer = vdn\n[run]\nseeds = 0, 1, 2\n"
    cfg = parse_config(text)
    assert cfg.env.n_agents == 4 and math.isinf(cfg.train.clip_scale)
    assert cfg.train.mixer == "vdn" and cfg.run.seeds == (0, 1, 2)


def test_banana_names_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config("alpha = 1\n\nM = banana\n")
    assert (err.value.key, err.value.line) == ("M", 3)
    assert "line 3" in str(err.value) and "'M'" in str(err.value)


@pytest.mark.parametrize("text,key,line", [
    ("bogus = 1\n", "bogus", 1),
    ("[train]\n\nn_agents = 3\n", "n_agents", 3),
    ("[env]\nn_agents = 1\n", "n_agents", 2),
    ("gamma = 1.5\n", "gamma", 1),
    ("tier = gold\n", "tier", 1),
    ("batch_size = 2.5\n", "batch_size", 1),
])
def test_rejections_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert (err.value.key, err.value.line) == (key, line)


@pytest.mark.parametrize("text", ["[nope]\n", "[env\n", "just words\n"])
def test_structural_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides_qualified_and_bare():
    cfg = apply_overrides(RunConfig(), ["train.alpha=4", "beta=0.01", "M=0.25"])
    assert (cfg.train.alpha, cfg.train.beta, cfg.train.clip_scale) == (4.0, 0.01, 0.25)
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["alpha"])


def test_format_round_trip_defaults():
    cfg = RunConfig()
    assert parse_config(format_config(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0, 64), beta=st.floats(0, 10), m=st.one_of(st.floats(1e-3, 100), st.just(math.inf)),
       n=st.integers(2, 6), seeds=st.lists(st.integers(0, 999), min_size=1, max_size=5))
def test_format_round_trip_property(alpha, beta, m, n, seeds):
    cfg = apply_overrides(RunConfig(), [f"alpha={alpha!r}", f"beta={beta!r}", f"M={m!r}", f"n_agents={n}",
                                        f"seeds={','.join(map(str, seeds))}"])
    assert parse_config(format_config(cfg)) == cfg


def test_out_dir_default_from_environment(monkeypatch):
    monkeypatch.setenv("B3C_OUT_DIR", "/tmp/somewhere")
    assert RunConfig().run.out_dir == "/tmp/somewhere"


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


# -- CLI --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "random.b3cd"
    ds.save(ds.generate_dataset(None, EnvConfig(n_agents=2, episode_len=5), 6, 0.0, 0), path)
    return path


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("b3c-error kind=")
    return err[0]


def test_stats_prints_one_csv_row(tiny_dataset, capsys):
    assert cli.main(["stats", str(tiny_dataset)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    fields = out[0].split(",")
    s = ds.compute_stats(ds.load(tiny_dataset))
    assert [float(fields[0]), float(fields[1]), float(fields[2])] == [s.avg_return, s.max_return, s.min_return]
    assert fields[3:] == ["6", "30"]


def test_stats_header(tiny_dataset, capsys):
    cli.main(["stats", "--header", str(tiny_dataset)])
    assert capsys.readouterr().out.splitlines()[0] == ds.STATS_HEADER


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], cli.EXIT_USAGE),
    (["stats"], cli.EXIT_USAGE),
    (["stats", "/nonexistent/file.b3cd"], cli.EXIT_IO),
    (["train-offline", "--set", "M=banana", "--dataset", "x"], cli.EXIT_CONFIG),
    (["train-offline", "--out", "o"], cli.EXIT_USAGE),
])
def test_exit_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == code
    assert f"code={code}" in _error_line(capsys)


def test_exit_code_format_and_dimension(tiny_dataset, tmp_path, capsys):
    bad = tmp_path / "bad.b3cd"
    bad.write_bytes(b"NOPE" + tiny_dataset.read_bytes()[4:])
    assert cli.main(["stats", str(bad)]) == cli.EXIT_FORMAT
    assert "kind=BadMagicError" in _error_line(capsys)
    argv = ["train-offline", "--dataset", str(tiny_dataset), "--out", str(tmp_path / "o"), "--seeds", "0"]
    assert cli.main(argv + TINY + ["--set", "env.n_agents=3"]) == cli.EXIT_DIMENSION
    _error_line(capsys)


def test_distinct_exit_codes():
    codes = [cli.EXIT_USAGE, cli.EXIT_CONFIG, cli.EXIT_IO, cli.EXIT_FORMAT, cli.EXIT_DIMENSION, cli.EXIT_MISMATCH]
    assert len(set(codes)) == len(codes) and cli.EXIT_OK not in codes


@pytest.fixture(scope="module")
def offline_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train-offline", "--dataset", str(tiny_dataset), "--out", str(out), "--seeds", "0,1,2", *TINY])
    assert code == 0
    return out


def test_train_offline_writes_three_metrics_files(offline_run):
    names = sorted(p.name for p in offline_run.glob("metrics_seed*.csv"))
    assert names == ["metrics_seed0.csv", "metrics_seed1.csv", "metrics_seed2.csv"]
    assert len(list(offline_run.glob("policy_seed*.b3cp"))) == 3
    assert (offline_run / "config.ini").exists()


def test_provenance_rerun_is_bitwise(offline_run, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["train-offline", "--config", str(offline_run / "config.ini"), "--out", str(again)]) == 0
    for name in ("metrics_seed0.csv", "metrics_seed1.csv", "metrics_seed2.csv"):
        assert (again / name).read_bytes() == (offline_run / name).read_bytes()


def test_isolation_between_output_directories(tiny_dataset, offline_run, tmp_path):
    before = {p.name: p.read_bytes() for p in offline_run.iterdir() if p.is_file()}
    other = tmp_path / "other"
    argv = ["train-offline", "--dataset", str(tiny_dataset), "--out", str(other), "--seeds", "0", *TINY,
            "--set", "alpha=8"]
    assert cli.main(argv) == 0
    after = {p.name: p.read_bytes() for p in offline_run.iterdir() if p.is_file()}
    assert before == after
    assert sorted(p.name for p in other.iterdir()) == ["config.ini", "metrics_seed0.csv", "policy_seed0.b3cp"]


def test_parallel_workers_match_serial(tiny_dataset, offline_run, tmp_path):
    par = tmp_path / "par"
    argv = ["train-offline", "--dataset", str(tiny_dataset), "--out", str(par), "--seeds", "0,1,2", "--workers", "2",
            *TINY]
    assert cli.main(argv) == 0
    for name in ("metrics_seed0.csv", "metrics_seed1.csv", "metrics_seed2.csv"):
        assert (par / name).read_bytes() == (offline_run / name).read_bytes()


def test_evaluate_checkpoint(offline_run, capsys):
    argv = ["evaluate", str(offline_run / "policy_seed0.b3cp"), "--episodes", "3", "--per-episode",
            "--set", "env.n_agents=2", "--set", "env.episode_len=5"]
    assert cli.main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    mean = float(lines[0].split("=")[1])
    per = [float(x.split("return=")[1]) for x in lines[1:]]
    assert len(per) == 3 and mean == pytest.approx(np.mean(per), abs=1e-12)


def test_sweep_summary_matches_manual_aggregation(tiny_dataset, tmp_path):
    out = tmp_path / "sweep"
    argv = ["sweep", "--dataset", str(tiny_dataset), "--alpha", "0.5,4", "--seeds", "0,1", "--out", str(out), *TINY]
    assert cli.main(argv) == 0
    schema, rows = ex.read_plot_csv((out / "fig4.csv").read_text())
    assert schema == ex.FIG4_SCHEMA and [float(r["alpha"]) for r in rows] == [0.5, 4.0]
    for row in rows:
        finals = []
        for f in sorted((out / ex.arm_name({"alpha": float(row["alpha"])})).glob("metrics_seed*.csv")):
            last = [ln for ln in f.read_text().splitlines() if ln and not ln.startswith("#")][-1]
            finals.append(float(last.split(",")[1]))
        mu = sum(finals) / len(finals)
        sd = math.sqrt(sum((x - mu) ** 2 for x in finals) / len(finals))
        assert float(row["mean_return"]) == pytest.approx(mu, abs=1e-12)
        assert float(row["std_return"]) == pytest.approx(sd, abs=1e-12)
        assert row["n_seeds"] == "2"
    schema, _ = ex.read_plot_csv((out / "sweep_summary.csv").read_text())
    assert schema == ex.SUMMARY_SCHEMA


def test_sweep_needs_a_grid(tiny_dataset, capsys):
    assert cli.main(["sweep", "--dataset", str(tiny_dataset)]) == cli.EXIT_USAGE
    _error_line(capsys)


def test_sweep_rejects_unknown_parameter():
    with pytest.raises(ValueError):
        ex.run_sweep(None, RunConfig(), {"gamma": [0.9]}, "x")


def test_sweep_arms_cartesian():
    arms = ex.sweep_arms({"alpha": [1, 2], "mixer": ["vdn", "mono", "nonmono"]})
    assert len(arms) == 6 and arms[0] == {"alpha": 1, "mixer": "vdn"}


# -- diagnosis ----------------------------------------------------------------------

def _log(finals, diverged=None, tmax=1.0, crc="abc", env="E"):
    meta = {"algorithm": "bc", "divergence_threshold": "100.0", "dataset_crc": crc, "env": env, "seed": "0"}
    recs = [MetricsRecord(step=1000 * (i + 1), eval_return=v, target_q_mean=tmax / 2, target_q_max=tmax)
            for i, v in enumerate(finals)]
    if diverged is not None:
        recs[-1].diverged_at = diverged
    return MetricsLog(recs, meta)


def test_identical_logs_give_zero_difference():
    d = ex.diagnose([_log([-50.0, -40.0])], [_log([-50.0, -40.0])])
    assert d.worst_pct_difference == 0.0
    assert d.events == {"bc": [], "b3c": []}


def test_diverged_log_reported_with_step():
    d = ex.diagnose([_log([-60.0, -70.0], diverged=1234)], [_log([-45.0])])
    assert [(e.step, e.kind) for e in d.events["bc"]] == [(1234, "halt")]
    assert d.events["b3c"] == []
    assert "step 1234" in d.to_text()
    # worst b3c -45 against worst bc -70: 100 * 25 / 70
    assert d.worst_pct_difference == pytest.approx(100 * 25 / 70, abs=1e-12)


def test_target_above_threshold_is_an_event():
    d = ex.diagnose([_log([-1.0], tmax=150.0)], [_log([-1.0], tmax=99.0)])
    assert [e.kind for e in d.events["bc"]] == ["target"] and d.events["b3c"] == []
    assert d.max_target_q == {"bc": 150.0, "b3c": 99.0}


@pytest.mark.parametrize("kw", [dict(crc="other"), dict(env="F")])
def test_mismatched_logs_rejected(kw):
    with pytest.raises(ex.DiagnoseError):
        ex.diagnose([_log([-1.0])], [_log([-1.0], **kw)])


def test_diagnose_needs_both_variants():
    with pytest.raises(ex.DiagnoseError):
        ex.diagnose([], [_log([-1.0])])


def test_diagnose_cli_writes_reports(tmp_path, capsys):
    _log([-60.0], diverged=500).write(tmp_path / "bc" / "metrics_seed0.csv")
    _log([-40.0]).write(tmp_path / "b3c" / "metrics_seed0.csv")
    argv = ["diagnose", "--bc", str(tmp_path / "bc"), "--b3c", str(tmp_path / "b3c"), "--out", str(tmp_path / "d")]
    assert cli.main(argv) == 0
    schema, rows = ex.read_plot_csv((tmp_path / "d" / "diagnose.csv").read_text())
    assert schema == ex.DIAGNOSE_SCHEMA and rows[0]["first_event_step"] == "500"
    _log([-40.0], env="other").write(tmp_path / "b3c2" / "metrics_seed0.csv")
    argv[4] = str(tmp_path / "b3c2")
    assert cli.main(argv) == cli.EXIT_MISMATCH
    assert "kind=mismatch" in _error_line(capsys)


@pytest.mark.parametrize("v,ref,expected", [(5.0, 5.0, 0.0), (-40.0, -50.0, 20.0), (-60.0, -50.0, -20.0),
                                            (2.0, 4.0, -50.0)])
def test_pct_difference(v, ref, expected):
    assert ex.pct_difference(v, ref) == pytest.approx(expected, abs=1e-12)


# -- figure data ---------------------------------------------------------------------

def test_fig5_schema_and_seed_means():
    bc = [_log([-10.0, -20.0], tmax=4.0), _log([-30.0, -40.0], tmax=8.0)]
    b3c = [_log([-1.0, -2.0], tmax=2.0)]
    schema, rows = ex.read_plot_csv(ex.fig5_csv(bc, b3c))
    assert schema == ex.FIG5_SCHEMA
    assert list(rows[0]) == ["step", "return_bc", "return_b3c", "target_bc", "target_b3c"]
    assert float(rows[1]["return_bc"]) == -30.0 and float(rows[1]["target_bc"]) == 3.0
    assert float(rows[0]["return_b3c"]) == -1.0


def test_fig6_schema_and_values():
    means = {("medium", "nonmono"): -50.0, ("medium", "vdn"): -40.0, ("medium", "mono"): -55.0,
             ("expert", "nonmono"): -20.0, ("expert", "vdn"): -20.0, ("expert", "mono"): -10.0}
    schema, rows = ex.read_plot_csv(ex.fig6_csv(ex.fig6_rows(means)))
    assert schema == ex.FIG6_SCHEMA
    assert list(rows[0]) == ["dataset_tier", "vdn_minus_nonmono", "mono_minus_nonmono"]
    got = {r["dataset_tier"]: (float(r["vdn_minus_nonmono"]), float(r["mono_minus_nonmono"])) for r in rows}
    assert got == {"expert": (0.0, 50.0), "medium": (20.0, -10.0)}


def test_fig6_missing_arm():
    with pytest.raises(ValueError):
        ex.fig6_rows({("medium", "vdn"): 1.0, ("medium", "mono"): 1.0})


def test_every_csv_starts_with_schema(offline_run):
    for f in offline_run.glob("*.csv"):
        assert f.read_text().startswith("# schema=")


def test_read_plot_csv_requires_schema():
    with pytest.raises(ValueError):
        ex.read_plot_csv("a,b\n1,2\n")


def test_metrics_log_invariants():
    log = MetricsLog()
    log.append(MetricsRecord(step=1, eval_return=0.0))
    with pytest.raises(ValueError):
        log.append(MetricsRecord(step=1, eval_return=0.0))
    with pytest.raises(ValueError):
        log.append(MetricsRecord(step=2, eval_return=0.0, clip_active_fraction=1.5))
    log.append(MetricsRecord(step=2, eval_return=0.0, diverged_at=2))
    with pytest.raises(ValueError):
        log.append(MetricsRecord(step=3, eval_return=0.0, diverged_at=3))


def test_metrics_csv_round_trip(offline_run):
    text = (offline_run / "metrics_seed0.csv").read_text()
    assert MetricsLog.from_csv(text).to_csv() == text


def test_sweep_rejects_duplicate_tiers(tiny_dataset, tmp_path, capsys):
    argv = ["sweep", "--dataset", str(tiny_dataset), "--dataset", str(tiny_dataset), "--mixer", "vdn",
            "--seeds", "0", "--out", str(tmp_path), *TINY]
    assert cli.main(argv) == cli.EXIT_USAGE
    assert "distinct tier tags" in _error_line(capsys)
