import csv
import json

import numpy as np
import pytest

from fedfmri.cli import main
from fedfmri.nn import load_checkpoint
from fedfmri.config import ConfigError, ExperimentConfig, load_config, parse_config
from fedfmri.experiments import Cell, config_from_json, config_to_json, run_cells, summarize

TINY = """\
data:
  stride: 8
  synth: {n_sites: 2, subjects_per_class: 3, n_rois: 8, n_frames: 48, informative_roi_count: 4, shift_strength: 0.3}
strategies: [single, fed, fed-moe, fed-align]
fed: {epochs: 2, steps_per_epoch: 4, tau: 2, lr: 0.001}
adapt: {warmup_epochs: 1}
tau_grid: [1, 2]
k_folds: 3
seeds: [0, 1]
noise_grid: [{mechanism: gaussian, alpha: 0.01}, {mechanism: laplace, alpha: 1.0}]
interpret: {k: 3}
"""

RESULT_FILES = ("results.csv", "telemetry.csv", "gates.csv", "disc_accuracy.csv", "budget.csv")


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_defaults_without_keys():
    cfg = parse_config("")
    assert cfg == ExperimentConfig(base_dir=".")
    assert cfg.seeds == list(range(10))


def test_partial_section_keeps_other_defaults():
    cfg = parse_config("fed:\n  tau: 5\n")
    assert cfg.fed.tau == 5
    assert cfg.fed.steps_per_epoch == 60
    assert cfg.fed.noise.mechanism == "gaussian"


@pytest.mark.parametrize("text,line,fragment", [
    ("fed:\n  epoch: 3\n", 2, "did you mean 'epochs'"),
    ("seeds: [1, 1]\n", 1, "duplicate seeds"),
    ("strategies: []\n", 1, "strategy list is empty"),
    ("k_folds: 1\n", 1, "at least 2 folds"),
    ("data:\n  synth:\n    n_rois: ten\n", 3, "expected an integer"),
    ("strategies: [fed, bogus]\n", 1, "strategies.1"),
    ("fed:\n  tau: 0\n", 1, "tau"),
    ("fed: [1, 2]\n", 1, "expected a mapping"),
    ("data:\n  source: csv\n", 1, "series_dir"),
    ("fed: {epochs: 3\n", 2, "YAML syntax error"),
])
def test_config_errors_name_line_and_field(text, line, fragment):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "x.yaml")
    assert fragment in str(err.value)
    assert err.value.line == line
    assert str(err.value).startswith(f"x.yaml:{line}:")


def test_bool_is_not_an_int():
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("k_folds: true\n")


def test_paths_resolve_against_config_dir(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("out: res\n")
    cfg = load_config(p)
    assert cfg.resolve(cfg.out) == tmp_path / "res"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")


def test_config_json_round_trip(tiny):
    cfg = load_config(tiny)
    assert config_from_json(config_to_json(cfg)) == cfg
    shifted = parse_config("data:\n  synth:\n    site_shift: {3: 2.0}\n")
    assert config_from_json(config_to_json(shifted)).data.synth.site_shift == {3: 2.0}


def test_site_shift_keys_must_be_integers():
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config("data:\n  synth:\n    site_shift: {a: 2.0}\n")


# ---------------------------------------------------------------- CLI


def test_run_twice_is_byte_identical(tiny, tmp_path):
    assert main(["run", str(tiny), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(tiny), "--out", str(tmp_path / "b")]) == 0
    for name in RESULT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_worker_processes_do_not_change_results(tiny, tmp_path):
    main(["run", str(tiny), "--out", str(tmp_path / "a")])
    main(["run", str(tiny), "--out", str(tmp_path / "b"), "--threads", "2"])
    for name in RESULT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_run_outputs(tiny, tmp_path):
    main(["run", str(tiny), "--out", str(tmp_path)])
    res = rows(tmp_path / "results.csv")
    # 4 strategies x 2 seeds x 3 folds x 2 sites
    assert len(res) == 48
    assert {r["strategy"] for r in res} == {"single", "fed", "fed-moe", "fed-align"}
    assert all(0.0 <= float(r["subject_acc"]) <= 1.0 for r in res)
    gates = rows(tmp_path / "gates.csv")
    assert {g["strategy"] for g in gates} == {"fed-moe"}
    disc = rows(tmp_path / "disc_accuracy.csv")
    assert disc and min(int(d["epoch"]) for d in disc) >= 1  # warmup epoch 0 has no discriminator rows
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "run"


def test_seed_flag_runs_single_seed(tiny, tmp_path):
    main(["run", str(tiny), "--out", str(tmp_path), "--seed", "5"])
    assert {r["seed"] for r in rows(tmp_path / "results.csv")} == {"5"}


def test_env_var_sets_output_dir(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDFMRI_OUT", str(tmp_path / "env"))
    assert main(["sweep-noise", str(tiny), "--seed", "0"]) == 0
    assert (tmp_path / "env" / "results.csv").exists()
    # --out wins over the environment
    assert main(["sweep-noise", str(tiny), "--seed", "0", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "results.csv").exists()


def test_sweep_noise_record_count(tiny, tmp_path):
    main(["sweep-noise", str(tiny), "--out", str(tmp_path)])
    res = rows(tmp_path / "results.csv")
    # noise levels x seeds x folds x sites
    assert len(res) == 2 * 2 * 3 * 2
    assert {(r["mechanism"], r["alpha"]) for r in res} == {("gaussian", "0.01"), ("laplace", "1.0")}
    budget = rows(tmp_path / "budget.csv")
    assert [b["mechanism"] for b in budget] == ["gaussian", "laplace"]


def test_sweep_pace_is_noiseless(tiny, tmp_path):
    main(["sweep-pace", str(tiny), "--out", str(tmp_path)])
    res = rows(tmp_path / "results.csv")
    assert {r["tau"] for r in res} == {"1", "2"}
    assert {r["mechanism"] for r in res} == {"none"}
    tel = rows(tmp_path / "telemetry.csv")
    # tau=1 communicates every step: 4 events per epoch
    assert {t["comm_events"] for t in tel if t["tau"] == "1"} == {"4"}


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("fed:\n  epoch: 3\n")
    assert main(["run", str(p)]) == 2
    assert "bad.yaml:2: fed.epoch" in capsys.readouterr().err


def test_report_summary(tiny, tmp_path, capsys):
    main(["run", str(tiny), "--out", str(tmp_path / "r")])
    assert main(["report", str(tmp_path / "r" / "results.csv"), "--baseline", "single",
                 "--out", str(tmp_path / "s.csv")]) == 0
    summary = rows(tmp_path / "s.csv")
    fed = [r for r in summary if r["strategy"] == "fed"]
    assert len(fed) == 2 and all(int(r["n"]) == 6 for r in fed)
    assert all(r["welch_p_vs_baseline"] != "" for r in fed)
    assert "fed-moe" in capsys.readouterr().out


def test_summarize_means():
    rs = [{"strategy": "fed", "site": "A", "tau": "1", "mechanism": "none", "alpha": "0.0",
           "subject_acc": str(v), "window_acc": "0.5"} for v in (0.5, 0.7)]
    (row,) = summarize(rs)
    assert row["mean_subject_acc"] == pytest.approx(0.6)
    assert row["n"] == 2


def test_synth_then_preprocess_round_trip(tiny, tmp_path):
    assert main(["synth", str(tiny), "--out", str(tmp_path / "ds")]) == 0
    ds = tmp_path / "ds"
    assert (ds / "phenotype.csv").exists() and (ds / "informative_rois.csv").exists()
    csv_cfg = tmp_path / "csv.yaml"
    csv_cfg.write_text(f"data:\n  source: csv\n  series_dir: {ds / 'series'}\n  phenotype: {ds / 'phenotype.csv'}\n"
                       "  stride: 8\n")
    assert main(["preprocess", str(csv_cfg), "--out", str(tmp_path / "pp")]) == 0
    with np.load(tmp_path / "pp" / "features.npz") as z:
        names = list(z.keys())
        assert names
        assert z[names[0]].shape[1] == 8 * 7 // 2
    assert len(rows(tmp_path / "pp" / "subjects.csv")) == 12


def test_csv_source_matches_synthetic(tiny, tmp_path):
    """The same subjects through the CSV path give the same results as the in-memory path."""
    main(["synth", str(tiny), "--out", str(tmp_path / "ds")])
    cfg_synth = load_config(tiny)
    cfg_synth.seeds = [0]
    cfg_synth.strategies = ["fed"]
    cfg_csv = parse_config(f"data:\n  source: csv\n  series_dir: {tmp_path / 'ds' / 'series'}\n"
                           f"  phenotype: {tmp_path / 'ds' / 'phenotype.csv'}\n  stride: 8\n")
    cfg_csv.fed, cfg_csv.k_folds = cfg_synth.fed, cfg_synth.k_folds
    a = run_cells(cfg_synth, [Cell("fed", 0, 2)])[0].records
    b = run_cells(cfg_csv, [Cell("fed", 0, 2)])[0].records
    key = lambda r: (r.site, r.fold)
    assert [r.subject_acc for r in sorted(a, key=key)] == [r.subject_acc for r in sorted(b, key=key)]


def test_interpret_writes_rankings(tiny, tmp_path):
    assert main(["interpret", str(tiny), "--out", str(tmp_path), "--seed", "0"]) == 0
    out = rows(tmp_path / "biomarkers_seed0.csv")
    assert out


def test_bad_threads(tiny):
    assert main(["run", str(tiny), "--threads", "0"]) == 2


def test_save_models_writes_loadable_checkpoints(tiny, tmp_path):
    tiny.write_text(TINY + "save_models: true\n")
    main(["run", str(tiny), "--out", str(tmp_path), "--seed", "0"])
    ckpts = sorted((tmp_path / "checkpoints").glob("*.npz"))
    # single, fed and fed-align: 3 folds x 2 sites each; fed-moe has no single MLP per site
    assert len(ckpts) == 3 * 3 * 2
    model = load_checkpoint(tmp_path / "checkpoints" / "fed_seed0_tau2_gaussian0.01_fold0_site0.npz")
    assert model.forward(np.zeros((1, 28)))[0].shape == (1, 2)
