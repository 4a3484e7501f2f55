"""Configuration, orchestration, reports, checkpoints and the command line."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from earlyrank import cli
from earlyrank.cascade import Cascade
from earlyrank.errors import ConfigError, DataError
from earlyrank.experiment import (
    ABLATION_VARIANTS,
    METRICS,
    VARIANTS,
    PhaseError,
    Policy,
    ScenarioConfig,
    evaluate_policy,
    load_config,
    prepare,
    replay_eval,
    run_ablation_matrix,
    run_scenario,
    set_path,
    sweep,
    train_policy,
)
from earlyrank.metrics import auc
from earlyrank.rankers import OracleScorer
from earlyrank.world import RequestStream

SMALL = Path(__file__).resolve().parents[1] / "configs" / "small.yaml"


@pytest.fixture(scope="module")
def small_cfg():
    return load_config(SMALL)


@pytest.fixture(scope="module")
def shared(small_cfg):
    return prepare(small_cfg)


@pytest.fixture(scope="module")
def matrix(shared, tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    report = run_ablation_matrix(shared.config, VARIANTS, out, shared=shared)
    return report, out


# --- configuration --------------------------------------------------------------------

def test_defaults_and_roundtrip():
    cfg = load_config()
    assert cfg == ScenarioConfig()
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert (cfg.phases.teacher_warmup, cfg.phases.student_train, cfg.phases.eval) == (10_000, 50_000, 5_000)


def test_overrides_parse_yaml_scalars():
    cfg = load_config(overrides=["train.weights.w_cqs=1.0", "stage.augmentation_rate=0",
                                 "world.base_quality_logits=[-2, -3, -2.5]", "variant=mtl_no_teacher"])
    assert cfg.train.weights.w_cqs == 1.0
    assert cfg.stage.augmentation_rate == 0.0
    assert cfg.world.base_quality_logits == (-2.0, -3.0, -2.5)
    assert cfg.variant == "mtl_no_teacher"


def test_seed_flag_sets_world_seed_too():
    cfg = load_config(SMALL, seed=17)
    assert cfg.seed == 17 and cfg.world.seed == 17


@pytest.mark.parametrize("overrides", [
    ["train.weights.w_nope=1"],
    ["world.num_users=many"],
    ["stage.early_pass=500"],
    ["variant=mtl_partial"],
    ["no_equals_sign"],
    ["train.weights.w_cqs=-1"],
])
def test_bad_overrides_are_config_errors(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_unknown_key_in_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("world:\n  num_users: 10\n  colour: blue\n")
    with pytest.raises(ConfigError, match="world.colour"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_set_path_requires_existing_path():
    data = ScenarioConfig().to_dict()
    set_path(data, "stage.early_pass", 30)
    assert data["stage"]["early_pass"] == 30
    with pytest.raises(ConfigError):
        set_path(data, "stage.late_pass", 30)
    with pytest.raises(ConfigError):
        set_path(data, "stage.early_pass.x", 30)


# --- orchestration ----------------------------------------------------------------------

def test_untrained_student_ranks_like_chance():
    # equal bids and untrained heads: the early order is unrelated to the golden
    # set, so hard recall is hypergeometric with mean K / N
    cfg = load_config(SMALL, ["world.bid_log_sd=0", "phases.eval=1000", "phases.student_train=0"])
    sh = prepare(cfg)
    policy = Policy(cfg, sh.world, "mtl_full", sh.constant_cqs)
    hard = evaluate_policy(sh, cfg, policy).metrics["hard_recall"]
    N, K, R = cfg.stage.retrieval_size, cfg.stage.auction_winners, cfg.phases.eval
    var_overlap = K * (K / N) * (1 - K / N) * (N - K) / (N - 1)
    sigma = np.sqrt(var_overlap / K ** 2 / R)
    assert abs(hard.mean - K / N) < 3 * sigma


def test_teacher_ranks_clicks_better_than_chance(shared):
    cfg = shared.config
    cascade = Cascade(shared.world, shared.cache, cfg.stage, cfg.quality_weight,
                      np.random.default_rng(0), np.random.default_rng(1))
    req = RequestStream(shared.world, cfg.stage.retrieval_size, np.random.default_rng(2)).next_batch(400)
    _, rec = cascade.run_batch(OracleScorer(shared.cache), req)
    imp = rec.impressed
    assert auc(rec.teacher_ectr[imp], rec.click[imp]) > 0.5


def test_phase_failure_names_phase_and_request(small_cfg, shared, monkeypatch):
    calls = {"n": 0}
    original = Cascade.run_batch

    def flaky(self, scorer, batch):
        calls["n"] += 1
        if calls["n"] == 3:
            raise FloatingPointError("boom")
        return original(self, scorer, batch)

    monkeypatch.setattr(Cascade, "run_batch", flaky)
    with pytest.raises(PhaseError) as info:
        train_policy(shared, small_cfg, "mtl_full")
    assert info.value.phase == "student_train"
    assert info.value.request_index == 2 * small_cfg.serving_batch
    assert "boom" in str(info.value)


# --- ablation matrix and reports -----------------------------------------------------------

def test_delta_table_matches_variant_list(matrix):
    report, _ = matrix
    deltas = report.deltas()
    assert list(deltas) == [v for v in VARIANTS if v != "mtl_full"]
    for row in deltas.values():
        assert list(row) == list(METRICS)
    md = report.to_markdown()
    for v in VARIANTS:
        assert f"| {v} |" in md or v == "mtl_full"


def test_production_baseline_reports_tvd_delta(shared):
    report = run_ablation_matrix(shared.config, ("mtl_full", "production_baseline"), shared=shared)
    row = report.deltas()["production_baseline"]["tvd"]
    assert row["diff"] is not None
    assert row["diff"] == pytest.approx(report.results["production_baseline"].metrics["tvd"].mean
                                        - report.results["mtl_full"].metrics["tvd"].mean)
    assert "tvd (-)" in report.to_markdown()


def test_no_augmentation_consumes_no_augmented_records(matrix):
    report, _ = matrix
    counters = report.results["mtl_no_augmentation"].counters["mtl"]
    assert counters["augmented"] == 0 and counters["dropped_augmented"] > 0
    assert report.results["mtl_full"].counters["mtl"]["augmented"] > 0


def test_report_schema(matrix):
    report, out = matrix
    data = json.loads((out / "report.json").read_text())
    assert ScenarioConfig.from_dict(data["config"]) == report.config
    assert list(data["variants"]) == list(VARIANTS)
    for v in data["variants"].values():
        assert set(v["metrics"]) == set(METRICS)
    csv_rows = (out / "report.csv").read_text().strip().splitlines()
    assert len(csv_rows) == 1 + len(VARIANTS) * len(METRICS)
    md = (out / "report.md").read_text()
    assert "Per-request sd of recall" in md
    for name in ("config.json", "shared.json", "world.jsonl", "teacher_final_ctr.bin",
                 "student_mtl_full_mtl.bin", "telemetry_mtl_full.jsonl", "replay_mtl_full.jsonl"):
        assert (out / name).exists(), name


def test_replay_rows_agree_with_metrics(matrix):
    report, out = matrix
    rows = [json.loads(line) for line in (out / "replay_mtl_full.jsonl").read_text().splitlines()]
    assert len(rows) == report.config.phases.eval
    hard = np.mean([r["hard_recall"] for r in rows])
    assert hard == pytest.approx(report.results["mtl_full"].metrics["hard_recall"].mean, abs=1e-12)
    ids = [r["request_id"] for r in rows]
    first = report.config.phases.teacher_warmup + report.config.phases.student_train
    assert ids == list(range(first, first + len(rows)))


def test_variants_are_isolated(matrix, small_cfg, tmp_path):
    # a variant run alone reproduces its numbers from the matrix, and shares
    # the world and teacher checkpoints byte for byte
    report, out = matrix
    cfg = dataclasses.replace(small_cfg, variant="mtl_no_teacher")
    alone = run_scenario(cfg, tmp_path)
    a = alone.results["mtl_no_teacher"].metrics
    b = report.results["mtl_no_teacher"].metrics
    assert {m: a[m].mean for m in METRICS} == {m: b[m].mean for m in METRICS}
    for name in ["world.jsonl"] + [f"teacher_{n}.bin" for n in ("final_ctr", "quality0", "quality1", "quality2")]:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_replay_eval_reproduces_metrics(matrix, tmp_path):
    report, out = matrix
    again = replay_eval(out, tmp_path)
    assert list(again.results) == list(report.results)
    for v in report.results:
        for m in METRICS:
            x, y = again.results[v].metrics[m].mean, report.results[v].metrics[m].mean
            assert (np.isnan(x) and np.isnan(y)) or x == y, (v, m)
    assert (tmp_path / "report.json").exists()


def test_replay_eval_rejects_non_checkpoints(tmp_path):
    with pytest.raises(DataError):
        replay_eval(tmp_path)


# --- sweeps -------------------------------------------------------------------------------

def test_empty_sweep(small_cfg, tmp_path):
    rep = sweep("train.weights.w_cqs", [], small_cfg, tmp_path)
    assert rep.rows() == []
    assert (tmp_path / "sweep.csv").read_text().splitlines() == [
        "train.weights.w_cqs,variant," + ",".join(METRICS)]


def test_sweep_rejects_unresolvable_path(small_cfg):
    with pytest.raises(ConfigError):
        sweep("train.weights.w_quality", [1.0], small_cfg)


def test_sweep_rows_follow_values(shared):
    cfg = load_config(SMALL, ["phases.student_train=200"])
    rep = sweep("train.weights.w_cqs", [0.5, 1.5], cfg)
    assert [r["value"] for r in rep.rows()] == [0.5, 1.5]
    assert rep.reports[0].config.train.weights.w_cqs == 0.5
    # the world and teachers do not depend on w_cqs
    assert rep.reports[0].constant_cqs == rep.reports[1].constant_cqs


# --- command line -------------------------------------------------------------------------

def test_cli_run_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code = cli.main(["run", "--config", str(SMALL), "--set", "phases.student_train=300",
                         "--out", str(tmp_path / name)])
        assert code == 0
    for name in ("report.json", "report.csv", "report.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "soft_recall" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(SMALL), "--set", "world.colour=blue"]) == 1
    assert cli.main(["sweep", "--config", str(SMALL), "--param", "nope.x", "--values", "1"]) == 1
    assert cli.main(["sweep", "--config", str(SMALL), "--param", "train.weights.w_cqs"]) == 0
    assert cli.main(["replay-eval", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "configuration error" in err and "run failed" in err


def test_ablation_variant_list():
    assert ABLATION_VARIANTS == ("mtl_full", "dedicated_ctr_plus_cqs", "mtl_no_teacher",
                                 "mtl_no_augmentation")
    with pytest.raises(ConfigError):
        run_ablation_matrix(ScenarioConfig(), ("mtl_full", "mtl_sideways"))
