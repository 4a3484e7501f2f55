import dataclasses

import numpy as np
import pytest

from earlyrank.cascade import Cascade, RecordBatch, StageConfig
from earlyrank.errors import ConfigError, DataError, NumericalError
from earlyrank.metrics import auc, ne
from earlyrank.rankers import (
    DotInteractionModel,
    EarlyModelConfig,
    EarlyTwoTowerModel,
    QualityScalars,
    StudentScorer,
    TeacherCache,
    TeacherModelConfig,
    TeacherSet,
    compute_cqs,
)
from earlyrank.training import (
    TaskWeights,
    TeacherTrainConfig,
    TrainConfig,
    Trainer,
    evaluate_heads,
    head_metrics,
    record_loss,
    train_stream,
    train_teacher,
)
from earlyrank.world import RequestStream, true_click_prob, true_quality_event_probs

SMALL = EarlyModelConfig(embed_dim=3, tower_widths=(8, 4), head_widths=(4, 1))


def records(n, *, impressed=True, ctr_traffic=True, click=1, ectr=0.3, cqs=0.5, users=None, ads=None, start=0):
    imp = np.full(n, impressed)
    return RecordBatch(
        np.arange(start, start + n), np.zeros(n, np.int64) if users is None else users,
        np.zeros(n, np.int64) if ads is None else ads, imp,
        np.where(imp, click, -1).astype(np.int8) if np.isscalar(click) else np.asarray(click, np.int8),
        np.where(imp[:, None], 0, -1).repeat(3, axis=1).astype(np.int8),
        np.full(n, ectr, dtype=np.float64) if np.isscalar(ectr) else np.asarray(ectr, np.float64),
        np.full(n, cqs, dtype=np.float64) if np.isscalar(cqs) else np.asarray(cqs, np.float64),
        np.full(n, ctr_traffic), ~imp)


def test_default_weights_with_unit_losses_total_four_and_a_half():
    rec = records(1, click=1, ectr=1.0, cqs=0.0)
    outs = {"ctr": np.array([np.exp(-1.0)]), "cqs": np.array([1.0]), "teacher": np.array([np.exp(-1.0)])}
    res = record_loss(outs, rec, TaskWeights(1.0, 1.5, 2.0))
    for h in ("ctr", "cqs", "teacher"):
        assert res.per_task[h] == pytest.approx(1.0, abs=1e-12)
    assert res.total == pytest.approx(4.5, abs=1e-12)


def test_total_is_weighted_sum_of_per_task_losses():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 20))
        rec = records(n, impressed=True, click=rng.integers(0, 2, n), ectr=rng.random(n), cqs=rng.random(n))
        rec = dataclasses.replace(rec, impressed=rng.random(n) < 0.5, ctr_traffic=rng.random(n) < 0.7)
        rec = dataclasses.replace(rec, augmented=~rec.impressed,
                                  click=np.where(rec.impressed, rec.click, -1).astype(np.int8))
        w = TaskWeights(*rng.uniform(0, 3, 3))
        outs = {"ctr": rng.random(n), "cqs": rng.normal(size=n), "teacher": rng.random(n)}
        res = record_loss(outs, rec, w)
        assert abs(res.total - (w.w_ctr * res.per_task["ctr"] + w.w_cqs * res.per_task["cqs"]
                                + w.w_teacher * res.per_task["teacher"])) < 1e-12


def test_loss_routing_per_record_kind():
    outs = {"ctr": np.full(3, 0.2), "cqs": np.zeros(3), "teacher": np.full(3, 0.2)}
    imp = records(1, click=1, ectr=0.6)
    aug = records(1, impressed=False, ectr=0.6, start=1)
    off = records(1, ctr_traffic=False, click=1, ectr=0.6, start=2)
    rec = RecordBatch.concat([imp, aug, off])
    res = record_loss(outs, rec, TaskWeights())
    np.testing.assert_array_equal(res.hard_mask, [True, False, False])
    np.testing.assert_array_equal(res.soft_mask, [False, True, False])
    np.testing.assert_array_equal(res.teacher_mask, [True, True, False])
    # hard label 1 vs soft label 0.6 give different CTR gradients; off-traffic gives none
    g = res.grads["ctr"]
    assert g[0] == pytest.approx(-1 / 0.2 / 3) and g[1] == pytest.approx((-0.6 / 0.2 + 0.4 / 0.8) / 3)
    assert g[2] == 0.0 and res.grads["teacher"][2] == 0.0


def test_teacher_scope_switch():
    rec = RecordBatch.concat([records(1), records(1, impressed=False, start=1)])
    outs = {"ctr": np.full(2, 0.3), "cqs": np.zeros(2), "teacher": np.full(2, 0.3)}
    assert record_loss(outs, rec, TaskWeights(), "impressions").teacher_mask.tolist() == [True, False]
    assert record_loss(outs, rec, TaskWeights(), "augmented").teacher_mask.tolist() == [False, True]


def test_non_traffic_records_leave_ctr_and_teacher_heads_untouched(tiny_world):
    model = EarlyTwoTowerModel(tiny_world, SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    rec = records(6, ctr_traffic=False, click=rng.integers(0, 2, 6), users=rng.integers(12, size=6),
                  ads=rng.integers(20, size=6), cqs=rng.random(6))
    outs, tape = model.forward(model.user_features(tiny_world, rec.user), model.ad_features(tiny_world, rec.ad))
    res = record_loss(outs, rec, TaskWeights())
    grads = model.backward(tape, res.grads)
    for name, g in grads.items():
        if name.startswith(("ctr_head.", "teacher_head.")):
            assert np.all(g == 0.0), name
    # the towers only feel the CQS head
    outs, tape = model.forward(model.user_features(tiny_world, rec.user), model.ad_features(tiny_world, rec.ad))
    only_cqs = model.backward(tape, {"cqs": res.grads["cqs"]})
    for name in only_cqs:
        np.testing.assert_array_equal(grads[name], only_cqs[name])


def test_record_loss_errors():
    outs = {"ctr": np.full(1, 0.5), "cqs": np.zeros(1), "teacher": np.full(1, 0.5)}
    with pytest.raises(DataError):
        record_loss(outs, records(1, cqs=np.nan), TaskWeights())
    with pytest.raises(DataError):
        record_loss(outs, records(1, click=-1), TaskWeights())
    with pytest.raises(DataError):
        record_loss(outs, records(0), TaskWeights())
    with pytest.raises(ConfigError):
        TaskWeights(w_cqs=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(dedicated_ctr_only=True, dedicated_cqs_only=True).validate()
    with pytest.raises(ConfigError):
        TrainConfig(teacher_scope="some").validate()


def test_effective_weights_follow_flags():
    w = TrainConfig(disable_teacher=True).effective_weights()
    assert (w.w_ctr, w.w_cqs, w.w_teacher) == (1.0, 1.5, 0.0)
    assert TrainConfig(dedicated_ctr_only=True).effective_weights().w_cqs == 0.0
    w = TrainConfig(dedicated_cqs_only=True).effective_weights()
    assert (w.w_ctr, w.w_teacher) == (0.0, 0.0)


# --- streams --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def stream_setup(request):
    world = request.getfixturevalue("small_world")
    teachers = TeacherSet.create(world, TeacherModelConfig(embed_dim=4, ctr_widths=(16, 1), quality_widths=(8, 1)),
                                 QualityScalars(), np.random.default_rng(0))
    cache = TeacherCache(world, teachers)
    # an oracle teacher: logged eCTR and CQS are the true propensities
    users, ads = np.arange(world.num_users)[:, None], np.arange(world.num_ads)[None, :]
    cache.ectr = true_click_prob(world, users, ads)
    cache.quality = true_quality_event_probs(world, users, ads)
    cache.cqs = compute_cqs(cache.quality, QualityScalars())
    stage = StageConfig(retrieval_size=60, early_pass=12, auction_winners=3)
    logger = EarlyTwoTowerModel(world, SMALL, np.random.default_rng(1))
    cascade = Cascade(world, cache, stage, 0.5, np.random.default_rng(2), np.random.default_rng(3))
    reqs = RequestStream(world, 60, np.random.default_rng(4))
    batches = [cascade.run_batch(StudentScorer(logger, world), reqs.next_batch(50))[1] for _ in range(40)]
    return world, batches


def params_equal(a, b):
    return all(np.array_equal(a.params[n], b.params[n]) for n in a.params)


def train(world, batches, cfg, seed=7):
    model = EarlyTwoTowerModel(world, SMALL, np.random.default_rng(seed))
    trainer = Trainer(model, world, cfg)
    for b in batches:
        trainer.feed(b)
    trainer.finish()
    return model, trainer


def test_disable_teacher_is_bit_identical_to_zero_teacher_weight(stream_setup):
    world, batches = stream_setup
    a, _ = train(world, batches[:10], TrainConfig(disable_teacher=True))
    b, _ = train(world, batches[:10], TrainConfig(weights=TaskWeights(w_teacher=0.0)))
    c, _ = train(world, batches[:10], TrainConfig())
    assert params_equal(a, b)
    assert not params_equal(a, c)


def test_zero_cqs_weight_on_impression_ctr_stream_is_dedicated_ctr(stream_setup):
    world, batches = stream_setup
    imp_only = [b.take(b.impressed & b.ctr_traffic) for b in batches[:10]]
    base = TrainConfig(weights=TaskWeights(w_teacher=0.0))
    a, _ = train(world, imp_only, dataclasses.replace(base, weights=TaskWeights(w_cqs=0.0, w_teacher=0.0)))
    b, _ = train(world, imp_only, dataclasses.replace(base, dedicated_ctr_only=True))
    assert params_equal(a, b)


def test_no_augmentation_consumes_no_augmented_records(stream_setup):
    world, batches = stream_setup
    _, trainer = train(world, batches[:5], TrainConfig(disable_augmentation=True))
    assert trainer.counters.augmented == 0
    assert trainer.counters.dropped_augmented == sum(int(b.augmented.sum()) for b in batches[:5])
    assert trainer.counters.records == sum(int((~b.augmented).sum()) for b in batches[:5])


def test_telemetry_windows_are_contiguous_and_complete(stream_setup):
    world, batches = stream_setup
    _, trainer = train(world, batches, TrainConfig(eval_window=500))
    rows = trainer.telemetry
    assert [r["window"] for r in rows] == list(range(len(rows)))
    assert rows[0]["first_record"] == 0
    for prev, cur in zip(rows, rows[1:]):
        assert cur["first_record"] == prev["first_record"] + prev["records"]
    assert sum(r["records"] for r in rows) == trainer.counters.records == sum(len(b) for b in batches)
    for r in rows:
        assert r["loss_total"] == pytest.approx(r["loss_ctr"] + 1.5 * r["loss_cqs"] + 2.0 * r["loss_teacher"])


def test_distillation_pulls_ctr_head_toward_teacher(stream_setup):
    world, batches = stream_setup
    held_out = RecordBatch.concat(batches[-5:])
    model = EarlyTwoTowerModel(world, SMALL, np.random.default_rng(3))
    trainer = Trainer(model, world, TrainConfig(eval_window=2000))
    gaps = [evaluate_heads(model, world, held_out)["distill_gap"]]
    for b in batches[:-5]:
        trainer.feed(b)
    trainer.finish()
    gaps.append(evaluate_heads(model, world, held_out)["distill_gap"])
    assert gaps[1] < gaps[0]
    assert trainer.telemetry[-1]["distill_gap"] < trainer.telemetry[0]["distill_gap"]


def test_learning_on_separable_toy_stream(tiny_world):
    """Clicks are a deterministic function of one early ad feature: NE must fall."""
    world = tiny_world
    rng = np.random.default_rng(0)
    model = EarlyTwoTowerModel(world, SMALL, np.random.default_rng(1))
    field = model.ad_fields[0]
    key = world.ad_features[:, field]
    label_of_ad = (key >= np.sort(np.unique(key))[len(np.unique(key)) // 2]).astype(np.int8)
    users = rng.integers(12, size=4000)
    ads = rng.integers(20, size=4000)
    stream = [records(200, users=users[i:i + 200], ads=ads[i:i + 200], click=label_of_ad[ads[i:i + 200]], start=i)
              for i in range(0, 4000, 200)]
    test = records(500, users=rng.integers(12, size=500), ads=(a := rng.integers(20, size=500)), click=label_of_ad[a])
    before = evaluate_heads(model, world, test)["ne_ctr"]
    _, telemetry = train_stream(model, world, stream, TrainConfig(weights=TaskWeights(w_teacher=0.0, w_cqs=0.0),
                                                                  batch_size=32))
    after = evaluate_heads(model, world, test)["ne_ctr"]
    assert after < before
    assert after < 0.2


def test_nan_loss_aborts_with_window_diagnostics(tiny_world):
    model = EarlyTwoTowerModel(tiny_world, SMALL, np.random.default_rng(0))
    model.params.values["cqs_head.1.bias"][:] = np.inf
    trainer = Trainer(model, tiny_world, TrainConfig(batch_size=4))
    with pytest.raises((NumericalError, DataError), match="window|non-finite"):
        trainer.feed(records(4))


def test_evaluate_heads_matches_metric_functions(stream_setup):
    world, batches = stream_setup
    rec = RecordBatch.concat(batches[:5])
    model = EarlyTwoTowerModel(world, SMALL, np.random.default_rng(2))
    got = evaluate_heads(model, world, rec, cqs_upper=4.0)
    outs, _ = model.forward(model.user_features(world, rec.user), model.ad_features(world, rec.ad))
    hard = rec.impressed & rec.ctr_traffic
    assert got["ne_ctr"] == ne(outs["ctr"][hard], rec.click[hard])
    assert got["auc_ctr"] == auc(outs["ctr"][hard], rec.click[hard])
    assert got["mse_cqs"] == pytest.approx(np.mean((outs["cqs"] - rec.final_cqs) ** 2), rel=1e-12)
    with pytest.raises(DataError):
        evaluate_heads(model, world, rec.take(slice(0, 0)))


def test_constant_and_perfect_predictors():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 1000)
    rec = records(1000, click=y)
    rate = y.mean()
    const = head_metrics(np.full(1000, rate), np.zeros(1000), rec)
    assert const["ne_ctr"] == pytest.approx(1.0, abs=1e-6)
    assert const["calibration"] == pytest.approx(1.0)
    perfect = head_metrics(y.astype(float), np.full(1000, 0.5), rec)
    assert perfect["ne_ctr"] < 1e-5 and perfect["auc_ctr"] == 1.0


# --- teachers ---------------------------------------------------------------------------

def test_teacher_training_reduces_loss(small_world):
    rng = np.random.default_rng(0)
    users = rng.integers(small_world.num_users, size=4000)
    ads = rng.integers(small_world.num_ads, size=4000)
    labels = (rng.random(4000) < true_click_prob(small_world, users, ads)).astype(float)
    model = DotInteractionModel(small_world, (16, 1), 4, np.random.default_rng(1))
    losses = train_teacher(model, small_world, users, ads, labels, TeacherTrainConfig(epochs=3),
                           np.random.default_rng(2))
    assert len(losses) == 3 and losses[-1] < losses[0]
    with pytest.raises(DataError):
        train_teacher(model, small_world, [], [], [], TeacherTrainConfig(), rng)
