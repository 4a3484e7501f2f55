"""Streaming multi-task training of the early-stage model, plus teacher warm-up.

Per record the total loss is ``w_ctr * L_ctr + w_cqs * L_cqs + w_teacher * L_teacher``:

* ``L_ctr``: log loss against the click for impressed CTR-traffic records, soft
  cross-entropy against the teacher eCTR for augmented CTR-traffic records, 0 otherwise;
* ``L_cqs``: squared error against the logged final CQS, on every record;
* ``L_teacher``: soft cross-entropy of the teacher head against eCTR on CTR traffic.

Batch losses are means over the batch size. Heads whose weight is zero are not
backpropagated at all, which makes a zero weight identical to dropping the term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import RecordBatch
from .errors import ConfigError, DataError, NumericalError
from .metrics import auc, ne
from .nn import PROB_EPS, OptimizerConfig, binary_ce_loss, mse_loss, optimizer_step, soft_label_ce_loss
from .rankers import HEADS, DotInteractionModel, EarlyTwoTowerModel
from .world import World

logger = logging.getLogger(__name__)

TEACHER_SCOPES = ("all", "impressions", "augmented")


@dataclass(frozen=True)
class TaskWeights:
    w_ctr: float = 1.0
    w_cqs: float = 1.5
    w_teacher: float = 2.0

    def __post_init__(self):
        if min(self.w_ctr, self.w_cqs, self.w_teacher) < 0:
            raise ConfigError("task weights must be >= 0")

    def of(self, head: str) -> float:
        return {"ctr": self.w_ctr, "cqs": self.w_cqs, "teacher": self.w_teacher}[head]


@dataclass(frozen=True)
class TrainConfig:
    weights: TaskWeights = TaskWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: int = 64
    eval_window: int = 10_000
    disable_teacher: bool = False
    disable_augmentation: bool = False
    dedicated_ctr_only: bool = False
    dedicated_cqs_only: bool = False
    teacher_scope: str = "all"

    def validate(self) -> None:
        if self.batch_size < 1 or self.eval_window < 1:
            raise ConfigError("batch_size and eval_window must be >= 1")
        if self.dedicated_ctr_only and self.dedicated_cqs_only:
            raise ConfigError("dedicated_ctr_only and dedicated_cqs_only are exclusive")
        if self.teacher_scope not in TEACHER_SCOPES:
            raise ConfigError(f"unknown teacher_scope {self.teacher_scope!r}")

    def effective_weights(self) -> TaskWeights:
        """Weights after ablation flags: a dedicated CTR model drops the CQS task, a
        dedicated CQS model drops both CTR tasks."""
        w = self.weights
        if self.disable_teacher:
            w = replace(w, w_teacher=0.0)
        if self.dedicated_ctr_only:
            w = replace(w, w_cqs=0.0)
        if self.dedicated_cqs_only:
            w = replace(w, w_ctr=0.0, w_teacher=0.0)
        return w


@dataclass
class LossResult:
    total: float
    per_task: dict  # head -> mean loss over the batch
    grads: dict  # head -> d total / d head output, (n,); None when the head is off
    hard_mask: np.ndarray
    soft_mask: np.ndarray
    teacher_mask: np.ndarray


def record_loss(outputs: dict, records: RecordBatch, weights: TaskWeights,
                teacher_scope: str = "all") -> LossResult:
    """Weighted multi-task loss of a batch of head outputs against records."""
    n = len(records)
    if n == 0:
        raise DataError("empty record batch")
    if not np.all(np.isfinite(records.final_cqs)):
        raise DataError("record without final_cqs")
    hard = records.impressed & records.ctr_traffic
    soft = records.augmented & records.ctr_traffic
    if np.any(hard & (records.click < 0)):
        raise DataError("impressed CTR-traffic record without a click label")
    teach = records.ctr_traffic.copy()
    if teacher_scope == "impressions":
        teach &= records.impressed
    elif teacher_scope == "augmented":
        teach &= records.augmented

    y_ctr = outputs["ctr"]
    ctr_target = np.where(hard, records.click.astype(np.float64), records.teacher_ectr)
    l_ctr, g_ctr = soft_label_ce_loss(y_ctr, np.clip(ctr_target, 0.0, 1.0))
    active = hard | soft
    l_ctr = np.where(active, l_ctr, 0.0)
    g_ctr = np.where(active, g_ctr, 0.0)

    l_cqs, g_cqs = mse_loss(outputs["cqs"], records.final_cqs)

    l_t, g_t = soft_label_ce_loss(outputs["teacher"], records.teacher_ectr)
    l_t = np.where(teach, l_t, 0.0)
    g_t = np.where(teach, g_t, 0.0)

    per_task = {"ctr": float(l_ctr.sum() / n), "cqs": float(l_cqs.sum() / n),
                "teacher": float(l_t.sum() / n)}
    total = sum(weights.of(h) * per_task[h] for h in HEADS)
    raw = {"ctr": g_ctr, "cqs": g_cqs, "teacher": g_t}
    grads = {h: (weights.of(h) / n) * raw[h] if weights.of(h) > 0 else None for h in HEADS}
    return LossResult(float(total), per_task, grads, hard, soft, teach)


@dataclass
class TrainCounters:
    records: int = 0
    impressions: int = 0
    augmented: int = 0
    dropped_augmented: int = 0
    steps: int = 0


class _Window:
    def __init__(self, index: int, start: int):
        self.index = index
        self.start = start
        self.n = 0
        self.loss_sums = {h: 0.0 for h in HEADS}
        self.total_sum = 0.0
        self.preds: list = []
        self.labels: list = []
        self.sq_err = 0.0
        self.gap_sum = 0.0
        self.gap_n = 0

    def row(self) -> dict:
        preds = np.concatenate(self.preds) if self.preds else np.zeros(0)
        labels = np.concatenate(self.labels) if self.labels else np.zeros(0)
        ne_v = ne(preds, labels) if labels.size else None
        auc_v = auc(preds, labels) if labels.size else None
        return {
            "window": self.index,
            "first_record": self.start,
            "records": self.n,
            "loss_total": self.total_sum / self.n,
            "loss_ctr": self.loss_sums["ctr"] / self.n,
            "loss_cqs": self.loss_sums["cqs"] / self.n,
            "loss_teacher": self.loss_sums["teacher"] / self.n,
            "ne_ctr": np.nan if ne_v is None else ne_v,
            "auc_ctr": np.nan if auc_v is None else auc_v,
            "mse_cqs": self.sq_err / self.n,
            "distill_gap": self.gap_sum / self.gap_n if self.gap_n else np.nan,
            "hard_labels": int(labels.size),
        }


class Trainer:
    """Single-pass mini-batch trainer fed with record batches as they are logged.

    Telemetry is progressive: each window's metrics use predictions made
    before the model updated on those records.
    """

    def __init__(self, model: EarlyTwoTowerModel, world: World, config: TrainConfig):
        config.validate()
        self.model = model
        self.world = world
        self.config = config
        self.weights = config.effective_weights()
        self.counters = TrainCounters()
        self.telemetry: list[dict] = []
        self._buffer: list[RecordBatch] = []
        self._buffered = 0
        self._window = _Window(0, 0)

    def feed(self, records: RecordBatch) -> None:
        if self.config.disable_augmentation and len(records):
            keep = ~records.augmented
            self.counters.dropped_augmented += int((~keep).sum())
            records = records.take(keep)
        if not len(records):
            return
        self._buffer.append(records)
        self._buffered += len(records)
        bs = self.config.batch_size
        if self._buffered < bs:
            return
        allrec = RecordBatch.concat(self._buffer)
        full = (len(allrec) // bs) * bs
        for s in range(0, full, bs):
            self.step(allrec.take(slice(s, s + bs)))
        rest = allrec.take(slice(full, len(allrec)))
        self._buffer = [rest] if len(rest) else []
        self._buffered = len(rest)

    def finish(self) -> list[dict]:
        if self._buffered:
            self.step(RecordBatch.concat(self._buffer))
            self._buffer, self._buffered = [], 0
        if self._window.n:
            self.telemetry.append(self._window.row())
            self._window = _Window(self._window.index + 1, self.counters.records)
        return self.telemetry

    def step(self, records: RecordBatch) -> LossResult:
        m = self.model
        uf = m.user_features(self.world, records.user)
        af = m.ad_features(self.world, records.ad)
        outs, tape = m.forward(uf, af)
        loss = record_loss(outs, records, self.weights, self.config.teacher_scope)
        if not np.isfinite(loss.total):
            raise NumericalError(f"non-finite loss in telemetry window {self._window.index} "
                                 f"(records {self._window.start}..{self.counters.records + len(records)})")
        # no record outside CTR serving traffic may carry a hard-label CTR loss
        assert not np.any(loss.hard_mask & ~records.ctr_traffic)
        grads = m.backward(tape, loss.grads)
        optimizer_step(m.params, grads, self.config.optimizer)
        self._observe(outs, records, loss)
        return loss

    def _observe(self, outs, records: RecordBatch, loss: LossResult) -> None:
        n = len(records)
        c = self.counters
        c.records += n
        c.steps += 1
        c.impressions += int(records.impressed.sum())
        c.augmented += int(records.augmented.sum())
        w = self._window
        w.n += n
        w.total_sum += loss.total * n
        for h in HEADS:
            w.loss_sums[h] += loss.per_task[h] * n
        w.preds.append(outs["ctr"][loss.hard_mask])
        w.labels.append(records.click[loss.hard_mask].astype(np.float64))
        w.sq_err += float(np.sum((outs["cqs"] - records.final_cqs) ** 2))
        traffic = records.ctr_traffic
        w.gap_sum += float(np.abs(outs["ctr"][traffic] - records.teacher_ectr[traffic]).sum())
        w.gap_n += int(traffic.sum())
        if w.n >= self.config.eval_window:
            self.telemetry.append(w.row())
            self._window = _Window(w.index + 1, c.records)


def train_stream(model: EarlyTwoTowerModel, world: World, stream, config: TrainConfig):
    """Train on an iterable of record batches in one pass; returns ``(model, telemetry)``."""
    trainer = Trainer(model, world, config)
    for batch in stream:
        trainer.feed(batch)
    return model, trainer.finish()


def evaluate_heads(model: EarlyTwoTowerModel, world: World, records: RecordBatch,
                   cqs_upper: float = np.inf, chunk: int = 65536) -> dict:
    """Held-out NE/AUC of the CTR head on impressed CTR traffic, MSE of the CQS head on all
    records, calibration ratio and mean |y_ctr - eCTR| on CTR traffic."""
    if len(records) == 0:
        raise DataError("evaluate_heads needs a non-empty record set")
    y_ctr = np.empty(len(records))
    y_cqs = np.empty(len(records))
    for s in range(0, len(records), chunk):
        part = records.take(slice(s, s + chunk))
        outs, _ = model.forward(model.user_features(world, part.user),
                                model.ad_features(world, part.ad), which=("ctr", "cqs"))
        y_ctr[s:s + chunk] = outs["ctr"]
        y_cqs[s:s + chunk] = outs["cqs"]
    return head_metrics(y_ctr, y_cqs, records, cqs_upper)


def head_metrics(y_ctr, y_cqs, records: RecordBatch, cqs_upper: float = np.inf) -> dict:
    hard = records.impressed & records.ctr_traffic
    clicks = records.click[hard].astype(np.float64)
    ne_v = ne(y_ctr[hard], clicks) if hard.any() else None
    auc_v = auc(y_ctr[hard], clicks) if hard.any() else None
    traffic = records.ctr_traffic
    rate = clicks.mean() if clicks.size else np.nan
    return {
        "ne_ctr": np.nan if ne_v is None else ne_v,
        "auc_ctr": np.nan if auc_v is None else auc_v,
        "mse_cqs": float(np.mean((y_cqs - records.final_cqs) ** 2)),
        "calibration": float(y_ctr[hard].mean() / rate) if clicks.size and rate > 0 else np.nan,
        "distill_gap": float(np.abs(y_ctr[traffic] - records.teacher_ectr[traffic]).mean())
        if traffic.any() else np.nan,
        "cqs_out_of_range": float(np.mean((y_cqs < 0) | (y_cqs > cqs_upper))),
    }


# --- teacher warm-up -------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherTrainConfig:
    optimizer: OptimizerConfig = OptimizerConfig(algorithm="adagrad", lr=0.02)
    batch_size: int = 256
    epochs: int = 2  # CTR teacher
    quality_epochs: int = 1
    # start the output bias at the label log-odds; without it the first
    # adagrad steps spend most of the bias's step budget walking down from 0.5
    prior_init: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.quality_epochs < 0:
            raise ConfigError("teacher batch_size must be >= 1 and epochs >= 0")


def train_teacher(model: DotInteractionModel, world: World, users, ads, labels,
                  config: TeacherTrainConfig, rng: np.random.Generator,
                  epochs: int | None = None) -> list[float]:
    """Minibatch log-loss training on oracle-labeled warm-up examples; returns per-epoch
    mean losses."""
    users = np.asarray(users)
    ads = np.asarray(ads)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    if n == 0:
        raise DataError(f"{model.name}: no warm-up examples")
    if config.prior_init:
        rate = float(np.clip(labels.mean(), PROB_EPS, 1.0 - PROB_EPS))
        model.params.values[f"top.{len(model.spec.activations) - 1}.bias"][:] = np.log(rate / (1.0 - rate))
    history = []
    for _ in range(config.epochs if epochs is None else epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            p, tape = model.forward(world.user_features[users[idx]], world.ad_features[ads[idx]])
            loss, g = binary_ce_loss(p, labels[idx])
            total += float(loss.sum())
            grads = model.backward(tape, g / len(idx))
            optimizer_step(model.params, grads, config.optimizer)
        history.append(total / n)
        logger.debug("%s epoch loss %.5f", model.name, history[-1])
    return history
