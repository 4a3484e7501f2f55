"""Scenario orchestration: world -> teacher warm-up -> online student training ->
golden-set replay evaluation -> reports and checkpoints.

Every random stream is derived from ``(seed, stream name)``, so the world,
request streams, outcome draws and teachers are identical across variants of
one seed; variants differ only in what the student trains on and serves.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cascade import Cascade, RecordBatch, StageConfig, warmup_batch, write_training_log
from .errors import ConfigError, DataError
from .metrics import (
    MetricSummary,
    aggregate,
    aggregate_auc,
    aggregate_ne,
    aggregate_ratio,
    batch_recalls,
    batch_tvd,
    golden_positions,
)
from .nn import load_params, restore_params, save_params
from .rankers import (
    CompositeScorer,
    ConstantQualityScorer,
    EarlyModelConfig,
    EarlyTwoTowerModel,
    QualityScalars,
    StudentScorer,
    TeacherCache,
    TeacherModelConfig,
    TeacherSet,
    total_value,
)
from .training import TeacherTrainConfig, TrainConfig, Trainer, train_teacher
from .world import RequestStream, World, WorldConfig, generate_world, load_world, save_world

logger = logging.getLogger(__name__)

VARIANTS = ("mtl_full", "dedicated_ctr_plus_cqs", "mtl_no_teacher", "mtl_no_augmentation",
            "dedicated_cqs_only", "production_baseline")
# mtl_full and the ablation variants it is compared against
ABLATION_VARIANTS = ("mtl_full", "dedicated_ctr_plus_cqs", "mtl_no_teacher", "mtl_no_augmentation")
REFERENCE_VARIANT = "mtl_full"


# --- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSizes:
    """Request counts per phase. Request ids are allotted in phase order, so the
    phases occupy disjoint id ranges."""

    teacher_warmup: int = 10_000
    student_train: int = 50_000
    eval: int = 5_000


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldConfig = WorldConfig()
    stage: StageConfig = StageConfig()
    train: TrainConfig = TrainConfig()
    student: EarlyModelConfig = EarlyModelConfig()
    teacher: TeacherModelConfig = TeacherModelConfig()
    teacher_train: TeacherTrainConfig = TeacherTrainConfig()
    scalars: QualityScalars = QualityScalars()
    quality_weight: float = 0.5
    phases: PhaseSizes = PhaseSizes()
    seed: int = 0
    variant: str = "mtl_full"
    # requests served between student refreshes during online training
    serving_batch: int = 64
    eval_batch: int = 250
    bootstrap_resamples: int = 1000
    save_training_log: bool = False

    def validate(self) -> None:
        self.world.validate()
        self.stage.validate(self.world.num_ads)
        self.train.validate()
        self.teacher_train.validate()
        if len(self.scalars.values) != self.world.num_quality_events:
            raise ConfigError(f"{len(self.scalars.values)} quality scalars for "
                              f"{self.world.num_quality_events} quality events")
        if self.quality_weight < 0:
            raise ConfigError("quality_weight must be >= 0")
        p = self.phases
        if p.teacher_warmup < 1 or p.student_train < 0 or p.eval < 1:
            raise ConfigError("phases need teacher_warmup >= 1, student_train >= 0, eval >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.serving_batch < 1 or self.eval_batch < 1 or self.bootstrap_resamples < 1:
            raise ConfigError("serving_batch, eval_batch and bootstrap_resamples must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ScenarioConfig":
        return _build(cls, data or {}, "")

    def with_overrides(self, overrides: list[str]) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(apply_overrides(self.to_dict(), overrides))


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(hints[name], data[name], path + name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path + ".")
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (elem, _) = typing.get_args(tp)
        return tuple(_coerce(elem, v, path) for v in value)
    if origin is typing.Union:  # only "X | None" appears in configs
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dot.path=value`` strings; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form dot.path=value")
        key, raw = item.split("=", 1)
        set_path(data, key.strip(), yaml.safe_load(raw))
    return data


def set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"config path {dotted!r} does not resolve (at {'.'.join(parts[:i + 1])!r})")
        if i == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> ScenarioConfig:
    """Defaults, then the YAML/JSON file, then ``--set`` overrides, then ``--seed``
    (which sets both the run seed and the world seed)."""
    data = ScenarioConfig().to_dict()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        _merge(data, loaded or {}, "")
    data = apply_overrides(data, list(overrides))
    if seed is not None:
        data["seed"] = seed
        data["world"]["seed"] = seed
    cfg = ScenarioConfig.from_dict(data)
    cfg.validate()
    return cfg


def _merge(base: dict, update, path: str) -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named random stream of a run."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


# --- variants ---------------------------------------------------------------------

@dataclass(frozen=True)
class VariantPlan:
    """Student models to train (role -> TrainConfig) and how they serve."""

    models: dict
    ctr_role: str
    cqs_role: str | None  # None -> constant early-stage quality


def variant_plan(variant: str, base: TrainConfig) -> VariantPlan:
    r = dataclasses.replace
    # the production CTR model: CTR task only, trained on impressions
    production = r(base, dedicated_ctr_only=True, disable_teacher=True, disable_augmentation=True)
    cqs_model = r(base, dedicated_cqs_only=True)
    if variant == "mtl_full":
        return VariantPlan({"mtl": base}, "mtl", "mtl")
    if variant == "mtl_no_teacher":
        return VariantPlan({"mtl": r(base, disable_teacher=True)}, "mtl", "mtl")
    if variant == "mtl_no_augmentation":
        return VariantPlan({"mtl": r(base, disable_augmentation=True)}, "mtl", "mtl")
    if variant == "dedicated_ctr_plus_cqs":
        return VariantPlan({"ctr": r(base, dedicated_ctr_only=True), "cqs": cqs_model}, "ctr", "cqs")
    if variant == "dedicated_cqs_only":
        return VariantPlan({"ctr": production, "cqs": cqs_model}, "ctr", "cqs")
    if variant == "production_baseline":
        return VariantPlan({"ctr": production}, "ctr", None)
    raise ConfigError(f"unknown variant {variant!r}")


class Policy:
    """The early stage of one variant: its student models, trainers and scorer."""

    def __init__(self, cfg: ScenarioConfig, world: World, variant: str, constant_cqs: float):
        self.variant = variant
        self.world = world
        self.plan = variant_plan(variant, cfg.train)
        self.constant_cqs = constant_cqs
        self.models = {role: EarlyTwoTowerModel(world, cfg.student, stream(cfg.seed, f"student_init/{role}"))
                       for role in self.plan.models}
        self.trainers = {role: Trainer(self.models[role], world, tc)
                         for role, tc in self.plan.models.items()}

    def scorer(self):
        p = self.plan
        ctr = StudentScorer(self.models[p.ctr_role], self.world, serve_cqs=False)
        if p.cqs_role is None:
            return ConstantQualityScorer(ctr, self.constant_cqs)
        if p.cqs_role == p.ctr_role:
            return StudentScorer(self.models[p.ctr_role], self.world)
        return CompositeScorer(ctr, StudentScorer(self.models[p.cqs_role], self.world))

    def feed(self, records: RecordBatch) -> None:
        for t in self.trainers.values():
            t.feed(records)

    def finish(self) -> dict:
        return {role: t.finish() for role, t in self.trainers.items()}

    def predict(self, users, ads, chunk: int = 65536):
        """(y_ctr, y_cqs) the served early stage assigns to index pairs."""
        p = self.plan
        y_ctr = np.empty(len(users))
        y_cqs = np.empty(len(users))
        for s in range(0, len(users), chunk):
            u, a = users[s:s + chunk], ads[s:s + chunk]
            m = self.models[p.ctr_role]
            outs, _ = m.forward(m.user_features(self.world, u), m.ad_features(self.world, a), ("ctr",))
            y_ctr[s:s + chunk] = outs["ctr"]
            if p.cqs_role is None:
                y_cqs[s:s + chunk] = self.constant_cqs
            else:
                m = self.models[p.cqs_role]
                outs, _ = m.forward(m.user_features(self.world, u), m.ad_features(self.world, a), ("cqs",))
                y_cqs[s:s + chunk] = outs["cqs"]
        return y_ctr, y_cqs

    def counters(self) -> dict:
        return {role: dataclasses.asdict(t.counters) for role, t in self.trainers.items()}


# --- phases -----------------------------------------------------------------------

@dataclass
class Shared:
    """Everything variants of one seed share: world, frozen teachers, their cache."""

    config: ScenarioConfig
    world: World
    teachers: TeacherSet
    cache: TeacherCache
    constant_cqs: float
    warmup_examples: int
    teacher_losses: dict = field(default_factory=dict)


class PhaseError(RuntimeError):
    """A phase failed; carries the phase name and the request index reached."""

    def __init__(self, phase: str, request_index: int, cause: Exception):
        super().__init__(f"phase {phase!r} failed at request {request_index}: {cause}")
        self.phase = phase
        self.request_index = request_index
        self.cause = cause


# warm-up requests are drawn in fixed chunks so the teachers do not depend on eval_batch
WARMUP_CHUNK = 500


def warm_up_teachers(cfg: ScenarioConfig, world: World):
    """Train the final-stage models on oracle-labeled warm-up traffic.

    Returns the teachers, per-model epoch losses and the warm-up (users, ads)
    example pairs.
    """
    st = cfg.stage
    requests = RequestStream(world, st.retrieval_size, stream(cfg.seed, "warmup_requests"), 0)
    label_rng = stream(cfg.seed, "warmup_labels")
    logs = []
    done = 0
    try:
        while done < cfg.phases.teacher_warmup:
            b = min(WARMUP_CHUNK, cfg.phases.teacher_warmup - done)
            logs.append(warmup_batch(world, requests.next_batch(b), st, label_rng))
            done += b
        users = np.concatenate([l.users for l in logs])
        ads = np.concatenate([l.ads for l in logs])
        clicks = np.concatenate([l.clicks for l in logs])
        quality = np.concatenate([l.quality for l in logs])
        teachers = TeacherSet.create(world, cfg.teacher, cfg.scalars, stream(cfg.seed, "teacher_init"))
        tt = cfg.teacher_train
        losses = {teachers.ctr.name: train_teacher(teachers.ctr, world, users, ads, clicks, tt,
                                                   stream(cfg.seed, "teacher_shuffle/ctr"))}
        for i, m in enumerate(teachers.quality):
            losses[m.name] = train_teacher(m, world, users, ads, quality[:, i], tt,
                                           stream(cfg.seed, f"teacher_shuffle/quality{i}"),
                                           epochs=tt.quality_epochs)
    except Exception as exc:
        raise PhaseError("teacher_warmup", done, exc) from exc
    return teachers, losses, users, ads


def prepare(cfg: ScenarioConfig) -> Shared:
    """World, warm-up, teachers and their cache for one seed."""
    cfg.validate()
    world = generate_world(cfg.world)
    logger.info("seed %d: teacher warm-up on %d requests", cfg.seed, cfg.phases.teacher_warmup)
    teachers, losses, users, ads = warm_up_teachers(cfg, world)
    cache = TeacherCache(world, teachers)
    # the production baseline's single early-stage quality estimate
    constant = float(cache.cqs[users, ads].mean())
    return Shared(cfg, world, teachers, cache, constant, len(users), losses)


def train_policy(shared: Shared, cfg: ScenarioConfig, variant: str, log_path=None) -> Policy:
    world = shared.world
    policy = Policy(cfg, world, variant, shared.constant_cqs)
    cascade = Cascade(world, shared.cache, cfg.stage, cfg.quality_weight,
                      stream(cfg.seed, "train_outcomes"), stream(cfg.seed, "train_augment"))
    requests = RequestStream(world, cfg.stage.retrieval_size, stream(cfg.seed, "train_requests"),
                             cfg.phases.teacher_warmup)
    log_batches = [] if log_path is not None else None
    done = 0
    try:
        while done < cfg.phases.student_train:
            b = min(cfg.serving_batch, cfg.phases.student_train - done)
            _, records = cascade.run_batch(policy.scorer(), requests.next_batch(b))
            policy.feed(records)
            if log_batches is not None:
                log_batches.append(records)
            done += b
        policy.telemetry = policy.finish()
    except Exception as exc:
        raise PhaseError("student_train", done, exc) from exc
    if log_batches is not None:
        Path(log_path).unlink(missing_ok=True)
        write_training_log(log_path, log_batches, world)
    return policy


# --- evaluation -------------------------------------------------------------------

HIGHER_IS_BETTER = {
    "hard_recall": True, "soft_recall": True, "tvd": False, "tvd_pooled": False,
    "ne_ctr": False, "auc_ctr": True, "calibration": None, "distill_gap": False,
    "mse_cqs": False, "cqs_out_of_range": False, "ctr": True, "cvr_proxy": True,
    "xout_rate": False, "impression_total_value": True,
}
METRICS = tuple(HIGHER_IS_BETTER)


@dataclass
class EvalResult:
    metrics: dict  # name -> MetricSummary
    replay: list  # per-request replay rows


def evaluate_policy(shared: Shared, cfg: ScenarioConfig, policy: Policy) -> EvalResult:
    """Replay fresh requests through the trained early stage.

    Recall compares the early model's own top-K over all N candidates with the
    golden set (top-K by final total value over all N); TVD covers the final-stage
    candidates the early stage passed; head metrics use the logged eval records
    (impressions plus augmented candidates), which training never saw.
    """
    world, cache, st = shared.world, shared.cache, cfg.stage
    K = st.auction_winners
    cascade = Cascade(world, cache, st, cfg.quality_weight,
                      stream(cfg.seed, "eval_outcomes"), stream(cfg.seed, "eval_augment"))
    offset = cfg.phases.teacher_warmup + cfg.phases.student_train
    requests = RequestStream(world, st.retrieval_size, stream(cfg.seed, "eval_requests"), offset)
    cols = {k: [] for k in ("hard", "soft", "tvd", "tvd_num", "tvd_den", "clicks", "xout",
                            "cvr", "imp_tv")}
    rec_parts, replay = [], []
    done = 0
    try:
        while done < cfg.phases.eval:
            b = min(cfg.eval_batch, cfg.phases.eval - done)
            req = requests.next_batch(b)
            out, records = cascade.run_batch(policy.scorer(), req)
            ectr_all, _, cqs_all = cache.lookup(req.users, req.ads)
            final_all = total_value(world.bids[req.ads], ectr_all, cqs_all, cfg.quality_weight)
            hard, soft = batch_recalls(final_all, out.early_tv, K)
            f, e = out.final_tv, out.passed_early_tv
            cols["hard"].append(hard)
            cols["soft"].append(soft)
            cols["tvd"].append(batch_tvd(f, e))
            cols["tvd_num"].append(np.abs(f - e).sum(axis=1))
            cols["tvd_den"].append(np.abs(f).sum(axis=1))
            cols["clicks"].append(out.clicks.sum(axis=1))
            cols["xout"].append(out.quality_events[..., 0].sum(axis=1))
            win_cvr = world.campaign_cvr[world.campaigns[out.winner_ads]]
            cols["cvr"].append((out.clicks * win_cvr).sum(axis=1))
            cols["imp_tv"].append(out.winner_tv.sum(axis=1))
            rec_parts.append(records)
            replay.extend(_replay_rows(req, out, final_all, hard, soft, cols["tvd"][-1], K))
            done += b
    except Exception as exc:
        raise PhaseError("eval", done, exc) from exc
    c = {k: np.concatenate(v) for k, v in cols.items() if v}
    records = RecordBatch.concat(rec_parts)
    y_ctr, y_cqs = policy.predict(records.user, records.ad)
    R, seed = cfg.bootstrap_resamples, cfg.seed
    n_req = len(c["hard"])
    per_req_k = np.full(n_req, float(K))
    hard_mask = records.impressed & records.ctr_traffic
    traffic = records.ctr_traffic
    groups = records.request_id
    uniq, inv = np.unique(groups, return_inverse=True)

    everything = np.ones(len(records), bool)

    def by_request(values, mask):
        """Per-request (sum of values, record count) over the masked records."""
        return (np.bincount(inv[mask], weights=values[mask], minlength=len(uniq)),
                np.bincount(inv[mask], minlength=len(uniq)).astype(np.float64))

    clicks = records.click.astype(np.float64)
    metrics = {
        "hard_recall": aggregate(c["hard"], R, seed),
        "soft_recall": aggregate(c["soft"], R, seed),
        "tvd": aggregate(c["tvd"], R, seed),
        "tvd_pooled": aggregate_ratio(c["tvd_num"], c["tvd_den"], R, seed),
        "ne_ctr": aggregate_ne(y_ctr[hard_mask], clicks[hard_mask], groups[hard_mask], R, seed),
        "auc_ctr": aggregate_auc(y_ctr[hard_mask], clicks[hard_mask], groups[hard_mask], R, seed),
        "calibration": aggregate_ratio(by_request(y_ctr, hard_mask)[0],
                                       by_request(clicks, hard_mask)[0], R, seed),
        "distill_gap": aggregate_ratio(*by_request(np.abs(y_ctr - records.teacher_ectr), traffic), R, seed),
        "mse_cqs": aggregate_ratio(*by_request((y_cqs - records.final_cqs) ** 2, everything), R, seed),
        "cqs_out_of_range": aggregate_ratio(*by_request(
            ((y_cqs < 0) | (y_cqs > cfg.scalars.upper_bound)).astype(np.float64), everything), R, seed),
        "ctr": aggregate_ratio(c["clicks"], per_req_k, R, seed),
        "cvr_proxy": aggregate_ratio(c["cvr"], per_req_k, R, seed),
        "xout_rate": aggregate_ratio(c["xout"], per_req_k, R, seed),
        "impression_total_value": aggregate_ratio(c["imp_tv"], per_req_k, R, seed),
    }
    return EvalResult(metrics, replay)


def _replay_rows(req, out, final_all, hard, soft, tvd_vals, K) -> list[dict]:
    golden = golden_positions(final_all, K)
    picks = golden_positions(out.early_tv, K)
    rows = []
    for i in range(len(req.request_ids)):
        rows.append({
            "request_id": int(req.request_ids[i]),
            "user_id": int(req.users[i]),
            "golden_ads": req.ads[i, golden[i]].tolist(),
            "golden_final_tv": final_all[i, golden[i]].tolist(),
            "model_ads": req.ads[i, picks[i]].tolist(),
            "model_final_tv": final_all[i, picks[i]].tolist(),
            "impressed_ads": out.winner_ads[i].tolist(),
            "hard_recall": float(hard[i]),
            "soft_recall": None if np.isnan(soft[i]) else float(soft[i]),
            "tvd": None if np.isnan(tvd_vals[i]) else float(tvd_vals[i]),
        })
    return rows


# --- runs and reports -------------------------------------------------------------

@dataclass
class VariantResult:
    variant: str
    metrics: dict
    counters: dict
    telemetry: dict
    policy: Policy
    replay: list


@dataclass
class RunReport:
    config: ScenarioConfig
    results: dict  # variant -> VariantResult, in run order
    teacher_losses: dict = field(default_factory=dict)
    constant_cqs: float = float("nan")

    def deltas(self) -> dict:
        """Relative change of each variant vs mtl_full, per metric (None if undefined)."""
        if REFERENCE_VARIANT not in self.results:
            return {}
        ref = self.results[REFERENCE_VARIANT].metrics
        out = {}
        for v, res in self.results.items():
            if v == REFERENCE_VARIANT:
                continue
            out[v] = {}
            for m in METRICS:
                a, b = res.metrics[m].mean, ref[m].mean
                diff = a - b if np.isfinite(a) and np.isfinite(b) else None
                rel = diff / abs(b) if diff is not None and b != 0 else None
                out[v][m] = {"diff": _clean(diff), "relative": _clean(rel)}
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "reference": REFERENCE_VARIANT if REFERENCE_VARIANT in self.results else None,
            "teacher_losses": {k: [_clean(x) for x in v] for k, v in self.teacher_losses.items()},
            "constant_cqs": _clean(self.constant_cqs),
            "variants": {
                v: {"metrics": {m: {k: _jsonable(x) for k, x in s.as_dict().items()}
                                for m, s in r.metrics.items()},
                    "counters": r.counters}
                for v, r in self.results.items()
            },
            "deltas": self.deltas(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "metric", "mean", "sd", "ci_low", "ci_high", "count", "undefined", "kind"])
        for v, r in self.results.items():
            for m in METRICS:
                s = r.metrics[m]
                w.writerow([v, m, _fmt(s.mean), _fmt(s.sd), _fmt(s.ci_low), _fmt(s.ci_high),
                            s.count, s.undefined, s.kind])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"# Early-stage ranking report (seed {self.config.seed})", ""]
        variants = list(self.results)
        lines.append("| metric | " + " | ".join(variants) + " |")
        lines.append("|---|" + "---|" * len(variants))
        for m in METRICS:
            cells = []
            for v in variants:
                s = self.results[v].metrics[m]
                cells.append("n/a" if not np.isfinite(s.mean) else
                             f"{s.mean:.4f} [{s.ci_low:.4f}, {s.ci_high:.4f}]")
            lines.append(f"| {m}{_marker(m)} | " + " | ".join(cells) + " |")
        deltas = self.deltas()
        if deltas:
            lines += ["", f"Relative change vs {REFERENCE_VARIANT}; (+) means higher is better, "
                          "(-) means lower is better.", ""]
            cols = [m for m in METRICS if HIGHER_IS_BETTER[m] is not None]
            lines.append("| variant | " + " | ".join(f"{m}{_marker(m)}" for m in cols) + " |")
            lines.append("|---|" + "---|" * len(cols))
            for v, row in deltas.items():
                cells = ["n/a" if row[m]["relative"] is None else f"{100 * row[m]['relative']:+.2f}%"
                         for m in cols]
                lines.append(f"| {v} | " + " | ".join(cells) + " |")
        lines += ["", "Per-request sd of recall: "
                  + ", ".join(f"{v}: hard {r.metrics['hard_recall'].sd:.4f} / soft "
                              f"{r.metrics['soft_recall'].sd:.4f}" for v, r in self.results.items()),
                  "", "cvr_proxy is clicks weighted by a fixed per-campaign conversion propensity.", ""]
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.md").write_text(self.to_markdown())


def _marker(metric: str) -> str:
    hb = HIGHER_IS_BETTER[metric]
    return "" if hb is None else (" (+)" if hb else " (-)")


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


def _fmt(x) -> str:
    return "" if x is None or not np.isfinite(x) else repr(float(x))


def run_variant(shared: Shared, variant: str, log_path=None) -> VariantResult:
    cfg = dataclasses.replace(shared.config, variant=variant)
    logger.info("seed %d: training %s", cfg.seed, variant)
    policy = train_policy(shared, cfg, variant, log_path)
    ev = evaluate_policy(shared, cfg, policy)
    return VariantResult(variant, ev.metrics, policy.counters(), policy.telemetry, policy, ev.replay)


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> RunReport:
    shared = prepare(cfg)
    return run_variants(shared, [cfg.variant], out_dir)


def run_ablation_matrix(cfg: ScenarioConfig, variants=ABLATION_VARIANTS, out_dir=None,
                        shared: Shared | None = None) -> RunReport:
    """All listed variants on one shared world and teacher checkpoint."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    shared = shared or prepare(cfg)
    return run_variants(shared, list(variants), out_dir)


def run_variants(shared: Shared, variants: list[str], out_dir=None) -> RunReport:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        write_shared_checkpoint(shared, out)
    results = {}
    for v in variants:
        log_path = None
        if out is not None and shared.config.save_training_log:
            log_path = out / f"training_log_{v}.jsonl"
        results[v] = run_variant(shared, v, log_path)
        if out is not None:
            write_variant_checkpoint(results[v], out)
    report = RunReport(shared.config, results, shared.teacher_losses, shared.constant_cqs)
    if out is not None:
        report.write(out)
    return report


@dataclass
class SweepReport:
    path: str
    values: list
    reports: list  # RunReport per value

    def rows(self) -> list[dict]:
        rows = []
        for value, rep in zip(self.values, self.reports):
            for v, r in rep.results.items():
                row = {"value": value, "variant": v}
                row.update({m: _clean(r.metrics[m].mean) for m in METRICS})
                rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.path, "variant", *METRICS])
        for row in self.rows():
            w.writerow([json.dumps(row["value"]), row["variant"], *(_fmt(row[m]) for m in METRICS)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        cols = ("hard_recall", "soft_recall", "tvd", "ne_ctr", "mse_cqs", "xout_rate")
        lines = [f"# Sweep over {self.path}", "",
                 f"| {self.path} | variant | " + " | ".join(f"{m}{_marker(m)}" for m in cols) + " |",
                 "|---|---|" + "---|" * len(cols)]
        for row in self.rows():
            cells = ["n/a" if row[m] is None else f"{row[m]:.4f}" for m in cols]
            lines.append(f"| {json.dumps(row['value'])} | {row['variant']} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(self.to_csv())
        (out / "sweep.md").write_text(self.to_markdown())
        (out / "sweep.json").write_text(json.dumps({"path": self.path, "values": self.values,
                                                    "rows": self.rows()}, indent=2) + "\n")


# config sections the world and teachers depend on; sweeping anything else reuses them
_SHARED_SECTIONS = ("world", "stage", "teacher", "teacher_train", "scalars", "phases", "seed")


def sweep(path: str, values, cfg: ScenarioConfig, out_dir=None) -> SweepReport:
    """One run of ``cfg.variant`` per value of the dotted config ``path``."""
    base = cfg.to_dict()
    set_path(json.loads(json.dumps(base)), path, None)  # resolve the path even for empty sweeps
    values = list(values)
    reports, cache = [], {}
    for i, value in enumerate(values):
        data = json.loads(json.dumps(base))
        set_path(data, path, value)
        run_cfg = ScenarioConfig.from_dict(data)
        run_cfg.validate()
        key = json.dumps({k: data[k] for k in _SHARED_SECTIONS}, sort_keys=True)
        if key not in cache:
            cache = {key: prepare(run_cfg)}
        shared = dataclasses.replace(cache[key], config=run_cfg)
        sub = None if out_dir is None else Path(out_dir) / f"run_{i:03d}"
        reports.append(run_variants(shared, [run_cfg.variant], sub))
    rep = SweepReport(path, values, reports)
    if out_dir is not None:
        rep.write(out_dir)
    return rep


# --- checkpoints --------------------------------------------------------------------
#
# A run directory holds: config.json (resolved config), shared.json (baseline
# constant CQS, warm-up size, teacher losses), world.jsonl,
# teacher_<name>.bin per final-stage model, student_<variant>_<role>.bin,
# telemetry_<variant>.jsonl, replay_<variant>.jsonl, optionally
# training_log_<variant>.jsonl, and report.{json,csv,md}. Parameter dumps use
# the binary layout documented in earlyrank.nn.

def write_shared_checkpoint(shared: Shared, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(shared.config.to_dict(), indent=2) + "\n")
    (out / "shared.json").write_text(json.dumps({
        "constant_cqs": shared.constant_cqs,
        "warmup_examples": shared.warmup_examples,
        "teacher_losses": shared.teacher_losses,
    }, indent=2) + "\n")
    save_world(shared.world, out / "world.jsonl")
    for name, model in shared.teachers.models().items():
        save_params(out / f"teacher_{name}.bin", model.params)


def write_variant_checkpoint(res: VariantResult, out: Path) -> None:
    for role, model in res.policy.models.items():
        save_params(out / f"student_{res.variant}_{role}.bin", model.params)
    with (out / f"telemetry_{res.variant}.jsonl").open("w") as fh:
        for role, rows in res.telemetry.items():
            for row in rows:
                fh.write(json.dumps({"role": role, **{k: _jsonable(v) for k, v in row.items()}}) + "\n")
    with (out / f"replay_{res.variant}.jsonl").open("w") as fh:
        for row in res.replay:
            fh.write(json.dumps(row) + "\n")


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        return _clean(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def load_shared(run_dir) -> Shared:
    run = Path(run_dir)
    if not (run / "config.json").exists():
        raise DataError(f"{run} is not a run checkpoint (no config.json)")
    cfg = ScenarioConfig.from_dict(json.loads((run / "config.json").read_text()))
    cfg.validate()
    world = load_world(run / "world.jsonl")
    teachers = TeacherSet.create(world, cfg.teacher, cfg.scalars, stream(cfg.seed, "teacher_init"))
    for name, model in teachers.models().items():
        restore_params(model.params, load_params(run / f"teacher_{name}.bin"))
    meta = json.loads((run / "shared.json").read_text())
    return Shared(cfg, world, teachers, TeacherCache(world, teachers), meta["constant_cqs"],
                  meta["warmup_examples"], meta["teacher_losses"])


def replay_eval(run_dir, out_dir=None) -> RunReport:
    """Re-evaluate every student stored in a run checkpoint on the eval phase."""
    run = Path(run_dir)
    shared = load_shared(run)
    results = {}
    for v in VARIANTS:
        roles = variant_plan(v, shared.config.train).models
        if not all((run / f"student_{v}_{r}.bin").exists() for r in roles):
            continue
        cfg = dataclasses.replace(shared.config, variant=v)
        policy = Policy(cfg, shared.world, v, shared.constant_cqs)
        for role, model in policy.models.items():
            restore_params(model.params, load_params(run / f"student_{v}_{role}.bin"))
        policy.telemetry = {}
        ev = evaluate_policy(shared, cfg, policy)
        results[v] = VariantResult(v, ev.metrics, {}, {}, policy, ev.replay)
    if not results:
        raise DataError(f"no student checkpoints found in {run}")
    report = RunReport(shared.config, results, {}, shared.constant_cqs)
    if out_dir is not None:
        report.write(out_dir)
    return report


__all__ = [
    "ABLATION_VARIANTS", "METRICS", "VARIANTS", "PhaseSizes", "ScenarioConfig", "RunReport", "SweepReport",
    "Policy", "Shared", "PhaseError", "load_config", "prepare", "run_scenario", "run_ablation_matrix",
    "run_variants", "run_variant", "sweep", "replay_eval", "stream", "variant_plan",
]
