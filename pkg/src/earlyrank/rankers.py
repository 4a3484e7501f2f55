"""Model zoo: final-stage teachers, the early-stage two-tower multi-task student,
CQS consolidation and total value.

Final-stage models follow the DLRM layout: per-field embeddings, pairwise dot
products between user and ad bucket-field embeddings, and a top MLP over the
dots concatenated with the raw embeddings. The student is a two-tower model whose
towers never see each other; three heads read the interaction vector
``[h_u, h_a, h_u * h_a]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn import (
    MlpSpec,
    ParamSet,
    embedding_backward,
    embedding_lookup,
    init_embedding,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_predict,
    activate,
)
from .world import World

HEADS = ("ctr", "cqs", "teacher")


# --- CQS and total value -------------------------------------------------------

@dataclass(frozen=True)
class QualityScalars:
    values: tuple[float, ...] = (1.0, 2.0, 1.0)

    def __post_init__(self):
        if len(self.values) < 1 or any(not v > 0 for v in self.values):
            raise ConfigError(f"quality scalars must all be positive, got {self.values}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @property
    def upper_bound(self) -> float:
        return float(sum(self.values))


def compute_cqs(quality_preds, scalars: QualityScalars):
    """Consolidated quality score: sum_i scalar_i * p_i over the last axis."""
    preds = np.asarray(quality_preds, dtype=np.float64)
    s = scalars.as_array()
    if preds.shape[-1] != len(s):
        raise ConfigError(f"{preds.shape[-1]} quality predictions but {len(s)} scalars")
    out = preds @ s
    return float(out) if out.ndim == 0 else out


def ad_quality(cqs):
    """Quality term entering total value. Quality events are negative, so f(x) = -x."""
    return -np.asarray(cqs, dtype=np.float64) if np.ndim(cqs) else -float(cqs)


def total_value(bid, pctr, cqs, quality_weight: float):
    """``bid * pctr + w_q * ad_quality(cqs)``; used identically for both stages."""
    if quality_weight < 0:
        raise ConfigError("quality weight must be >= 0")
    bid = np.asarray(bid, dtype=np.float64)
    if np.any(bid <= 0):
        raise DataError("bids must be positive")
    tv = bid * np.asarray(pctr, dtype=np.float64) + quality_weight * ad_quality(cqs)
    return float(tv) if np.ndim(tv) == 0 else tv


@dataclass(frozen=True)
class ScoredAd:
    ad_id: int
    stage: str  # "early" or "final"
    pctr: float
    cqs: float
    ad_quality: float
    total_value: float
    quality_event_preds: tuple[float, ...] = ()


# --- final-stage models -------------------------------------------------------

@dataclass(frozen=True)
class TeacherModelConfig:
    embed_dim: int = 8
    ctr_widths: tuple[int, ...] = (256, 128, 64, 1)
    quality_widths: tuple[int, ...] = (64, 32, 1)


@dataclass
class DotTape:
    user_ids: np.ndarray
    ad_ids: np.ndarray
    eu: np.ndarray
    ea: np.ndarray
    mlp: object


class DotInteractionModel:
    """Binary-probability model over the full final-stage feature set.

    Used for the final CTR model and each quality-event model; they differ
    only in top-MLP widths.
    """

    def __init__(self, world: World, widths, embed_dim: int, rng: np.random.Generator,
                 name: str = "final"):
        if widths[-1] != 1:
            raise ConfigError("final-stage models need a single output unit")
        self.name = name
        self.embed_dim = embed_dim
        self.user_vocab = world.user_schema.total_vocab
        self.ad_vocab = world.ad_schema.total_vocab
        self.num_user_fields = world.user_schema.num_fields
        self.num_ad_fields = world.ad_schema.num_fields
        self.user_dot_fields = world.user_schema.fields_of_kind("bucket")
        self.ad_dot_fields = world.ad_schema.fields_of_kind("bucket")
        n_dots = len(self.user_dot_fields) * len(self.ad_dot_fields)
        in_dim = n_dots + (self.num_user_fields + self.num_ad_fields) * embed_dim
        self.spec = MlpSpec.build(in_dim, widths, final="sigmoid")
        self.params = ParamSet()
        init_embedding(self.params, "user_emb", self.user_vocab, embed_dim, rng)
        init_embedding(self.params, "ad_emb", self.ad_vocab, embed_dim, rng)
        init_mlp(self.spec, self.params, "top.", rng)

    def _check(self, user_ids, ad_ids):
        if user_ids.shape[-1] != self.num_user_fields or ad_ids.shape[-1] != self.num_ad_fields:
            raise DataError(f"{self.name}: expected {self.num_user_fields} user and "
                            f"{self.num_ad_fields} ad feature fields")

    def forward(self, user_ids: np.ndarray, ad_ids: np.ndarray):
        """Feature-id rows ``(B, Fu)``, ``(B, Fa)`` -> probabilities ``(B,)`` and a tape."""
        user_ids = np.atleast_2d(user_ids)
        ad_ids = np.atleast_2d(ad_ids)
        self._check(user_ids, ad_ids)
        eu = embedding_lookup(self.params["user_emb"], user_ids)
        ea = embedding_lookup(self.params["ad_emb"], ad_ids)
        B = eu.shape[0]
        dots = eu[:, self.user_dot_fields] @ ea[:, self.ad_dot_fields].transpose(0, 2, 1)
        x = np.concatenate([dots.reshape(B, -1), eu.reshape(B, -1), ea.reshape(B, -1)], axis=1)
        out, mlp_tape = mlp_forward(self.spec, self.params, x, prefix="top.")
        return out[:, 0], DotTape(user_ids, ad_ids, eu, ea, mlp_tape)

    def backward(self, tape: DotTape, d_prob: np.ndarray) -> dict:
        grads, gx = mlp_backward(tape.mlp, np.asarray(d_prob, dtype=np.float64)[:, None])
        B = gx.shape[0]
        nu, na = len(self.user_dot_fields), len(self.ad_dot_fields)
        e = self.embed_dim
        n_dots = nu * na
        g_dots = gx[:, :n_dots].reshape(B, nu, na)
        g_eu = gx[:, n_dots:n_dots + self.num_user_fields * e].reshape(B, self.num_user_fields, e).copy()
        g_ea = gx[:, n_dots + self.num_user_fields * e:].reshape(B, self.num_ad_fields, e).copy()
        g_eu[:, self.user_dot_fields] += g_dots @ tape.ea[:, self.ad_dot_fields]
        g_ea[:, self.ad_dot_fields] += g_dots.transpose(0, 2, 1) @ tape.eu[:, self.user_dot_fields]
        grads["user_emb"] = embedding_backward(g_eu, tape.user_ids, self.user_vocab)
        grads["ad_emb"] = embedding_backward(g_ea, tape.ad_ids, self.ad_vocab)
        return grads

    def predict(self, user_ids, ad_ids) -> np.ndarray:
        return self.forward(user_ids, ad_ids)[0]

    def predict_grid(self, world: World, users, ads, ad_chunk: int = 16) -> np.ndarray:
        """Probabilities for every combination, shape ``(len(users), len(ads))``.

        The first top layer is linear in its input, so it splits into a per-user
        part, a per-ad part and the dot-product block. The dot block is
        contracted as user embeddings against ad embeddings pre-multiplied by
        the dot weights, which never materializes per-pair inputs.
        """
        users = np.asarray(users)
        ads = np.asarray(ads)
        eu = embedding_lookup(self.params["user_emb"], world.user_features[users])
        ea = embedding_lookup(self.params["ad_emb"], world.ad_features[ads])
        U, A, e = len(users), len(ads), self.embed_dim
        nu, na = len(self.user_dot_fields), len(self.ad_dot_fields)
        w = self.params["top.0.weight"]
        H = w.shape[0]
        n_dots, n_user = nu * na, self.num_user_fields * e
        w_dots = w[:, :n_dots].reshape(H * nu, na)
        user_part = eu.reshape(U, -1) @ w[:, n_dots:n_dots + n_user].T
        ad_part = ea.reshape(A, -1) @ w[:, n_dots + n_user:].T + self.params["top.0.bias"]
        xu = eu[:, self.user_dot_fields].reshape(U, nu * e)
        ea_dot = ea[:, self.ad_dot_fields]
        act = self.spec.activations[0]
        out = np.empty((U, A))
        for start in range(0, A, ad_chunk):
            sl = slice(start, min(A, start + ad_chunk))
            c = sl.stop - sl.start
            # (c, H, nu * e): entry [a, h, i * e + k] = sum_j w[h, i, j] ea[a, j, k]
            t = (w_dots @ ea_dot[sl]).reshape(c * H, nu * e)
            z = (xu @ t.T).reshape(U, c, H) + user_part[:, None, :] + ad_part[sl][None]
            h = activate(act, z)
            out[:, sl] = mlp_predict(self.spec, self.params, h.reshape(U * c, H), "top.", 1).reshape(U, c)
        return out

    def predict_pairs(self, world: World, users, ads) -> np.ndarray:
        users = np.asarray(users)
        ads = np.asarray(ads)
        users, ads = np.broadcast_arrays(users, ads)
        p = self.predict(world.user_features[users.ravel()], world.ad_features[ads.ravel()])
        return p.reshape(users.shape)


class FinalCtrModel(DotInteractionModel):
    pass


class QualityEventModel(DotInteractionModel):
    def __init__(self, world: World, widths, embed_dim: int, rng: np.random.Generator, event: int):
        super().__init__(world, widths, embed_dim, rng, name=f"quality{event}")
        self.event = event


def final_ctr_predict(model: FinalCtrModel, world: World, users, ads) -> np.ndarray:
    """Teacher eCTR for (user, ad) index pairs (broadcastable)."""
    return model.predict_pairs(world, users, ads)


def quality_predict_all(models: list[QualityEventModel], world: World, users, ads) -> np.ndarray:
    """Per-event probabilities, shape ``broadcast(users, ads).shape + (M,)``."""
    return np.stack([m.predict_pairs(world, users, ads) for m in models], axis=-1)


@dataclass
class TeacherSet:
    ctr: FinalCtrModel
    quality: list[QualityEventModel]
    scalars: QualityScalars

    def __post_init__(self):
        if len(self.quality) != len(self.scalars.values):
            raise ConfigError(f"{len(self.quality)} quality models but "
                              f"{len(self.scalars.values)} scalars")

    @classmethod
    def create(cls, world: World, config: TeacherModelConfig, scalars: QualityScalars,
               rng: np.random.Generator) -> "TeacherSet":
        ctr = FinalCtrModel(world, config.ctr_widths, config.embed_dim, rng, name="final_ctr")
        quality = [QualityEventModel(world, config.quality_widths, config.embed_dim, rng, i)
                   for i in range(world.num_quality_events)]
        return cls(ctr, quality, scalars)

    def models(self) -> dict[str, DotInteractionModel]:
        out = {"final_ctr": self.ctr}
        out.update({m.name: m for m in self.quality})
        return out

    def score(self, world: World, users, ads):
        """(eCTR, per-event quality predictions, CQS) for index pairs."""
        ectr = final_ctr_predict(self.ctr, world, users, ads)
        q = quality_predict_all(self.quality, world, users, ads)
        return ectr, q, compute_cqs(q, self.scalars)


class TeacherCache:
    """Frozen teacher predictions for every (user, ad) pair in the world.

    Built by calling the teachers on all pairs; the cascade and the replay
    simulator both read from it, so production and replay flows share scores.
    """

    def __init__(self, world: World, teachers: TeacherSet):
        users, ads = np.arange(world.num_users), np.arange(world.num_ads)
        self.scalars = teachers.scalars
        self.ectr = teachers.ctr.predict_grid(world, users, ads)
        self.quality = np.stack([m.predict_grid(world, users, ads) for m in teachers.quality], axis=-1)
        self.cqs = compute_cqs(self.quality, teachers.scalars)

    def lookup(self, users, ads):
        users = np.asarray(users)
        ads = np.asarray(ads)
        if users.ndim < ads.ndim:
            users = users.reshape(users.shape + (1,) * (ads.ndim - users.ndim))
        return self.ectr[users, ads], self.quality[users, ads], self.cqs[users, ads]


# --- early-stage two-tower student --------------------------------------------

@dataclass(frozen=True)
class EarlyModelConfig:
    embed_dim: int = 4
    tower_widths: tuple[int, ...] = (64, 32, 16)
    head_widths: tuple[int, ...] = (16, 1)


@dataclass
class TowerTape:
    ids: np.ndarray
    mlp: object


@dataclass
class EarlyTape:
    user: TowerTape
    ad: TowerTape
    hu: np.ndarray
    ha: np.ndarray
    heads: dict = field(default_factory=dict)


class EarlyTwoTowerModel:
    """Two towers over the early-stage feature subset plus ctr / cqs / teacher heads."""

    def __init__(self, world: World, config: EarlyModelConfig, rng: np.random.Generator):
        if config.head_widths[-1] != 1:
            raise ConfigError("task heads need a single output unit")
        self.config = config
        self.user_fields = world.early_user_fields
        self.ad_fields = world.early_ad_fields
        self.user_vocab = world.user_schema.total_vocab
        self.ad_vocab = world.ad_schema.total_vocab
        e = config.embed_dim
        d = config.tower_widths[-1]
        self.user_spec = MlpSpec.build(len(self.user_fields) * e, config.tower_widths, final="identity")
        self.ad_spec = MlpSpec.build(len(self.ad_fields) * e, config.tower_widths, final="identity")
        self.head_specs = {
            "ctr": MlpSpec.build(3 * d, config.head_widths, final="sigmoid"),
            "cqs": MlpSpec.build(3 * d, config.head_widths, final="identity"),
            "teacher": MlpSpec.build(3 * d, config.head_widths, final="sigmoid"),
        }
        self.params = ParamSet()
        init_embedding(self.params, "user_emb", self.user_vocab, e, rng)
        init_embedding(self.params, "ad_emb", self.ad_vocab, e, rng)
        init_mlp(self.user_spec, self.params, "user_tower.", rng)
        init_mlp(self.ad_spec, self.params, "ad_tower.", rng)
        for head in HEADS:
            init_mlp(self.head_specs[head], self.params, f"{head}_head.", rng)

    @property
    def dim(self) -> int:
        return self.config.tower_widths[-1]

    def user_features(self, world: World, users) -> np.ndarray:
        return world.user_features[np.asarray(users)][..., self.user_fields]

    def ad_features(self, world: World, ads) -> np.ndarray:
        return world.ad_features[np.asarray(ads)][..., self.ad_fields]

    def _tower(self, which: str, ids: np.ndarray):
        ids = np.atleast_2d(ids)
        fields = self.user_fields if which == "user" else self.ad_fields
        if ids.shape[1] != len(fields):
            raise DataError(f"{which} tower expects {len(fields)} feature fields, got {ids.shape[1]}")
        emb = embedding_lookup(self.params[f"{which}_emb"], ids)
        spec = self.user_spec if which == "user" else self.ad_spec
        h, tape = mlp_forward(spec, self.params, emb.reshape(len(ids), -1), prefix=f"{which}_tower.")
        return h, TowerTape(ids, tape)

    def user_tower(self, user_ids: np.ndarray):
        return self._tower("user", user_ids)

    def ad_tower(self, ad_ids: np.ndarray):
        return self._tower("ad", ad_ids)

    @staticmethod
    def interaction(hu: np.ndarray, ha: np.ndarray) -> np.ndarray:
        return np.concatenate([hu, ha, hu * ha], axis=-1)

    def heads(self, hu: np.ndarray, ha: np.ndarray, which=HEADS):
        """Head outputs ``{name: (B,)}`` and their tapes from tower outputs."""
        z = self.interaction(hu, ha)
        outs, tapes = {}, {}
        for head in which:
            y, t = mlp_forward(self.head_specs[head], self.params, z, prefix=f"{head}_head.")
            outs[head] = y[:, 0]
            tapes[head] = t
        return outs, tapes

    def forward(self, user_ids: np.ndarray, ad_ids: np.ndarray, which=HEADS):
        hu, ut = self.user_tower(user_ids)
        ha, at = self.ad_tower(ad_ids)
        if hu.shape[0] != ha.shape[0]:
            raise DataError("user and ad batches differ in length")
        outs, head_tapes = self.heads(hu, ha, which)
        return outs, EarlyTape(ut, at, hu, ha, head_tapes)

    def backward(self, tape: EarlyTape, head_grads: dict) -> dict:
        """``head_grads`` maps head name -> d loss / d output ``(B,)``; missing heads
        contribute nothing."""
        grads = {}
        d = self.dim
        gz = None
        for head, g in head_grads.items():
            if g is None:
                continue
            hg, gzh = mlp_backward(tape.heads[head], np.asarray(g, dtype=np.float64)[:, None])
            grads.update(hg)
            gz = gzh if gz is None else gz + gzh
        if gz is None:
            return grads
        g_hu = gz[:, :d] + gz[:, 2 * d:] * tape.ha
        g_ha = gz[:, d:2 * d] + gz[:, 2 * d:] * tape.hu
        for which, g_h, tt in (("user", g_hu, tape.user), ("ad", g_ha, tape.ad)):
            tg, gx = mlp_backward(tt.mlp, g_h)
            grads.update(tg)
            e = self.config.embed_dim
            vocab = self.user_vocab if which == "user" else self.ad_vocab
            grads[f"{which}_emb"] = embedding_backward(gx.reshape(len(tt.ids), -1, e), tt.ids, vocab)
        return grads


def early_predict(model: EarlyTwoTowerModel, world: World, users, ads):
    """(y_ctr, y_cqs, y_teacher) for index pairs of equal length."""
    users = np.atleast_1d(users)
    ads = np.atleast_1d(ads)
    outs, _ = model.forward(model.user_features(world, users), model.ad_features(world, ads))
    return outs["ctr"], outs["cqs"], outs["teacher"]


# --- early-stage scorers (serving) --------------------------------------------
#
# A scorer maps a request batch (users (B,), ads (B, N)) to early-stage
# (pctr, cqs), each (B, N). Serving never reads the teacher head.

class StudentScorer:
    """Serve a two-tower model: user towers once per request, ad towers once per ad."""

    def __init__(self, model: EarlyTwoTowerModel, world: World, serve_cqs: bool = True):
        self.model = model
        self.world = world
        self.serve_cqs = serve_cqs

    def tower_outputs(self, users: np.ndarray, ads: np.ndarray):
        m = self.model
        hu, _ = m.user_tower(m.user_features(self.world, users))
        uniq, inv = np.unique(ads, return_inverse=True)
        ha, _ = m.ad_tower(m.ad_features(self.world, uniq))
        return hu, ha[inv.reshape(ads.shape)]

    def head(self, name: str, hu: np.ndarray, ha: np.ndarray) -> np.ndarray:
        """Head output ``(B, N)`` for user towers ``(B, d)`` and ad towers ``(B, N, d)``.

        The first layer acts on ``[hu, ha, hu * ha]``, so it splits into a
        per-user term, a per-ad term and a per-request bilinear term; the
        ``(B * N, 3d)`` interaction matrix is never built.
        """
        m = self.model
        d = m.dim
        prefix = f"{name}_head."
        w = m.params.values[prefix + "0.weight"]
        w_u, w_a, w_p = w[:, :d], w[:, d:2 * d], w[:, 2 * d:]
        pre = (hu @ w_u.T + m.params.values[prefix + "0.bias"])[:, None, :]
        pre = pre + ha @ w_a.T + ha @ (w_p[None, :, :] * hu[:, None, :]).transpose(0, 2, 1)
        spec = m.head_specs[name]
        B, N, _ = ha.shape
        h = activate(spec.activations[0], pre.reshape(B * N, -1))
        return mlp_predict(spec, m.params, h, prefix=prefix, start=1)[:, 0].reshape(B, N)

    def score(self, users: np.ndarray, ads: np.ndarray):
        hu, ha = self.tower_outputs(users, ads)
        pctr = self.head("ctr", hu, ha)
        cqs = self.head("cqs", hu, ha) if self.serve_cqs else np.zeros(ads.shape)
        return pctr, cqs


class ConstantQualityScorer:
    """pCTR from a CTR scorer, one constant CQS for every ad (production baseline)."""

    def __init__(self, ctr_scorer, constant_cqs: float):
        self.ctr_scorer = ctr_scorer
        self.constant_cqs = float(constant_cqs)

    def score(self, users, ads):
        pctr, _ = self.ctr_scorer.score(users, ads)
        return pctr, np.full(pctr.shape, self.constant_cqs)


class CompositeScorer:
    """pCTR from one model and CQS from another (dedicated-model variants)."""

    def __init__(self, ctr_scorer, cqs_scorer):
        self.ctr_scorer = ctr_scorer
        self.cqs_scorer = cqs_scorer

    def score(self, users, ads):
        pctr, _ = self.ctr_scorer.score(users, ads)
        _, cqs = self.cqs_scorer.score(users, ads)
        return pctr, cqs


class OracleScorer:
    """The exact final-stage scorer used as an early stage (consistency checks)."""

    def __init__(self, cache: TeacherCache):
        self.cache = cache

    def score(self, users, ads):
        ectr, _, cqs = self.cache.lookup(users, ads)
        return ectr, cqs
