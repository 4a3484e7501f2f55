"""Synthetic ad universe with hidden ground-truth click and quality-event propensities.

Users and ads carry latent vectors. The true click logit of a (user, ad) pair is
``base_ctr_logit + u_click . a_click``; quality event ``i`` has logit
``base_quality_logits[i] + u_quality . a_quality[i]``. Quality latents are mixed
from the click latents on both sides with weight ``sqrt(|rho|)`` so that the
click/quality logit correlation equals ``rho``; with equal interaction sds and
``rho = 1`` the quality latents coincide with the click latents.

Models never see latents directly; they see quantile-bucketed coordinates of
the latents plus id features. The early stage sees only a subset of the bucket
fields.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .nn import sigmoid


@dataclass(frozen=True)
class WorldConfig:
    num_users: int = 1000
    num_ads: int = 1000
    num_campaigns: int = 50
    latent_dim: int = 4
    num_quality_events: int = 3
    ctr_quality_correlation: float = 0.2
    base_ctr_logit: float = -2.944
    base_quality_logits: tuple[float, ...] = (-2.5, -3.0, -2.8)
    # sd of the latent interaction term u . a in the click logit, and of the
    # ad-side / user-side main effects carried by the latent means
    interaction_sd: float = 0.5
    ad_ctr_sd: float = 0.9
    user_ctr_sd: float = 0.12
    # the quality logits reuse the click structure scaled by
    # quality_interaction_sd / interaction_sd
    quality_interaction_sd: float = 1.0
    bid_log_mean: float = 1.5
    bid_log_sd: float = 0.4
    post_impression_fraction: float = 0.2
    num_buckets: int = 8
    early_feature_fraction: float = 0.6
    campaign_cvr_range: tuple[float, float] = (0.02, 0.2)
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_users", "num_ads", "num_campaigns", "latent_dim", "num_buckets"):
            if getattr(self, name) < 1:
                raise ConfigError(f"world.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_quality_events < 2:
            raise ConfigError("world.num_quality_events must be >= 2 (Xout plus one other)")
        if len(self.base_quality_logits) != self.num_quality_events:
            raise ConfigError(
                f"base_quality_logits has {len(self.base_quality_logits)} entries, "
                f"expected {self.num_quality_events}"
            )
        if self.num_campaigns > self.num_ads:
            raise ConfigError("more campaigns than ads")
        if not -1.0 <= self.ctr_quality_correlation <= 1.0:
            raise ConfigError("ctr_quality_correlation must lie in [-1, 1]")
        if not 0.0 <= self.post_impression_fraction <= 1.0:
            raise ConfigError("post_impression_fraction must lie in [0, 1]")
        if not 0.0 < self.early_feature_fraction <= 1.0:
            raise ConfigError("early_feature_fraction must lie in (0, 1]")
        sds = (self.interaction_sd, self.ad_ctr_sd, self.user_ctr_sd,
               self.quality_interaction_sd, self.bid_log_sd)
        if min(sds) < 0:
            raise ConfigError("interaction sds, main-effect sds and bid_log_sd must be >= 0")
        if self.ad_ctr_sd > 0 or self.user_ctr_sd > 0:
            if self.interaction_sd <= 0:
                raise ConfigError("main effects need interaction_sd > 0")
            if self.latent_dim < 2:
                raise ConfigError("main effects need latent_dim >= 2")
        lo, hi = self.campaign_cvr_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("campaign_cvr_range must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True)
class FeatureSchema:
    """Categorical fields sharing one id space: field ``f`` owns ids
    ``[offsets[f], offsets[f] + vocab_sizes[f])``."""

    names: tuple[str, ...]
    vocab_sizes: tuple[int, ...]
    kinds: tuple[str, ...]  # "bucket" or "id"

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)

    @property
    def total_vocab(self) -> int:
        return int(sum(self.vocab_sizes))

    @property
    def num_fields(self) -> int:
        return len(self.names)

    def fields_of_kind(self, kind: str) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.kinds) if k == kind], dtype=np.int64)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    latent_click_vector: np.ndarray
    latent_quality_vector: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class AdCandidate:
    ad_id: int
    campaign_id: int
    bid: float
    latent_click_vector: np.ndarray
    latent_quality_vectors: np.ndarray
    post_impression_optimized: bool
    features: np.ndarray


@dataclass(frozen=True)
class GroundTruthOutcome:
    click: int
    quality_events: tuple[int, ...]  # event 0 is the Xout event


@dataclass(frozen=True)
class RankRequest:
    request_id: int
    user_id: int
    ad_ids: np.ndarray  # sorted ascending


@dataclass(frozen=True)
class RequestBatch:
    request_ids: np.ndarray  # (B,)
    users: np.ndarray  # (B,)
    ads: np.ndarray  # (B, N), each row sorted ascending

    def __len__(self):
        return len(self.request_ids)

    def request(self, i: int) -> RankRequest:
        return RankRequest(int(self.request_ids[i]), int(self.users[i]), self.ads[i])

    @classmethod
    def from_requests(cls, requests: list[RankRequest]) -> "RequestBatch":
        return cls(np.array([r.request_id for r in requests], dtype=np.int64),
                   np.array([r.user_id for r in requests], dtype=np.int64),
                   np.stack([np.asarray(r.ad_ids, dtype=np.int64) for r in requests]))


@dataclass(eq=False)
class World:
    config: WorldConfig
    user_click: np.ndarray  # (U, D)
    user_quality: np.ndarray  # (U, D)
    ad_click: np.ndarray  # (A, D)
    ad_quality: np.ndarray  # (A, M, D)
    bids: np.ndarray  # (A,)
    campaigns: np.ndarray  # (A,)
    post_impression: np.ndarray  # (A,) bool
    campaign_cvr: np.ndarray  # (C,)
    user_schema: FeatureSchema
    ad_schema: FeatureSchema
    user_features: np.ndarray  # (U, Fu) global ids
    ad_features: np.ndarray  # (A, Fa) global ids
    early_user_fields: np.ndarray
    early_ad_fields: np.ndarray
    _campaign_members: list = field(default_factory=list, repr=False)

    @property
    def num_users(self) -> int:
        return self.user_click.shape[0]

    @property
    def num_ads(self) -> int:
        return self.ad_click.shape[0]

    @property
    def num_quality_events(self) -> int:
        return self.ad_quality.shape[1]

    def user(self, user_id: int) -> UserProfile:
        return UserProfile(user_id, self.user_click[user_id], self.user_quality[user_id],
                           self.user_features[user_id])

    def ad(self, ad_id: int) -> AdCandidate:
        return AdCandidate(ad_id, int(self.campaigns[ad_id]), float(self.bids[ad_id]),
                           self.ad_click[ad_id], self.ad_quality[ad_id],
                           bool(self.post_impression[ad_id]), self.ad_features[ad_id])

    def campaign_sizes(self) -> np.ndarray:
        return np.bincount(self.campaigns, minlength=self.config.num_campaigns)

    def campaign_members(self) -> list[np.ndarray]:
        if not self._campaign_members:
            for c in range(self.config.num_campaigns):
                self._campaign_members.append(np.flatnonzero(self.campaigns == c))
        return self._campaign_members

    def equals(self, other: "World") -> bool:
        if self.config != other.config or self.user_schema != other.user_schema \
                or self.ad_schema != other.ad_schema:
            return False
        arrays = ("user_click", "user_quality", "ad_click", "ad_quality", "bids", "campaigns",
                  "post_impression", "campaign_cvr", "user_features", "ad_features",
                  "early_user_fields", "early_ad_fields")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)


def _quantile_bucket(values: np.ndarray, num_buckets: int) -> np.ndarray:
    """Bucket each column of ``values`` into ``num_buckets`` population quantiles."""
    qs = np.linspace(0.0, 1.0, num_buckets + 1)[1:-1]
    out = np.empty(values.shape, dtype=np.int64)
    for j in range(values.shape[1]):
        edges = np.quantile(values[:, j], qs)
        out[:, j] = np.searchsorted(edges, values[:, j], side="right")
    return out


def _early_subset(rng: np.random.Generator, bucket_fields: np.ndarray, id_fields: np.ndarray,
                  fraction: float) -> np.ndarray:
    k = max(1, int(round(fraction * len(bucket_fields))))
    chosen = rng.choice(bucket_fields, size=k, replace=False)
    return np.sort(np.concatenate([chosen, id_fields])).astype(np.int64)


def generate_world(config: WorldConfig) -> World:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5eed]))
    U, A, C = config.num_users, config.num_ads, config.num_campaigns
    D, M = config.latent_dim, config.num_quality_events
    # Unit-scale latents: user x = alpha_u e0 + z, ad y = -alpha_a e0 + z'.
    # x . y = -alpha_u alpha_a + alpha_u y_0' - alpha_a x_0' + z . z', i.e. an
    # ad main effect, a user main effect and an interaction of variance D.
    # The negative mean offset cancels most of the upward pull that logit
    # spread puts on the mean probability.
    s2 = config.interaction_sd / np.sqrt(D)
    alpha_u = config.ad_ctr_sd / s2 if s2 > 0 else 0.0
    alpha_a = config.user_ctr_sd / s2 if s2 > 0 else 0.0
    rho = config.ctr_quality_correlation
    mix = np.sqrt(abs(rho))
    rest = np.sqrt(1.0 - abs(rho))

    def offset(axis: int, size: float) -> np.ndarray:
        e = np.zeros(D)
        if size:
            e[axis] = size
        return e

    x_user = offset(0, alpha_u) + rng.normal(size=(U, D))
    x_ad = offset(0, -alpha_a) + rng.normal(size=(A, D))
    # independent quality parts carry the same offsets along e1, which keeps
    # every cross term uncorrelated with x . y: corr(click, quality) = rho
    v_user = offset(1, alpha_u) + rng.normal(size=(U, D))
    v_ad = offset(1, -alpha_a) + rng.normal(size=(A, M, D))
    s, sq = np.sqrt(s2), np.sqrt(config.quality_interaction_sd / np.sqrt(D))
    user_click = s * x_user
    ad_click = s * x_ad
    user_quality = sq * (mix * x_user + rest * v_user)
    ad_quality = sq * (np.sign(rho) * mix * x_ad[:, None, :] + rest * v_ad)

    bids = np.exp(rng.normal(config.bid_log_mean, config.bid_log_sd, size=A))
    campaigns = np.concatenate([np.arange(C), rng.integers(0, C, size=A - C)])
    campaigns = rng.permutation(campaigns).astype(np.int64)
    post_impression = rng.random(A) < config.post_impression_fraction
    campaign_cvr = rng.uniform(*config.campaign_cvr_range, size=C)

    B = config.num_buckets
    user_latents = np.concatenate([user_click, user_quality], axis=1)
    ad_latents = np.concatenate([ad_click, ad_quality.reshape(A, M * D)], axis=1)
    user_names = ([f"u_click_{d}" for d in range(D)] + [f"u_quality_{d}" for d in range(D)]
                  + ["user_id"])
    ad_names = ([f"a_click_{d}" for d in range(D)]
                + [f"a_quality{i}_{d}" for i in range(M) for d in range(D)]
                + ["ad_id", "campaign_id"])
    user_schema = FeatureSchema(tuple(user_names), tuple([B] * (2 * D) + [U]),
                                tuple(["bucket"] * (2 * D) + ["id"]))
    ad_schema = FeatureSchema(tuple(ad_names), tuple([B] * (D * (1 + M)) + [A, C]),
                              tuple(["bucket"] * (D * (1 + M)) + ["id", "id"]))
    user_local = np.concatenate([_quantile_bucket(user_latents, B), np.arange(U)[:, None]], axis=1)
    ad_local = np.concatenate([_quantile_bucket(ad_latents, B), np.arange(A)[:, None],
                               campaigns[:, None]], axis=1)
    user_features = user_local + user_schema.offsets[None, :]
    ad_features = ad_local + ad_schema.offsets[None, :]

    early_user = _early_subset(rng, user_schema.fields_of_kind("bucket"),
                               user_schema.fields_of_kind("id"), config.early_feature_fraction)
    early_ad = _early_subset(rng, ad_schema.fields_of_kind("bucket"),
                             ad_schema.fields_of_kind("id"), config.early_feature_fraction)

    return World(config, user_click, user_quality, ad_click, ad_quality, bids, campaigns,
                 post_impression, campaign_cvr, user_schema, ad_schema, user_features,
                 ad_features, early_user, early_ad)


# --- ground truth -------------------------------------------------------------

def true_click_logit(world: World, user, ad):
    return world.config.base_ctr_logit + np.sum(world.user_click[user] * world.ad_click[ad], axis=-1)


def true_click_prob(world: World, user, ad):
    """Probability of a click; ``user`` and ``ad`` may be broadcastable index arrays."""
    p = sigmoid(true_click_logit(world, user, ad))
    return float(p) if np.ndim(p) == 0 else p


def true_quality_logits(world: World, user, ad):
    base = np.asarray(world.config.base_quality_logits)
    uq = world.user_quality[user]  # (..., D)
    aq = world.ad_quality[ad]  # (..., M, D)
    return base + np.einsum("...d,...md->...m", uq, aq)


def true_quality_event_probs(world: World, user, ad) -> np.ndarray:
    """Probabilities of each quality event, shape ``(..., M)``."""
    return sigmoid(true_quality_logits(world, user, ad))


def realize_outcomes(world: World, user: int, ad: int, rng: np.random.Generator) -> GroundTruthOutcome:
    u = rng.random(1 + world.num_quality_events)
    click, quality = realize_from_uniforms(world, np.array(user), np.array(ad), u)
    return GroundTruthOutcome(int(click), tuple(int(q) for q in quality))


def realize_from_uniforms(world: World, users, ads, uniforms: np.ndarray):
    """Bernoulli draws from pre-drawn uniforms of shape ``(..., 1 + M)``.

    Drawing uniforms per candidate slot up front gives common random numbers:
    the same (request, ad) pair realizes the same outcome under every policy.
    """
    p_click = true_click_prob(world, users, ads)
    p_quality = true_quality_event_probs(world, users, ads)
    click = (uniforms[..., 0] < p_click).astype(np.int8)
    quality = (uniforms[..., 1:] < p_quality).astype(np.int8)
    return click, quality


# --- retrieval ----------------------------------------------------------------

def _stratified_counts(world: World, n: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Per-campaign slot counts ``(size, C)`` with expectation ``n * share``.

    Systematic rounding over a random campaign order: each row sums to ``n``
    and no count exceeds its campaign's inventory (``ceil(n * share) <= size``).
    """
    sizes = world.campaign_sizes().astype(np.float64)
    quota = n * sizes / sizes.sum()
    order = np.argsort(rng.random((size, len(sizes))), axis=1)
    start = rng.random(size)[:, None]
    cum = np.cumsum(quota[order], axis=1)
    hi = np.floor(cum + start - 1e-9)
    lo = np.concatenate([np.floor(start - 1e-9), hi[:, :-1]], axis=1)
    counts = np.empty((size, len(sizes)), dtype=np.int64)
    np.put_along_axis(counts, order, (hi - lo).astype(np.int64), axis=1)
    return np.minimum(counts, sizes.astype(np.int64))


def sample_requests(world: World, n: int, rng: np.random.Generator, first_id: int, size: int) -> RequestBatch:
    """``size`` requests: users uniform at random, ``n`` distinct ads each from
    campaign-stratified retrieval (uniform within a campaign)."""
    if n < 1 or n > world.num_ads:
        raise ConfigError(f"retrieval size {n} outside [1, num_ads={world.num_ads}]")
    ids = np.arange(first_id, first_id + size, dtype=np.int64)
    users = rng.integers(world.num_users, size=size).astype(np.int64)
    if n == world.num_ads:
        return RequestBatch(ids, users, np.broadcast_to(np.arange(n, dtype=np.int64), (size, n)).copy())
    counts = _stratified_counts(world, n, rng, size)
    # campaign id plus a uniform key sorts ads into campaign blocks in random
    # order; block c keeps its first counts[c] ads
    order = np.argsort(world.campaigns[None, :] + rng.random((size, world.num_ads)), axis=1)
    camp_sorted = np.sort(world.campaigns)
    sizes = world.campaign_sizes()
    rank_in_block = np.arange(world.num_ads) - (np.cumsum(sizes) - sizes)[camp_sorted]
    keep = rank_in_block[None, :] < counts[:, camp_sorted]
    ads = np.sort(order[keep].reshape(size, n), axis=1)
    return RequestBatch(ids, users, ads)


def sample_request(world: World, n: int, rng: np.random.Generator, request_id: int) -> RankRequest:
    """One user uniformly at random plus ``n`` distinct ads from campaign-stratified retrieval."""
    return sample_requests(world, n, rng, request_id, 1).request(0)


class RequestStream:
    """Reproducible request source with ids unique within a run (``id_offset`` separates phases)."""

    def __init__(self, world: World, retrieval_size: int, rng: np.random.Generator,
                 id_offset: int = 0):
        if retrieval_size < 1 or retrieval_size > world.num_ads:
            raise ConfigError(f"retrieval size {retrieval_size} outside [1, {world.num_ads}]")
        self.world = world
        self.n = retrieval_size
        self.rng = rng
        self.next_id = id_offset

    def next(self) -> RankRequest:
        return self.next_batch(1).request(0)

    def next_batch(self, size: int) -> RequestBatch:
        batch = sample_requests(self.world, self.n, self.rng, self.next_id, size)
        self.next_id += size
        return batch


# --- checkpoint ---------------------------------------------------------------
#
# Line-delimited JSON. Line 1: {"kind": "world", "config", "user_schema",
# "ad_schema", "early_user_fields", "early_ad_fields", "campaign_cvr"}.
# Then one line per user: {"kind": "user", "user_id", "latent_click",
# "latent_quality", "features"}, then one per ad: {"kind": "ad", "ad_id",
# "campaign_id", "bid", "post_impression_optimized", "latent_click",
# "latent_quality", "features"}. Floats are written with round-trip precision.

def _schema_dict(s: FeatureSchema) -> dict:
    return {"names": list(s.names), "vocab_sizes": list(s.vocab_sizes), "kinds": list(s.kinds)}


def _schema_from(d: dict) -> FeatureSchema:
    return FeatureSchema(tuple(d["names"]), tuple(int(v) for v in d["vocab_sizes"]), tuple(d["kinds"]))


def save_world(world: World, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        header = {
            "kind": "world",
            "config": dataclasses.asdict(world.config),
            "user_schema": _schema_dict(world.user_schema),
            "ad_schema": _schema_dict(world.ad_schema),
            "early_user_fields": world.early_user_fields.tolist(),
            "early_ad_fields": world.early_ad_fields.tolist(),
            "campaign_cvr": world.campaign_cvr.tolist(),
        }
        fh.write(json.dumps(header) + "\n")
        for u in range(world.num_users):
            fh.write(json.dumps({
                "kind": "user", "user_id": u,
                "latent_click": world.user_click[u].tolist(),
                "latent_quality": world.user_quality[u].tolist(),
                "features": world.user_features[u].tolist(),
            }) + "\n")
        for a in range(world.num_ads):
            fh.write(json.dumps({
                "kind": "ad", "ad_id": a, "campaign_id": int(world.campaigns[a]),
                "bid": float(world.bids[a]),
                "post_impression_optimized": bool(world.post_impression[a]),
                "latent_click": world.ad_click[a].tolist(),
                "latent_quality": world.ad_quality[a].tolist(),
                "features": world.ad_features[a].tolist(),
            }) + "\n")


def load_world(path) -> World:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"empty world file {path}")
    header = json.loads(lines[0])
    if header.get("kind") != "world":
        raise DataError("world file must start with a 'world' header line")
    cfg = dict(header["config"])
    cfg["base_quality_logits"] = tuple(cfg["base_quality_logits"])
    cfg["campaign_cvr_range"] = tuple(cfg["campaign_cvr_range"])
    config = WorldConfig(**cfg)
    users = [json.loads(l) for l in lines[1:1 + config.num_users]]
    ads = [json.loads(l) for l in lines[1 + config.num_users:]]
    if len(users) != config.num_users or len(ads) != config.num_ads:
        raise DataError("world file entity counts do not match its config")
    return World(
        config,
        np.array([u["latent_click"] for u in users], dtype=np.float64).reshape(config.num_users, -1),
        np.array([u["latent_quality"] for u in users], dtype=np.float64).reshape(config.num_users, -1),
        np.array([a["latent_click"] for a in ads], dtype=np.float64).reshape(config.num_ads, -1),
        np.array([a["latent_quality"] for a in ads], dtype=np.float64).reshape(
            config.num_ads, config.num_quality_events, -1),
        np.array([a["bid"] for a in ads], dtype=np.float64),
        np.array([a["campaign_id"] for a in ads], dtype=np.int64),
        np.array([a["post_impression_optimized"] for a in ads], dtype=bool),
        np.array(header["campaign_cvr"], dtype=np.float64),
        _schema_from(header["user_schema"]),
        _schema_from(header["ad_schema"]),
        np.array([u["features"] for u in users], dtype=np.int64),
        np.array([a["features"] for a in ads], dtype=np.int64),
        np.array(header["early_user_fields"], dtype=np.int64),
        np.array(header["early_ad_fields"], dtype=np.int64),
    )
