"""Multi-stage pipeline: retrieval -> early top-M_pass -> final scoring -> auction
top-K -> impressions -> consolidated training log with augmentation.

Requests are processed in batches against frozen models. Every tie is broken by
(score desc, ad_id asc): candidate rows are kept sorted by ad id and all top-k
selections use a stable sort on the negated score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rankers import ScoredAd, TeacherCache, ad_quality, total_value
from .world import RankRequest, RequestBatch, World, realize_from_uniforms

AUGMENTATION_SOURCES = ("final_stage_nonimpression", "early_stage_nonimpression_rescored")


@dataclass(frozen=True)
class StageConfig:
    retrieval_size: int = 200
    early_pass: int = 40
    auction_winners: int = 5
    augmentation_rate: float = 0.3
    augmentation_source: str = "final_stage_nonimpression"

    def validate(self, num_ads: int | None = None) -> None:
        if not 1 <= self.auction_winners <= self.early_pass <= self.retrieval_size:
            raise ConfigError("stage sizes must satisfy 1 <= K <= M_pass <= N, got "
                              f"K={self.auction_winners}, M_pass={self.early_pass}, "
                              f"N={self.retrieval_size}")
        if num_ads is not None and self.retrieval_size > num_ads:
            raise ConfigError(f"retrieval size {self.retrieval_size} exceeds inventory {num_ads}")
        if not 0.0 <= self.augmentation_rate <= 1.0:
            raise ConfigError("augmentation_rate must lie in [0, 1]")
        if self.augmentation_source not in AUGMENTATION_SOURCES:
            raise ConfigError(f"unknown augmentation_source {self.augmentation_source!r}")


def top_k_positions(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best scores per row, best first; ties keep row order
    (rows are ad-id sorted, so ties go to the smaller ad id)."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


# --- training records -----------------------------------------------------------

@dataclass(frozen=True)
class TrainingRecord:
    request_id: int
    user_id: int
    ad_id: int
    user_features: tuple[int, ...]
    ad_features: tuple[int, ...]
    impressed: bool
    click_label: int | None
    quality_event_labels: tuple[int, ...] | None
    teacher_ectr: float
    final_cqs: float
    ctr_traffic: bool
    augmented: bool


# Stable field order of the line-delimited training log.
RECORD_FIELDS = tuple(TrainingRecord.__dataclass_fields__)


@dataclass
class RecordBatch:
    """Columnar training records. Absent labels are stored as -1."""

    request_id: np.ndarray
    user: np.ndarray
    ad: np.ndarray
    impressed: np.ndarray
    click: np.ndarray
    quality: np.ndarray  # (n, M)
    teacher_ectr: np.ndarray
    final_cqs: np.ndarray
    ctr_traffic: np.ndarray
    augmented: np.ndarray

    def __len__(self):
        return len(self.request_id)

    @classmethod
    def empty(cls, num_events: int) -> "RecordBatch":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, bool), np.zeros(0, np.int8), np.zeros((0, num_events), np.int8),
                   np.zeros(0), np.zeros(0), np.zeros(0, bool), np.zeros(0, bool))

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, batches: list["RecordBatch"]) -> "RecordBatch":
        batches = [b for b in batches if b is not None]
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in cls.__dataclass_fields__))

    def validate(self) -> None:
        has_labels = self.click >= 0
        if np.any(self.impressed & ~has_labels) or np.any(self.impressed & np.any(self.quality < 0, axis=1)):
            raise DataError("impressed record without click/quality labels")
        if np.any(self.augmented & self.impressed):
            raise DataError("augmented record marked as impressed")
        if np.any(self.augmented & has_labels):
            raise DataError("augmented record carries a click label")
        if not np.all(np.isfinite(self.final_cqs)):
            raise DataError("record without final_cqs")

    def record(self, i: int, world: World) -> TrainingRecord:
        click = int(self.click[i]) if self.click[i] >= 0 else None
        quality = tuple(int(q) for q in self.quality[i]) if self.impressed[i] else None
        return TrainingRecord(
            int(self.request_id[i]), int(self.user[i]), int(self.ad[i]),
            tuple(int(x) for x in world.user_features[self.user[i]]),
            tuple(int(x) for x in world.ad_features[self.ad[i]]),
            bool(self.impressed[i]), click, quality, float(self.teacher_ectr[i]),
            float(self.final_cqs[i]), bool(self.ctr_traffic[i]), bool(self.augmented[i]))

    def records(self, world: World) -> list[TrainingRecord]:
        return [self.record(i, world) for i in range(len(self))]

    @classmethod
    def from_records(cls, records: list[TrainingRecord], num_events: int) -> "RecordBatch":
        if not records:
            return cls.empty(num_events)
        return cls(
            np.array([r.request_id for r in records], np.int64),
            np.array([r.user_id for r in records], np.int64),
            np.array([r.ad_id for r in records], np.int64),
            np.array([r.impressed for r in records], bool),
            np.array([-1 if r.click_label is None else r.click_label for r in records], np.int8),
            np.array([[-1] * num_events if r.quality_event_labels is None
                      else list(r.quality_event_labels) for r in records], np.int8),
            np.array([r.teacher_ectr for r in records], np.float64),
            np.array([r.final_cqs for r in records], np.float64),
            np.array([r.ctr_traffic for r in records], bool),
            np.array([r.augmented for r in records], bool),
        )


def write_training_log(path, batches, world: World) -> int:
    """Append records as JSON lines in ``RECORD_FIELDS`` order; returns the count."""
    n = 0
    with Path(path).open("a") as fh:
        for batch in batches:
            for rec in batch.records(world):
                fh.write(json.dumps({f: getattr(rec, f) for f in RECORD_FIELDS}) + "\n")
                n += 1
    return n


def read_training_log(path, num_events: int) -> RecordBatch:
    recs = []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        d["user_features"] = tuple(d["user_features"])
        d["ad_features"] = tuple(d["ad_features"])
        if d["quality_event_labels"] is not None:
            d["quality_event_labels"] = tuple(d["quality_event_labels"])
        recs.append(TrainingRecord(**d))
    return RecordBatch.from_records(recs, num_events)


# --- the funnel --------------------------------------------------------------------

@dataclass
class CascadeCounters:
    requests: int = 0
    skipped: int = 0
    impressions: int = 0
    augmented: int = 0


@dataclass
class BatchOutcome:
    """Everything one batch of requests produced. Positions index the candidate axis."""

    request_ids: np.ndarray  # (B,)
    users: np.ndarray  # (B,)
    candidates: np.ndarray  # (B, N) ad ids, ascending
    early_pctr: np.ndarray  # (B, N)
    early_cqs: np.ndarray  # (B, N)
    early_tv: np.ndarray  # (B, N)
    passed: np.ndarray  # (B, M_pass) positions, best early TV first
    final_ectr: np.ndarray  # (B, M_pass) aligned with passed
    final_quality: np.ndarray  # (B, M_pass, M)
    final_cqs: np.ndarray  # (B, M_pass)
    final_tv: np.ndarray  # (B, M_pass)
    winners: np.ndarray  # (B, K) indices into the passed axis, best final TV first
    clicks: np.ndarray  # (B, K)
    quality_events: np.ndarray  # (B, K, M)

    @property
    def passed_ads(self) -> np.ndarray:
        return np.take_along_axis(self.candidates, self.passed, axis=1)

    @property
    def winner_ads(self) -> np.ndarray:
        return np.take_along_axis(self.passed_ads, self.winners, axis=1)

    def _at_winners(self, arr):
        if arr.ndim == 3:
            return np.take_along_axis(arr, self.winners[:, :, None], axis=1)
        return np.take_along_axis(arr, self.winners, axis=1)

    @property
    def winner_tv(self) -> np.ndarray:
        return self._at_winners(self.final_tv)

    @property
    def winner_ectr(self) -> np.ndarray:
        return self._at_winners(self.final_ectr)

    @property
    def winner_cqs(self) -> np.ndarray:
        return self._at_winners(self.final_cqs)

    @property
    def passed_early_tv(self) -> np.ndarray:
        return np.take_along_axis(self.early_tv, self.passed, axis=1)

    def auction(self, i: int) -> "AuctionOutcome":
        ads = self.winner_ads[i]
        w = self.winners[i]
        winners = [ScoredAd(int(a), "final", float(self.final_ectr[i, j]), float(self.final_cqs[i, j]),
                            float(ad_quality(self.final_cqs[i, j])), float(self.final_tv[i, j]),
                            tuple(float(q) for q in self.final_quality[i, j]))
                   for a, j in zip(ads, w)]
        return AuctionOutcome(int(self.request_ids[i]), winners, self.clicks[i].copy(),
                              self.quality_events[i].copy())


@dataclass
class AuctionOutcome:
    request_id: int
    winners: list[ScoredAd]  # best final total value first
    clicks: np.ndarray  # (K,)
    quality_events: np.ndarray  # (K, M)


class Cascade:
    """Runs request batches through the funnel and emits training records.

    ``outcome_rng`` draws one block of uniforms per candidate slot per request and
    ``augment_rng`` one block of inclusion draws, both regardless of which ads
    the policy picks; policies sharing seeds therefore share random numbers.
    """

    def __init__(self, world: World, cache: TeacherCache, stage: StageConfig, quality_weight: float,
                 outcome_rng: np.random.Generator, augment_rng: np.random.Generator):
        stage.validate(world.num_ads)
        self.world = world
        self.cache = cache
        self.stage = stage
        self.quality_weight = quality_weight
        self.outcome_rng = outcome_rng
        self.augment_rng = augment_rng
        self.counters = CascadeCounters()

    def score_early(self, scorer, requests: RequestBatch):
        pctr, cqs = scorer.score(requests.users, requests.ads)
        tv = total_value(self.world.bids[requests.ads], pctr, cqs, self.quality_weight)
        return pctr, cqs, tv

    def final_scores(self, users, ads):
        ectr, quality, cqs = self.cache.lookup(users, ads)
        tv = total_value(self.world.bids[ads], ectr, cqs, self.quality_weight)
        return ectr, quality, cqs, tv

    def run_batch(self, scorer, requests: RequestBatch, log: bool = True):
        """Returns ``(BatchOutcome, RecordBatch | None)``."""
        st = self.stage
        B, N = requests.ads.shape
        if N != st.retrieval_size:
            raise ConfigError(f"request has {N} candidates, stage expects {st.retrieval_size}")
        M = self.world.num_quality_events
        uniforms = self.outcome_rng.random((B, N, 1 + M))
        pool = N if st.augmentation_source == "early_stage_nonimpression_rescored" else st.early_pass
        aug_draws = self.augment_rng.random((B, pool))

        pctr, cqs_e, tv_e = self.score_early(scorer, requests)
        passed = top_k_positions(tv_e, st.early_pass)
        passed_ads = np.take_along_axis(requests.ads, passed, axis=1)
        ectr, quality, cqs_f, tv_f = self.final_scores(requests.users, passed_ads)
        winners = top_k_positions(tv_f, st.auction_winners)
        win_pos = np.take_along_axis(passed, winners, axis=1)
        win_ads = np.take_along_axis(passed_ads, winners, axis=1)
        u_win = np.take_along_axis(uniforms, win_pos[:, :, None], axis=1)
        clicks, events = realize_from_uniforms(self.world, requests.users[:, None], win_ads, u_win)

        outcome = BatchOutcome(requests.request_ids, requests.users, requests.ads, pctr, cqs_e, tv_e,
                               passed, ectr, quality, cqs_f, tv_f, winners, clicks, events)
        self.counters.requests += B
        self.counters.impressions += B * st.auction_winners
        if not log:
            return outcome, None
        records = RecordBatch.concat([
            log_impressions(self.world, outcome),
            self._augmented(outcome, aug_draws),
        ])
        order = np.argsort(records.request_id, kind="stable")
        records = records.take(order)
        self.counters.augmented += int(records.augmented.sum())
        return outcome, records

    def _augmented(self, outcome: BatchOutcome, draws: np.ndarray) -> RecordBatch:
        st = self.stage
        if st.augmentation_source == "final_stage_nonimpression":
            return log_augmented(self.world, outcome, st.augmentation_rate, draws)
        return rescore_early_only_candidates(self.world, outcome, self.cache, self.quality_weight,
                                             st.augmentation_rate, draws)

    def run_request(self, scorer, request: RankRequest):
        """Single-request convenience wrapper; returns ``(AuctionOutcome, [TrainingRecord])`` or
        ``None`` (counted as skipped) for an empty candidate set."""
        if len(request.ad_ids) == 0:
            self.counters.skipped += 1
            return None
        outcome, records = self.run_batch(scorer, RequestBatch.from_requests([request]))
        return outcome.auction(0), records.records(self.world)


def log_impressions(world: World, outcome: BatchOutcome) -> RecordBatch:
    B, K = outcome.winners.shape
    ads = outcome.winner_ads.ravel()
    return RecordBatch(
        np.repeat(outcome.request_ids, K), np.repeat(outcome.users, K), ads,
        np.ones(B * K, bool), outcome.clicks.ravel().astype(np.int8),
        outcome.quality_events.reshape(B * K, -1).astype(np.int8),
        outcome.winner_ectr.ravel(), outcome.winner_cqs.ravel(),
        ~world.post_impression[ads], np.zeros(B * K, bool))


def _pseudo_labeled(world, request_ids, users, ads, ectr, cqs) -> RecordBatch:
    n = len(ads)
    M = world.num_quality_events
    return RecordBatch(request_ids, users, ads, np.zeros(n, bool), np.full(n, -1, np.int8),
                       np.full((n, M), -1, np.int8), ectr, cqs, ~world.post_impression[ads],
                       np.ones(n, bool))


def log_augmented(world: World, outcome: BatchOutcome, rate: float, draws: np.ndarray) -> RecordBatch:
    """Non-impressed final-stage candidates, each kept with probability ``rate``.

    ``draws`` holds one uniform per passed slot ``(B, M_pass)``; records carry the
    teacher eCTR as CTR pseudo-label and the final CQS, but no realized outcomes.
    """
    B, Mp = outcome.passed.shape
    keep = draws[:, :Mp] < rate
    won = np.zeros((B, Mp), bool)
    np.put_along_axis(won, outcome.winners, True, axis=1)
    keep &= ~won
    b, j = np.nonzero(keep)
    ads = outcome.passed_ads[b, j]
    return _pseudo_labeled(world, outcome.request_ids[b], outcome.users[b], ads,
                           outcome.final_ectr[b, j], outcome.final_cqs[b, j])


def rescore_early_only_candidates(world: World, outcome: BatchOutcome, cache: TeacherCache,
                                  quality_weight: float, rate: float,
                                  draws: np.ndarray) -> RecordBatch:
    """Augmentation pool over every non-impressed retrieved ad.

    Early-rejected ads never reached the final stage, so the teachers score them
    offline (the replay simulator's relaxed-timeout setting). ``draws`` is
    ``(B, N)``, one uniform per candidate slot.
    """
    B, N = outcome.candidates.shape
    keep = draws < rate
    won = np.zeros((B, N), bool)
    np.put_along_axis(won, np.take_along_axis(outcome.passed, outcome.winners, axis=1), True, axis=1)
    keep &= ~won
    b, j = np.nonzero(keep)
    ads = outcome.candidates[b, j]
    ectr, _, cqs = cache.lookup(outcome.users[b], ads)
    return _pseudo_labeled(world, outcome.request_ids[b], outcome.users[b], ads, ectr, cqs)


# --- teacher warm-up ------------------------------------------------------------------

@dataclass
class WarmupLog:
    users: np.ndarray
    ads: np.ndarray
    clicks: np.ndarray
    quality: np.ndarray  # (n, M)

    def __len__(self):
        return len(self.users)


def warmup_batch(world: World, requests: RequestBatch, stage: StageConfig,
                 rng: np.random.Generator) -> WarmupLog:
    """Oracle-labeled examples over a random M_pass subset of each request.

    Before any early model exists, the final-stage candidate set is a uniform
    sample of the retrieved ads; every one of them gets realized outcomes.
    """
    B, N = requests.ads.shape
    M = world.num_quality_events
    keys = rng.random((B, N))
    pick = np.argsort(keys, axis=1)[:, :stage.early_pass]
    ads = np.take_along_axis(requests.ads, pick, axis=1)
    uniforms = rng.random(ads.shape + (1 + M,))
    users = np.broadcast_to(requests.users[:, None], ads.shape)
    clicks, events = realize_from_uniforms(world, users, ads, uniforms)
    return WarmupLog(users.ravel().copy(), ads.ravel(), clicks.ravel(), events.reshape(-1, M))
