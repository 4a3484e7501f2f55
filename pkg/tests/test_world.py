import dataclasses

import numpy as np
import pytest
from scipy.special import expit

from earlyrank.errors import ConfigError, DataError
from earlyrank.world import (
    RequestStream,
    WorldConfig,
    generate_world,
    load_world,
    realize_from_uniforms,
    realize_outcomes,
    sample_request,
    save_world,
    true_click_logit,
    true_click_prob,
    true_quality_event_probs,
    true_quality_logits,
)


@pytest.fixture(scope="module")
def default_world():
    return generate_world(WorldConfig())


def random_pairs(world, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(world.num_users, size=n), rng.integers(world.num_ads, size=n)


def test_same_seed_same_world_field_for_field():
    a = generate_world(WorldConfig(num_users=50, num_ads=80, num_campaigns=5, seed=7))
    b = generate_world(WorldConfig(num_users=50, num_ads=80, num_campaigns=5, seed=7))
    c = generate_world(WorldConfig(num_users=50, num_ads=80, num_campaigns=5, seed=8))
    assert a.equals(b)
    assert not a.equals(c)


def test_mean_true_ctr_near_base_rate(default_world):
    users, ads = random_pairs(default_world, 10_000)
    mean_ctr = true_click_prob(default_world, users, ads).mean()
    target = expit(default_world.config.base_ctr_logit)
    assert target == pytest.approx(0.05, abs=1e-4)
    assert abs(mean_ctr / target - 1) < 0.2


@pytest.mark.parametrize("rho", [0.0, 0.2, 0.5, -0.5, 0.9])
def test_click_xout_logit_correlation_tracks_rho(rho):
    world = generate_world(WorldConfig(ctr_quality_correlation=rho, seed=5))
    users, ads = random_pairs(world, 10_000, seed=1)
    click = true_click_logit(world, users, ads)
    xout = true_quality_logits(world, users, ads)[:, 0]
    r = np.corrcoef(click, xout)[0, 1]
    assert abs(r - rho) < 0.1


def test_perfect_correlation_limit_gives_equal_logits():
    cfg = WorldConfig(ctr_quality_correlation=1.0, quality_interaction_sd=0.5, interaction_sd=0.5,
                      base_quality_logits=(-2.944,) * 3, num_users=100, num_ads=100, seed=2)
    world = generate_world(cfg)
    users, ads = random_pairs(world, 2000)
    click = true_click_logit(world, users, ads)
    quality = true_quality_logits(world, users, ads)
    for i in range(3):
        np.testing.assert_allclose(quality[:, i], click, rtol=0, atol=1e-12)


def test_zero_correlation_quality_ignores_click_latents():
    world = generate_world(WorldConfig(ctr_quality_correlation=0.0, num_users=60, num_ads=60, seed=4))
    u, a = 3, 7
    before = true_quality_event_probs(world, u, a)
    shifted = dataclasses.replace(world, user_click=world.user_click + 1.0, ad_click=world.ad_click * -2.0)
    np.testing.assert_array_equal(true_quality_event_probs(shifted, u, a), before)


def test_true_click_prob_examples():
    cfg = WorldConfig(latent_dim=1, ad_ctr_sd=0.0, user_ctr_sd=0.0, base_ctr_logit=0.0,
                      num_users=2, num_ads=2, num_campaigns=1)
    world = generate_world(cfg)
    world = dataclasses.replace(world, user_click=np.array([[1.0], [0.0]]), ad_click=np.array([[1.0], [5.0]]))
    assert true_click_prob(world, 0, 0) == pytest.approx(expit(1.0))
    assert true_click_prob(world, 0, 0) == pytest.approx(0.731, abs=5e-4)
    # orthogonal latents give exactly the base rate
    assert true_click_prob(world, 1, 1) == expit(0.0)


def test_true_probs_match_scalar_recomputation(default_world):
    users, ads = random_pairs(default_world, 1000, seed=3)
    c = default_world.config
    p = true_click_prob(default_world, users, ads)
    q = true_quality_event_probs(default_world, users, ads)
    for k in range(0, 1000, 37):
        u, a = users[k], ads[k]
        dot = sum(float(x) * float(y) for x, y in zip(default_world.user_click[u], default_world.ad_click[a]))
        assert p[k] == pytest.approx(1 / (1 + np.exp(-(c.base_ctr_logit + dot))), rel=1e-12)
        for i in range(c.num_quality_events):
            dq = sum(float(x) * float(y) for x, y in zip(default_world.user_quality[u],
                                                         default_world.ad_quality[a, i]))
            assert q[k, i] == pytest.approx(1 / (1 + np.exp(-(c.base_quality_logits[i] + dq))), rel=1e-12)


def test_bids_are_lognormal(default_world):
    c = default_world.config
    logs = np.log(default_world.bids)
    n = len(logs)
    assert np.all(default_world.bids > 0)
    assert abs(logs.mean() - c.bid_log_mean) < 3 * c.bid_log_sd / np.sqrt(n)
    assert abs(logs.var(ddof=1) - c.bid_log_sd ** 2) < 3 * c.bid_log_sd ** 2 * np.sqrt(2 / (n - 1))


def test_entities_and_features_are_well_formed(default_world):
    w = default_world
    assert w.ad_quality.shape == (w.num_ads, w.config.num_quality_events, w.config.latent_dim)
    assert np.all(np.isfinite(w.user_click)) and np.all(np.isfinite(w.ad_quality))
    for feats, schema in ((w.user_features, w.user_schema), (w.ad_features, w.ad_schema)):
        local = feats - schema.offsets[None, :]
        assert np.all(local >= 0) and np.all(local < np.array(schema.vocab_sizes)[None, :])
    # every campaign owns at least one ad
    assert np.all(w.campaign_sizes() >= 1)
    # early features: every id field plus ~60% of the bucket fields
    for fields, schema in ((w.early_user_fields, w.user_schema), (w.early_ad_fields, w.ad_schema)):
        ids = set(schema.fields_of_kind("id").tolist())
        assert ids <= set(fields.tolist())
        buckets = [f for f in fields if f not in ids]
        assert len(buckets) == round(0.6 * len(schema.fields_of_kind("bucket")))
    assert 0.15 < w.post_impression.mean() < 0.25
    ad = w.ad(5)
    assert ad.campaign_id == w.campaigns[5] and ad.bid > 0 and ad.latent_quality_vectors.shape[0] == 3


def test_full_inventory_request():
    world = generate_world(WorldConfig(num_users=10, num_ads=30, num_campaigns=3))
    req = sample_request(world, 30, np.random.default_rng(0), 0)
    np.testing.assert_array_equal(req.ad_ids, np.arange(30))


def test_request_stream_ids_and_reproducibility(small_world):
    s1 = RequestStream(small_world, 50, np.random.default_rng(9), id_offset=100)
    s2 = RequestStream(small_world, 50, np.random.default_rng(9), id_offset=100)
    a, b = s1.next(), s1.next()
    assert (a.request_id, b.request_id) == (100, 101)
    assert len(set(a.ad_ids)) == 50 and np.all(np.diff(a.ad_ids) > 0)
    np.testing.assert_array_equal(s2.next().ad_ids, a.ad_ids)


def test_retrieval_is_campaign_stratified(small_world):
    n, reqs = 60, 1000
    stream = RequestStream(small_world, n, np.random.default_rng(2))
    batch = stream.next_batch(reqs)
    assert batch.ads.shape == (reqs, n)
    counts = np.bincount(small_world.campaigns[batch.ads.ravel()], minlength=small_world.config.num_campaigns)
    share = small_world.campaign_sizes() / small_world.num_ads
    total = n * reqs
    sigma = np.sqrt(share * (1 - share) / total)
    assert np.all(np.abs(counts / total - share) <= 2 * sigma)


def test_oversized_retrieval_rejected(small_world):
    with pytest.raises(ConfigError):
        sample_request(small_world, small_world.num_ads + 1, np.random.default_rng(0), 0)


def test_degenerate_probabilities_give_constant_outcomes():
    never = generate_world(WorldConfig(num_users=5, num_ads=5, num_campaigns=1, base_ctr_logit=-1000.0))
    always = generate_world(WorldConfig(num_users=5, num_ads=5, num_campaigns=1, base_ctr_logit=1000.0))
    rng = np.random.default_rng(0)
    assert all(realize_outcomes(never, 1, 2, rng).click == 0 for _ in range(200))
    assert all(realize_outcomes(always, 1, 2, rng).click == 1 for _ in range(200))


def test_empirical_click_rate_within_binomial_bound(small_world):
    u, a, n = 4, 9, 10_000
    p = true_click_prob(small_world, u, a)
    q = true_quality_event_probs(small_world, u, a)
    uniforms = np.random.default_rng(8).random((n, 1 + small_world.num_quality_events))
    clicks, events = realize_from_uniforms(small_world, np.full(n, u), np.full(n, a), uniforms)
    assert abs(clicks.mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(events.mean(axis=0) - q) <= 3 * np.sqrt(q * (1 - q) / n))
    assert realize_outcomes(small_world, u, a, np.random.default_rng(1)).quality_events.__len__() == 3


def test_world_checkpoint_roundtrip(tmp_path, small_world):
    path = tmp_path / "world.jsonl"
    save_world(small_world, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + small_world.num_users + small_world.num_ads
    assert load_world(path).equals(small_world)


def test_bad_world_file(tmp_path):
    path = tmp_path / "w.jsonl"
    path.write_text('{"kind": "user"}\n')
    with pytest.raises(DataError):
        load_world(path)


@pytest.mark.parametrize("change", [
    {"latent_dim": 0}, {"num_users": 0}, {"num_quality_events": 1, "base_quality_logits": (-2.0,)},
    {"base_quality_logits": (-2.0, -2.0)}, {"ctr_quality_correlation": 1.5},
    {"post_impression_fraction": -0.1}, {"num_campaigns": 2000}, {"interaction_sd": 0.0},
    {"latent_dim": 1}, {"bid_log_sd": -1.0},
])
def test_invalid_world_configs(change):
    with pytest.raises(ConfigError):
        generate_world(WorldConfig(**change))
