import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from espretrain import kernels
from espretrain.errors import ConfigurationError, NumericalError
from espretrain.es import (
    EsConfig, PerturbationTicket, RewardVector, aggregate_update, es_step, make_tickets, perturb_in_place,
    rank_weights, scheduled, search_direction, segments, step_sizes, unperturb_in_place, zscore_weights,
)
from espretrain.model import ModelConfig, init_params


def test_antithetic_ticket_structure():
    tickets = make_tickets(1, 2, EsConfig(population=4, antithetic=True))
    seeds = [t.seed for t in tickets]
    assert seeds[0] == seeds[1] and seeds[2] == seeds[3] and seeds[0] != seeds[2]
    assert [t.sign for t in tickets] == [1, -1, 1, -1]


def test_tickets_are_deterministic_and_distinct():
    es = EsConfig()
    assert make_tickets(5, 9, es) == make_tickets(5, 9, es)
    tickets = make_tickets(5, 9, es)
    assert len(tickets) == 30 and len({t.seed for t in tickets}) == 30
    assert all(t.sign == 1 for t in tickets)
    assert make_tickets(5, 10, es) != tickets


@pytest.mark.parametrize("kwargs", [dict(population=5, antithetic=True), dict(population=1), dict(sigma=0),
                                    dict(alpha=-1), dict(gamma_alpha=0), dict(gamma_sigma=1.5),
                                    dict(normalization="softmax"), dict(step_alpha=-1),
                                    dict(group_multipliers=[("embed.*", 0.0, 1.0)])])
def test_invalid_es_configs(kwargs):
    with pytest.raises(ConfigurationError):
        EsConfig(**kwargs)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 3000), elements=st.floats(-4, 4, width=32)),
       st.sampled_from([1e-4, 1e-3, 1e-2, 0.3]), st.integers(0, 2**63), st.sampled_from([1, -1]),
       st.sampled_from([7, 256, 1 << 16]))
def test_perturb_round_trip_is_bit_exact(theta, sigma, seed, sign, chunk):
    es = EsConfig(noise_chunk=chunk)
    original = theta.copy()
    ticket = PerturbationTicket(seed, sign)
    restore = perturb_in_place(theta, ticket, sigma, es)
    assert not np.array_equal(theta, original) or sigma * 4 < 1e-7
    unperturb_in_place(theta, ticket, sigma, es, restore)
    assert theta.tobytes() == original.tobytes()


def test_plain_subtraction_would_not_round_trip(rng):
    # documents why the restore log exists
    theta = (rng.standard_normal(100_000) * 0.02).astype(np.float32)
    delta = (kernels.gaussian(1, 0, theta.size).astype(np.float64) * 1e-3).astype(np.float32)
    assert np.count_nonzero((theta + delta) - delta != theta) > 1000


def test_perturbation_adds_scaled_noise(rng):
    theta = rng.standard_normal(5000).astype(np.float32)
    before = theta.copy()
    perturb_in_place(theta, PerturbationTicket(42, -1), 0.01, EsConfig(noise_chunk=1000))
    expected = before + (-0.01 * kernels.gaussian(42, 0, 5000).astype(np.float64)).astype(np.float32)
    np.testing.assert_array_equal(theta, expected)


def test_zero_sigma_changes_nothing(rng):
    theta = rng.standard_normal(100).astype(np.float32)
    before = theta.copy()
    perturb_in_place(theta, PerturbationTicket(3, 1), 0.0, EsConfig())
    assert theta.tobytes() == before.tobytes()


def test_catch_all_unit_multiplier_equals_no_groups():
    params = init_params(ModelConfig(), 0)
    a, b = params.copy(), params.copy()
    ticket = PerturbationTicket(99, 1)
    perturb_in_place(a, ticket, 1e-3, EsConfig())
    perturb_in_place(b, ticket, 1e-3, EsConfig(group_multipliers=[("*", 1.0, 1.0)]))
    assert a.flat.tobytes() == b.flat.tobytes()


def test_group_sigma_multiplier_scales_only_matching_tensors():
    params = init_params(ModelConfig(), 0)
    base, grouped = params.copy(), params.copy()
    ticket = PerturbationTicket(5, 1)
    perturb_in_place(base, ticket, 1e-3, EsConfig())
    perturb_in_place(grouped, ticket, 1e-3, EsConfig(group_multipliers=[("*.mlp.*", 1.0, 3.0)]))
    for slot in params.layout:
        d_base = base.tensor(slot.name).astype(np.float64) - params.tensor(slot.name)
        d_grp = grouped.tensor(slot.name).astype(np.float64) - params.tensor(slot.name)
        ratio = 3.0 if ".mlp." in slot.name else 1.0
        np.testing.assert_allclose(d_grp, ratio * d_base, rtol=1e-4, atol=1e-6)


def test_first_matching_group_wins():
    params = init_params(ModelConfig(), 0)
    es = EsConfig(group_multipliers=[("embed.*", 0.5, 2.0), ("*", 3.0, 4.0)])
    segs = segments(params, es)
    assert (segs[0].alpha_mult, segs[0].sigma_mult) == (0.5, 2.0)
    assert all((s.alpha_mult, s.sigma_mult) == (3.0, 4.0) for s in segs[1:])
    assert segs[-1].stop == params.flat.size


def test_zscore_examples():
    np.testing.assert_array_equal(zscore_weights([2.5, 2.5, 2.5]), [0, 0, 0])
    np.testing.assert_allclose(zscore_weights([-1.0, 1.0]), [-1, 1], atol=1e-6)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60).filter(lambda r: np.std(r) > 1e-3))
def test_zscore_standardises(rewards):
    w = zscore_weights(rewards)
    assert abs(w.mean()) < 1e-9
    assert abs(w.std() - 1) < 1e-6


def test_rank_examples():
    np.testing.assert_array_equal(rank_weights([5, -2, 9]), [0, -1, 1])
    np.testing.assert_array_equal(rank_weights([1, 1, 2]), [-1, 0, 1])
    np.testing.assert_array_equal(rank_weights([1, 2, 1000]), [-1, 0, 1])


@given(st.lists(st.integers(-5, 5), min_size=2, max_size=50))
def test_rank_weights_match_stable_sort(rewards):
    w = rank_weights(rewards)
    n = len(rewards)
    order = sorted(range(n), key=lambda i: (rewards[i], i))
    expected = np.empty(n)
    for rank, i in enumerate(order):
        expected[i] = 2 * rank / (n - 1) - 1
    np.testing.assert_allclose(w, expected, atol=1e-12)
    assert w.min() >= -1 and w.max() <= 1 and abs(w.sum()) < 1e-9
    np.testing.assert_allclose(np.diff(np.sort(w)), 2 / (n - 1), atol=1e-12)


def test_reward_vector_rejects_non_finite_and_misalignment():
    tickets = make_tickets(0, 1, EsConfig(population=2))
    with pytest.raises(NumericalError):
        RewardVector([0.0, np.nan], tickets)
    with pytest.raises(ConfigurationError):
        RewardVector([0.0], tickets)


def test_scheduler():
    assert scheduled(5e-4, 999, 1.0, 0) == 5e-4
    assert scheduled(5e-4, 999, 0.5, 0) == 5e-4
    assert scheduled(1.0, 250, 0.5, 100) == 0.25
    assert scheduled(2.0, 250, 1.0, 7) == 2.0
    es = EsConfig(sigma=1.0, alpha=1.0, gamma_sigma=0.5, step_sigma=100, gamma_alpha=0.1, step_alpha=10)
    assert step_sizes(es, 1) == (1.0, 1.0)
    assert step_sizes(es, 101) == (0.5, pytest.approx(1e-10))


def test_zero_weights_leave_theta_untouched(rng):
    theta = rng.standard_normal(300).astype(np.float32)
    before = theta.copy()
    es = EsConfig(population=4)
    stats = aggregate_update(make_tickets(0, 1, es), np.zeros(4), es, 1e-3, 0.1, theta)
    assert theta.tobytes() == before.tobytes() and stats.update_norm == 0.0


def test_single_ticket_update_closed_form():
    es = EsConfig(population=2, noise_chunk=64)
    tickets = make_tickets(0, 1, es)
    theta = np.zeros(1000, np.float32)
    aggregate_update(tickets, [1.0, 0.0], es, 1e-3, 0.2, theta)
    expected = (0.2 / 2 * kernels.gaussian(tickets[0].seed, 0, 1000).astype(np.float64)).astype(np.float32)
    np.testing.assert_array_equal(theta, expected)


def test_nes_scaling_is_an_exact_inverse_sigma_factor(rng):
    weights = rng.standard_normal(6)
    plain, nes = EsConfig(population=6), EsConfig(population=6, nes_scaling=True)
    tickets = make_tickets(3, 4, plain)
    a, b = np.zeros(777, np.float32), np.zeros(777, np.float32)
    aggregate_update(tickets, weights, plain, 0.5, 1e-2, a)
    aggregate_update(tickets, weights, nes, 0.5, 1e-2, b)
    np.testing.assert_array_equal(b, 2 * a)


def test_search_direction_matches_materialised_sum(rng):
    es = EsConfig(population=8, antithetic=True, noise_chunk=100)
    tickets = make_tickets(1, 1, es)
    weights = rng.standard_normal(8)
    eps = np.stack([t.sign * kernels.gaussian(t.seed, 0, 450).astype(np.float64) for t in tickets])
    expected = (weights @ eps) / 8
    np.testing.assert_allclose(search_direction(tickets, weights, es, 450), expected, rtol=1e-6, atol=1e-7)


def test_group_alpha_multiplier_scales_update():
    params = init_params(ModelConfig(), 0)
    params.flat[:] = 0.0
    a, b = params.copy(), params.copy()
    plain = EsConfig(population=2)
    grouped = EsConfig(population=2, group_multipliers=[("final_norm.*", 4.0, 1.0)])
    tickets = make_tickets(0, 1, plain)
    aggregate_update(tickets, [1.0, -1.0], plain, 1e-3, 1e-2, a)
    aggregate_update(tickets, [1.0, -1.0], grouped, 1e-3, 1e-2, b)
    np.testing.assert_array_equal(b.tensor("final_norm.gain"), 4 * a.tensor("final_norm.gain"))
    np.testing.assert_array_equal(a.tensor("embed.weight"), b.tensor("embed.weight"))


def test_non_finite_update_is_rejected(rng):
    theta = rng.standard_normal(200).astype(np.float32)
    before = theta.copy()
    es = EsConfig(population=3)
    with pytest.raises(NumericalError):
        aggregate_update(make_tickets(0, 1, es), [1.0, np.nan, 0.0], es, 1e-3, 1e-2, theta)
    assert theta.tobytes() == before.tobytes()
    theta[:] = 3e38
    before = theta.copy()
    with pytest.raises(NumericalError):
        aggregate_update(make_tickets(0, 1, es), [1e30, -1e30, 0.0], es, 1e-3, 1e8, theta)
    assert theta.tobytes() == before.tobytes()


def quadratic(target):
    return lambda t: -float(np.sum((t.astype(np.float64) - target) ** 2))


def test_quadratic_toy_converges(rng):
    star = rng.standard_normal(20)
    theta = np.zeros(20, np.float32)
    start = np.linalg.norm(theta - star)
    es = EsConfig(population=100, sigma=0.1, alpha=0.05)
    for it in range(1, 201):
        es_step(theta, es, 0, it, quadratic(star))
    assert np.linalg.norm(theta - star) <= 0.1 * start


def test_es_step_is_deterministic(rng):
    star = rng.standard_normal(50)
    runs = []
    for _ in range(2):
        theta = np.zeros(50, np.float32)
        for it in range(1, 11):
            es_step(theta, EsConfig(population=10, sigma=0.05, alpha=0.01, normalization="rank"), 9, it, quadratic(star))
        runs.append(theta.tobytes())
    assert runs[0] == runs[1]


def test_worker_count_does_not_change_results():
    cfg = ModelConfig(layers=1, hidden=16, heads=2, kv_heads=1, head_dim=8, intermediate=32, vocab=32, max_seq=16)
    ids = np.random.default_rng(0).integers(0, 32, (4, 12))
    from espretrain.fitness import batch_fitness
    from espretrain.model import TokenBatch
    batch = TokenBatch(ids, np.ones_like(ids))
    results = []
    for workers in (1, 4):
        params = init_params(cfg, 1)
        es = EsConfig(population=6, antithetic=True, sigma=1e-2, alpha=1e-2, noise_chunk=300)
        rewards = []
        for it in range(1, 4):
            step = es_step(params, es, 2, it, lambda p: batch_fitness(p, cfg, batch), workers=workers, debug=True)
            rewards.append(step.rewards.tobytes())
        results.append((params.flat.tobytes(), rewards))
    assert results[0] == results[1]


def test_non_finite_member_is_clamped_to_population_min(caplog):
    calls = []

    def fitness(theta):
        calls.append(1)
        if len(calls) == 2:
            raise NumericalError("boom")
        return -float(len(calls))

    theta = np.zeros(10, np.float32)
    step = es_step(theta, EsConfig(population=4), 0, 1, fitness)
    assert step.clamped == 1
    assert step.rewards.tolist() == [-1.0, -4.0, -3.0, -4.0]
    assert "clamped" in caplog.text


def test_all_members_failing_is_an_error():
    def fitness(theta):
        return math.nan

    with pytest.raises(NumericalError):
        es_step(np.zeros(4, np.float32), EsConfig(population=2), 0, 1, fitness)


def test_center_evaluation_is_optional():
    theta = np.ones(5, np.float32)
    step = es_step(theta, EsConfig(population=2), 0, 1, lambda t: -1.5, eval_center=True)
    assert step.center_reward == -1.5
    assert es_step(theta, EsConfig(population=2), 0, 2, lambda t: -1.5).center_reward is None


def test_rejects_non_float32_targets():
    with pytest.raises(ConfigurationError):
        es_step(np.zeros(4), EsConfig(population=2), 0, 1, lambda t: 0.0)


def test_backends_perturb_identically(rng):
    theta = (rng.standard_normal(20_000) * 0.02).astype(np.float32)
    theta[::997] = 0.0
    out = {}
    for name in ("numpy", "numba"):
        impl = kernels.implementation(name)
        seg = theta.copy()
        offsets, values = impl.perturb(seg, 77, 123, -1e-3, 4096)
        perturbed = seg.copy()
        impl.unperturb(seg, 77, 123, -1e-3, offsets, values, 4096)
        assert seg.tobytes() == theta.tobytes()
        out[name] = (perturbed.tobytes(), offsets.tobytes(), values.tobytes())
    assert out["numpy"] == out["numba"]


def test_backends_aggregate_identically(rng):
    keys = np.array([11, 12, 13], dtype=np.uint64)
    coefs = rng.standard_normal(3)
    res = {}
    for name in ("numpy", "numba"):
        buf = np.empty(5001, np.float32)
        kernels.implementation(name).update_chunk(buf, keys, coefs, 7, 3, 0.01, 1024)
        res[name] = buf
    np.testing.assert_allclose(res["numpy"], res["numba"], rtol=1e-6, atol=1e-12)
