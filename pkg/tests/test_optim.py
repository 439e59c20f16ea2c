import numpy as np
import pytest

from fdlora.errors import ConfigError, ContractError, OptimizationError, ShapeError
from fdlora.lora import AdapterSet, FusionWeights, LoraAdapter
from fdlora.optim import (
    FusionBudget,
    InnerOptState,
    OuterOptState,
    fusion_opt,
    fusion_search,
    inner_step,
    lr_schedule_milestone,
    outer_delta,
    outer_step,
    sgd_step,
)


def scalar_set(b, a=1.0):
    return AdapterSet([LoraAdapter("s", [[b]], [[a]])])


def rand_set(rng):
    return AdapterSet([
        LoraAdapter("l0", rng.normal(size=(4, 2)), rng.normal(size=(2, 3))),
        LoraAdapter("l1", rng.normal(size=(3, 1)), rng.normal(size=(1, 5))),
    ])


def grads_like(s, fill=None, rng=None):
    return {k: (np.full_like(v, fill) if fill is not None else rng.normal(size=v.shape))
            for k, v in s.params().items()}


def test_adamw_single_step_closed_form():
    p = scalar_set(1.0)
    state = InnerOptState.fresh(p, lr=0.1, weight_decay=0.0)
    out, state = inner_step(p, grads_like(p, 1.0), state)
    # m_hat = v_hat = 1, so p = 1 - 0.1 / (1 + 1e-8), evaluated in 30-digit arithmetic
    assert out["s"].b_factor[0, 0] == pytest.approx(0.90000000099999999, abs=1e-16)
    assert state.step_count == 1


def test_zero_gradient_no_decay_is_identity(rng):
    p = rand_set(rng)
    out, _ = inner_step(p, grads_like(p, 0.0), InnerOptState.fresh(p, lr=0.1, weight_decay=0.0))
    assert out == p


def test_decay_only_shrinks_by_exact_factor(rng):
    p = rand_set(rng)
    state = InnerOptState.fresh(p, lr=0.1, weight_decay=0.5)
    cur = p
    for step in range(1, 4):
        cur, state = inner_step(cur, grads_like(p, 0.0), state)
        for k, v in p.params().items():
            np.testing.assert_allclose(cur.params()[k], v * 0.95**step, rtol=1e-14)


def test_inner_step_checks_gradient_keys(rng):
    p = rand_set(rng)
    g = grads_like(p, 0.0)
    del g["l0.a"]
    with pytest.raises(ContractError):
        inner_step(p, g, InnerOptState.fresh(p))
    g = grads_like(p, 0.0)
    g["l0.a"] = np.zeros((9, 9))
    with pytest.raises(ShapeError):
        inner_step(p, g, InnerOptState.fresh(p))


def test_inner_step_is_deterministic(rng):
    p = rand_set(rng)
    g = grads_like(p, rng=rng)
    a, _ = inner_step(p, g, InnerOptState.fresh(p, lr=0.01))
    b, _ = inner_step(p, g, InnerOptState.fresh(p, lr=0.01))
    assert all(a.params()[k].tobytes() == b.params()[k].tobytes() for k in a.params())


def test_decayed_lr():
    st = InnerOptState.fresh(scalar_set(1.0), lr=0.2, lr_decay=0.1)
    assert st.decayed().lr == pytest.approx(0.02, rel=1e-15)


def test_milestone():
    assert [lr_schedule_milestone(n) for n in (0, 1, 5, 10, 99)] == [0, 0, 4, 8, 79]


def test_sgd_step(rng):
    p = rand_set(rng)
    g = grads_like(p, rng=rng)
    out = sgd_step(p, g, 0.5)
    for k, v in p.params().items():
        np.testing.assert_array_equal(out.params()[k], v - 0.5 * g[k])


def test_outer_delta_unchanged_clients_is_zero(rng):
    p = rand_set(rng)
    d = outer_delta(p, [p, p, p])
    assert all(not v.any() for v in d.params().values())


def test_outer_delta_single_client(rng):
    p, c = rand_set(rng), rand_set(rng)
    d = outer_delta(p, [c]).params()
    for k in d:
        np.testing.assert_array_equal(d[k], p.params()[k] - c.params()[k])


def test_outer_delta_matches_scalar_loop(rng):
    p = rand_set(rng)
    cs = [rand_set(rng) for _ in range(3)]
    d = outer_delta(p, cs).params()
    for k, v in d.items():
        for idx in np.ndindex(v.shape):
            ref = sum(p.params()[k][idx] - c.params()[k][idx] for c in cs) / 3
            assert v[idx] == pytest.approx(ref, abs=1e-14)


def test_outer_delta_empty_is_contract_error(rng):
    with pytest.raises(ContractError):
        outer_delta(rand_set(rng), [])


def test_fedavg_reduction(rng):
    p = rand_set(rng)
    cs = [rand_set(rng) for _ in range(4)]
    state = OuterOptState.fresh(p, lr=1.0, momentum=0.0)
    new, _ = outer_step(p, outer_delta(p, cs), state)
    for k, v in new.params().items():
        mean = sum(c.params()[k] for c in cs) / 4
        np.testing.assert_allclose(v, mean, rtol=0, atol=1e-12)


def test_zero_momentum_is_gradient_step(rng):
    p = rand_set(rng)
    d = rand_set(rng)
    new, _ = outer_step(p, d, OuterOptState.fresh(p, lr=0.3, momentum=0.0))
    for k, v in new.params().items():
        np.testing.assert_allclose(v, p.params()[k] - 0.3 * d.params()[k], rtol=0, atol=1e-15)


def test_two_nesterov_steps_unrolled():
    # v1 = 0.2, theta1 = 1 - 0.5 (0.2 + 0.5 * 0.2) = 0.85
    # v2 = 0.5 * 0.2 + 0.1 = 0.2, theta2 = 0.85 - 0.5 (0.1 + 0.5 * 0.2) = 0.75
    theta = scalar_set(1.0)
    state = OuterOptState.fresh(theta, lr=0.5, momentum=0.5)
    theta, state = outer_step(theta, scalar_set(0.2, 0.0), state)
    assert theta["s"].b_factor[0, 0] == pytest.approx(0.85, abs=1e-15)
    theta, state = outer_step(theta, scalar_set(0.1, 0.0), state)
    assert theta["s"].b_factor[0, 0] == pytest.approx(0.75, abs=1e-15)
    assert state.momentum_buffer["s.b"][0, 0] == pytest.approx(0.2, abs=1e-15)


def quad(w):
    return (w.w1 - 0.3) ** 2 + (w.w2 - 0.7) ** 2


def test_fusion_finds_quadratic_minimum():
    w = fusion_opt(quad, FusionBudget(lambda_reg=0.0))
    assert w.w1 == pytest.approx(0.3, abs=0.05) and w.w2 == pytest.approx(0.7, abs=0.05)


def test_fusion_large_lambda_goes_to_origin():
    w = fusion_opt(quad, FusionBudget(lambda_reg=1e3))
    assert abs(w.w1) <= 0.05 and abs(w.w2) <= 0.05


def test_fusion_constant_objective():
    res = fusion_search(lambda w: 2.0, FusionBudget(lambda_reg=0.05))
    assert res.weights.clamp() == res.weights
    smallest = min(abs(a) + abs(b) for (a, b), _ in res.history)
    assert res.value == pytest.approx(2.0 + 0.05 * smallest, abs=1e-15)
    assert res.weights.l1() == smallest


def test_fusion_is_monotone_and_bounded():
    budget = FusionBudget(lambda_reg=0.05, seed=3)
    res = fusion_search(lambda w: np.sin(3 * w.w1) * np.cos(2 * w.w2) + w.w1 * w.w2, budget)
    assert all(res.value <= v for _, v in res.history)
    assert res.evaluations <= budget.max_evaluations()
    lo, hi = budget.bounds
    assert all(lo <= a <= hi and lo <= b <= hi for (a, b), _ in res.history)


def test_fusion_never_worse_than_start():
    start = FusionWeights(0.25, 0.25)
    res = fusion_search(quad, FusionBudget(lambda_reg=0.0), initial=start)
    assert res.value <= quad(start)


def test_fusion_drops_non_finite_candidates():
    def obj(w):
        return float("nan") if w.w1 > 0.9 else quad(w)

    res = fusion_search(obj, FusionBudget(lambda_reg=0.0))
    assert np.isfinite(res.value) and res.weights.w1 <= 0.9


def test_fusion_all_non_finite_raises():
    with pytest.raises(OptimizationError):
        fusion_search(lambda w: float("inf"), FusionBudget())


def test_fusion_is_deterministic():
    f = lambda w: abs(w.w1 - 0.123) + (w.w2 + 0.4) ** 2  # noqa: E731
    a = fusion_search(f, FusionBudget(seed=7))
    b = fusion_search(f, FusionBudget(seed=7))
    assert a.weights == b.weights and a.history == b.history


@pytest.mark.parametrize("kw", [{"max_steps": 0}, {"lambda_reg": -1.0}, {"bounds": (1.0, 1.0)}])
def test_budget_validation(kw):
    with pytest.raises(ConfigError):
        FusionBudget(**kw)
