import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import bivariate_by_quadrature
from sqhard import multivariate as mv
from sqhard.piecewise import PiecewiseSignFunction, conditional, sign_function

# mean over 20 seeds of max |<u,v>| for 100 normalized Gaussian vectors in R^200,
# measured with plain numpy before the packing code existed
RANDOM_MAX_INNER = 0.262


@pytest.fixture(scope="module")
def ltf4(ltf_built):
    return ltf_built[4].f


def unit(d, seed):
    g = np.random.default_rng(seed).standard_normal(d)
    return g / np.linalg.norm(g)


def test_packing_orthonormal_triple():
    p = mv.packing(3, 3, 1e-9, rng_seed=0)
    assert p.max_abs_inner <= 1e-9
    np.testing.assert_allclose(np.linalg.norm(p.vectors, axis=1), 1.0, atol=1e-12)


def test_packing_single_vector():
    p = mv.packing(5, 1, 0.1, rng_seed=0)
    assert p.max_abs_inner == 0.0 and p.m == 1


def test_packing_d200():
    got = [mv.packing(200, 100, 0.35, rng_seed=s).max_abs_inner for s in range(20)]
    assert max(got) <= 0.35
    assert abs(np.mean(got) - RANDOM_MAX_INNER) <= 0.03


def test_packing_budget_error():
    with pytest.raises(mv.PackingError) as err:
        mv.packing(4, 10, 0.01, rng_seed=0)
    assert 1 <= err.value.achieved < 10


def test_packing_exact_certificate():
    p = mv.packing(10, 12, 0.9, rng_seed=4)
    brute = max(abs(float(p.vectors[i] @ p.vectors[j])) for i in range(12) for j in range(12) if i != j)
    assert p.max_abs_inner == brute
    assert p.c_param == pytest.approx(0.5 + math.log(0.9) / math.log(10))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(1, 15), st.floats(0.3, 1.0), st.integers(0, 10_000))
def test_packing_property(d, m, bound, seed):
    try:
        p = mv.packing(d, m, bound, seed)
    except mv.PackingError:
        return
    assert p.max_abs_inner <= bound
    assert np.all(np.abs(np.linalg.norm(p.vectors, axis=1) - 1) <= 1e-12)


def test_instance_validation(ltf4):
    with pytest.raises(ValueError):
        mv.HiddenDirectionInstance(ltf4, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        mv.HiddenDirectionInstance(ltf4, np.array([1.0, 0.0]), task="relu", scale_C=1.0)
    with pytest.raises(ValueError):
        mv.HiddenDirectionInstance(ltf4, np.array([1.0, 0.0]), task="ltf", scale_C=2.0)


def test_labeled_moments(ltf4):
    k = 4
    v = unit(6, 1)
    inst = mv.HiddenDirectionInstance(ltf4, v)
    n = 1_000_000
    b = mv.sample_labeled(inst, n, rng_seed=3)
    assert set(np.unique(b.y)) == {-1.0, 1.0}
    assert abs(b.y.mean()) <= 5 / math.sqrt(n)
    s = b.x @ v
    for t in range(1, k):
        vals = b.y * s**t
        assert abs(vals.mean()) <= 5 * vals.std() / math.sqrt(n)
    w = np.linalg.svd(v[None, :])[2][1]  # a unit vector orthogonal to v
    vals = b.y * (b.x @ w)
    assert abs(vals.mean()) <= 5 * vals.std() / math.sqrt(n)
    # the marginal of x is untouched by the labels
    assert np.all(np.abs(b.x.mean(axis=0)) <= 5 / math.sqrt(n))
    assert np.all(np.abs(b.x.var(axis=0) - 1) <= 5 * math.sqrt(2 / n))


def test_labels_exact(ltf4):
    inst = mv.HiddenDirectionInstance(ltf4, unit(3, 2))
    b = mv.sample_labeled(inst, 1000, rng_seed=0)
    np.testing.assert_array_equal(b.y, ltf4(b.x @ inst.v))
    first = next(iter(b))
    assert first.y == b.y[0] and np.array_equal(first.x, b.x[0])


def test_relu_labels_scaled(relu_built):
    ri = relu_built[1].instance
    inst = mv.HiddenDirectionInstance(ri.f, unit(4, 0), "relu", ri.scale_C)
    b = mv.sample_labeled(inst, 2000, rng_seed=1)
    np.testing.assert_array_equal(b.y, ri.scale_C * ri.f(b.x @ inst.v))


def test_sampling_deterministic_and_parallel_invariant(ltf4):
    inst = mv.HiddenDirectionInstance(ltf4, unit(5, 3))
    a = mv.sample_labeled(inst, 70_000, rng_seed=9, chunk=8192)
    b = mv.sample_labeled(inst, 70_000, rng_seed=9, chunk=8192, workers=4)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    c = mv.sample_labeled(inst, 70_000, rng_seed=10, chunk=8192)
    assert not np.array_equal(a.x, c.x)


def test_conditional_half_normal():
    inst = mv.HiddenDirectionInstance(sign_function(), np.array([1.0]))
    n = 200_000
    x = mv.sample_conditional(inst, 1, n, rng_seed=0)
    assert np.all(x > 0)
    assert abs(x.mean() - math.sqrt(2 / math.pi)) <= 5 * math.sqrt(1 - 2 / math.pi) / math.sqrt(n)


@pytest.mark.parametrize("label", [1, -1])
def test_conditional_ks_and_perp(ltf4, label):
    v = unit(5, 7)
    inst = mv.HiddenDirectionInstance(ltf4, v)
    x = mv.sample_conditional(inst, label, 100_000, rng_seed=label + 5)
    cd = conditional(ltf4, label)
    res = stats.kstest(x @ v, cd.cdf)
    assert res.pvalue > 0.01
    # orthogonal part: coordinates in an orthonormal basis of v-perp
    Q = np.linalg.svd(v[None, :])[2][1:]
    cov = np.cov((x @ Q.T).T)
    assert np.max(np.abs(cov - np.eye(4))) <= 5 * math.sqrt(2 / 100_000)


def test_conditional_mixture_matches_labeled(ltf4):
    v = unit(4, 11)
    inst = mv.HiddenDirectionInstance(ltf4, v)
    n = 50_000
    plus = mv.sample_conditional(inst, 1, n // 2, rng_seed=1) @ v  # Pr[f = 1] = 1/2
    minus = mv.sample_conditional(inst, -1, n // 2, rng_seed=2) @ v
    joint = mv.sample_labeled(inst, n, rng_seed=3).x @ v
    assert stats.ks_2samp(np.concatenate([plus, minus]), joint).pvalue > 0.01


def test_conditional_rejects_relu(relu_built):
    ri = relu_built[1].instance
    inst = mv.HiddenDirectionInstance(ri.f, np.array([1.0, 0.0]), "relu", ri.scale_C)
    with pytest.raises(ValueError):
        mv.sample_conditional(inst, 1, 10, rng_seed=0)


def test_truncated_normal_tails():
    u = np.linspace(0.01, 0.99, 9)
    z = mv.truncated_normal(np.full(9, 30.0), np.full(9, np.inf), u)
    assert np.all(z >= 30.0) and np.all(np.diff(z) > 0)
    # exponential tail: Pr[Z > 30 + e | Z > 30] ~ exp(-30 e)
    np.testing.assert_allclose(z - 30.0, -np.log1p(-u) / 30.0, rtol=5e-3)
    zl = mv.truncated_normal(np.full(9, -np.inf), np.full(9, -8.0), u)
    assert np.all(zl <= -8.0) and np.all(np.diff(zl) > 0)
    mid = mv.truncated_normal(np.array([-0.5]), np.array([0.5]), np.array([0.5]))
    assert abs(mid[0]) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.floats(-6, 6), st.floats(0.01, 3), st.floats(0.001, 0.999))
def test_truncated_normal_in_interval(lo, width, u):
    z = mv.truncated_normal(np.array([lo]), np.array([lo + width]), np.array([u]))[0]
    assert lo <= z <= lo + width


def test_family_correlation_examples(ltf_built):
    f2 = ltf_built[2].f
    u = unit(6, 0)
    assert mv.family_correlation(f2, u, u) == pytest.approx(1.0, abs=1e-12)
    w = np.linalg.svd(u[None, :])[2][1]
    assert abs(mv.family_correlation(f2, u, w)) <= 1e-10
    v = 0.2 * u + math.sqrt(1 - 0.04) * w
    got = mv.family_correlation(f2, u, v)
    assert got == pytest.approx(bivariate_by_quadrature(f2, f2, 0.2), abs=1e-9)
    # the leading Hermite term (E[f z^2]^2 / 2) rho^2 dominates; see the ledger on the rho^(k+1) bound
    assert abs(got) <= 0.016


def test_family_correlation_matrix_bound(ltf_built):
    k = 3
    f = ltf_built[k].f
    p = mv.packing(30, 12, 0.6, rng_seed=5)
    C = mv.correlation_matrix(f, p.vectors)
    off = np.abs(C - np.eye(12))
    # degree-k decay: |E[F_u F_v]| <= |<u,v>|^k since the Hermite expansion starts at degree k
    G = np.abs(p.vectors @ p.vectors.T)
    np.fill_diagonal(G, 0.0)
    assert np.all(off <= G**k + 1e-10)


def test_family_correlation_rejects_nonunit(ltf4):
    with pytest.raises(ValueError):
        mv.family_correlation(ltf4, np.array([1.0, 1.0]), np.array([1.0, 0.0]))
