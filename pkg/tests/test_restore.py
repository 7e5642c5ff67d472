import math

import numpy as np
import pytest

from amrod import autodiff as ad
from amrod import restore as rs
from amrod.toydet import ParamStore


def stores(seed=0, sizes=(("a", (10, 10)), ("b", (7,)), ("c", (3, 4)))):
    rng = np.random.default_rng(seed)
    src = ParamStore({k: rng.normal(size=s) for k, s in sizes}, "source")
    stu = ParamStore({k: rng.normal(size=s) for k, s in sizes})
    return stu, src


def test_fim_squares():
    f = rs.fim_from_grads({"w": np.array([3.0, -2.0])})
    np.testing.assert_array_equal(f.layers["w"], [9.0, 4.0])
    assert f.sample_count == 1
    np.testing.assert_array_equal(rs.fim_from_grads({"w": np.zeros(3)}).layers["w"], 0.0)


def test_fim_logistic_probe_matches_fd():
    """Logistic model p = sigmoid(w.x); log-likelihood gradient squared vs finite differences."""
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    w0 = rng.normal(size=4)
    y = 1.0

    def nll(w):
        z = float(w @ x)
        return np.logaddexp(0.0, z) - y * z

    g = ad.Graph()
    w = g.param("w", w0)
    z = ad.sum(ad.mul(w, x))
    loss = ad.sub(ad.softplus(z), ad.mul(z, y))
    fim = rs.fim_from_grads(g.backward(loss)).layers["w"]
    h = 1e-6
    fd = np.array([(nll(w0 + h * e) - nll(w0 - h * e)) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(fim, fd**2, rtol=0, atol=1e-8)
    # closed form (sigmoid(z) - y)^2 x^2
    p = 1 / (1 + np.exp(-w0 @ x))
    np.testing.assert_allclose(fim, (p - y) ** 2 * x**2, atol=1e-14)


def test_zero_fim_gives_zero_scores():
    f = rs.fim_from_grads({"w": np.zeros(20)})
    np.testing.assert_array_equal(rs.reset_scores(f, np.random.default_rng(0))["w"], 0.0)


def test_mask_count_on_thousand_elements():
    m = rs.build_mask({"w": np.random.default_rng(0).random(1000)}, 0.01)
    assert int(m["w"].sum()) == 10


def test_mask_sort_oracle():
    w = np.arange(1, 101, dtype=float)
    m = rs.build_mask({"w": np.random.default_rng(0).permutation(w)}, 0.05)
    perm = np.random.default_rng(0).permutation(w)
    assert set(perm[m["w"]]) == {1.0, 2.0, 3.0, 4.0, 5.0}


def test_all_equal_scores_pick_lowest_indices():
    m = rs.build_mask({"w": np.ones(30)}, 0.1)
    np.testing.assert_array_equal(np.flatnonzero(m["w"]), [0, 1, 2])


@pytest.mark.parametrize("n,q", [(1, 0.01), (7, 0.01), (100, 0.01), (101, 0.01), (5000, 0.0001), (64, 0.5), (10, 0.3)])
def test_reset_fraction_is_ceil_qn(n, q):
    m = rs.build_mask({"w": np.random.default_rng(n).random(n)}, q)
    assert int(m["w"].sum()) == max(1, math.ceil(q * n))


@pytest.mark.parametrize("q", [0.0, 1.0, -0.1])
def test_mask_rejects_bad_q(q):
    with pytest.raises(ValueError):
        rs.build_mask({"w": np.ones(3)}, q)


def test_all_one_mask_restores_source_bit_exactly():
    stu, src = stores()
    out = rs.apply_restore(stu, src, {k: np.ones(v.shape, bool) for k, v in stu.items()})
    for k in src:
        assert out[k].tobytes() == src[k].tobytes()


def test_all_zero_mask_unchanged():
    stu, src = stores()
    assert rs.apply_restore(stu, src, {k: np.zeros(v.shape, bool) for k, v in stu.items()}) == stu


def test_apply_restore_splices_and_is_idempotent():
    stu, src = stores(2)
    rng = np.random.default_rng(0)
    mask = {k: rng.random(v.shape) < 0.3 for k, v in stu.items()}
    once = rs.apply_restore(stu, src, mask)
    for k in stu:
        np.testing.assert_array_equal(once[k][mask[k]], src[k][mask[k]])
        np.testing.assert_array_equal(once[k][~mask[k]], stu[k][~mask[k]])
    assert rs.apply_restore(once, src, mask) == once


def test_apply_restore_schema_mismatch():
    stu, src = stores()
    with pytest.raises(ValueError):
        rs.apply_restore(stu, ParamStore({"a": np.zeros((10, 10))}, "source"), {k: np.zeros(v.shape, bool) for k, v in stu.items()})


def fim_for(stu, seed=0):
    rng = np.random.default_rng(seed)
    return rs.fim_from_grads({k: rng.normal(size=v.shape) for k, v in stu.items()})


@pytest.mark.parametrize("seed", range(10))
def test_arr_resets_ceil_qn_per_layer(seed):
    stu, src = stores(seed)
    out, mask = rs.adaptive_randomized_restore(stu, src, fim_for(stu, seed), 0.05, np.random.default_rng(seed))
    for k, v in stu.items():
        assert int(mask[k].sum()) == max(1, math.ceil(0.05 * v.size))
    assert out.schema() == stu.schema()


def test_arr_with_unit_noise_equals_dr():
    stu, src = stores(3)
    fim = fim_for(stu, 3)
    a = rs.build_mask(rs.reset_scores(fim, np.random.default_rng(0), unit_noise=True), 0.1)
    _, b = rs.data_driven_restore(stu, src, fim, 0.1)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_dr_sort_oracle_and_determinism():
    stu = ParamStore({"w": np.zeros(4)})
    src = ParamStore({"w": np.ones(4)}, "source")
    fim = rs.FimAccumulator({"w": np.array([4.0, 1.0, 3.0, 2.0])})
    out, m1 = rs.data_driven_restore(stu, src, fim, 0.5)
    _, m2 = rs.data_driven_restore(stu, src, fim, 0.5)
    np.testing.assert_array_equal(m1["w"], [False, True, False, True])
    np.testing.assert_array_equal(m1["w"], m2["w"])
    np.testing.assert_array_equal(out["w"], [0.0, 1.0, 0.0, 1.0])


def test_sr_extremes():
    stu, src = stores(4)
    assert rs.stochastic_restore(stu, src, 0.0, np.random.default_rng(0))[0] == stu
    out = rs.stochastic_restore(stu, src, 1.0, np.random.default_rng(0))[0]
    for k in src:
        assert out[k].tobytes() == src[k].tobytes()


def test_sr_count_within_binomial_band():
    stu = ParamStore({"w": np.zeros(100_000)})
    src = ParamStore({"w": np.ones(100_000)}, "source")
    p = 0.01
    _, m = rs.stochastic_restore(stu, src, p, np.random.default_rng(7))
    n = 100_000
    assert abs(int(m["w"].sum()) - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_zero_fim_elements_dominate_resets():
    """Two-group FIM: a zero group of size ceil(q n) and a positive group."""
    n, q = 200, 0.05
    k = math.ceil(q * n)
    rng = np.random.default_rng(0)
    hits = total = 0
    for t in range(1000):
        vals = rng.random(n) + 1e-3
        zero_idx = rng.choice(n, k, replace=False)
        vals[zero_idx] = 0.0
        fim = rs.FimAccumulator({"w": vals})
        m = rs.build_mask(rs.reset_scores(fim, rng), q)["w"]
        hits += int(m[zero_idx].sum())
        total += k
    assert hits / total >= 0.99


def test_restore_config_validation():
    with pytest.raises(ValueError):
        rs.RestoreConfig(mode="global")
    with pytest.raises(ValueError):
        rs.RestoreConfig(q=0.0)
