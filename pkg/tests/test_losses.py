import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evssl import gradcore as gc
from evssl import losses as L
from evssl.errors import DomainError, ShapeMismatch

C = gc.constant


def unit(rows):
    rows = np.asarray(rows, dtype=float)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def rand_batch(seed, b=4, e=8):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, e)), rng.standard_normal((b, e)), rng.standard_normal((b, e)), unit(rng.standard_normal((b, e)))


# naive oracles: plain python loops, no max-subtraction -----------------------


def nce_oracle(q, keys, pos, tau):
    num = math.exp(float(np.dot(q, keys[pos])) / tau)
    den = sum(math.exp(float(np.dot(q, k)) / tau) for k in keys)
    return -math.log(num / den)


def zeta_oracle(v1, v2):
    return float(np.dot(v1, v2)) * v2 / math.sqrt(float(np.dot(v2, v2)))


def l_evt_oracle(q, k, y, tau, mode="own"):
    b = len(q)
    qn, kn = unit(q), unit(k)
    total = 0.0
    for i in range(b):
        query = zeta_oracle(qn[i], y[i])
        keys = [zeta_oracle(kn[j], y[j] if mode == "own" else y[i]) for j in range(b)]
        total += nce_oracle(query, keys, i, tau)
    return total / b


def l_rgb_oracle(qi, y, tau):
    qn = unit(qi)
    return sum(nce_oracle(qn[i], y, i, tau) for i in range(len(qi))) / len(qi)


def scores_oracle(m, tau):
    mn = unit(m)
    b = len(m)
    s = np.empty((b, b))
    for i in range(b):
        den = sum(math.exp(float(np.dot(mn[i], mn[j])) / tau) for j in range(b))
        for j in range(b):
            s[i, j] = math.exp(float(np.dot(mn[i], mn[j])) / tau) / den
    return s


def kl_oracle(sq, sy):
    return sum(sq[i, j] * math.log(sq[i, j] / sy[i, j]) for i in range(sq.shape[0]) for j in range(sq.shape[1]))


# closed forms ----------------------------------------------------------------


@pytest.mark.parametrize("tau,expected", [(1.0, 0.313262), (0.2, 0.006715)])
def test_info_nce_orthogonal(tau, expected):
    q = C(np.array([1.0, 0.0]))
    keys = C(np.array([[1.0, 0.0], [0.0, 1.0]]))
    val = L.info_nce(q, keys, 0, tau).item()
    assert abs(val - math.log(1 + math.exp(-1 / tau))) < 1e-6
    assert abs(val - expected) < 5e-7


def test_info_nce_naive_oracle():
    rng = np.random.default_rng(0)
    q, keys = rng.standard_normal(8), rng.standard_normal((8, 8))
    for pos in range(8):
        got = L.info_nce(C(q), C(keys), pos, 0.5, normalize_inputs=False).item()
        assert abs(got - nce_oracle(q, keys, pos, 0.5)) < 1e-10
        got = L.info_nce(C(q), C(keys), pos, 0.5).item()
        assert abs(got - nce_oracle(unit(q), unit(keys), pos, 0.5)) < 1e-10


def test_info_nce_errors():
    with pytest.raises(ShapeMismatch):
        L.info_nce(C(np.ones(2)), C(np.ones((2, 2))), 2, 1.0)
    with pytest.raises(DomainError):
        L.info_nce(C(np.zeros(2)), C(np.ones((2, 2))), 0, 1.0)


def test_zeta_examples():
    assert L.zeta(C(np.array([1.0, 2.0])), C(np.array([0.0, 2.0]))).value.tolist() == [0.0, 4.0]
    assert not L.zeta(C(np.array([1.0, 0.0])), C(np.array([0.0, 3.0]))).value.any()
    assert L.zeta(C(np.array([1.0, 0.0])), C(np.array([1.0, 0.0]))).value.tolist() == [1.0, 0.0]
    with pytest.raises(DomainError):
        L.zeta(C(np.ones(2)), C(np.zeros(2)))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_zeta_idempotent_on_unit(seed):
    rng = np.random.default_rng(seed)
    v, y = rng.standard_normal(5), unit(rng.standard_normal(5))
    once = L.zeta(C(v), C(y))
    assert np.allclose(L.zeta(once, C(y)).value, once.value, rtol=1e-12, atol=1e-12)


def test_l_evt_orthogonal_teachers():
    y = np.eye(2)
    for tau in (1.0, 0.2):
        b = L.BatchEmbeddings.from_arrays(y, y, y, y)
        assert abs(L.l_evt(b, tau).item() - math.log(1 + math.exp(-1 / tau))) < 1e-12


@pytest.mark.parametrize("mode", ["own", "query"])
def test_l_evt_oracle(mode):
    for seed in range(10):
        q, k, qi, y = rand_batch(seed)
        got = L.l_evt(L.BatchEmbeddings.from_arrays(q, k, qi, y), 0.2, mode).item()
        assert abs(got - l_evt_oracle(q, k, y, 0.2, mode)) < 1e-10


def test_l_evt_scale_invariant():
    q, k, qi, y = rand_batch(1)
    base = L.l_evt(L.BatchEmbeddings.from_arrays(q, k, qi, y), 0.2).item()
    c = np.array([[3.0], [0.1], [7.0], [1.5]])
    assert abs(L.l_evt(L.BatchEmbeddings.from_arrays(q * c, k / c, qi, y), 0.2).item() - base) < 1e-12


def test_l_evt_vanilla_oracle():
    q, k, qi, y = rand_batch(2)
    got = L.l_evt_vanilla(L.BatchEmbeddings.from_arrays(q, k, qi, y), 0.2).item()
    ref = sum(nce_oracle(unit(q)[i], unit(k), i, 0.2) for i in range(4)) / 4
    assert abs(got - ref) < 1e-10


def test_l_rgb_examples():
    y = np.eye(2)
    assert abs(L.l_rgb(L.BatchEmbeddings.from_arrays(y, y, y, y), 1.0).item() - math.log(1 + math.e**-1)) < 1e-12
    q, k, qi, y = rand_batch(3)
    b = L.BatchEmbeddings.from_arrays(q, k, qi, y)
    assert abs(L.l_rgb(b, 0.2).item() - l_rgb_oracle(qi, y, 0.2)) < 1e-10
    perm = np.array([2, 0, 3, 1])
    bp = L.BatchEmbeddings.from_arrays(q[perm], k[perm], qi[perm], y[perm])
    assert abs(L.l_rgb(bp, 0.2).item() - L.l_rgb(b, 0.2).item()) < 1e-12


def test_pairwise_scores_examples():
    s = L.pairwise_scores(C(np.eye(2)), 1.0).value
    e = math.e
    assert np.allclose(s, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], rtol=0, atol=1e-15)
    same = L.pairwise_scores(C(np.tile([1.0, 2.0, 3.0], (4, 1))), 0.2).value
    assert np.allclose(same, 0.25, rtol=0, atol=1e-15)
    m = np.random.default_rng(4).standard_normal((8, 5))
    s = L.pairwise_scores(C(m), 0.2).value
    assert np.allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(s, scores_oracle(m, 0.2), rtol=0, atol=1e-12)


def test_l_kl_examples():
    s = np.array([[0.8, 0.2]])
    y = np.array([[0.5, 0.5]])
    assert abs(L.l_kl(C(s), C(y)).item() - (0.8 * math.log(1.6) + 0.2 * math.log(0.4))) < 1e-9
    assert abs(L.l_kl(C(s), C(y)).item() - 0.192745) < 5e-7
    assert L.l_kl(C(s), C(s)).item() == 0.0


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_l_kl_nonneg_and_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((4, 4)) + 0.01, rng.random((4, 4)) + 0.01
    a /= a.sum(axis=1, keepdims=True)
    b /= b.sum(axis=1, keepdims=True)
    got = L.l_kl(C(a), C(b)).item()
    assert got >= -1e-15
    assert abs(got - kl_oracle(a, b)) < 1e-12


def test_total_loss_composition():
    q, k, qi, y = rand_batch(5)
    b = L.BatchEmbeddings.from_arrays(q, k, qi, y)
    total, parts = L.total_loss(b, L.LossConfig(lambda1=0.0))
    assert total.item() == parts["l_evt"] + parts["l_rgb"]
    total, parts = L.total_loss(b, L.LossConfig())
    ref = l_evt_oracle(q, k, y, 0.2) + l_rgb_oracle(qi, y, 0.2) + 2 * kl_oracle(scores_oracle(qi, 0.2), scores_oracle(y, 0.2))
    assert abs(total.item() - ref) < 1e-10
    _, vanilla = L.total_loss(b, L.LossConfig(event_loss="vanilla"))
    assert vanilla["l_rgb"] == parts["l_rgb"] and vanilla["l_evt"] != parts["l_evt"]


def test_no_gradient_into_keys_or_teacher():
    q, k, qi, y = rand_batch(6)
    with pytest.raises(ValueError):
        tape = gc.Tape()
        L.BatchEmbeddings(C(q), tape.param(k), C(qi), C(y))
    tape = gc.Tape()
    tq, tqi = tape.param(q), tape.param(qi)
    b = L.BatchEmbeddings(tq, C(k), tqi, C(y))
    total, _ = L.total_loss(b, L.LossConfig())
    grads = tape.backward(total)
    assert set(grads) == {tq.id, tqi.id}


def test_teacher_rows_must_be_unit():
    q, k, qi, y = rand_batch(7)
    with pytest.raises(ValueError):
        L.BatchEmbeddings.from_arrays(q, k, qi, 2 * y)


def test_batch_of_one_rejected():
    q, k, qi, y = rand_batch(8, b=1)
    b = L.BatchEmbeddings.from_arrays(q, k, qi, y)
    with pytest.raises(ShapeMismatch):
        L.l_evt(b, 0.2)


def test_config_validation():
    from evssl.errors import ConfigError

    with pytest.raises(ConfigError):
        L.LossConfig(tau=0.0)
    with pytest.raises(ConfigError):
        L.LossConfig(key_projection_mode="other")
    assert L.LossConfig().lambda1 == 2.0
