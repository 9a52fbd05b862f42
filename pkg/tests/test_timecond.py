import numpy as np
import pytest

from engagekit import timecond
from engagekit.nn import Context
from engagekit.timecond import (Condition, SCALE_SHIFT, SHIFT, Strategy,
                                added_param_count, embedding_matrix,
                                sinusoidal_embedding)


def ctx_for(t_levels, dim=512):
    levels = np.asarray(t_levels)
    unique, inverse = np.unique(levels, return_inverse=True)
    return Context(mode="eval", embed_unique=embedding_matrix(unique, dim),
                   embed_inverse=inverse)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def test_embedding_matches_direct_equation_evaluation():
    # oracle: 50-digit evaluation of cos/sin(t * c**(-2d/D)) at d = D/2
    import mpmath
    mpmath.mp.dps = 50
    e = sinusoidal_embedding(1, dim=512, base=10000.0)
    freq = mpmath.mpf(10000.0) ** (mpmath.mpf(-2 * 256) / 512)
    assert float(freq) == pytest.approx(1e-4, rel=1e-12)
    assert e[510] == pytest.approx(float(mpmath.cos(freq)), rel=1e-14)
    assert e[511] == pytest.approx(float(mpmath.sin(freq)), rel=1e-14)
    # and at d = 1 (leading pair)
    freq1 = mpmath.mpf(10000.0) ** (mpmath.mpf(-2) / 512)
    assert e[0] == pytest.approx(float(mpmath.cos(freq1)), rel=1e-14)
    assert e[1] == pytest.approx(float(mpmath.sin(freq1)), rel=1e-14)


def test_embedding_bounded():
    for t in (1, 2, 3):
        e = sinusoidal_embedding(t)
        assert np.abs(e).max() <= 1.0


def test_embedding_distinct_and_deterministic():
    e1, e2, e3 = (sinusoidal_embedding(t) for t in (1, 2, 3))
    assert np.linalg.norm(e1 - e2) > 0
    assert np.linalg.norm(e1 - e3) > 0
    assert np.linalg.norm(e2 - e3) > 0
    np.testing.assert_array_equal(e1, sinusoidal_embedding(1))


def test_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_embedding(1, dim=511)


# ---------------------------------------------------------------------------
# conditioning nodes
# ---------------------------------------------------------------------------

def test_shift_zero_projection_is_identity():
    node = Condition(8, SHIFT)
    x = np.random.default_rng(0).normal(size=(5, 8))
    y, _ = node.forward(x, ctx_for([1, 2, 3, 1, 2]))
    np.testing.assert_array_equal(y, x)


def test_shift_constant_bias_adds_elementwise():
    node = Condition(8, SHIFT)
    node.b[...] = 2.5
    x = np.random.default_rng(1).normal(size=(4, 8))
    y, _ = node.forward(x, ctx_for([1, 1, 2, 3]))
    np.testing.assert_allclose(y, x + 2.5, atol=1e-15)


def test_scale_shift_zero_projection_is_identity():
    node = Condition(8, SCALE_SHIFT)
    x = np.random.default_rng(2).normal(size=(5, 8))
    y, _ = node.forward(x, ctx_for([3, 3, 1, 2, 1]))
    np.testing.assert_array_equal(y, x)


def test_scale_shift_unit_scale_doubles_input():
    node = Condition(8, SCALE_SHIFT)
    node.b[:8] = 1.0  # scale half l = 1, shift half 0
    x = np.random.default_rng(3).normal(size=(4, 8))
    y, _ = node.forward(x, ctx_for([1, 2, 3, 1]))
    np.testing.assert_allclose(y, 2 * x, atol=1e-15)


def test_scale_shift_with_zero_scale_equals_shift():
    rng = np.random.default_rng(4)
    shift_node = Condition(8, SHIFT)
    shift_node.P[...] = rng.normal(size=shift_node.P.shape) * 0.01
    shift_node.b[...] = rng.normal(size=8) * 0.01
    both = Condition(8, SCALE_SHIFT)
    both.P[8:, :] = shift_node.P
    both.b[8:] = shift_node.b
    x = rng.normal(size=(6, 8))
    ctx = ctx_for([1, 2, 3, 1, 2, 3])
    y_shift, _ = shift_node.forward(x, ctx)
    y_both, _ = both.forward(x, ctx)
    np.testing.assert_array_equal(y_both, y_shift)


def test_condition_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    for kind in (SHIFT, SCALE_SHIFT):
        node = Condition(6, kind, dim=16)
        node.P[...] = rng.normal(size=node.P.shape) * 0.1
        node.b[...] = rng.normal(size=node.b.shape) * 0.1
        x = rng.normal(size=(7, 6))
        levels = rng.integers(1, 4, size=7)
        target = rng.normal(size=(7, 6))

        def loss():
            ctx = Context(embed_unique=embedding_matrix(np.unique(levels), 16),
                          embed_inverse=np.unique(levels, return_inverse=True)[1])
            y, cache = node.forward(x, ctx)
            return 0.5 * float(((y - target) ** 2).sum()), y, cache, ctx

        val, y, cache, ctx = loss()
        grads = {}
        node.backward(y - target, cache, ctx, grads, "")
        for pname, param in (("P", node.P), ("b", node.b)):
            flat = param.ravel()
            sel = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            for i in sel:
                orig = flat[i]
                h = 1e-5
                flat[i] = orig + h
                lp = loss()[0]
                flat[i] = orig - h
                lm = loss()[0]
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                ga = grads[pname].ravel()[i]
                assert ga == pytest.approx(fd, rel=1e-4, abs=1e-8), (kind, pname)


def test_condition_requires_embeddings_in_context():
    node = Condition(4, SHIFT)
    with pytest.raises(ValueError, match="embeddings"):
        node.forward(np.zeros((2, 4)), Context())


def test_condition_width_mismatch():
    node = Condition(4, SHIFT)
    with pytest.raises(ValueError, match="width"):
        node.forward(np.zeros((2, 5)), ctx_for([1, 2]))


# ---------------------------------------------------------------------------
# strategies and parameter counts
# ---------------------------------------------------------------------------

def test_strategy_parse():
    assert Strategy.parse("SLL") is Strategy.SLL
    assert Strategy.parse(Strategy.NONE) is Strategy.NONE
    with pytest.raises(ValueError):
        Strategy.parse("fancy")


def test_added_param_counts():
    assert added_param_count(Strategy.NONE, ()) == 0
    assert added_param_count(Strategy.SLL, (31,)) == 31 * 512 + 31  # 15,903
    assert added_param_count(Strategy.SSLL, (128,)) == 2 * 128 * 512 + 2 * 128
    assert added_param_count(Strategy.SSAL, (512, 128, 30, 2)) == sum(
        2 * n * 512 + 2 * n for n in (512, 128, 30, 2))
