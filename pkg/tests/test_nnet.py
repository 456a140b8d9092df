"""Tests for sdi.nnet: masked MLPs, gradients, Adam, initializers."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdi import nnet
from sdi.nnet import (AdamState, MlpParams, MlpStack, adam_step, backward,
                      categorical_nll, forward_batch, hidden_size,
                      masked_forward, one_hot_batch, orthogonal_init, softmax,
                      uniform_init)


def random_params(m, n, rng, gain=1.0):
    h = hidden_size(m, n)
    return MlpParams(
        w0=orthogonal_init(h, m * n, gain, rng),
        b0=uniform_init(h, -0.5, 0.5, rng),
        w1=orthogonal_init(n, h, gain, rng),
        b1=uniform_init(n, -0.5, 0.5, rng),
    )


def random_onehot(m, n, rng):
    values = rng.integers(0, n, size=m)
    x = np.zeros((m, n))
    x[np.arange(m), values] = 1.0
    return x.reshape(-1), values


# ---------------------------------------------------------------------------
# masked_forward
# ---------------------------------------------------------------------------

def test_zero_params_give_uniform_softmax():
    m, n = 3, 2
    h = hidden_size(m, n)
    p = MlpParams(np.zeros((h, m * n)), np.zeros(h), np.zeros((n, h)), np.zeros(n))
    sample, _ = random_onehot(m, n, np.random.default_rng(0))
    logits = masked_forward(p, sample, np.array([False, True, True]))
    assert np.array_equal(logits, np.zeros(n))
    assert np.allclose(softmax(logits), 1.0 / n)


def test_all_false_mask_means_constant_output():
    rng = np.random.default_rng(1)
    p = random_params(3, 2, rng)
    mask = np.zeros(3, dtype=bool)
    outs = {tuple(masked_forward(p, random_onehot(3, 2, rng)[0], mask))
            for _ in range(10)}
    assert len(outs) == 1


def test_masked_block_content_is_bitwise_irrelevant():
    rng = np.random.default_rng(2)
    p = random_params(4, 3, rng)
    mask = np.array([True, False, True, False])
    sample, values = random_onehot(4, 3, rng)
    flipped = sample.copy().reshape(4, 3)
    flipped[1] = np.roll(flipped[1], 1)  # change the masked-out block
    flipped[3] = 0.0
    a = masked_forward(p, sample, mask)
    b = masked_forward(p, flipped.reshape(-1), mask)
    assert np.array_equal(a, b)


def test_masked_forward_dimension_mismatch():
    p = random_params(3, 2, np.random.default_rng(3))
    with pytest.raises(ValueError, match="input size"):
        masked_forward(p, np.zeros(8), np.ones(4, dtype=bool))


def test_forward_batch_matches_single():
    rng = np.random.default_rng(4)
    p = random_params(3, 2, rng)
    mask = np.array([True, True, False])
    samples = np.stack([random_onehot(3, 2, rng)[0] for _ in range(5)])
    batched = forward_batch(p, samples, mask)
    for k in range(5):
        assert np.allclose(batched[k], masked_forward(p, samples[k], mask))


# ---------------------------------------------------------------------------
# categorical_nll
# ---------------------------------------------------------------------------

def test_nll_uniform_two_categories():
    assert categorical_nll(np.zeros(2), 0) == pytest.approx(np.log(2))


def test_nll_huge_logit_is_stable():
    value = categorical_nll(np.array([1000.0, 0.0]), 0)
    assert np.isfinite(value)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_nll_derived_value():
    assert categorical_nll(np.array([1.0, 0.0]), 1) == pytest.approx(np.log(1 + np.e))


def test_nll_value_out_of_range():
    with pytest.raises(ValueError):
        categorical_nll(np.zeros(2), 2)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(5)
    for _ in range(20):
        logits = rng.normal(scale=30, size=rng.integers(2, 7))
        assert abs(softmax(logits).sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# backward vs finite differences
# ---------------------------------------------------------------------------

def fd_gradient(p, sample, mask, value, h=1e-4):
    """Central finite differences through categorical_nll(masked_forward)."""
    grads = MlpParams(*(np.zeros_like(a) for a in p.tree().values()))
    for name, arr in p.tree().items():
        garr = grads.tree()[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = categorical_nll(masked_forward(p, sample, mask), value)
            arr[idx] = orig - h
            down = categorical_nll(masked_forward(p, sample, mask), value)
            arr[idx] = orig
            garr[idx] = (up - down) / (2 * h)
    return grads


@pytest.mark.parametrize("seed", range(8))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m, n = 3, 2
    p = random_params(m, n, rng)
    sample, values = random_onehot(m, n, rng)
    mask = rng.random(m) < 0.7
    value = int(rng.integers(0, n))
    analytic = backward(p, sample, mask, value)
    numeric = fd_gradient(p, sample, mask, value)
    for name in ("w0", "b0", "w1", "b1"):
        a, f = analytic.tree()[name], numeric.tree()[name]
        scale = max(np.abs(f).max(), 1.0)
        assert np.abs(a - f).max() / scale < 1e-5, name


def test_backward_zero_gradient_on_masked_columns():
    rng = np.random.default_rng(11)
    p = random_params(3, 2, rng)
    sample, _ = random_onehot(3, 2, rng)
    mask = np.array([True, False, True])
    g = backward(p, sample, mask, 0)
    assert np.array_equal(g.w0[:, 2:4], np.zeros_like(g.w0[:, 2:4]))


def test_gradient_vanishes_at_peaked_minimum():
    rng = np.random.default_rng(12)
    p = random_params(2, 2, rng)
    sample, _ = random_onehot(2, 2, rng)
    mask = np.array([False, True])
    norms = []
    for peak in (10.0, 100.0, 1000.0):
        p.b1 = np.array([peak, -peak])
        g = backward(p, sample, mask, 0)
        norms.append(max(np.abs(v).max() for v in g.tree().values()))
    assert norms[0] > norms[1] > norms[2]
    assert norms[2] < 1e-12


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    state = AdamState(lr=0.1)
    params = {"x": np.array([1.0, -2.0])}
    adam_step(state, params, {"x": np.zeros(2)})
    assert np.array_equal(params["x"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_magnitude():
    state = AdamState(lr=0.05)
    params = {"x": np.array([0.0])}
    adam_step(state, params, {"x": np.array([3.7])})
    step = -params["x"][0]
    assert 0.05 * (1 - 1e-6) <= step <= 0.05


def test_adam_descends_quadratic():
    state = AdamState(lr=0.1)
    params = {"x": np.array([1.0])}
    seen = [1.0]
    for _ in range(2):
        adam_step(state, params, {"x": 2 * params["x"]})
        seen.append(params["x"][0])
    assert seen[0] > seen[1] > seen[2]


def test_adam_deterministic():
    def run():
        state = AdamState(lr=0.01)
        params = {"x": np.linspace(-1, 1, 5)}
        for k in range(10):
            adam_step(state, params, {"x": np.sin(params["x"] + k)})
        return params["x"]
    assert np.array_equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    state = AdamState(lr=0.1)
    with pytest.raises(FloatingPointError, match="w0"):
        adam_step(state, {"w0": np.zeros(2)}, {"w0": np.array([1.0, np.nan])})


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def test_orthogonal_square_gain_one():
    w = orthogonal_init(8, 8, 1.0, np.random.default_rng(0))
    assert np.abs(w.T @ w - np.eye(8)).max() < 1e-6


def test_orthogonal_gain_25_singular_values():
    for rows, cols in ((12, 6), (2, 12), (6, 6)):
        w = orthogonal_init(rows, cols, 2.5, np.random.default_rng(1))
        s = np.linalg.svd(w, compute_uv=False)
        assert np.allclose(s, 2.5, atol=1e-6)


def test_orthogonal_wide_rows_orthonormal():
    w = orthogonal_init(3, 10, 2.5, np.random.default_rng(2))
    assert np.abs(w @ w.T - 6.25 * np.eye(3)).max() < 1e-6


def test_uniform_init_law_of_large_numbers():
    draws = uniform_init(10 ** 5, -1.1, 1.1, np.random.default_rng(3))
    assert draws.min() >= -1.1 and draws.max() < 1.1
    # 3 sigma of the mean of U(-1.1, 1.1) over 1e5 draws is ~0.006
    assert abs(draws.mean()) < 0.02


# ---------------------------------------------------------------------------
# stacked ensemble
# ---------------------------------------------------------------------------

def test_stack_forward_matches_single_mlps():
    rng = np.random.default_rng(21)
    m, n, b = 4, 3, 6
    stack = MlpStack(m, np.full(m, n)).init_random(rng, gain=1.2,
                                                   bias_lo=-0.3, bias_hi=0.3)
    values = rng.integers(0, n, size=(b, m))
    xoh = one_hot_batch(values, np.full(m, n), n)
    config = rng.random((m, m)) < 0.5
    np.fill_diagonal(config, False)
    logits = stack.forward(xoh, config)
    for i in range(m):
        single = forward_batch(stack.params_for(i), xoh, config[i])
        assert np.allclose(logits[i], single, atol=1e-12)


def test_stack_loss_and_grad_matches_per_sample_backward():
    rng = np.random.default_rng(22)
    m, n, b = 3, 2, 5
    stack = MlpStack(m, np.full(m, n)).init_random(rng, gain=0.8,
                                                   bias_lo=-0.2, bias_hi=0.2)
    values = rng.integers(0, n, size=(b, m))
    xoh = one_hot_batch(values, np.full(m, n), n)
    config = rng.random((m, m)) < 0.6
    np.fill_diagonal(config, False)
    grad = np.zeros_like(stack.flat)
    per_var = stack.loss_and_grad(xoh, values, config, grad)

    for i in range(m):
        p = stack.params_for(i)
        nlls, g_w0 = [], np.zeros_like(p.w0)
        for k in range(b):
            logits = masked_forward(p, xoh[k], config[i])
            nlls.append(categorical_nll(logits, values[k, i]))
            g_w0 += backward(p, xoh[k], config[i], values[k, i]).w0
        assert per_var[i] == pytest.approx(np.mean(nlls))
        from sdi.nnet import _StackGrads
        gv = _StackGrads(stack, grad)
        assert np.allclose(gv.w0[i], g_w0 / b, atol=1e-10)


def test_stack_per_variable_nll_matches_forward():
    rng = np.random.default_rng(23)
    m, n, b, c = 3, 2, 8, 4
    stack = MlpStack(m, np.full(m, n)).init_random(rng, gain=1.0,
                                                   bias_lo=-0.4, bias_hi=0.4)
    values = rng.integers(0, n, size=(b, m))
    xoh = one_hot_batch(values, np.full(m, n), n)
    configs = rng.random((c, m, m)) < 0.5
    for k in range(c):
        np.fill_diagonal(configs[k], False)
    nll = stack.per_variable_nll(xoh, values, configs)
    for k in range(c):
        logits = stack.forward(xoh, configs[k])
        for i in range(m):
            expected = np.mean([categorical_nll(logits[i, s], values[s, i])
                                for s in range(b)])
            assert nll[k, i] == pytest.approx(expected)


def test_stack_mixed_cardinalities_ignore_padded_categories():
    rng = np.random.default_rng(24)
    cats = np.array([2, 3, 2])
    stack = MlpStack(3, cats).init_random(rng, gain=1.0, bias_lo=-1, bias_hi=1)
    values = np.column_stack([rng.integers(0, k, size=16) for k in cats])
    xoh = one_hot_batch(values, cats, 3)
    configs = np.zeros((1, 3, 3), dtype=bool)
    nll = stack.per_variable_nll(xoh, values, configs, per_sample=True)
    assert np.isfinite(nll).all()
    # padded logit slot carries no probability mass
    logits = stack.forward(xoh, configs[0])
    probs = softmax(logits, axis=-1)
    assert probs[0, :, 2].max() < 1e-12


def test_stack_copy_is_independent():
    stack = MlpStack(2, np.array([2, 2])).init_random(np.random.default_rng(1))
    dup = stack.copy()
    stack.flat[:] = 0.0
    assert not np.array_equal(dup.flat, stack.flat)


def test_stack_save_load_round_trip(tmp_path):
    stack = MlpStack(3, np.array([2, 3, 2])).init_random(np.random.default_rng(9),
                                                         bias_lo=-1, bias_hi=1)
    path = tmp_path / "theta.npz"
    stack.save(path)
    loaded = MlpStack.load(path)
    assert np.array_equal(loaded.flat, stack.flat)
    assert np.array_equal(loaded.n_categories, stack.n_categories)


def test_one_hot_batch_layout():
    values = np.array([[0, 2], [1, 0]])
    cats = np.array([2, 3])
    oh = one_hot_batch(values, cats, 3)
    assert oh.shape == (2, 6)
    assert oh[0].tolist() == [1, 0, 0, 0, 0, 1]
    assert oh[1].tolist() == [0, 1, 0, 1, 0, 0]
