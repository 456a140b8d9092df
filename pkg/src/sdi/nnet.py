"""Dense neural-net kernel: masked one-hidden-layer MLPs over one-hot inputs.

Everything is float64 numpy.  A single conditional model for one variable is
an `MlpParams`; the learner's per-variable ensemble is an `MlpStack`, which
keeps all parameters in one flat buffer so an optimizer step touches a single
tensor.  Inputs are block one-hot vectors: M variables times N categories,
block j zeroed whenever the Boolean mask says variable j is not a parent.
Hidden activation is LeakyReLU with slope 0.1; outputs are unnormalized
log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.1
NEG_INF = -1e30


def hidden_size(m: int, n: int) -> int:
    return max(4 * m, 4 * n)


def leaky_relu(z: np.ndarray) -> np.ndarray:
    # max(z, 0.1 z) equals LeakyReLU for slopes below 1
    return np.maximum(z, LEAKY_SLOPE * z)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# single-variable MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Parameters of one conditional model: w0 (H, M*N), b0 (H,), w1 (N_out, H), b1 (N_out,)."""

    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray

    @property
    def n_out(self) -> int:
        return self.w1.shape[0]

    def tree(self) -> dict[str, np.ndarray]:
        return {"w0": self.w0, "b0": self.b0, "w1": self.w1, "b1": self.b1}

    def copy(self) -> "MlpParams":
        return MlpParams(self.w0.copy(), self.b0.copy(), self.w1.copy(), self.b1.copy())

    def allclose(self, other: "MlpParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.tree().values(),
                                                        other.tree().values()))


def expand_mask(mask_row: np.ndarray, n_categories: int) -> np.ndarray:
    """Per-variable Boolean mask -> per-input-slot float mask (block repeat)."""
    return np.repeat(np.asarray(mask_row, dtype=float), n_categories)


def masked_forward(p: MlpParams, sample: np.ndarray, mask_row: np.ndarray) -> np.ndarray:
    """Logits for one block one-hot sample with masked-out input blocks zeroed.

    ``sample`` has length M*N; ``mask_row`` has length M.  Zeroing happens by
    exact multiplication with a 0/1 mask, so the output is bitwise invariant
    to the content of masked-out blocks.
    """
    sample = np.asarray(sample, dtype=float)
    mask_row = np.asarray(mask_row)
    n = sample.shape[-1] // mask_row.shape[-1]
    if sample.shape[-1] != p.w0.shape[1]:
        raise ValueError(
            f"sample length {sample.shape[-1]} != input size {p.w0.shape[1]}")
    x = sample * expand_mask(mask_row, n)
    h = leaky_relu(p.w0 @ x + p.b0)
    return p.w1 @ h + p.b1


def forward_batch(p: MlpParams, samples: np.ndarray, mask_row: np.ndarray) -> np.ndarray:
    """Batched masked_forward: samples (B, M*N) -> logits (B, N_out)."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[-1] // np.asarray(mask_row).shape[-1]
    x = samples * expand_mask(mask_row, n)
    h = leaky_relu(x @ p.w0.T + p.b0)
    return h @ p.w1.T + p.b1


def categorical_nll(logits: np.ndarray, value: int) -> float:
    """Negative log-probability of `value` under softmax(logits), stable."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= value < logits.shape[-1]:
        raise ValueError(f"value {value} out of range for {logits.shape[-1]} categories")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[value])


def backward(p: MlpParams, sample: np.ndarray, mask_row: np.ndarray,
             value: int) -> MlpParams:
    """Analytic gradient of categorical_nll(masked_forward(...), value).

    Returns gradients in an MlpParams of matching shapes.
    """
    sample = np.asarray(sample, dtype=float)
    n = sample.shape[-1] // np.asarray(mask_row).shape[-1]
    x = sample * expand_mask(mask_row, n)
    z = p.w0 @ x + p.b0
    h = leaky_relu(z)
    logits = p.w1 @ h + p.b1
    dlogits = softmax(logits)
    dlogits[value] -= 1.0
    db1 = dlogits
    dw1 = np.outer(dlogits, h)
    dh = p.w1.T @ dlogits
    dz = dh * np.where(z > 0, 1.0, LEAKY_SLOPE)
    db0 = dz
    dw0 = np.outer(dz, x)
    return MlpParams(dw0, db0, dw1, db1)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with all singular values equal to `gain` (QR-derived)."""
    tall = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(tall)
    q *= np.where(np.diag(r) >= 0, 1.0, -1.0)  # fix QR sign ambiguity
    if rows < cols:
        q = q.T
    return gain * q


def uniform_init(n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(lo, hi, size=n)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam accumulators for a named collection of tensors."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m1: dict[str, np.ndarray] = field(default_factory=dict)
    m2: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to `params`.

    Raises on non-finite gradients, naming the offending tensor.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if name not in state.m1:
            state.m1[name] = np.zeros_like(params[name])
            state.m2[name] = np.zeros_like(params[name])
        m1 = state.m1[name]
        m2 = state.m2[name]
        m1 *= state.beta1
        m1 += (1.0 - state.beta1) * g
        m2 *= state.beta2
        m2 += (1.0 - state.beta2) * np.square(g)
        params[name] -= state.lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# stacked per-variable ensemble
# ---------------------------------------------------------------------------

class MlpStack:
    """M masked MLPs stored as one flat parameter buffer with strided views.

    Shapes: w0 (M, H, M*N), b0 (M, H), w1 (M, N, H), b1 (M, N) where N is the
    maximum category count.  Variables with fewer categories get their unused
    logit slots pinned to a large negative value through `cat_log_mask`, so
    softmax/NLL ignore them and their gradients vanish identically.
    """

    def __init__(self, m: int, n_categories: np.ndarray, hidden: int | None = None):
        self.m = m
        self.n_categories = np.asarray(n_categories, dtype=int)
        if self.n_categories.shape != (m,):
            raise ValueError("n_categories must have one entry per variable")
        self.n_max = int(self.n_categories.max())
        self.hidden = hidden_size(m, self.n_max) if hidden is None else hidden
        self.n_in = m * self.n_max
        shapes = {
            "w0": (m, self.hidden, self.n_in),
            "b0": (m, self.hidden),
            "w1": (m, self.n_max, self.hidden),
            "b1": (m, self.n_max),
        }
        total = sum(int(np.prod(s)) for s in shapes.values())
        self.flat = np.zeros(total, dtype=float)
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            self._views[name] = self.flat[offset:offset + size].reshape(shape)
            offset += size
        self.uniform_cats = bool((self.n_categories == self.n_max).all())
        if not self.uniform_cats:
            mask = np.zeros((m, 1, self.n_max))
            for i, k in enumerate(self.n_categories):
                mask[i, 0, k:] = NEG_INF
            self.cat_log_mask = mask
        else:
            self.cat_log_mask = None

    w0 = property(lambda self: self._views["w0"])
    b0 = property(lambda self: self._views["b0"])
    w1 = property(lambda self: self._views["w1"])
    b1 = property(lambda self: self._views["b1"])

    def init_random(self, rng: np.random.Generator, gain: float = 1.0,
                    bias_lo: float = 0.0, bias_hi: float = 0.0) -> "MlpStack":
        for i in range(self.m):
            self.w0[i] = orthogonal_init(self.hidden, self.n_in, gain, rng)
            self.w1[i] = orthogonal_init(self.n_max, self.hidden, gain, rng)
            if bias_hi > bias_lo:
                self.b0[i] = uniform_init(self.hidden, bias_lo, bias_hi, rng)
                self.b1[i] = uniform_init(self.n_max, bias_lo, bias_hi, rng)
        return self

    def copy(self) -> "MlpStack":
        dup = MlpStack(self.m, self.n_categories, hidden=self.hidden)
        dup.flat[:] = self.flat
        return dup

    def params_for(self, i: int) -> MlpParams:
        """The i-th variable's parameters as an MlpParams view (shared memory)."""
        return MlpParams(self.w0[i], self.b0[i], self.w1[i], self.b1[i])

    def _input_masks(self, configs: np.ndarray) -> np.ndarray:
        # configs (..., M, M) -> per-slot masks (..., M, M*N)
        return np.repeat(np.asarray(configs, dtype=float), self.n_max, axis=-1)

    def forward(self, xoh: np.ndarray, config: np.ndarray) -> np.ndarray:
        """Logits (M, B, N) for one-hot batch xoh (B, M*N) under one configuration."""
        xm = xoh[None, :, :] * self._input_masks(config)[:, None, :]
        z = np.matmul(xm, self.w0.transpose(0, 2, 1)) + self.b0[:, None, :]
        h = leaky_relu(z)
        logits = np.matmul(h, self.w1.transpose(0, 2, 1)) + self.b1[:, None, :]
        if self.cat_log_mask is not None:
            logits = logits + self.cat_log_mask
        return logits

    def per_variable_nll(self, xoh: np.ndarray, values: np.ndarray,
                         configs: np.ndarray,
                         per_sample: bool = False) -> np.ndarray:
        """NLL per (configuration, variable): (C, M), or (C, M, B) per sample.

        `configs` is (C, M, M); row i of configuration c masks variable i's
        inputs.  Vectorized over configurations and variables at once; the
        default reduces to the batch mean.
        """
        c = configs.shape[0]
        b = xoh.shape[0]
        masks = self._input_masks(configs)                      # (C, M, MN)
        xm = xoh[None, None, :, :] * masks[:, :, None, :]       # (C, M, B, MN)
        z = np.matmul(xm, self.w0.transpose(0, 2, 1)) + self.b0[:, None, :]
        h = leaky_relu(z)
        logits = np.matmul(h, self.w1.transpose(0, 2, 1)) + self.b1[:, None, :]
        if self.cat_log_mask is not None:
            logits = logits + self.cat_log_mask
        mx = logits.max(axis=-1)
        lse = mx + np.log(np.exp(logits - mx[..., None]).sum(axis=-1))  # (C, M, B)
        pick_idx = np.broadcast_to(values.T[None, :, :], (c, self.m, b)).reshape(-1)
        picked = logits.reshape(-1, self.n_max)[np.arange(c * self.m * b),
                                                pick_idx].reshape(c, self.m, b)
        nll = lse - picked
        return nll if per_sample else nll.mean(axis=-1)

    def loss_and_grad(self, xoh: np.ndarray, values: np.ndarray,
                      config: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        """Batch-mean NLL per variable plus gradient of their sum.

        Writes the flat gradient into `grad_out` (same layout as `self.flat`)
        and returns the per-variable mean NLL vector (M,).
        """
        b = xoh.shape[0]
        masks = self._input_masks(config)
        xm = xoh[None, :, :] * masks[:, None, :]
        z = np.matmul(xm, self.w0.transpose(0, 2, 1)) + self.b0[:, None, :]
        h = leaky_relu(z)
        logits = np.matmul(h, self.w1.transpose(0, 2, 1)) + self.b1[:, None, :]
        if self.cat_log_mask is not None:
            logits = logits + self.cat_log_mask
        mx = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - mx)
        se = e.sum(axis=-1, keepdims=True)
        p = e / se
        lse = (mx + np.log(se))[..., 0]                          # (M, B)
        pick_idx = values.T.reshape(-1)
        picked = logits.reshape(-1, self.n_max)[np.arange(self.m * b),
                                                pick_idx].reshape(self.m, b)
        per_var_nll = (lse - picked).mean(axis=-1)               # (M,)

        dlogits = p
        flat_dl = dlogits.reshape(-1, self.n_max)  # row index = var * B + sample
        flat_dl[np.arange(self.m * b), values.T.reshape(-1)] -= 1.0
        dlogits /= b
        g = _StackGrads(self, grad_out)
        g.b1[:] = dlogits.sum(axis=1)
        np.matmul(dlogits.transpose(0, 2, 1), h, out=g.w1)
        dh = np.matmul(dlogits, self.w1)
        dz = dh * np.where(z > 0, 1.0, LEAKY_SLOPE)
        g.b0[:] = dz.sum(axis=1)
        np.matmul(dz.transpose(0, 2, 1), xm, out=g.w0)
        return per_var_nll

    # checkpoint format: npz with keys w0/b0/w1/b1/n_categories/hidden
    def save(self, path) -> None:
        np.savez(path, w0=self.w0, b0=self.b0, w1=self.w1, b1=self.b1,
                 n_categories=self.n_categories, hidden=np.array(self.hidden))

    @classmethod
    def load(cls, path) -> "MlpStack":
        with np.load(path) as data:
            stack = cls(data["w0"].shape[0], data["n_categories"],
                        hidden=int(data["hidden"]))
            stack.w0[:] = data["w0"]
            stack.b0[:] = data["b0"]
            stack.w1[:] = data["w1"]
            stack.b1[:] = data["b1"]
        return stack


class _StackGrads:
    """Views into a flat gradient buffer matching an MlpStack's layout."""

    def __init__(self, stack: MlpStack, flat: np.ndarray):
        self.flat = flat
        offset = 0
        for name in ("w0", "b0", "w1", "b1"):
            view = stack._views[name]
            size = view.size
            setattr(self, name, flat[offset:offset + size].reshape(view.shape))
            offset += size


def one_hot_batch(values: np.ndarray, n_categories: np.ndarray, n_max: int) -> np.ndarray:
    """Category indices (B, M) -> flat block one-hots (B, M*n_max)."""
    b, m = values.shape
    out = np.zeros((b, m, n_max))
    out[np.arange(b)[:, None], np.arange(m)[None, :], values] = 1.0
    return out.reshape(b, m * n_max)
