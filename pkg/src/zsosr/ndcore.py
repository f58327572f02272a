"""Dense MLP compute with hand-written reverse-mode gradients.

Every model in the pipeline (generator, critic, encoder, linear classifiers)
is a plain stack of affine layers with an elementwise activation after each
one, so backprop is a fixed walk back down the stack. Losses produce a
gradient with respect to the network output; composite objectives are built
by calling :func:`forward_trace` / :func:`backprop` directly and summing.

Parameters and activations are float32. Loss values are accumulated in
float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "leaky_relu")
LEAKY_SLOPE = 0.2

LOSS_KINDS = (
    "softmax_ce",
    "mse",
    "free_energy",
    "critic_difference",
    "normalized_ce",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit sub-seed from a master seed and any hashable labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass
class Mlp:
    weights: list  # (fan_in, fan_out) arrays
    biases: list  # (fan_out,) arrays
    activations: list

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def astype(self, dtype) -> "Mlp":
        return Mlp(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
        )

    def __call__(self, x):
        return forward(self, x)


def build_mlp(layer_dims, activations="identity", seed: int = 0, dtype=np.float32) -> Mlp:
    """Build an MLP with N(0, 1/fan_in) weights and zero biases.

    ``layer_dims`` lists every width including input and output, so
    ``[2048, 1024, 312]`` is a two-layer net. ``activations`` is either one
    name applied to every layer or one name per layer.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ShapeError(f"need at least input and output dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ShapeError(f"layer dims must be positive, got {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        activations = [activations] * n_layers
    activations = list(activations)
    if len(activations) != n_layers:
        raise ShapeError(f"{n_layers} layers but {len(activations)} activations")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(weights, biases, activations)


def _activate(h, kind):
    if kind == "identity":
        return h
    if kind == "relu":
        return np.maximum(h, 0)
    return np.where(h > 0, h, h * h.dtype.type(LEAKY_SLOPE))


def _activate_grad(h, g, kind):
    if kind == "identity":
        return g
    if kind == "relu":
        return np.where(h > 0, g, 0).astype(g.dtype)
    return np.where(h > 0, g, g * g.dtype.type(LEAKY_SLOPE))


def _as_batch(model: Mlp, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected batch of shape (n, {model.in_dim}), got {x.shape}")
    return x.astype(model.dtype, copy=False)


@dataclass
class Trace:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation of each layer
    output: np.ndarray | None = None


def forward_trace(model: Mlp, batch) -> Trace:
    x = _as_batch(model, batch)
    tr = Trace()
    for i, (w, b, act) in enumerate(zip(model.weights, model.biases, model.activations)):
        tr.inputs.append(x)
        h = x @ w + b
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite pre-activation in layer {i}")
        tr.pre.append(h)
        x = _activate(h, act)
    tr.output = x
    return tr


def forward(model: Mlp, batch) -> np.ndarray:
    return forward_trace(model, batch).output


def backprop(model: Mlp, trace: Trace, grad_out, need_input: bool = False):
    """Push ``dL/doutput`` back through the stack.

    Returns ``(param_grads, input_grad)``; ``param_grads`` follows the order
    of :meth:`Mlp.parameters` and ``input_grad`` is None unless requested.
    """
    g = np.asarray(grad_out, dtype=model.dtype)
    if g.shape != trace.output.shape:
        raise ShapeError(f"grad_out shape {g.shape} != output shape {trace.output.shape}")
    grads = [None] * (2 * len(model.weights))
    for i in reversed(range(len(model.weights))):
        g = _activate_grad(trace.pre[i], g, model.activations[i])
        grads[2 * i] = trace.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ model.weights[i].T
    return grads, (g if need_input else None)


@dataclass
class LossSpec:
    kind: str
    temperature: float = 1.0
    tau: float = 1.0  # logit-norm temperature, normalized_ce only

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


def logsumexp(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


LOGITNORM_EPS = 1e-7


def output_loss(out, targets, spec: LossSpec, weights=None):
    """Loss and its gradient with respect to the network output.

    ``targets`` depends on the kind: integer labels (softmax_ce,
    normalized_ce), a matrix (mse), ignored (free_energy) or per-row signed
    coefficients (critic_difference, loss = sum_i c_i * out_i). ``weights``
    optionally reweights rows of the mean-reduced kinds.
    """
    z = np.asarray(out, dtype=np.float64)
    n = z.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    kind = spec.kind

    if kind in ("softmax_ce", "normalized_ce"):
        y = np.asarray(targets, dtype=np.int64)
        if y.shape != (n,):
            raise ShapeError(f"expected {n} integer labels, got shape {y.shape}")
        if kind == "softmax_ce":
            zt = z / spec.temperature
        else:
            norm = np.linalg.norm(z, axis=1, keepdims=True)
            nz = norm + LOGITNORM_EPS
            zt = z / (nz * spec.tau)
        lse = logsumexp(zt, axis=1)
        loss = float(np.sum(w * (lse - zt[np.arange(n), y])))
        g = softmax(zt, axis=1)
        g[np.arange(n), y] -= 1.0
        g *= w[:, None]
        if kind == "softmax_ce":
            g /= spec.temperature
        else:
            dot = np.sum(g * z, axis=1, keepdims=True)
            safe = np.where(norm > 0, norm, 1.0)
            g = g / (nz * spec.tau) - z * dot / (nz**2 * spec.tau * safe)
        return loss, g

    if kind == "mse":
        t = np.asarray(targets, dtype=np.float64).reshape(z.shape)
        r = z - t
        loss = float(np.sum(w[:, None] * r * r))
        return loss, 2.0 * w[:, None] * r

    if kind == "free_energy":
        T = spec.temperature
        loss = float(np.sum(w * T * logsumexp(z / T, axis=1)))
        return loss, w[:, None] * softmax(z / T, axis=1)

    # critic_difference
    c = np.asarray(targets, dtype=np.float64).reshape(n)
    if z.shape[1] != 1:
        raise ShapeError("critic_difference expects a scalar output")
    loss = float(np.sum(c * z[:, 0]))
    return loss, c[:, None].copy()


def loss_and_grads(model: Mlp, batch, targets, spec: LossSpec, wrt_input=False, weights=None):
    """Return ``(loss, param_grads, input_grads)``; last is None unless asked."""
    tr = forward_trace(model, batch)
    loss, g = output_loss(tr.output, targets, spec, weights)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite {spec.kind} loss")
    grads, gx = backprop(model, tr, g, need_input=wrt_input)
    return loss, grads, gx


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in (0, 1)")


def adam_update(params: list, grads: list, state: AdamState) -> None:
    """In-place Adam step with bias correction over a list of arrays."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {np.shape(g)} / state {m.shape} mismatch")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)


def adam_step(model: Mlp, grads: list, state: AdamState) -> tuple[Mlp, AdamState]:
    adam_update(model.parameters(), grads, state)
    return model, state


def finite_diff_check(
    model: Mlp,
    batch,
    targets,
    spec: LossSpec,
    eps: float = 1e-4,
    wrt_input: bool = True,
    n_samples: int | None = 64,
    seed: int = 0,
    weights=None,
) -> float:
    """Max of |analytic - numeric| / max(1, |numeric|) over sampled coordinates.

    Runs in float64 on a copy so the central difference is not swamped by
    float32 rounding.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    m64 = model.astype(np.float64)
    x = np.array(batch, dtype=np.float64, ndmin=2)
    _, grads, gx = loss_and_grads(m64, x, targets, spec, wrt_input=wrt_input, weights=weights)

    def f():
        return loss_and_grads(m64, x, targets, spec, weights=weights)[0]

    rng = np.random.default_rng(seed)
    arrays = list(zip(m64.parameters(), grads))
    if wrt_input:
        arrays.append((x, gx))
    worst = 0.0
    for arr, g in arrays:
        flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            idx = rng.choice(flat.size, n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
