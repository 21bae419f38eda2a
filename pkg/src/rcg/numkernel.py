"""Dense numeric kernel: layers with hand-written backward passes, AdamW, and a
finite-difference gradient checker.

Arrays are plain row-major numpy arrays. Training runs in float32; gradient
verification converts a module to float64 with :meth:`Module.to`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError, UsageError
from .rng import make_rng

LN_EPS = 1e-5


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ConfigError(f"non-finite values entering {where}")
    return x


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------


def affine_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ConfigError(
            f"affine shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W + b


def affine_backward(x, W, grad_out):
    """Returns (grad_x, grad_W, grad_b) for y = xW + b."""
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_backward(cache, grad_out):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv_std, gamma = cache
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    g = grad_out * gamma
    grad_x = inv_std * (
        g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_backward(x, grad_out):
    s = sigmoid(x)
    return grad_out * s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    """Parameter container with recursive naming, seeding and dtype casting."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_grads(self, prefix=""):
        out = {}
        for k, v in self.params.items():
            out[prefix + k] = self.grads.get(k, np.zeros_like(v))
        for name, child in self.children.items():
            out.update(child.named_grads(f"{prefix}{name}."))
        return out

    def param_shapes(self, prefix=""):
        return {k: tuple(v.shape) for k, v in self.named_parameters(prefix).items()}

    def num_params(self):
        return sum(int(v.size) for v in self.named_parameters().values())

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for child in self.children.values():
            child.zero_grad()

    def init_params(self, seed, prefix=""):
        for k in self.params:
            self._init_param(k, make_rng(seed, "init", prefix + k))
        for name, child in self.children.items():
            child.init_params(seed, f"{prefix}{name}.")

    def _init_param(self, name, rng):
        pass

    def to(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.grads = {}
        for child in self.children.values():
            child.to(dtype)
        return self

    def load_parameters(self, tensors):
        mine = self.named_parameters()
        missing = sorted(set(mine) - set(tensors))
        extra = sorted(set(tensors) - set(mine))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        self._assign(tensors, "")

    def _assign(self, tensors, prefix):
        for k, v in self.params.items():
            new = np.asarray(tensors[prefix + k])
            if new.shape != v.shape:
                raise ConfigError(f"{prefix + k}: expected shape {v.shape}, got {new.shape}")
            self.params[k] = new.astype(v.dtype).copy()
        for name, child in self.children.items():
            child._assign(tensors, f"{prefix}{name}.")

    @property
    def dtype(self):
        for v in self.named_parameters().values():
            return v.dtype
        return np.dtype(np.float32)


class Linear(Module):
    def __init__(self, in_dim, out_dim, zero_init=False, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim, self.zero_init = in_dim, out_dim, zero_init
        self.params["W"] = np.zeros((in_dim, out_dim), dtype)
        self.params["b"] = np.zeros((out_dim,), dtype)
        self._x = None

    def _init_param(self, name, rng):
        p = self.params[name]
        if name == "W" and not self.zero_init:
            # Kaiming-uniform over fan-in with a=sqrt(5), i.e. bound 1/sqrt(fan_in)
            bound = 1.0 / np.sqrt(self.in_dim)
            p[...] = rng.uniform(-bound, bound, size=p.shape)
        else:
            p[...] = 0.0

    def forward(self, x):
        self._x = x
        return affine_forward(x, self.params["W"], self.params["b"])

    def backward(self, grad_out):
        if self._x is None:
            raise UsageError("Linear.backward called without a cached forward")
        gx, gW, gb = affine_backward(self._x, self.params["W"], grad_out)
        self.grads["W"], self.grads["b"] = gW, gb
        self._x = None
        return gx


class LayerNorm(Module):
    def __init__(self, dim, eps=LN_EPS, dtype=np.float32):
        super().__init__()
        if dim < 2:
            raise ConfigError("LayerNorm needs at least 2 features")
        self.eps = eps
        self.params["gamma"] = np.ones((dim,), dtype)
        self.params["beta"] = np.zeros((dim,), dtype)
        self._cache = None

    def _init_param(self, name, rng):
        self.params[name][...] = 1.0 if name == "gamma" else 0.0

    def forward(self, x):
        y, self._cache = layer_norm_forward(x, self.params["gamma"], self.params["beta"], self.eps)
        return y

    def backward(self, grad_out):
        if self._cache is None:
            raise UsageError("LayerNorm.backward called without a cached forward")
        gx, gg, gb = layer_norm_backward(self._cache, grad_out)
        self.grads["gamma"], self.grads["beta"] = gg, gb
        self._cache = None
        return gx


class SiLU(Module):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x):
        self._x = x
        return silu(x)

    def backward(self, grad_out):
        if self._x is None:
            raise UsageError("SiLU.backward called without a cached forward")
        gx = silu_backward(self._x, grad_out)
        self._x = None
        return gx


class Layer(Module):
    """LayerNorm -> SiLU -> Linear."""

    def __init__(self, in_dim, out_dim, zero_init=False, dtype=np.float32):
        super().__init__()
        self.children = {
            "norm": LayerNorm(in_dim, dtype=dtype),
            "act": SiLU(),
            "linear": Linear(in_dim, out_dim, zero_init=zero_init, dtype=dtype),
        }

    def forward(self, x):
        for child in self.children.values():
            x = child.forward(x)
        return x

    def backward(self, grad_out):
        for child in reversed(list(self.children.values())):
            grad_out = child.backward(grad_out)
        return grad_out


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.children = {str(i): m for i, m in enumerate(modules)}

    def forward(self, x):
        for child in self.children.values():
            x = child.forward(x)
        return x

    def backward(self, grad_out):
        for child in reversed(list(self.children.values())):
            grad_out = child.backward(grad_out)
        return grad_out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    k: int = 0


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """In-place AdamW update of every array in ``params`` (dict name -> array).

    Decoupled decay multiplies each parameter by (1 - lr*weight_decay) before
    the adaptive step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", step=state.k + 1)
    state.k += 1
    bc1 = 1.0 - beta1**state.k
    bc2 = 1.0 - beta2**state.k
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return params, state


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamWState()

    def step(self, grads):
        adamw_step(
            self.params, grads, self.state, self.lr, self.betas[0], self.betas[1],
            self.eps, self.weight_decay,
        )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"{name:40s} {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max {self.max_error:.3e} tol {self.tolerance:.1e} -> {'ok' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _rel_error(analytic, numeric):
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def finite_diff_check(network, x, tolerance=1e-4, h=1e-5, seed=0):
    """Compare ``network.backward`` against central differences.

    The probe loss is sum(forward(x) * R) for a fixed random R. ``network``
    needs forward/backward/zero_grad/named_parameters/named_grads; run it in
    float64. Errors are max-abs-difference over max-abs-magnitude, per tensor.
    """
    x = np.array(x, dtype=np.float64)
    y = network.forward(x.copy())
    R = make_rng(seed, "fd-probe").standard_normal(y.shape)

    def loss(inp):
        return float((network.forward(inp) * R).sum())

    network.zero_grad()
    network.forward(x.copy())
    gx = network.backward(R.copy())
    analytic = {k: np.array(v, copy=True) for k, v in network.named_grads().items()}

    errors = {}
    numeric_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric_x[idx] = (loss(xp) - loss(xm)) / (2 * h)
    errors["input"] = _rel_error(np.asarray(gx), numeric_x)

    for name, p in network.named_parameters().items():
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = loss(x)
            p[idx] = orig - h
            lm = loss(x)
            p[idx] = orig
            numeric[idx] = (lp - lm) / (2 * h)
        errors[name] = _rel_error(analytic[name], numeric)
    return GradCheckReport(errors, tolerance)


class Embedding(Module):
    """Lookup table; rows initialized N(0, 1)."""

    def __init__(self, num, dim, dtype=np.float32):
        super().__init__()
        self.params["table"] = np.zeros((num, dim), dtype)
        self._idx = None

    def _init_param(self, name, rng):
        p = self.params[name]
        p[...] = rng.standard_normal(p.shape)

    def forward(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        n = self.params["table"].shape[0]
        if np.any(idx < 0) or np.any(idx >= n):
            raise UsageError(f"embedding index outside [0, {n})")
        self._idx = idx
        return self.params["table"][idx]

    def backward(self, grad_out):
        if self._idx is None:
            raise UsageError("Embedding.backward called without a cached forward")
        g = np.zeros_like(self.params["table"])
        np.add.at(g, self._idx, grad_out)
        self.grads["table"] = g
        self._idx = None
