"""Convolution kernels generated by integrating a learned vector field.

For every temporal encoding ``H_t`` the kernel ``W`` follows
``dW/dtau = f(W, H_t)`` from ``W0`` over ``[0, tau_hat_t]`` where
``tau_hat_t = |H_t| / max_s |H_s|``. The resulting kernel adjusts the
initial feature map residually: ``conv2d(F0, W_t) + F0``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, NumericalError, ShapeError


@dataclass
class KernelState:
    weights: Tensor  # k×k×c_in×c_out

    def __post_init__(self):
        self.weights = dc.tensor(self.weights)
        shape = self.weights.shape
        if len(shape) != 4 or shape[0] != shape[1] or shape[0] % 2 == 0:
            raise ShapeError(f"kernel must be k×k×c_in×c_out with odd k, got {shape}")
        if not np.isfinite(self.weights.data).all():
            raise NumericalError("kernel has non-finite entries")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[3]

    @property
    def shape(self) -> tuple:
        return self.weights.shape

    @classmethod
    def identity(cls, k: int, channels: int, scale: float = 1.0) -> "KernelState":
        """Center tap ``scale`` linking channel i to channel i, zero elsewhere."""
        w = np.zeros((k, k, channels, channels))
        w[k // 2, k // 2] = scale * np.eye(channels)
        return cls(w)

    @classmethod
    def zeros(cls, k: int, c_in: int, c_out: int) -> "KernelState":
        return cls(np.zeros((k, k, c_in, c_out)))


@dataclass
class VectorFieldParams:
    """Two-layer tanh perceptron on ``concat(flatten(W), H)``.

    The first layer is stored as two row blocks, ``w_state`` for the kernel
    part and ``w_enc`` for the encoding part, so the encoding contribution
    is computed once per solve.
    """
    w_state: Tensor   # P×m
    w_enc: Tensor     # d×m
    b_hidden: Tensor  # m
    w_out: Tensor     # m×P
    b_out: Tensor     # P

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, dc.tensor(getattr(self, f.name)))
        p, m = self.w_state.shape
        if self.w_enc.shape[1] != m or self.b_hidden.shape != (m,):
            raise ShapeError("hidden width mismatch in vector field")
        if self.w_out.shape != (m, p) or self.b_out.shape != (p,):
            raise ShapeError("output width must equal the flattened kernel size")

    @property
    def state_dim(self) -> int:
        return self.w_state.shape[0]

    @property
    def encoding_dim(self) -> int:
        return self.w_enc.shape[0]

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.encoding_dim

    @property
    def hidden_dim(self) -> int:
        return self.w_state.shape[1]

    @classmethod
    def init(cls, state_dim: int, encoding_dim: int, hidden_dim: int, rng) -> "VectorFieldParams":
        # zero output layer: the field starts identically zero
        bound = 1.0 / np.sqrt(state_dim + encoding_dim)
        return cls(
            w_state=rng.uniform(-bound, bound, (state_dim, hidden_dim)),
            w_enc=rng.uniform(-bound, bound, (encoding_dim, hidden_dim)),
            b_hidden=np.zeros(hidden_dim),
            w_out=np.zeros((hidden_dim, state_dim)),
            b_out=np.zeros(state_dim),
        )

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def bind(self, h):
        """The autonomous field ``W -> f(W, h)`` for a fixed encoding."""
        h = dc.tensor(h)
        if h.shape != (self.encoding_dim,):
            raise ShapeError(f"encoding length {h.shape} vs {self.encoding_dim}")
        enc_part = dc.bias_add(h @ self.w_enc, self.b_hidden)

        def f(w: Tensor) -> Tensor:
            flat = dc.reshape(w, (self.state_dim,))
            hidden = dc.tanh(flat @ self.w_state + enc_part)
            return dc.reshape(dc.bias_add(hidden @ self.w_out, self.b_out), w.shape)

        return f

    def __call__(self, w, h) -> Tensor:
        return self.bind(h)(dc.tensor(w))


@dataclass(frozen=True)
class OdeConfig:
    steps: int = 4
    eps_norm: float = 1e-8

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")
        if not self.eps_norm > 0:
            raise DomainError(f"eps_norm must be > 0, got {self.eps_norm}")


def horizon(enc, t: int, cfg: OdeConfig = OdeConfig()) -> Tensor:
    """Integration end ``|H_t| / max(max_s |H_s|, eps_norm)`` for 1-based ``t``."""
    encodings = enc.encodings if hasattr(enc, "encodings") else list(enc)
    if not 1 <= t <= len(encodings):
        raise DomainError(f"step {t} outside 1..{len(encodings)}")
    if not dc.needs_grad(*encodings):
        # same arithmetic as below without building a graph
        raw = np.array([np.sqrt(np.sum(h.data * h.data)) for h in map(dc.tensor, encodings)])
        top = raw.max()
        if top < cfg.eps_norm:
            top = cfg.eps_norm
        return Tensor(raw[t - 1] / top)
    norms = [dc.l2_norm(h) for h in encodings]
    top = dc.max(dc.stack(norms))
    if top.data < cfg.eps_norm:
        top = Tensor(cfg.eps_norm)
    return norms[t - 1] / top


def rk4_solve(field, w0, h_t, tau_hat, cfg: OdeConfig = OdeConfig()):
    """Classic fourth-order Runge-Kutta from 0 to ``tau_hat`` in ``cfg.steps`` steps.

    ``field`` is either a :class:`VectorFieldParams` or any callable
    ``field(w, h) -> Tensor``. Returns a :class:`KernelState` when ``w0``
    is one, else a tensor.
    """
    as_kernel = isinstance(w0, KernelState)
    w = w0.weights if as_kernel else dc.tensor(w0)
    tau = tau_hat if isinstance(tau_hat, Tensor) else Tensor(float(tau_hat))
    if tau.size != 1 or not -1e-12 <= float(tau.data) <= 1.0 + 1e-12:
        raise DomainError(f"tau_hat must lie in [0, 1], got {tau.data}")
    f = field.bind(h_t) if hasattr(field, "bind") else (lambda x: field(x, h_t))
    dt = tau * (1.0 / cfg.steps)
    half = dt * 0.5
    sixth = dt * (1.0 / 6.0)
    for _ in range(cfg.steps):
        k1 = f(w)
        k2 = f(w + half * k1)
        k3 = f(w + half * k2)
        k4 = f(w + dt * k3)
        w = w + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(w.data).all():
            raise NumericalError("non-finite state during RK4 solve")
    return KernelState(w) if as_kernel else w


def adjust_feature(f0, w_t: KernelState, padding: str = "circular") -> Tensor:
    """Residual application ``conv2d(f0, W_t) + f0``."""
    f0 = dc.tensor(f0)
    if f0.ndim != 3 or w_t.c_in != f0.shape[2] or w_t.c_out != f0.shape[2]:
        raise ShapeError(f"kernel {w_t.shape} does not map the channels of {f0.shape}")
    return dc.conv2d(f0, w_t.weights, padding) + f0


def evolve_kernels(enc, field, w0: KernelState, cfg: OdeConfig = OdeConfig()) -> list:
    """One solve per step, each restarting from ``w0``."""
    return [rk4_solve(field, w0, h, horizon(enc, t, cfg), cfg)
            for t, h in enumerate(enc.encodings, start=1)]
