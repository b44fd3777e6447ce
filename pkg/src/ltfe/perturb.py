"""Progressive blur-and-noise evolution of a feature map.

A feature map ``F0`` (h×w×c) is pushed through ``T`` steps of

    F_t = blur(F_{t-1}, sigma_t) + alpha_t * blur(eps_t, sigma_t)

with ``alpha_t = alpha0 * exp(-lam * t)``, ``sigma_t = sigma0 * gamma**t``
and ``eps_t`` fresh unit Gaussian noise. Blurs are normalized, truncated
Gaussians applied depthwise.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, NumericalError

SIGMA_MIN = 1e-3


class InjectionStrategy(str, Enum):
    PROGRESSIVE = "progressive"
    EQUAL_STEP = "equal_step"
    ONE_SHOT = "one_shot"


@dataclass(frozen=True)
class EvolutionSchedule:
    alpha0: float = 0.2
    lam: float = 0.2
    sigma0: float = 1.0
    gamma: float = 1.2
    T: int = 8

    def __post_init__(self):
        if not self.alpha0 >= 0:
            raise DomainError(f"alpha0 must be >= 0, got {self.alpha0}")
        if not self.lam >= 0:
            raise DomainError(f"lam must be >= 0, got {self.lam}")
        if not self.sigma0 > 0:
            raise DomainError(f"sigma0 must be > 0, got {self.sigma0}")
        if not self.gamma >= 1:
            raise DomainError(f"gamma must be >= 1, got {self.gamma}")
        if isinstance(self.T, bool) or int(self.T) != self.T or self.T < 1:
            raise DomainError(f"T must be a positive integer, got {self.T}")

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_at(s: EvolutionSchedule, t: int) -> tuple[float, float]:
    """Noise weight and blur width at step ``t`` (1-based)."""
    if not 1 <= t <= s.T:
        raise DomainError(f"step {t} outside 1..{s.T}")
    return s.alpha0 * math.exp(-s.lam * t), s.sigma0 * s.gamma ** t


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    radius: int
    taps1d: np.ndarray

    @property
    def taps(self) -> np.ndarray:
        """(2r+1)×(2r+1) weights; row/column index r is the center."""
        return np.outer(self.taps1d, self.taps1d)

    @property
    def size(self) -> int:
        return 2 * self.radius + 1


def gaussian_kernel(sigma: float, r_max: int | None = None) -> GaussianKernel:
    """Normalized Gaussian with radius ``min(ceil(3 sigma), r_max)``.

    The 2-D weights ``exp(-(i²+j²)/(2σ²))`` factor into an outer product of
    1-D weights, so normalizing the 1-D factor normalizes the 2-D kernel.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    sigma = max(float(sigma), SIGMA_MIN)
    r = math.ceil(3.0 * sigma)
    if r_max is not None:
        r = min(r, r_max)
    r = max(r, 1)
    i = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(i * i) / (2.0 * sigma * sigma))
    g /= g.sum()
    g.flags.writeable = False
    return GaussianKernel(sigma=sigma, radius=r, taps1d=g)


def kernel_cap(shape) -> int:
    """Largest blur radius used on a map of this shape."""
    return max(1, min(shape[0], shape[1]) // 2)


def blur(x, sigma: float, padding: str = "circular") -> Tensor:
    x = dc.tensor(x)
    g = gaussian_kernel(sigma, kernel_cap(x.shape))
    return dc.separable_filter(x, g.taps1d, padding)


def step_plan(s: EvolutionSchedule, strategy) -> list[tuple[float, float]]:
    """(alpha, sigma) applied at each perturbing step under ``strategy``."""
    strategy = InjectionStrategy(strategy)
    progressive = [schedule_at(s, t) for t in range(1, s.T + 1)]
    if strategy is InjectionStrategy.PROGRESSIVE:
        return progressive
    alphas = [a for a, _ in progressive]
    var_total = math.fsum(sig * sig for _, sig in progressive)
    if strategy is InjectionStrategy.EQUAL_STEP:
        # T repeated blurs of width sigma add up to the same variance
        return [(math.fsum(alphas) / s.T, math.sqrt(var_total / s.T))] * s.T
    # one shot: the strongest noise of the schedule with all the blur at once
    return [(max(alphas), math.sqrt(var_total))]


def _literal_term(shape, g: GaussianKernel) -> np.ndarray:
    h, w, c = shape
    canvas = np.zeros((h, w), dtype=np.float64)
    r = g.radius
    off = np.arange(-r, r + 1)
    rows = (h // 2 + off) % h
    cols = (w // 2 + off) % w
    np.add.at(canvas, (rows[:, None], cols[None, :]), g.taps)
    return np.repeat(canvas[:, :, None], c, axis=2)


def evolve_sequence(f0, s: EvolutionSchedule, strategy="progressive", rng=None,
                    padding: str = "circular", literal_eq1: bool = False) -> list[Tensor]:
    """The perturbed sequence ``[F_1, ..., F_T]``; differentiable w.r.t. ``f0``.

    ``literal_eq1`` adds the kernel itself (centred on the map) instead of a
    blurred noise field. The one-shot strategy perturbs once and then holds.
    """
    f0 = dc.tensor(f0)
    if f0.ndim != 3:
        raise DomainError(f"feature map must be h×w×c, got {f0.shape}")
    if not np.isfinite(f0.data).all():
        raise NumericalError("non-finite input feature map")
    if rng is None:
        rng = np.random.default_rng(0)
    cap = kernel_cap(f0.shape)
    seq, prev = [], f0
    for alpha, sigma in step_plan(s, strategy):
        g = gaussian_kernel(sigma, cap)
        cur = dc.separable_filter(prev, g.taps1d, padding)
        if literal_eq1:
            cur = cur + alpha * Tensor(_literal_term(f0.shape, g))
        else:
            eps = rng.standard_normal(f0.shape)
            cur = cur + alpha * dc.separable_filter(Tensor(eps), g.taps1d, padding)
        if not np.isfinite(cur.data).all():
            raise NumericalError(f"non-finite feature map at step {len(seq) + 1}")
        seq.append(cur)
        prev = cur
    while len(seq) < s.T:
        seq.append(seq[-1])
    return seq


def trajectory_stats(f0, seq) -> list[dict]:
    """Per-step mean, variance and L2 distance from ``f0``."""
    base = np.asarray(f0.data if isinstance(f0, Tensor) else f0)
    rows = []
    for t, f in enumerate(seq, start=1):
        a = np.asarray(f.data if isinstance(f, Tensor) else f)
        rows.append({
            "t": t,
            "mean": float(a.mean()),
            "variance": float(a.var()),
            "l2_from_f0": float(np.linalg.norm(a - base)),
        })
    return rows
