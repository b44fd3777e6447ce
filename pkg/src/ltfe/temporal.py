"""LSTM encoding of a perturbed feature sequence with feature-state fusion."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DomainError, ShapeError

GATES = ("i", "f", "g", "o")


def _tensor_fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if isinstance(getattr(obj, f.name), Tensor)}


@dataclass
class LstmParams:
    """Per-gate weights over ``concat(x, h)`` and biases.

    Gates: ``i`` input, ``f`` forget, ``g`` candidate, ``o`` output.
    """
    w_i: Tensor
    w_f: Tensor
    w_g: Tensor
    w_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_g: Tensor
    b_o: Tensor

    def __post_init__(self):
        for name in GATES:
            setattr(self, f"w_{name}", dc.tensor(getattr(self, f"w_{name}")))
            setattr(self, f"b_{name}", dc.tensor(getattr(self, f"b_{name}")))
        rows, d = self.w_i.shape
        for name in GATES:
            if getattr(self, f"w_{name}").shape != (rows, d):
                raise ShapeError(f"gate {name} weight shape differs from gate i")
            if getattr(self, f"b_{name}").shape != (d,):
                raise ShapeError(f"gate {name} bias must have length {d}")
        if rows <= d:
            raise ShapeError("weight rows must be input_dim + hidden_dim")

    @property
    def hidden_dim(self) -> int:
        return self.w_i.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_i.shape[0] - self.hidden_dim

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng) -> "LstmParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        shape = (input_dim + hidden_dim, hidden_dim)
        ws = {f"w_{g}": rng.uniform(-bound, bound, shape) for g in GATES}
        bs = {f"b_{g}": np.zeros(hidden_dim) for g in GATES}
        bs["b_f"] = np.ones(hidden_dim)
        return cls(**ws, **bs)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        shape = (input_dim + hidden_dim, hidden_dim)
        return cls(**{f"w_{g}": np.zeros(shape) for g in GATES},
                   **{f"b_{g}": np.zeros(hidden_dim) for g in GATES})

    def tensors(self) -> dict:
        return _tensor_fields(self)


@dataclass
class FusionParams:
    """Projection of ``concat(h_t, pooled F_t)`` (length d + c) to length d."""
    projection: Tensor

    def __post_init__(self):
        self.projection = dc.tensor(self.projection)
        if self.projection.ndim != 2:
            raise ShapeError("projection must be a matrix")

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng) -> "FusionParams":
        bound = 1.0 / np.sqrt(hidden_dim + input_dim)
        return cls(rng.uniform(-bound, bound, (hidden_dim + input_dim, hidden_dim)))

    def tensors(self) -> dict:
        return _tensor_fields(self)


@dataclass
class TemporalEncoding:
    encodings: list          # H_1..H_T, each length d
    hidden: list             # h_1..h_T
    cells: list              # c_1..c_T

    def __len__(self):
        return len(self.encodings)

    @property
    def final_hidden(self) -> Tensor:
        return self.hidden[-1]

    @property
    def final_cell(self) -> Tensor:
        return self.cells[-1]

    def as_array(self) -> np.ndarray:
        return np.stack([h.data for h in self.encodings])


def lstm_step(x, h_prev, c_prev, p: LstmParams) -> tuple[Tensor, Tensor]:
    x, h_prev, c_prev = dc.tensor(x), dc.tensor(h_prev), dc.tensor(c_prev)
    d = p.hidden_dim
    if x.shape != (p.input_dim,) or h_prev.shape != (d,) or c_prev.shape != (d,):
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs input_dim={p.input_dim}, hidden_dim={d}")
    z = dc.concat([x, h_prev])
    i = dc.sigmoid(z @ p.w_i + p.b_i)
    f = dc.sigmoid(z @ p.w_f + p.b_f)
    g = dc.tanh(z @ p.w_g + p.b_g)
    o = dc.sigmoid(z @ p.w_o + p.b_o)
    c = f * c_prev + i * g
    h = o * dc.tanh(c)
    return h, c


def fuse(h, x, fusion: FusionParams) -> Tensor:
    """``relu(concat(h, x) @ projection)``."""
    z = dc.concat([dc.tensor(h), dc.tensor(x)])
    if fusion.projection.shape[0] != z.shape[0]:
        raise ShapeError(f"projection expects {fusion.projection.shape[0]} inputs, got {z.shape[0]}")
    return dc.relu(z @ fusion.projection)


def encode_sequence(features, lstm: LstmParams, fusion: FusionParams) -> TemporalEncoding:
    """Run the LSTM over spatially pooled maps from zero states and fuse each step."""
    features = list(features)
    if not features:
        raise DomainError("encode_sequence: empty sequence")
    if len({dc.tensor(f).shape for f in features}) != 1:
        raise ShapeError("encode_sequence: feature maps differ in shape")
    d = lstm.hidden_dim
    h = Tensor(np.zeros(d))
    c = Tensor(np.zeros(d))
    enc = TemporalEncoding([], [], [])
    for f in features:
        x = dc.mean_pool_spatial(f)
        h, c = lstm_step(x, h, c, lstm)
        enc.encodings.append(fuse(h, x, fusion))
        enc.hidden.append(h)
        enc.cells.append(c)
    return enc
