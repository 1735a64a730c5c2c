"""Bidirectional LSTMs swept over image columns and rows, fused per position.

Image tensors are laid out (height, width, channels), optionally with leading
batch axes. The vertical BiLSTM runs down every column with shared weights,
the horizontal BiLSTM runs along every row, and a point-wise affine map fuses
the four hidden streams back to the input channel width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, concat, linear, sigmoid, stack, tanh

GATES = ("i", "f", "g", "o")


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class LstmCellParams:
    """Per-gate input weights ``W`` (D, C_in), recurrent weights ``U`` (D, D), biases ``b`` (D,)."""

    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    def __post_init__(self):
        shapes = {(self.W[k].shape, self.U[k].shape, self.b[k].shape) for k in GATES}
        if len(shapes) != 1:
            raise ShapeError(f"LSTM gate parameter shapes differ: {sorted(shapes)}")
        (ws, us, bs), = shapes
        if len(ws) != 2 or us != (ws[0], ws[0]) or bs != (ws[0],) or min(ws) < 1:
            raise ShapeError(f"inconsistent LSTM shapes W={ws} U={us} b={bs}")

    @property
    def hidden(self) -> int:
        return self.W["i"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.W["i"].shape[1]

    @classmethod
    def init(cls, c_in: int, d: int, rng: np.random.Generator, dtype=np.float32) -> "LstmCellParams":
        bound = 1.0 / np.sqrt(d)
        return cls(
            W={k: _uniform(rng, (d, c_in), bound, dtype) for k in GATES},
            U={k: _uniform(rng, (d, d), bound, dtype) for k in GATES},
            b={k: _zeros((d,), dtype) for k in GATES},
        )

    @classmethod
    def zeros(cls, c_in: int, d: int, dtype=np.float32) -> "LstmCellParams":
        return cls(
            W={k: _zeros((d, c_in), dtype) for k in GATES},
            U={k: _zeros((d, d), dtype) for k in GATES},
            b={k: _zeros((d,), dtype) for k in GATES},
        )

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k in GATES:
            yield f"{prefix}W{k}", self.W[k]
        for k in GATES:
            yield f"{prefix}U{k}", self.U[k]
        for k in GATES:
            yield f"{prefix}b{k}", self.b[k]

    def fused(self) -> tuple[Tensor, Tensor, Tensor]:
        # sigmoid gates first so one slice covers them
        order = ("i", "f", "o", "g")
        return (
            concat([self.W[k] for k in order], axis=0),
            concat([self.U[k] for k in order], axis=0),
            concat([self.b[k] for k in order], axis=0),
        )


@dataclass
class BiLstmParams:
    fwd: LstmCellParams
    bwd: LstmCellParams

    def __post_init__(self):
        if (self.fwd.hidden, self.fwd.in_channels) != (self.bwd.hidden, self.bwd.in_channels):
            raise ShapeError("forward and backward cells must share D and C_in")

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    @classmethod
    def init(cls, c_in, d, rng, dtype=np.float32) -> "BiLstmParams":
        return cls(LstmCellParams.init(c_in, d, rng, dtype), LstmCellParams.init(c_in, d, rng, dtype))

    @classmethod
    def zeros(cls, c_in, d, dtype=np.float32) -> "BiLstmParams":
        return cls(LstmCellParams.zeros(c_in, d, dtype), LstmCellParams.zeros(c_in, d, dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.fwd.named_parameters(prefix + "fwd.")
        yield from self.bwd.named_parameters(prefix + "bwd.")


@dataclass
class BiLstm2dParams:
    ver: BiLstmParams
    hor: BiLstmParams
    fusion_W: Tensor  # (C, 4D)
    fusion_b: Tensor  # (C,)

    def __post_init__(self):
        d, c = self.ver.hidden, self.ver.fwd.in_channels
        if self.hor.hidden != d or self.hor.fwd.in_channels != c:
            raise ShapeError("vertical and horizontal BiLSTMs must share D and C")
        if self.fusion_W.shape != (c, 4 * d) or self.fusion_b.shape != (c,):
            raise ShapeError(
                f"fusion shapes {self.fusion_W.shape}/{self.fusion_b.shape}, expected ({c}, {4 * d})/({c},)")

    @property
    def channels(self) -> int:
        return self.fusion_W.shape[0]

    @property
    def hidden(self) -> int:
        return self.ver.hidden

    @classmethod
    def init(cls, c: int, d: int, rng: np.random.Generator, dtype=np.float32) -> "BiLstm2dParams":
        ver = BiLstmParams.init(c, d, rng, dtype)
        hor = BiLstmParams.init(c, d, rng, dtype)
        return cls(ver, hor, _uniform(rng, (c, 4 * d), 1.0 / np.sqrt(d), dtype), _zeros((c,), dtype))

    @classmethod
    def zeros(cls, c: int, d: int, dtype=np.float32) -> "BiLstm2dParams":
        return cls(BiLstmParams.zeros(c, d, dtype), BiLstmParams.zeros(c, d, dtype),
                   _zeros((c, 4 * d), dtype), _zeros((c,), dtype))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.ver.named_parameters(prefix + "ver.")
        yield from self.hor.named_parameters(prefix + "hor.")
        yield prefix + "fusion.W", self.fusion_W
        yield prefix + "fusion.b", self.fusion_b


def _step(xproj: Tensor, h: Tensor, c: Tensor, U: Tensor, d: int) -> tuple[Tensor, Tensor]:
    z = xproj + h @ U.transpose()
    s = sigmoid(z[..., : 3 * d])
    g = tanh(z[..., 3 * d:])
    i, f, o = s[..., :d], s[..., d: 2 * d], s[..., 2 * d:]
    c = f * c + i * g
    return o * tanh(c), c


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM update; returns ``(h, c)``."""
    d = p.hidden
    if x.shape[-1] != p.in_channels or h_prev.shape[-1] != d or c_prev.shape[-1] != d:
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} vs C_in={p.in_channels}, D={d}")
    W, U, b = p.fused()
    return _step(linear(x, W, b), h_prev, c_prev, U, d)


def _run(xs: Tensor, p: LstmCellParams) -> Tensor:
    # xs: (N, T, C) -> (N, T, D), zero initial state
    n, t_len, _ = xs.shape
    d = p.hidden
    W, U, b = p.fused()
    xproj = linear(xs, W, b)
    h = Tensor(np.zeros((n, d), dtype=xs.dtype))
    c = h
    hs = []
    for t in range(t_len):
        h, c = _step(xproj[:, t], h, c, U, d)
        hs.append(h)
    return stack(hs, axis=1)


def bilstm_forward(seq: Tensor, p: BiLstmParams) -> Tensor:
    """Run a BiLSTM over ``seq`` of shape (T, C) or (N, T, C); returns (..., T, 2D)."""
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq.reshape(1, *seq.shape)
    if seq.ndim != 3:
        raise ShapeError(f"bilstm_forward expects (T, C) or (N, T, C), got {seq.shape}")
    if seq.shape[1] < 1:
        raise ValueError("bilstm_forward: empty sequence")
    if seq.shape[2] != p.fwd.in_channels:
        raise ShapeError(f"bilstm_forward: {seq.shape[2]} channels, cell expects {p.fwd.in_channels}")
    fwd = _run(seq, p.fwd)
    bwd = _run(seq.flip(1), p.bwd).flip(1)
    out = concat([fwd, bwd], axis=-1)
    return out.reshape(out.shape[1:]) if squeeze else out


def bilstm2d_forward(image: Tensor, p: BiLstm2dParams, return_branches: bool = False):
    """Apply BiLSTM2D to an (…, H, W, C) tensor; output has the input's shape.

    With ``return_branches`` the vertical and horizontal hidden features
    (each (…, H, W, 2D)) are returned as well.
    """
    if image.ndim < 3:
        raise ShapeError(f"bilstm2d_forward expects (..., H, W, C), got {image.shape}")
    *lead, hh, ww, c = image.shape
    if c != p.channels:
        raise ShapeError(f"bilstm2d_forward: input has {c} channels, layer expects {p.channels}")
    x = image.reshape(-1, hh, ww, c)
    b = x.shape[0]
    d2 = 2 * p.hidden

    cols = x.transpose(0, 2, 1, 3).reshape(b * ww, hh, c)
    ver = bilstm_forward(cols, p.ver).reshape(b, ww, hh, d2).transpose(0, 2, 1, 3)
    rows = x.reshape(b * hh, ww, c)
    hor = bilstm_forward(rows, p.hor).reshape(b, hh, ww, d2)

    out = linear(concat([ver, hor], axis=-1), p.fusion_W, p.fusion_b)
    out = out.reshape(*lead, hh, ww, c)
    if return_branches:
        return out, ver.reshape(*lead, hh, ww, d2), hor.reshape(*lead, hh, ww, d2)
    return out


def lstm_param_count(c_in: int, d: int) -> int:
    return 4 * (d * c_in + d * d + d)
