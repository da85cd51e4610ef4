"""Per-modality input encoders producing tokens of model width."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidConfigError, ShapeError

LAYERNORM_EPS = 1e-5


def sinusoidal(pos, width: int) -> np.ndarray:
    """Interleaved sin/cos positional vector(s).

    Entry ``2i`` is ``sin(pos / 10000**(2i/width))`` and entry ``2i+1`` the
    matching cosine.  ``pos`` may be a scalar or an array of positions.
    """
    if width % 2:
        raise InvalidConfigError(f"sinusoidal width must be even, got {width}")
    pos = np.asarray(pos, dtype=np.float64)
    rates = 10000.0 ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    angles = pos[..., None] * rates
    out = np.empty(pos.shape + (width,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class SequenceEncoder(nn.Module):
    """linear -> layernorm -> + sinusoidal position, applied per time step."""

    def __init__(self, input_dim: int, width: int, max_tokens: int):
        super().__init__()
        self.input_dim = input_dim
        self.width = width
        self.max_tokens = max_tokens
        self.linear = nn.Linear(input_dim, width)
        self.norm = nn.LayerNorm(width, eps=LAYERNORM_EPS)
        self.register_buffer(
            "positions", torch.from_numpy(sinusoidal(np.arange(max_tokens), width)).float(),
            persistent=False,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: [..., T, input_dim] with T <= max_tokens -> [..., T, width]."""
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"sequence vectors have {x.shape[-1]} entries, expected {self.input_dim}")
        T = x.shape[-2]
        if T > self.max_tokens:
            raise ShapeError(f"{T} tokens exceed the budget of {self.max_tokens}; truncate first")
        return self.norm(self.linear(x)) + self.positions[:T].to(x.dtype)


class TabularEncoder(nn.Module):
    """Per-value MLP(1, width, width) with ReLU plus a learned column embedding.

    Values are z-scored with ``mean``/``std`` buffers (identity until
    :meth:`fit_standardization` is called).
    """

    def __init__(self, columns: int, width: int):
        super().__init__()
        self.columns = columns
        self.width = width
        self.value_in = nn.Linear(1, width)
        self.value_out = nn.Linear(width, width)
        self.column_embedding = nn.Parameter(torch.empty(columns, width))
        nn.init.trunc_normal_(self.column_embedding, std=0.02)
        self.register_buffer("mean", torch.zeros(columns))
        self.register_buffer("std", torch.ones(columns))

    @torch.no_grad()
    def fit_standardization(self, table: np.ndarray) -> None:
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] != self.columns:
            raise ShapeError(f"standardization table must be [rows, {self.columns}]")
        mean = table.mean(axis=0) if len(table) else np.zeros(self.columns)
        std = table.std(axis=0) if len(table) > 1 else np.ones(self.columns)
        std = np.where(std > 1e-12, std, 1.0)
        self.mean.copy_(torch.from_numpy(mean))
        self.std.copy_(torch.from_numpy(std))

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """``values``: [..., columns] -> [..., columns, width]."""
        if values.shape[-1] != self.columns:
            raise ShapeError(f"row has {values.shape[-1]} columns, expected {self.columns}")
        z = (values - self.mean.to(values.dtype)) / self.std.to(values.dtype)
        h = torch.relu(self.value_in(z.unsqueeze(-1)))
        return self.value_out(h) + self.column_embedding


def build_encoder(spec, width: int) -> nn.Module:
    if spec.kind == "sequence":
        return SequenceEncoder(spec.dim, width, spec.tokens)
    return TabularEncoder(spec.dim, width)
