"""Masked transformer encoder with fusion tokens and per-channel pooling.

One :class:`FusionModel` covers the three embedding strategies:

* ``MCA``: one fusion-token block per modality subset of size >= 2, all
  isolated from each other by the block attention mask, one forward pass.
* ``Zorro``: a single fusion block attending to every modality.
* ``EAO``: no fusion tokens; one forward pass per unimodal and bimodal
  subset, mean pooled, fused at inference time by averaging.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import masking
from .data import Dataset, ModalitySchema
from .encoders import LAYERNORM_EPS, build_encoder
from .errors import InvalidConfigError, NumericFailure, ShapeError

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "MCA"
    width: int = 512
    depth: int = 4
    heads: int = 8
    ff_multiplier: int = 4
    tokens_per_channel: int = 8
    embed_dim: int | None = None

    def __post_init__(self):
        masking.check_mode(self.mode)
        if self.width % self.heads:
            raise InvalidConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise InvalidConfigError("width must be even for sinusoidal positions")
        if self.depth < 0 or self.tokens_per_channel < 1 or self.ff_multiplier < 1:
            raise InvalidConfigError("depth >= 0, tokens_per_channel >= 1, ff_multiplier >= 1 required")

    @property
    def out_dim(self) -> int:
        return self.embed_dim or self.width

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Dense tensors for a list of samples.

    ``inputs[m]`` is ``[B, T_m, dim]`` for sequences (zero padded) and
    ``[B, columns]`` for tables (zeros where absent).  ``lengths[b, m]`` is
    the number of real tokens, 0 when the modality is absent.
    """

    inputs: list
    lengths: torch.Tensor
    presence: torch.Tensor
    ids: list
    truncated: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, idx) -> "Batch":
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            [x[idx_t] for x in self.inputs],
            self.lengths[idx_t],
            self.presence[idx_t],
            [self.ids[i] for i in idx_t.tolist()],
        )

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch([x.to(dtype) for x in self.inputs], self.lengths, self.presence, self.ids, self.truncated)


def collate(samples, schema: ModalitySchema, dtype: torch.dtype = torch.float32) -> Batch:
    """Stack samples into a :class:`Batch`, truncating sequences to their budget.

    Truncation keeps the earliest time steps.
    """
    B, M = len(samples), len(schema)
    lengths = np.zeros((B, M), dtype=np.int64)
    inputs = []
    truncated = 0
    for m, spec in enumerate(schema):
        if spec.kind == "tabular":
            arr = np.zeros((B, spec.dim))
            for b, s in enumerate(samples):
                p = s.payloads[m]
                if p is not None:
                    arr[b] = p
                    lengths[b, m] = spec.dim
        else:
            arr = np.zeros((B, spec.tokens, spec.dim))
            for b, s in enumerate(samples):
                p = s.payloads[m]
                if p is None:
                    continue
                if p.shape[-1] != spec.dim:
                    raise ShapeError(f"sample {s.id}/{spec.name}: vector size {p.shape[-1]} != {spec.dim}")
                if len(p) > spec.tokens:
                    truncated += 1
                    p = p[: spec.tokens]
                arr[b, : len(p)] = p
                lengths[b, m] = len(p)
        inputs.append(torch.from_numpy(arr).to(dtype))
    if truncated:
        logger.info("truncated %d sequences to their token budget", truncated)
    return Batch(
        inputs,
        torch.from_numpy(lengths),
        torch.from_numpy(lengths > 0),
        [s.id for s in samples],
        truncated,
    )


def padded_attention_mask(base: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Batched padding on top of a base mask (see :func:`masking.apply_padding`).

    ``base``: [T, T] bool; ``valid``: [B, T] bool -> [B, T, T] bool.
    """
    T = base.shape[-1]
    allowed = base.unsqueeze(0) & valid.unsqueeze(1)
    eye = torch.eye(T, dtype=torch.bool, device=base.device)
    return torch.where(valid.unsqueeze(2), allowed, eye.unsqueeze(0))


# --------------------------------------------------------------------------
# transformer


class MaskedSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, W = x.shape
        H = self.heads
        q, k, v = self.qkv(x).view(B, T, 3, H, W // H).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(W // H)
        scores = scores.masked_fill(~allowed.unsqueeze(1), MASK_VALUE)
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, W))


class GeGLU(nn.Module):
    def __init__(self, width: int, multiplier: int):
        super().__init__()
        self.proj = nn.Linear(width, 2 * multiplier * width)
        self.out = nn.Linear(multiplier * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, gate = self.proj(x).chunk(2, dim=-1)
        return self.out(a * F.gelu(gate))


class EncoderLayer(nn.Module):
    """Pre-layernorm residual block: masked attention, then GeGLU feed-forward."""

    def __init__(self, width: int, heads: int, ff_multiplier: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, eps=LAYERNORM_EPS)
        self.attn = MaskedSelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=LAYERNORM_EPS)
        self.ff = GeGLU(width, ff_multiplier)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.ff(self.norm2(x))


class TransformerEncoder(nn.Module):
    def __init__(self, width: int, depth: int, heads: int, ff_multiplier: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(width, heads, ff_multiplier) for _ in range(depth))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        """``x``: [B, T, W]; ``allowed``: [B, T, T] or [T, T] bool."""
        if allowed.dim() == 2:
            allowed = allowed.unsqueeze(0).expand(x.shape[0], -1, -1)
        if allowed.shape[-1] != x.shape[1]:
            raise ShapeError(f"mask is {tuple(allowed.shape)} for {x.shape[1]} tokens")
        for i, layer in enumerate(self.layers):
            x = layer(x, allowed)
            if not torch.isfinite(x).all():
                raise NumericFailure(f"non-finite activations after encoder layer {i}", layer=i)
        return x


def cross_attention_pool(
    tokens: torch.Tensor, queries: torch.Tensor, scope: torch.Tensor
) -> torch.Tensor:
    """Single-head attention pooling with learned queries and no feed-forward.

    ``tokens``: [B, T, W]; ``queries``: [C, W]; ``scope``: [B, C, T] bool
    marking the tokens each channel may attend.  Keys and values are the
    tokens themselves.  Channels with an empty scope return zeros.
    """
    W = tokens.shape[-1]
    scores = torch.einsum("cw,btw->bct", queries, tokens) / math.sqrt(W)
    scores = scores.masked_fill(~scope, MASK_VALUE)
    pooled = torch.softmax(scores, dim=-1) @ tokens
    return pooled * scope.any(-1, keepdim=True).to(pooled.dtype)


# --------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingSet:
    """Unit-norm embeddings per (sample, channel) with availability flags.

    Unavailable slots hold zeros and must not be read.
    """

    vectors: np.ndarray  # [N, C, D]
    available: np.ndarray  # [N, C] bool
    channels: list
    mode: str
    ids: list = field(default_factory=list)

    @property
    def n_modalities(self) -> int:
        return sum(1 for c in self.channels if c.is_unimodal)

    def channel_index(self, channel: masking.ChannelSet) -> int:
        return self.channels.index(channel)

    def unimodal(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        i = self.channel_index(masking.ChannelSet((m,)))
        return self.vectors[:, i], self.available[:, i]

    def fusion(self) -> tuple[np.ndarray, np.ndarray]:
        """The all-modalities fusion embedding; EAO averages its subset embeddings."""
        if self.mode == "EAO":
            return eao_inference_fusion(self.vectors, self.available)
        full = masking.ChannelSet(tuple(range(self.n_modalities)))
        i = self.channel_index(full)
        return self.vectors[:, i], self.available[:, i]


def eao_inference_fusion(vectors, available, eps: float = 1e-6):
    """Renormalized mean of the available embeddings along axis -2.

    Returns ``(fused, ok)``; ``ok`` is False when nothing is available or the
    mean is (numerically) the zero vector, and ``fused`` is then zeros.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    available = np.asarray(available, dtype=bool)
    w = available[..., None].astype(np.float64)
    count = w.sum(axis=-2)
    mean = (vectors * w).sum(axis=-2) / np.maximum(count, 1.0)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    ok = (count[..., 0] > 0) & (norm[..., 0] > eps)
    fused = np.where(ok[..., None], mean / np.where(norm > eps, norm, 1.0), 0.0)
    return fused, ok


class FusionModel(nn.Module):
    def __init__(self, schema: ModalitySchema, config: ModelConfig):
        super().__init__()
        self.schema = schema
        self.config = config
        self.mode = config.mode
        M = len(schema)
        W = config.width
        self.layout = masking.build_token_layout(schema.token_budgets, config.tokens_per_channel, self.mode)
        self.channels = masking.embedding_channels(M, self.mode)
        self.input_encoders = nn.ModuleList(build_encoder(spec, W) for spec in schema)
        self.encoder = TransformerEncoder(W, config.depth, config.heads, config.ff_multiplier)
        self.projection = nn.Linear(W, config.out_dim)
        nn.init.trunc_normal_(self.projection.weight, std=0.02)
        nn.init.zeros_(self.projection.bias)

        if self.mode == "EAO":
            self.fusion_tokens = None
            self.pool_queries = None
            self.register_buffer("base_mask", torch.ones(0, 0, dtype=torch.bool), persistent=False)
            self.register_buffer("scope", torch.zeros(0, 0, dtype=torch.bool), persistent=False)
        else:
            self.fusion_tokens = nn.Parameter(torch.empty(self.layout.n_fusion_tokens, W))
            self.pool_queries = nn.Parameter(torch.empty(len(self.channels), W))
            nn.init.trunc_normal_(self.fusion_tokens, std=0.02)
            nn.init.trunc_normal_(self.pool_queries, std=0.02)
            base = torch.from_numpy(masking.build_attention_mask(self.layout))
            self.register_buffer("base_mask", base, persistent=False)
            self.register_buffer("scope", self._channel_scope(), persistent=False)

    def _channel_scope(self) -> torch.Tensor:
        scope = torch.zeros(len(self.channels), self.layout.total_tokens, dtype=torch.bool)
        blocks = {b.owner: b for b in self.layout.fusion_blocks}
        for c, ch in enumerate(self.channels):
            b = self.layout.modality_blocks[ch.members[0]] if ch.is_unimodal else blocks[ch]
            scope[c, b.slice] = True
        return scope

    # -- inputs -------------------------------------------------------------

    def encode_modalities(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Modality tokens [B, T_mod, W] (zeros at pads) and validity [B, T_mod]."""
        toks, valid = [], []
        for m, (enc, spec) in enumerate(zip(self.input_encoders, self.schema)):
            x = batch.inputs[m]
            t = enc(x)
            pos = torch.arange(spec.tokens, device=t.device)
            v = pos.unsqueeze(0) < batch.lengths[:, m : m + 1]
            toks.append(torch.where(v.unsqueeze(-1), t, torch.zeros((), dtype=t.dtype)))
            valid.append(v)
        return torch.cat(toks, dim=1), torch.cat(valid, dim=1)

    def availability(self, presence: torch.Tensor) -> torch.Tensor:
        """[B, C] channel availability from [B, M] presence."""
        cols = [presence[:, list(ch.members)].any(dim=1) for ch in self.channels]
        return torch.stack(cols, dim=1)

    # -- forward paths ------------------------------------------------------

    def run_channels(
        self, x: torch.Tensor, allowed: torch.Tensor, scope: torch.Tensor
    ) -> torch.Tensor:
        """Encoder, pooling, projection, normalization: [B, T, W] -> [B, C, D]."""
        h = self.encoder(x, allowed)
        pooled = cross_attention_pool(h, self.pool_queries.to(h.dtype), scope)
        return F.normalize(self.projection(pooled), dim=-1)

    def embed_single_pass(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        tokens, valid = self.encode_modalities(batch)
        B = tokens.shape[0]
        fusion = self.fusion_tokens.to(tokens.dtype).unsqueeze(0).expand(B, -1, -1)
        x = torch.cat([tokens, fusion], dim=1)
        valid = torch.cat([valid, torch.ones(B, fusion.shape[1], dtype=torch.bool, device=valid.device)], 1)
        allowed = padded_attention_mask(self.base_mask, valid)
        scope = self.scope.unsqueeze(0) & valid.unsqueeze(1)
        emb = self.run_channels(x, allowed, scope)
        avail = self.availability(batch.presence) & scope.any(-1)
        return emb * avail.unsqueeze(-1).to(emb.dtype), avail

    def embed_eao(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        tokens, valid = self.encode_modalities(batch)
        blocks = self.layout.modality_blocks
        outs, avails = [], []
        for ch in self.channels:
            idx = torch.cat([torch.arange(blocks[m].offset, blocks[m].stop) for m in ch.members])
            x, v = tokens[:, idx], valid[:, idx]
            full = torch.ones(len(idx), len(idx), dtype=torch.bool, device=x.device)
            h = self.encoder(x, padded_attention_mask(full, v))
            w = v.unsqueeze(-1).to(h.dtype)
            count = w.sum(dim=1)
            mean = (h * w).sum(dim=1) / count.clamp_min(1.0)
            avail = v.any(dim=1)
            emb = F.normalize(self.projection(mean), dim=-1)
            outs.append(emb * avail.unsqueeze(-1).to(emb.dtype))
            avails.append(avail)
        return torch.stack(outs, dim=1), torch.stack(avails, dim=1)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel embeddings [B, C, D] and availability [B, C]."""
        if self.mode == "EAO":
            return self.embed_eao(batch)
        return self.embed_single_pass(batch)

    @property
    def forward_passes(self) -> int:
        return len(self.channels) if self.mode == "EAO" else 1

    # -- misc ---------------------------------------------------------------

    def fit_standardization(self, dataset: Dataset) -> None:
        """Fit tabular z-scores on the samples of ``dataset`` (use the train split)."""
        for m, (enc, spec) in enumerate(zip(self.input_encoders, self.schema)):
            if spec.kind != "tabular":
                continue
            rows = [s.payloads[m] for s in dataset.samples if s.payloads[m] is not None]
            if rows:
                enc.fit_standardization(np.stack(rows))

    @torch.no_grad()
    def embed_dataset(self, samples, batch_size: int = 256) -> EmbeddingSet:
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        vecs, avs, ids = [], [], []
        samples = list(samples)
        for start in range(0, len(samples), batch_size):
            batch = collate(samples[start : start + batch_size], self.schema, dtype)
            e, a = self(batch)
            vecs.append(e.cpu().numpy())
            avs.append(a.cpu().numpy())
            ids.extend(batch.ids)
        self.train(was_training)
        D = self.config.out_dim
        C = len(self.channels)
        vectors = np.concatenate(vecs) if vecs else np.zeros((0, C, D), dtype=np.float32)
        available = np.concatenate(avs) if avs else np.zeros((0, C), dtype=bool)
        return EmbeddingSet(vectors, available, list(self.channels), self.mode, ids)


def parameter_count(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
