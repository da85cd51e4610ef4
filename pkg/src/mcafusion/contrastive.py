"""Symmetric InfoNCE over channel pairs with per-sample availability masking."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import masking
from .errors import ContractViolation, InvalidInputError

DEFAULT_TEMPERATURE = 0.07
MASK_VALUE = -1e9


def info_nce_pair(
    a: torch.Tensor, b: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE, tol: float = 1e-3
) -> torch.Tensor | None:
    """Symmetric cross-entropy over ``a @ b.T / temperature`` with diagonal targets.

    Returns ``None`` for fewer than 2 rows (nothing to contrast against).
    """
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    if a.shape != b.shape:
        raise ContractViolation(f"unaligned inputs {tuple(a.shape)} vs {tuple(b.shape)}")
    n = a.shape[0]
    if n < 2:
        return None
    for name, x in (("a", a), ("b", b)):
        norms = x.detach().norm(dim=-1)
        if (norms - 1).abs().max() > tol:
            raise ContractViolation(f"{name} rows are not unit norm")
    logits = a @ b.T / temperature
    target = torch.arange(n, device=a.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def pair_set(channels: list[masking.ChannelSet], mode: str) -> list[tuple[int, int]]:
    """Index pairs into ``channels`` that are contrasted for ``mode``.

    Zorro drops fusion-fusion pairs, which only matters if it ever had more
    than one fusion channel; MCA and EAO use every unordered pair.
    """
    pairs = list(itertools.combinations(range(len(channels)), 2))
    if masking.check_mode(mode) == "Zorro":
        pairs = [(i, j) for i, j in pairs if channels[i].is_unimodal or channels[j].is_unimodal]
    return pairs


@dataclass
class LossReport:
    total: torch.Tensor
    pairs: dict = field(default_factory=dict)  # name -> (loss | None, count, skipped)

    @property
    def n_used(self) -> int:
        return sum(1 for _, _, skipped in self.pairs.values() if not skipped)

    def to_json(self) -> str:
        return json.dumps({
            "total": float(self.total.detach()),
            "pairs": {
                k: {"loss": v, "count": c, "skipped": s} for k, (v, c, s) in self.pairs.items()
            },
        }, sort_keys=False)


def pair_name(a: masking.ChannelSet, b: masking.ChannelSet, names=None) -> str:
    return f"{a.name(names)}|{b.name(names)}"


def total_contrastive_loss(
    embeddings: torch.Tensor,
    available: torch.Tensor,
    channels: list[masking.ChannelSet],
    mode: str,
    temperature: float = DEFAULT_TEMPERATURE,
    modality_names=None,
    report: bool = False,
) -> LossReport:
    """Mean over channel pairs of InfoNCE restricted to samples where both are available.

    ``embeddings``: [B, C, D] unit vectors (anything at unavailable slots);
    ``available``: [B, C] bool.  Pairs with fewer than 2 shared samples are
    skipped and left out of the mean.  All pairs are computed in one batched
    pass; masked entries contribute exactly zero to values and gradients.
    Per-pair values are only materialized when ``report`` is set.
    """
    B = embeddings.shape[0]
    if B == 0:
        raise InvalidInputError("empty batch")
    pairs = pair_set(channels, mode)
    ia = torch.tensor([p[0] for p in pairs], dtype=torch.long)
    ib = torch.tensor([p[1] for p in pairs], dtype=torch.long)
    A = embeddings[:, ia].transpose(0, 1)  # [P, B, D]
    Bm = embeddings[:, ib].transpose(0, 1)
    valid = (available[:, ia] & available[:, ib]).T  # [P, B]
    counts = valid.sum(dim=1)
    used = counts >= 2

    logits = A @ Bm.transpose(1, 2) / temperature  # [P, B, B]
    both = valid.unsqueeze(2) & valid.unsqueeze(1)
    logits = logits.masked_fill(~both, MASK_VALUE)
    diag = torch.diagonal(logits, dim1=1, dim2=2)
    row = torch.logsumexp(logits, dim=2) - diag
    col = torch.logsumexp(logits, dim=1) - diag
    zero = torch.zeros((), dtype=logits.dtype)
    per_sample = torch.where(valid, 0.5 * (row + col), zero)
    per_pair = per_sample.sum(dim=1) / counts.clamp_min(1).to(logits.dtype)
    per_pair = torch.where(used, per_pair, zero)
    n_used = int(used.sum())
    total = per_pair.sum() / n_used if n_used else per_pair.sum() * 0.0

    out = LossReport(total)
    if report:
        values = per_pair.detach().tolist()
        for (i, j), v, c, u in zip(pairs, values, counts.tolist(), used.tolist()):
            out.pairs[pair_name(channels[i], channels[j], modality_names)] = (v if u else None, int(c), not u)
    return out
