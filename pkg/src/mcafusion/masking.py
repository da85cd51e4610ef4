"""Channel enumeration, token layouts and block attention masks.

A *channel* is a nonempty set of modality indices that owns one pooled
embedding.  Singletons are unimodal channels; larger sets are fusion
channels.  Masks are plain ``numpy`` boolean matrices indexed
``[query, key]`` where ``True`` means attention is allowed.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidConfigError, InvalidSchemaError

MODES = ("MCA", "Zorro", "EAO")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise InvalidConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True, order=False)
class ChannelSet:
    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(m) for m in self.members)
        if not members:
            raise InvalidSchemaError("channel must have at least one member")
        if any(b <= a for a, b in zip(members, members[1:])):
            members = tuple(sorted(set(members)))
        if members[0] < 0:
            raise InvalidSchemaError(f"negative modality index in {members}")
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def is_unimodal(self) -> bool:
        return len(self.members) == 1

    def sort_key(self) -> tuple:
        return (len(self.members), self.members)

    def __contains__(self, m: int) -> bool:
        return m in self.members

    def name(self, modality_names: Sequence[str] | None = None) -> str:
        if modality_names is None:
            return "+".join(str(m) for m in self.members)
        return "+".join(modality_names[m] for m in self.members)

    def __repr__(self) -> str:
        return "ChannelSet(" + ",".join(str(m) for m in self.members) + ")"


def canonical(channels: Iterable[ChannelSet]) -> list[ChannelSet]:
    """Sort by size, then lexicographically by members."""
    return sorted(set(channels), key=ChannelSet.sort_key)


def enumerate_channels(n_modalities: int, mode: str) -> list[ChannelSet]:
    """Fusion channels for MCA/Zorro, or the forward-pass subsets for EAO."""
    check_mode(mode)
    if n_modalities < 2:
        raise InvalidSchemaError(f"need at least 2 modalities, got {n_modalities}")
    idx = range(n_modalities)
    if mode == "Zorro":
        return [ChannelSet(tuple(idx))]
    sizes = range(2, n_modalities + 1) if mode == "MCA" else (1, 2)
    return [ChannelSet(c) for k in sizes for c in itertools.combinations(idx, k)]


def unimodal_channels(n_modalities: int) -> list[ChannelSet]:
    return [ChannelSet((m,)) for m in range(n_modalities)]


def embedding_channels(n_modalities: int, mode: str) -> list[ChannelSet]:
    """Every channel that receives an embedding, unimodal first.

    For EAO this is the list of forward-pass subsets, which already starts
    with the singletons.
    """
    if check_mode(mode) == "EAO":
        return enumerate_channels(n_modalities, mode)
    return unimodal_channels(n_modalities) + enumerate_channels(n_modalities, mode)


@dataclass(frozen=True)
class Block:
    kind: str  # "modality" | "fusion"
    owner: ChannelSet
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.stop)


@dataclass(frozen=True)
class TokenLayout:
    modality_blocks: tuple[Block, ...]
    fusion_blocks: tuple[Block, ...]
    total_tokens: int
    mode: str

    @property
    def n_modalities(self) -> int:
        return len(self.modality_blocks)

    @property
    def blocks(self) -> tuple[Block, ...]:
        return self.modality_blocks + self.fusion_blocks

    @property
    def n_modality_tokens(self) -> int:
        return sum(b.length for b in self.modality_blocks)

    @property
    def n_fusion_tokens(self) -> int:
        return sum(b.length for b in self.fusion_blocks)

    def locate(self, token: int) -> tuple[str, ChannelSet, int]:
        """Map a flat token index to (block kind, owner, position in block)."""
        for b in self.blocks:
            if b.offset <= token < b.stop:
                return b.kind, b.owner, token - b.offset
        raise IndexError(f"token {token} outside layout of {self.total_tokens}")

    def block_ids(self) -> np.ndarray:
        """Per token, the index of its block in ``self.blocks``."""
        out = np.empty(self.total_tokens, dtype=np.int64)
        for i, b in enumerate(self.blocks):
            out[b.slice] = i
        return out


def build_token_layout(
    token_budgets: Sequence[int], tokens_per_channel: int, mode: str
) -> TokenLayout:
    """Lay out modality blocks, then fusion blocks in canonical order.

    ``token_budgets`` gives the token count of each modality block.  Zorro
    gets a single fusion block as long as all MCA fusion blocks together.
    """
    check_mode(mode)
    n = len(token_budgets)
    if n < 2:
        raise InvalidSchemaError(f"need at least 2 modalities, got {n}")
    if tokens_per_channel < 1:
        raise InvalidSchemaError("tokens_per_channel must be >= 1")
    offset = 0
    mblocks = []
    for m, length in enumerate(token_budgets):
        if int(length) < 1:
            raise InvalidSchemaError(f"modality {m} has an empty token block")
        mblocks.append(Block("modality", ChannelSet((m,)), offset, int(length)))
        offset += int(length)
    fblocks = []
    if mode != "EAO":
        n_mca = 2**n - n - 1
        lengths = {"MCA": tokens_per_channel, "Zorro": n_mca * tokens_per_channel}
        for ch in enumerate_channels(n, mode):
            fblocks.append(Block("fusion", ch, offset, lengths[mode]))
            offset += lengths[mode]
    return TokenLayout(tuple(mblocks), tuple(fblocks), offset, mode)


def build_attention_mask(layout: TokenLayout) -> np.ndarray:
    """Block attention mask for the layout's mode.

    Allowed pairs: same modality block; fusion query to a modality in its
    channel; same fusion block.  For EAO layouts (no fusion blocks) every
    pair is allowed; only padding masks EAO attention.
    """
    T = layout.total_tokens
    if layout.mode == "EAO":
        return np.ones((T, T), dtype=bool)
    allowed = np.zeros((T, T), dtype=bool)
    for b in layout.modality_blocks:
        allowed[b.slice, b.slice] = True
    for f in layout.fusion_blocks:
        allowed[f.slice, f.slice] = True
        for m in f.owner.members:
            mb = layout.modality_blocks[m]
            allowed[f.slice, mb.slice] = True
    return allowed


def token_validity(
    layout: TokenLayout, presence: Sequence[bool], lengths: Sequence[int] | None = None
) -> np.ndarray:
    """Per token, ``True`` unless it is padding.

    A token is padding when its modality is absent or, if ``lengths`` is
    given, when it lies past the modality's actual token count.
    """
    valid = np.ones(layout.total_tokens, dtype=bool)
    for m, b in enumerate(layout.modality_blocks):
        if not presence[m]:
            valid[b.slice] = False
        elif lengths is not None:
            valid[b.offset + int(lengths[m]) : b.stop] = False
    return valid


def apply_padding(
    mask: np.ndarray,
    layout: TokenLayout,
    presence: Sequence[bool],
    lengths: Sequence[int] | None = None,
) -> np.ndarray:
    """Mask pad keys for every query; pad queries only keep self-attention."""
    if len(presence) != layout.n_modalities:
        raise InvalidSchemaError("presence length does not match modality count")
    valid = token_validity(layout, presence, lengths)
    out = mask & valid[None, :]
    pad = ~valid
    out[pad, :] = False
    idx = np.flatnonzero(pad)
    out[idx, idx] = True
    return out


def channel_availability(
    presence: Sequence[bool], channels: Sequence[ChannelSet]
) -> np.ndarray:
    present = np.asarray(presence, dtype=bool)
    return np.array([bool(present[list(c.members)].any()) for c in channels], dtype=bool)


def block_structure(mask: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Collapse a mask to block level.

    Returns an int matrix over ``layout.blocks``: 1 if the block pair is all
    allowed, 0 if all forbidden, -1 if mixed.
    """
    blocks = layout.blocks
    out = np.empty((len(blocks), len(blocks)), dtype=np.int8)
    for i, q in enumerate(blocks):
        for j, k in enumerate(blocks):
            sub = mask[q.slice, k.slice]
            out[i, j] = 1 if sub.all() else (0 if not sub.any() else -1)
    return out


def mask_to_text(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("ragged or empty mask bitmap")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)


@dataclass
class MaskCache:
    """Padded masks keyed by presence pattern, for a fixed layout.

    Reads are lock-free; insertions take a lock so a single writer wins.
    """

    layout: TokenLayout
    _base: np.ndarray = field(init=False, repr=False)
    _masks: dict = field(init=False, default_factory=dict, repr=False)
    _lock: threading.Lock = field(init=False, default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self._base = build_attention_mask(self.layout)
        self._base.setflags(write=False)

    @property
    def base(self) -> np.ndarray:
        return self._base

    def get(self, presence: Sequence[bool]) -> np.ndarray:
        key = tuple(bool(p) for p in presence)
        mask = self._masks.get(key)
        if mask is None:
            mask = apply_padding(self._base, self.layout, key)
            mask.setflags(write=False)
            with self._lock:
                mask = self._masks.setdefault(key, mask)
        return mask

    def __len__(self) -> int:
        return len(self._masks)
