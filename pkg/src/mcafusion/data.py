"""Datasets with optional modalities, sparsification, synthetic data and file IO."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataLoadError, InvalidConfigError, InvalidInputError, InvalidSchemaError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
KINDS = ("sequence", "tabular")


@dataclass(frozen=True)
class ModalitySpec:
    """One modality.

    For ``sequence`` modalities ``dim`` is the raw vector size and ``tokens``
    the token budget.  For ``tabular`` modalities ``dim`` is the column count
    and each column becomes one token, so ``tokens == dim``.
    """

    name: str
    kind: str
    dim: int
    tokens: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSchemaError(f"modality {self.name!r}: unknown kind {self.kind!r}")
        if self.dim < 1 or self.tokens < 1:
            raise InvalidSchemaError(f"modality {self.name!r}: dim and tokens must be >= 1")
        if self.kind == "tabular" and self.tokens != self.dim:
            raise InvalidSchemaError(f"tabular modality {self.name!r} needs tokens == dim")


@dataclass(frozen=True)
class ModalitySchema:
    modalities: tuple[ModalitySpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if len(self.modalities) < 2:
            raise InvalidSchemaError("a multimodal schema needs at least 2 modalities")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise InvalidSchemaError(f"duplicate modality names in {names}")

    def __len__(self) -> int:
        return len(self.modalities)

    def __iter__(self):
        return iter(self.modalities)

    def __getitem__(self, i) -> ModalitySpec:
        return self.modalities[i]

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def token_budgets(self) -> list[int]:
        return [m.tokens for m in self.modalities]

    def to_dict(self) -> list[dict]:
        return [dict(name=m.name, kind=m.kind, dim=m.dim, tokens=m.tokens) for m in self.modalities]

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "ModalitySchema":
        return cls(tuple(ModalitySpec(**d) for d in items))


@dataclass(frozen=True)
class Sample:
    id: str
    payloads: tuple  # per modality: ndarray or None
    split: str | None = None
    regression: float | None = None
    label: int | None = None

    @property
    def presence(self) -> tuple[bool, ...]:
        return tuple(p is not None for p in self.payloads)


@dataclass(frozen=True)
class Dataset:
    schema: ModalitySchema
    samples: tuple[Sample, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        M = len(self.schema)
        for s in self.samples:
            if len(s.payloads) != M:
                raise InvalidSchemaError(f"sample {s.id}: {len(s.payloads)} payloads for {M} modalities")
            for spec, p in zip(self.schema, s.payloads):
                if p is None:
                    continue
                if spec.kind == "tabular" and p.shape != (spec.dim,):
                    raise InvalidSchemaError(f"sample {s.id}/{spec.name}: shape {p.shape}, want ({spec.dim},)")
                if spec.kind == "sequence" and (p.ndim != 2 or p.shape[1] != spec.dim or len(p) == 0):
                    raise InvalidSchemaError(f"sample {s.id}/{spec.name}: shape {p.shape}, want (T>0, {spec.dim})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def presence_matrix(self) -> np.ndarray:
        return np.array([s.presence for s in self.samples], dtype=bool).reshape(len(self), len(self.schema))

    def subset(self, split: str) -> "Dataset":
        return replace(self, samples=tuple(s for s in self.samples if s.split == split))

    def with_samples(self, samples, **provenance) -> "Dataset":
        return Dataset(self.schema, tuple(samples), {**self.provenance, **provenance})


def measured_sparsity(dataset: Dataset) -> float:
    """Fraction of dropped (sample, modality) slots."""
    if len(dataset) == 0:
        raise InvalidInputError("measured_sparsity of an empty dataset")
    present = dataset.presence_matrix()
    return float(1.0 - present.mean(axis=1).mean())


def drop_modalities(
    dataset: Dataset, sparsity: float, seed: int, remove_empty: bool = True
) -> Dataset:
    """Drop each (sample, modality) slot independently with probability ``sparsity``.

    Samples left with no modality are removed unless ``remove_empty`` is off.
    The pre-removal measured sparsity and removal count are recorded in the
    returned dataset's provenance.
    """
    if not 0.0 <= sparsity < 1.0:
        raise InvalidConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    present = dataset.presence_matrix()
    if not present.all():
        raise InvalidInputError("drop_modalities expects a fully multimodal dataset")
    rng = np.random.default_rng(seed)
    drop = rng.random(present.shape) < sparsity
    samples = []
    removed = 0
    for s, d in zip(dataset.samples, drop):
        if d.all() and remove_empty:
            removed += 1
            continue
        payloads = tuple(None if dm else p for p, dm in zip(s.payloads, d))
        samples.append(replace(s, payloads=payloads))
    pre = float(drop.mean()) if drop.size else 0.0
    return dataset.with_samples(
        samples,
        sparsity=float(sparsity),
        drop_seed=int(seed),
        pre_removal_sparsity=pre,
        removed_samples=removed,
    )


def select_top_variance(table: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` highest-variance columns, ties to the lower index."""
    table = np.asarray(table, dtype=np.float64)
    n_cols = table.shape[1]
    if not 0 <= k <= n_cols:
        raise InvalidConfigError(f"cannot select {k} of {n_cols} columns")
    var = table.var(axis=0, ddof=1) if table.shape[0] > 1 else np.zeros(n_cols)
    order = np.lexsort((np.arange(n_cols), -var))
    return [int(i) for i in order[:k]]


def split(
    dataset: Dataset,
    test_fraction: float = 0.1,
    seed: int = 0,
    test_size: int | None = None,
) -> Dataset:
    """Tag samples train/test by a seeded permutation of their sorted ids.

    The test side is the first ``floor(test_fraction * n)`` ids of the
    permutation (or exactly ``test_size`` when given).
    """
    n = len(dataset)
    if test_size is None:
        if not 0.0 < test_fraction < 1.0:
            raise InvalidConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
        k = int(math.floor(test_fraction * n))
    else:
        k = int(test_size)
    if k <= 0 or k >= n:
        raise InvalidConfigError(f"degenerate split: {k} test of {n} samples")
    ids = sorted(dataset.ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_ids = {ids[i] for i in perm[:k]}
    samples = [replace(s, split="test" if s.id in test_ids else "train") for s in dataset.samples]
    return dataset.with_samples(samples, split_seed=int(seed), test_size=k)


@dataclass(frozen=True)
class SyntheticConfig:
    """Latent-variable generator: every modality is a noisy linear view of one latent."""

    n_modalities: int = 4
    samples: int = 4608
    latent_dim: int = 8
    noise: float = 0.3
    kinds: tuple[str, ...] | None = None
    dims: tuple[int, ...] | None = None
    seq_len: int = 8
    min_seq_len: int | None = None
    n_classes: int = 8
    shared_map: bool = False

    def resolved(self) -> tuple[tuple[str, ...], tuple[int, ...]]:
        M = self.n_modalities
        kinds = tuple(self.kinds) if self.kinds else tuple(
            "sequence" if m < M // 2 else "tabular" for m in range(M)
        )
        dims = tuple(self.dims) if self.dims else tuple(16 if k == "sequence" else 12 for k in kinds)
        if len(kinds) != M or len(dims) != M:
            raise InvalidConfigError("kinds and dims must have one entry per modality")
        return kinds, dims

    def schema(self) -> ModalitySchema:
        kinds, dims = self.resolved()
        return ModalitySchema(tuple(
            ModalitySpec(f"m{m}", k, d, self.seq_len if k == "sequence" else d)
            for m, (k, d) in enumerate(zip(kinds, dims))
        ))


def synthetic_multimodal(config: SyntheticConfig, seed: int) -> Dataset:
    if config.n_modalities < 2:
        raise InvalidSchemaError("synthetic data needs at least 2 modalities")
    kinds, dims = config.resolved()
    schema = config.schema()
    rng = np.random.default_rng(seed)
    d_lat = config.latent_dim
    maps = []
    shared: dict = {}
    for k, d in zip(kinds, dims):
        if config.shared_map and (k, d) in shared:
            maps.append(shared[(k, d)])
            continue
        A = rng.standard_normal((d, d_lat)) / math.sqrt(d_lat)
        shared[(k, d)] = A
        maps.append(A)
    w = rng.standard_normal(d_lat)
    readout = rng.standard_normal((config.n_classes, d_lat))

    N = config.samples
    z = rng.standard_normal((N, d_lat))
    reg = z @ w
    lo, hi = reg.min(), reg.max()
    reg = (reg - lo) / (hi - lo) if hi > lo else np.zeros_like(reg)
    labels = np.argmax(z @ readout.T, axis=1)
    min_len = config.min_seq_len or config.seq_len

    samples = []
    for i in range(N):
        payloads = []
        for k, A in zip(kinds, maps):
            clean = A @ z[i]
            if k == "tabular":
                payloads.append(clean + config.noise * rng.standard_normal(clean.shape))
            else:
                T = config.seq_len if min_len >= config.seq_len else int(rng.integers(min_len, config.seq_len + 1))
                payloads.append(clean[None, :] + config.noise * rng.standard_normal((T, clean.size)))
        samples.append(Sample(f"s{i:06d}", tuple(payloads), None, float(reg[i]), int(labels[i])))
    return Dataset(schema, tuple(samples), {"source": "synthetic", "seed": int(seed)})


def minmax_scale(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.nanmin(values), np.nanmax(values)
    return (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)


def _read_csv(path: Path, id_column: str) -> pd.DataFrame:
    if not path.exists():
        raise DataLoadError(f"missing data file: {path}")
    df = pd.read_csv(path, dtype={id_column: str}, float_precision="round_trip")
    if id_column not in df.columns:
        raise DataLoadError(f"{path.name}: no id column {id_column!r}")
    return df


def load_manifest(path: str | Path) -> Dataset:
    """Load a dataset described by a JSON manifest.

    Modalities are aligned by sample id.  With ``"align": "union"`` (the
    default) a sample missing from some modality file is kept with that
    modality marked absent; with ``"intersection"`` only ids present in every
    modality file are kept.
    """
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataLoadError(f"{path.name}: invalid JSON: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataLoadError(f"{path.name}: unsupported manifest version {manifest.get('version')!r}")
    root = path.parent
    id_col = manifest.get("id_column", "id")
    align = manifest.get("align", "union")
    if align not in ("union", "intersection"):
        raise DataLoadError(f"unknown align mode {align!r}")
    entries = manifest.get("modalities")
    if not isinstance(entries, list) or len(entries) < 2:
        raise DataLoadError("manifest must declare at least 2 modalities")

    specs, tables = [], []
    for entry in entries:
        try:
            name, kind, file = entry["name"], entry["kind"], entry["file"]
        except KeyError as exc:
            raise DataLoadError(f"modality entry missing field {exc}") from exc
        df = _read_csv(root / file, id_col)
        if kind == "tabular":
            if df[id_col].duplicated().any():
                dup = df[id_col][df[id_col].duplicated()].iloc[0]
                raise DataLoadError(f"{file}: duplicate id {dup!r}")
            cols = entry.get("columns") or [c for c in df.columns if c != id_col]
            missing = [c for c in cols if c not in df.columns]
            if missing:
                raise DataLoadError(f"{file}: missing columns {missing}")
            values = df[cols].to_numpy(dtype=np.float64)
            if not np.isfinite(values).all():
                raise DataLoadError(f"{file}: non-finite or empty cells are not supported")
            if "top_variance" in entry:
                keep = select_top_variance(values, int(entry["top_variance"]))
                values = values[:, keep]
            if "dim" in entry and int(entry["dim"]) != values.shape[1]:
                raise DataLoadError(f"{file}: {values.shape[1]} columns, manifest says {entry['dim']}")
            specs.append(ModalitySpec(name, kind, values.shape[1], values.shape[1]))
            tables.append(dict(zip(df[id_col], values)))
        elif kind == "sequence":
            t_col = entry.get("time_column", "t")
            if t_col not in df.columns:
                raise DataLoadError(f"{file}: no time column {t_col!r}")
            vcols = [c for c in df.columns if c not in (id_col, t_col)]
            dim = int(entry.get("dim", len(vcols)))
            if len(vcols) != dim:
                raise DataLoadError(f"{file}: {len(vcols)} value columns, manifest says {dim}")
            if df.duplicated([id_col, t_col]).any():
                raise DataLoadError(f"{file}: duplicate (id, timestep) rows")
            df = df.sort_values([id_col, t_col], kind="stable")
            vals = df[vcols].to_numpy(dtype=np.float64)
            if not np.isfinite(vals).all():
                raise DataLoadError(f"{file}: non-finite or empty cells are not supported")
            table = {}
            for sid, idx in df.groupby(id_col, sort=False).indices.items():
                table[sid] = vals[idx]
            tokens = int(entry.get("tokens", max((len(v) for v in table.values()), default=1)))
            specs.append(ModalitySpec(name, kind, dim, tokens))
            tables.append(table)
        else:
            raise DataLoadError(f"modality {name!r}: unknown kind {kind!r}")
    try:
        schema = ModalitySchema(tuple(specs))
    except InvalidSchemaError as exc:
        raise DataLoadError(str(exc)) from exc

    meta = {}
    sample_entry = manifest.get("samples")
    if sample_entry:
        sdf = _read_csv(root / sample_entry["file"], id_col)
        if sdf[id_col].duplicated().any():
            raise DataLoadError(f"{sample_entry['file']}: duplicate ids")
        meta = {r[id_col]: r for r in sdf.to_dict("records")}

    id_sets = [set(t) for t in tables]
    if align == "intersection":
        universe = set.intersection(*id_sets)
    else:
        universe = set.union(*id_sets) | set(meta)
    ids = sorted(universe)

    reg_col = sample_entry.get("regression") if sample_entry else None
    lab_col = sample_entry.get("label") if sample_entry else None
    split_col = sample_entry.get("split") if sample_entry else None
    samples = []
    for sid in ids:
        payloads = tuple(t.get(sid) for t in tables)
        if all(p is None for p in payloads):
            continue
        row = meta.get(sid, {})
        reg = row.get(reg_col) if reg_col else None
        lab = row.get(lab_col) if lab_col else None
        sp = row.get(split_col) if split_col else None
        samples.append(Sample(
            sid,
            payloads,
            sp if isinstance(sp, str) else None,
            None if reg is None or pd.isna(reg) else float(reg),
            None if lab is None or pd.isna(lab) else int(lab),
        ))
    if not samples:
        raise DataLoadError("no usable samples")
    if reg_col and manifest.get("normalize_regression", True):
        regs = np.array([np.nan if s.regression is None else s.regression for s in samples])
        if np.isfinite(regs).any():
            scaled = minmax_scale(regs)
            samples = [s if s.regression is None else replace(s, regression=float(v))
                       for s, v in zip(samples, scaled)]
    logger.info("loaded %d samples (%s) from %s", len(samples), align, path)
    return Dataset(schema, tuple(samples), {"source": "manifest", "path": str(path)})


def save_manifest(dataset: Dataset, directory: str | Path) -> Path:
    """Write ``dataset`` as CSV files plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for m, spec in enumerate(dataset.schema):
        file = f"{spec.name}.csv"
        if spec.kind == "tabular":
            rows = [(s.id, *s.payloads[m]) for s in dataset.samples if s.payloads[m] is not None]
            cols = ["id"] + [f"c{j}" for j in range(spec.dim)]
            pd.DataFrame(rows, columns=cols).to_csv(directory / file, index=False, float_format="%.17g")
            entries.append(dict(name=spec.name, kind="tabular", file=file, dim=spec.dim))
        else:
            rows = [(s.id, t, *v) for s in dataset.samples if s.payloads[m] is not None
                    for t, v in enumerate(s.payloads[m])]
            cols = ["id", "t"] + [f"v{j}" for j in range(spec.dim)]
            pd.DataFrame(rows, columns=cols).to_csv(directory / file, index=False, float_format="%.17g")
            entries.append(dict(name=spec.name, kind="sequence", file=file, dim=spec.dim, tokens=spec.tokens))
    meta = pd.DataFrame(
        [(s.id, s.split if s.split else "", s.regression, s.label) for s in dataset.samples],
        columns=["id", "split", "regression", "label"],
    )
    meta["label"] = meta["label"].astype("Int64")
    meta.to_csv(directory / "samples.csv", index=False, float_format="%.17g")
    manifest = {
        "version": MANIFEST_VERSION,
        "id_column": "id",
        "align": "union",
        "modalities": entries,
        "samples": {"file": "samples.csv", "regression": "regression", "label": "label", "split": "split"},
        "normalize_regression": False,
        "provenance": dataset.provenance,
    }
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, default=str))
    return out
