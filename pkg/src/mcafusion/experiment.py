"""Training loop, checkpoint selection, embedding export, evaluation and sweeps."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import formats, metrics, probe
from .config import ExperimentConfig
from .contrastive import total_contrastive_loss
from .errors import InvalidConfigError, NumericFailure
from .model import EmbeddingSet, FusionModel, collate

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    mode: str
    sparsity: float
    epoch: int
    split: str
    metric: str
    value: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def write_records(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list[MetricRecord]:
    with open(path) as fh:
        return [MetricRecord(**json.loads(line)) for line in fh if line.strip()]


class ConfigMismatch(InvalidConfigError):
    pass


# --------------------------------------------------------------------------
# data


def prepare_data(config: ExperimentConfig) -> data_mod.Dataset:
    """Load or generate, split, then sparsify both splits with one procedure."""
    dc = config.data
    if dc.synthetic is not None:
        ds = data_mod.synthetic_multimodal(dc.synthetic, dc.seed)
    else:
        ds = data_mod.load_manifest(dc.manifest)
    if not all(s.split in ("train", "test") for s in ds.samples):
        sc = config.split
        ds = data_mod.split(ds, sc.test_fraction, sc.seed, sc.test_size)
    if config.sparsity > 0:
        ds = data_mod.drop_modalities(ds, config.sparsity, config.sparsity_seed)
    return ds


def seed_everything(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def lr_at(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warmup to ``max_lr``, then cosine decay reaching 0 at ``total_steps``."""
    warmup = min(warmup_steps, total_steps)
    if step < warmup:
        return max_lr * (step + 1) / warmup
    span = total_steps - warmup
    if span <= 0:
        return max_lr
    progress = min(1.0, (step + 1 - warmup) / span)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def select_epoch(test_losses) -> int:
    """Index of the minimum test loss; earliest on ties."""
    losses = list(test_losses)
    if not losses:
        raise InvalidConfigError("no epochs recorded")
    best = min(losses)
    return losses.index(best)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    config: ExperimentConfig
    model: FusionModel  # holds the selected epoch's weights
    dataset: data_mod.Dataset
    train_losses: list = field(default_factory=list)  # index = epoch, 0 = initial
    test_losses: list = field(default_factory=list)
    selected_epoch: int = 0
    records: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)  # epoch -> path
    seconds: float = 0.0


def build_model(config: ExperimentConfig, dataset: data_mod.Dataset) -> FusionModel:
    seed_everything(config.training.seed, config.training.deterministic)
    return FusionModel(dataset.schema, config.model)


def batch_loss(model: FusionModel, batch, config: ExperimentConfig):
    emb, avail = model(batch)
    rep = total_contrastive_loss(emb, avail, model.channels, model.mode, config.temperature)
    if not torch.isfinite(rep.total):
        raise NumericFailure("non-finite contrastive loss")
    return rep.total


@torch.no_grad()
def mean_loss(model: FusionModel, batch, config: ExperimentConfig) -> float:
    """Mean batch loss over ``batch`` cut into training-size chunks in fixed order."""
    bs = config.training.batch_size
    n = len(batch)
    values = []
    for start in range(0, n, bs):
        idx = list(range(start, min(n, start + bs)))
        if len(idx) < 2:
            continue
        values.append(float(batch_loss(model, batch.index(idx), config)))
    return float(np.mean(values)) if values else float("nan")


def checkpoint_state(model: FusionModel) -> dict:
    return model.state_dict()


def save_model(path, model: FusionModel, config: ExperimentConfig, meta: dict | None = None) -> None:
    formats.save_checkpoint(path, checkpoint_state(model), config.to_dict(), config.training.seed, meta)


def config_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(config_diff(va, vb, f"{prefix}{k}."))
        elif va != vb:
            out.append(f"{prefix}{k}: checkpoint={va!r} config={vb!r}")
    return out


COMPAT_KEYS = ("mode", "model", "data")


def load_model(path, config: ExperimentConfig, schema: data_mod.ModalitySchema) -> FusionModel:
    """Rebuild a model from a checkpoint, refusing incompatible configs."""
    state, header = formats.load_checkpoint(path)
    saved = header["config"]
    current = config.to_dict()
    diffs = config_diff({k: saved.get(k) for k in COMPAT_KEYS}, {k: current.get(k) for k in COMPAT_KEYS})
    if diffs:
        raise ConfigMismatch("checkpoint does not match config:\n  " + "\n  ".join(diffs))
    model = FusionModel(schema, config.model)
    model.load_state_dict(state)
    model.eval()
    return model


def train(
    config: ExperimentConfig,
    out_dir=None,
    dataset: data_mod.Dataset | None = None,
    run_id: str | None = None,
) -> TrainResult:
    """Train with in-batch contrastive loss; record per-epoch mean losses.

    Epoch 0 is the untrained model.  The returned model carries the weights
    of the epoch with the lowest test loss.
    """
    t0 = time.perf_counter()
    tc = config.training
    ds = dataset if dataset is not None else prepare_data(config)
    train_ds, test_ds = ds.subset("train"), ds.subset("test")
    if len(train_ds) < 2 or len(test_ds) < 2:
        raise InvalidConfigError("train and test splits need at least 2 samples each")
    model = build_model(config, ds)
    model.fit_standardization(train_ds)
    run_id = run_id or config.digest()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_batch = collate(train_ds.samples, ds.schema)
    test_batch = collate(test_ds.samples, ds.schema)
    n = len(train_batch)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    opt = torch.optim.Adam(model.parameters(), lr=tc.max_lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(tc.seed)

    result = TrainResult(config, model, ds)

    def record(epoch, split, metric, value):
        result.records.append(MetricRecord(run_id, config.mode, config.sparsity, epoch, split, metric, value))

    def end_epoch(epoch, train_loss):
        test_loss = mean_loss(model, test_batch, config)
        result.train_losses.append(train_loss)
        result.test_losses.append(test_loss)
        record(epoch, "train", "contrastive_loss", train_loss)
        record(epoch, "test", "contrastive_loss", test_loss)
        if not math.isfinite(test_loss):
            raise NumericFailure(f"non-finite test loss at epoch {epoch}")
        if test_loss <= min(result.test_losses):
            result.selected_epoch = epoch
            best_state[0] = copy.deepcopy(model.state_dict())
        if out is not None:
            meta = {"epoch": epoch, "train_loss": train_loss, "test_loss": test_loss}
            path = out / f"epoch{epoch:03d}.mfcp"
            save_model(path, model, config, meta)
            result.checkpoints[epoch] = path
            save_model(out / "last.mfcp", model, config, meta)
            prune_checkpoints(result, tc.keep_checkpoints)
        logger.info("%s s=%.2f epoch %d train %.4f test %.4f", config.mode, config.sparsity, epoch, train_loss, test_loss)

    best_state = [None]
    model.eval()
    end_epoch(0, mean_loss(model, train_batch, config))
    step = 0
    for epoch in range(1, tc.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            idx = perm[start : start + tc.batch_size]
            if len(idx) < 2:
                continue
            for group in opt.param_groups:
                group["lr"] = lr_at(step, total_steps, tc.warmup_steps, tc.max_lr)
            loss = batch_loss(model, train_batch.index(idx), config)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
        model.eval()
        end_epoch(epoch, float(np.mean(losses)) if losses else float("nan"))

    model.load_state_dict(best_state[0])
    model.eval()
    result.seconds = time.perf_counter() - t0
    if out is not None:
        curves = {
            "train": result.train_losses,
            "test": result.test_losses,
            "selected_epoch": result.selected_epoch,
            "mode": config.mode,
            "sparsity": config.sparsity,
            "config": config.to_dict(),
        }
        (out / "losses.json").write_text(json.dumps(curves, indent=1))
        save_model(out / "selected.mfcp", model, config, {"epoch": result.selected_epoch})
        write_records(out / "train_metrics.jsonl", result.records)
    return result


def prune_checkpoints(result: TrainResult, keep: int) -> None:
    if keep <= 0:
        return
    ranked = sorted(result.checkpoints, key=lambda e: (result.test_losses[e], e))
    for epoch in ranked[keep:]:
        Path(result.checkpoints.pop(epoch)).unlink(missing_ok=True)


# --------------------------------------------------------------------------
# embedding and evaluation


def embed(model: FusionModel, dataset: data_mod.Dataset, split: str) -> EmbeddingSet:
    """Embed only the samples tagged ``split``."""
    part = dataset.subset(split)
    return model.embed_dataset(part.samples)


def embed_to_file(config: ExperimentConfig, checkpoint, split: str, path, dataset=None) -> EmbeddingSet:
    ds = dataset if dataset is not None else prepare_data(config)
    model = load_model(checkpoint, config, ds.schema)
    emb = embed(model, ds, split)
    formats.write_embeddings(path, emb, {
        "split": split,
        "modalities": ds.schema.names,
        "config": config.to_dict(),
    })
    return emb


def probe_vectors(emb: EmbeddingSet, channel: str, names: list[str]):
    if channel == "fusion":
        return emb.fusion()
    for i, ch in enumerate(emb.channels):
        if channel in (ch.name(names), ch.name()):
            return emb.vectors[:, i], emb.available[:, i]
    raise InvalidConfigError(f"probe channel {channel!r} not among {[c.name(names) for c in emb.channels]}")


def embedding_metrics(emb: EmbeddingSet) -> dict:
    """Uniformity/alignment/retrieval of an embedding set, unimodal vs all-modalities fusion."""
    out: dict = {}
    fused, f_ok = emb.fusion()
    out["n_samples"] = float(len(emb.vectors))
    if f_ok.sum() >= 2:
        out["uniformity_fusion"] = metrics.uniformity(fused[f_ok])
        out["log_uniformity_fusion"] = float(np.log(out["uniformity_fusion"]))
    per = {"uniformity_unimodal": [], "alignment": [], "median_rank": []}
    per.update({f"recall@{k}": [] for k in RECALL_KS})
    for m in range(emb.n_modalities):
        u, u_ok = emb.unimodal(m)
        if u_ok.sum() >= 2:
            v = metrics.uniformity(u[u_ok])
            per["uniformity_unimodal"].append(v)
            out[f"uniformity_unimodal/{m}"] = v
        both = u_ok & f_ok
        if both.sum() >= 1:
            a = metrics.alignment(u[both], fused[both])
            per["alignment"].append(a)
            out[f"alignment/{m}"] = a
        if both.sum() >= 2:
            table = metrics.rank_matrix(u[both], fused[both])
            mr = metrics.median_rank(table)
            per["median_rank"].append(mr)
            out[f"median_rank/{m}"] = mr
            out[f"n_keys/{m}"] = float(table.n)
            for k in RECALL_KS:
                r = metrics.recall_at_k(table, k)
                per[f"recall@{k}"].append(r)
                out[f"recall@{k}/{m}"] = r
    for name, values in per.items():
        out[name] = float(np.mean(values)) if values else None
    if per["uniformity_unimodal"]:
        out["log_uniformity_unimodal"] = float(np.mean(np.log(per["uniformity_unimodal"])))
    return out


def probe_metrics(
    train_emb: EmbeddingSet, test_emb: EmbeddingSet, train_ds, test_ds, config: ExperimentConfig
) -> dict:
    pc = config.probe
    names = train_ds.schema.names
    Xtr, ok_tr = probe_vectors(train_emb, pc.channel, names)
    Xte, ok_te = probe_vectors(test_emb, pc.channel, names)
    by_id_tr = {s.id: s for s in train_ds.samples}
    by_id_te = {s.id: s for s in test_ds.samples}
    str_ = [by_id_tr[i] for i in train_emb.ids]
    ste_ = [by_id_te[i] for i in test_emb.ids]
    out: dict = {}

    reg_tr = np.array([s.regression is not None for s in str_]) & ok_tr
    reg_te = np.array([s.regression is not None for s in ste_]) & ok_te
    if reg_tr.sum() >= 2 and reg_te.sum() >= 2:
        ytr = np.array([s.regression for s, k in zip(str_, reg_tr) if k])
        yte = np.array([s.regression for s, k in zip(ste_, reg_te) if k])
        p = probe.fit_probe(Xtr[reg_tr], ytr, "regression", pc.lr_regression, pc.steps, pc.seed)
        r = probe.eval_regression(p, Xte[reg_te], yte)
        out["probe_l1"] = r["l1"]
        out["probe_pearson_r"] = r["pearson_r"]

    lab_tr = np.array([s.label is not None for s in str_]) & ok_tr
    lab_te = np.array([s.label is not None for s in ste_]) & ok_te
    if lab_tr.sum() >= 2 and lab_te.sum() >= 1:
        ytr = np.array([s.label for s, k in zip(str_, lab_tr) if k])
        yte = np.array([s.label for s, k in zip(ste_, lab_te) if k])
        k = int(max(ytr.max(), yte.max())) + 1
        p = probe.fit_probe(Xtr[lab_tr], ytr, "classification", pc.lr_classification, pc.steps, pc.seed, k)
        r = probe.eval_classification(p, Xte[lab_te], yte)
        out["probe_ce"] = r["ce"]
        out["probe_macro_aupr"] = r["macro_aupr"]
    return out


def evaluate(
    config: ExperimentConfig,
    train_emb: EmbeddingSet,
    test_emb: EmbeddingSet,
    dataset: data_mod.Dataset,
    run_id: str | None = None,
    epoch: int = -1,
) -> list[MetricRecord]:
    """Metrics on the test embeddings plus linear probes fit on train embeddings."""
    run_id = run_id or config.digest()
    values = embedding_metrics(test_emb)
    values.update(probe_metrics(train_emb, test_emb, dataset.subset("train"), dataset.subset("test"), config))
    return [MetricRecord(run_id, config.mode, config.sparsity, epoch, "test", k, v) for k, v in values.items()]


@dataclass
class RunOutcome:
    result: TrainResult
    records: list
    train_emb: EmbeddingSet
    test_emb: EmbeddingSet


def run_experiment(config: ExperimentConfig, out_dir=None, dataset=None) -> RunOutcome:
    """Train, embed both splits with the selected weights, evaluate."""
    result = train(config, out_dir, dataset)
    tr = embed(result.model, result.dataset, "train")
    te = embed(result.model, result.dataset, "test")
    evals = evaluate(config, tr, te, result.dataset, epoch=result.selected_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        formats.write_embeddings(out / "train.mfl", tr, {"split": "train", "modalities": result.dataset.schema.names})
        formats.write_embeddings(out / "test.mfl", te, {"split": "test", "modalities": result.dataset.schema.names})
        write_records(out / "metrics.jsonl", result.records + evals)
    return RunOutcome(result, result.records + evals, tr, te)


def sweep(config: ExperimentConfig, out_dir, modes=None, sparsities=None) -> dict:
    """Train and evaluate every (mode, sparsity) cell.

    Writes ``metrics.jsonl``, one ``series/<metric>__<mode>.csv`` per
    (metric, mode), per-run ``curves/*.json`` and ``grid.json`` naming any
    cell that did not complete.
    """
    out = Path(out_dir)
    (out / "series").mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    modes = tuple(modes or config.sweep_modes)
    sparsities = tuple(sparsities or config.sweep_sparsities)
    records: list[MetricRecord] = []
    done, missing = [], []
    for mode in modes:
        for s in sparsities:
            cfg = config.with_run(mode=mode, sparsity=s)
            try:
                outcome = run_experiment(cfg)
            except NumericFailure as exc:
                missing.append({"mode": mode, "sparsity": s, "reason": str(exc)})
                logger.warning("sweep cell %s/%.2f failed: %s", mode, s, exc)
                continue
            records.extend(outcome.records)
            done.append({"mode": mode, "sparsity": s, "seconds": round(outcome.result.seconds, 3)})
            r = outcome.result
            (out / "curves" / f"{mode}_{s:.2f}.json").write_text(json.dumps({
                "mode": mode, "sparsity": s, "train": r.train_losses, "test": r.test_losses,
                "selected_epoch": r.selected_epoch,
            }))
    write_records(out / "metrics.jsonl", records)
    series = write_series(records, out / "series")
    grid = {
        "modes": list(modes),
        "sparsities": list(sparsities),
        "completed": done,
        "missing": missing,
        "series_files": sorted(series),
        "config": config.to_dict(),
    }
    (out / "grid.json").write_text(json.dumps(grid, indent=1))
    return grid


def write_series(records, directory) -> list[str]:
    """One CSV per (metric, mode) with sparsity,value rows, for final evaluation records."""
    directory = Path(directory)
    table: dict = {}
    for r in records:
        if r.split != "test" or r.metric == "contrastive_loss" or "/" in r.metric:
            continue
        table.setdefault((r.metric, r.mode), []).append((r.sparsity, r.value))
    files = []
    for (metric, mode), rows in sorted(table.items()):
        name = f"{metric.replace('@', '_at_')}__{mode}.csv"
        with open(directory / name, "w") as fh:
            fh.write("sparsity,value\n")
            for s, v in sorted(rows):
                fh.write(f"{s},{'' if v is None else repr(float(v))}\n")
        files.append(name)
    return files
