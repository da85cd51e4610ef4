import numpy as np
import pytest
import torch

from mcafusion.data import Dataset, ModalitySchema, ModalitySpec, Sample
from mcafusion.model import FusionModel, ModelConfig

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = marker.args
        _criteria.append((n, title, rep.outcome.upper(), item.name))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    grouped: dict = {}
    for n, title, outcome, name in _criteria:
        grouped.setdefault((n, title), []).append(outcome == "PASSED")
    for (n, title), results in sorted(grouped.items()):
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}  {status}  {title}  ({sum(results)}/{len(results)} checks)")
    for line in _notes:
        terminalreporter.write_line(line)


_notes = []


def note(line: str) -> None:
    """Extra line for the acceptance summary (soft results)."""
    _notes.append(line)


def make_schema(kinds=("sequence", "tabular"), dims=(3, 2), tokens=(2, 2)):
    return ModalitySchema(tuple(
        ModalitySpec(f"m{i}", k, d, t if k == "sequence" else d)
        for i, (k, d, t) in enumerate(zip(kinds, dims, tokens))
    ))


def make_model(schema, mode="MCA", width=8, depth=1, heads=2, tokens_per_channel=2,
               dtype=torch.float64, seed=0, ff_multiplier=4):
    torch.manual_seed(seed)
    cfg = ModelConfig(mode=mode, width=width, depth=depth, heads=heads,
                      tokens_per_channel=tokens_per_channel, ff_multiplier=ff_multiplier)
    return FusionModel(schema, cfg).to(dtype)


def random_samples(schema, n, rng, presence=None, full_length=True, p_present=0.6):
    """Samples with random payloads; ``presence`` is an [n, M] bool array or random."""
    M = len(schema)
    if presence is None:
        presence = rng.random((n, M)) < p_present
        for row in presence:
            if not row.any():
                row[rng.integers(M)] = True
    out = []
    for i in range(n):
        payloads = []
        for m, spec in enumerate(schema):
            if not presence[i][m]:
                payloads.append(None)
            elif spec.kind == "tabular":
                payloads.append(rng.standard_normal(spec.dim))
            else:
                T = spec.tokens if full_length else int(rng.integers(1, spec.tokens + 1))
                payloads.append(rng.standard_normal((T, spec.dim)))
        out.append(Sample(f"s{i:04d}", tuple(payloads), None, float(rng.random()), int(rng.integers(3))))
    return out


def make_dataset(schema, n, rng, **kw):
    return Dataset(schema, tuple(random_samples(schema, n, rng, **kw)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schema2():
    return make_schema()


@pytest.fixture
def schema4():
    return make_schema(("sequence", "sequence", "tabular", "tabular"), (3, 4, 2, 3), (2, 3, 2, 3))


def tiny_config(mode="MCA", samples=96, test_size=32, epochs=2, **training):
    """A seconds-scale experiment on synthetic data."""
    import dataclasses

    from mcafusion.config import DataConfig, ProbeConfig, SplitConfig, TrainingConfig, desk_config
    from mcafusion.data import SyntheticConfig

    base = desk_config(mode)
    return dataclasses.replace(
        base,
        model=ModelConfig(mode=mode, width=16, depth=1, heads=2, tokens_per_channel=1),
        training=TrainingConfig(**{"batch_size": 16, "max_lr": 3e-3, "warmup_steps": 4, "epochs": epochs,
                                   "seed": 0, **training}),
        data=DataConfig(synthetic=SyntheticConfig(samples=samples, seq_len=3, dims=(4, 4, 3, 3)), seed=0),
        split=SplitConfig(test_size=test_size, seed=0),
        probe=ProbeConfig(steps=100),
    )
