import json

import numpy as np
import pandas as pd
import pytest
from conftest import make_dataset, make_schema, random_samples
from hypothesis import given, settings
from hypothesis import strategies as st

from mcafusion.data import (
    Dataset,
    ModalitySchema,
    ModalitySpec,
    Sample,
    SyntheticConfig,
    drop_modalities,
    load_manifest,
    measured_sparsity,
    minmax_scale,
    save_manifest,
    select_top_variance,
    split,
    synthetic_multimodal,
)
from mcafusion.errors import DataLoadError, InvalidConfigError, InvalidInputError, InvalidSchemaError


def full_dataset(n, M=4):
    schema = make_schema(("tabular",) * M, (1,) * M, (1,) * M)
    samples = [Sample(f"s{i:05d}", tuple(np.array([float(i)]) for _ in range(M))) for i in range(n)]
    return Dataset(schema, tuple(samples))


class TestSchema:
    def test_tabular_tokens_equal_columns(self):
        with pytest.raises(InvalidSchemaError):
            ModalitySpec("a", "tabular", 3, 2)

    def test_roundtrip(self, schema4):
        assert ModalitySchema.from_dict(schema4.to_dict()) == schema4

    def test_payload_shape_checked(self, schema2):
        with pytest.raises(InvalidSchemaError):
            Dataset(schema2, (Sample("a", (np.zeros((2, 3)), np.zeros(5))),))


class TestSparsity:
    def test_zero_unchanged(self):
        ds = full_dataset(50)
        out = drop_modalities(ds, 0.0, seed=1)
        assert out.samples == ds.samples and measured_sparsity(out) == 0.0

    @pytest.mark.parametrize("S", [0.2, 0.4, 0.6, 0.8])
    def test_rates(self, S):
        n, M = 10_000, 4
        out = drop_modalities(full_dataset(n, M), S, seed=7)
        assert abs(out.provenance["pre_removal_sparsity"] - S) <= 0.02
        p = S**M
        assert abs(out.provenance["removed_samples"] / n - p) <= 3 * np.sqrt(p * (1 - p) / n)
        assert len(out) == n - out.provenance["removed_samples"]
        assert all(any(s.presence) for s in out.samples)

    def test_per_modality_rates(self):
        n, S = 10_000, 0.4
        out = drop_modalities(full_dataset(n), S, seed=11, remove_empty=False)
        rates = 1 - out.presence_matrix().mean(axis=0)
        assert (np.abs(rates - S) <= 3 * np.sqrt(S * (1 - S) / n)).all()

    def test_reproducible(self):
        a = drop_modalities(full_dataset(200), 0.5, seed=3)
        b = drop_modalities(full_dataset(200), 0.5, seed=3)
        assert np.array_equal(a.presence_matrix(), b.presence_matrix()) and a.ids == b.ids

    def test_measured(self, schema2):
        s = [Sample("a", (np.zeros((1, 3)), None)), Sample("b", (np.zeros((1, 3)), np.zeros(2)))]
        assert measured_sparsity(Dataset(schema2, tuple(s))) == 0.25

    def test_bad_sparsity(self):
        with pytest.raises(InvalidConfigError):
            drop_modalities(full_dataset(5), 1.0, 0)

    def test_needs_full_dataset(self, schema2, rng):
        ds = make_dataset(schema2, 20, rng, p_present=0.3)
        with pytest.raises(InvalidInputError):
            drop_modalities(ds, 0.2, 0)


class TestTopVariance:
    def test_hand_table(self):
        table = np.array([[1, 0, 5, 2], [3, 0, 1, 2], [5, 0, 3, 8]], dtype=float)
        # variances (ddof=1): 4, 0, 4, 12
        assert select_top_variance(table, 4) == [3, 0, 2, 1]
        assert select_top_variance(table, 2) == [3, 0]

    def test_constant_never_first(self, rng):
        table = rng.standard_normal((10, 5))
        table[:, 2] = 1.0
        assert 2 not in select_top_variance(table, 4)

    def test_k_too_large(self):
        with pytest.raises(InvalidConfigError):
            select_top_variance(np.zeros((3, 2)), 3)


class TestSplit:
    def test_floor_rule(self):
        out = split(full_dataset(7017, 2), 0.1, seed=0)
        assert sum(s.split == "test" for s in out.samples) == 701

    def test_same_seed(self):
        a = split(full_dataset(100, 2), 0.2, seed=5)
        b = split(full_dataset(100, 2), 0.2, seed=5)
        assert [s.split for s in a.samples] == [s.split for s in b.samples]

    def test_shared_permutation(self):
        ds = full_dataset(100, 2)
        small = {s.id for s in split(ds, 0.1, seed=2).samples if s.split == "test"}
        big = split(ds, 0.9, seed=2)
        big_test = {s.id for s in big.samples if s.split == "test"}
        big_train = {s.id for s in big.samples if s.split == "train"}
        assert small <= big_test
        assert big_test | big_train == set(ds.ids) and not big_test & big_train

    def test_order_independent(self):
        ds = full_dataset(60, 2)
        rev = ds.with_samples(reversed(ds.samples))
        tags = {s.id: s.split for s in split(ds, 0.25, seed=1).samples}
        assert all(tags[s.id] == s.split for s in split(rev, 0.25, seed=1).samples)

    def test_test_size(self):
        out = split(full_dataset(50, 2), test_size=7)
        assert sum(s.split == "test" for s in out.samples) == 7

    @pytest.mark.parametrize("f", [0.0, 1.0, 0.01])
    def test_degenerate(self, f):
        with pytest.raises(InvalidConfigError):
            split(full_dataset(20, 2), f)


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(samples=20)
        a, b = synthetic_multimodal(cfg, 3), synthetic_multimodal(cfg, 3)
        for s, t in zip(a.samples, b.samples):
            assert all(np.array_equal(p, q) for p, q in zip(s.payloads, t.payloads))
            assert s.regression == t.regression and s.label == t.label

    def test_schema(self):
        ds = synthetic_multimodal(SyntheticConfig(samples=5), 0)
        assert [m.kind for m in ds.schema] == ["sequence", "sequence", "tabular", "tabular"]
        assert ds.presence_matrix().all()

    def test_regression_recoverable(self):
        ds = synthetic_multimodal(SyntheticConfig(samples=300, noise=0.0), 1)
        X = np.stack([np.concatenate([np.atleast_2d(p)[0] for p in s.payloads]) for s in ds.samples])
        X = np.c_[X, np.ones(len(X))]
        y = np.array([s.regression for s in ds.samples])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert np.corrcoef(X @ coef, y)[0, 1] >= 0.999
        assert y.min() == 0.0 and y.max() == 1.0

    def test_variable_lengths(self):
        ds = synthetic_multimodal(SyntheticConfig(samples=30, seq_len=6, min_seq_len=2), 0)
        lengths = {len(s.payloads[0]) for s in ds.samples}
        assert min(lengths) >= 2 and max(lengths) <= 6 and len(lengths) > 1

    def test_minmax(self):
        assert np.allclose(minmax_scale([2.0, 4.0, 3.0]), [0, 1, 0.5])
        assert np.allclose(minmax_scale([1.0, 1.0]), [0, 0])


def write_table(path, ids, values):
    pd.DataFrame({"id": ids, **{f"c{j}": values[:, j] for j in range(values.shape[1])}}).to_csv(path, index=False)


class TestManifest:
    def two_tables(self, tmp_path, align="union", ids_b=("a", "b", "d")):
        write_table(tmp_path / "x.csv", ["a", "b", "c"], np.arange(6.0).reshape(3, 2))
        write_table(tmp_path / "y.csv", list(ids_b), np.arange(3.0)[:, None])
        manifest = {"version": 1, "align": align, "modalities": [
            {"name": "x", "kind": "tabular", "file": "x.csv"},
            {"name": "y", "kind": "tabular", "file": "y.csv"},
        ]}
        (tmp_path / "m.json").write_text(json.dumps(manifest))
        return tmp_path / "m.json"

    def test_union_alignment(self, tmp_path):
        ds = load_manifest(self.two_tables(tmp_path))
        assert ds.ids == ["a", "b", "c", "d"]
        assert ds.presence_matrix().tolist() == [[True, True], [True, True], [True, False], [False, True]]
        assert np.array_equal(ds.samples[1].payloads[0], [2.0, 3.0])

    def test_intersection(self, tmp_path):
        assert load_manifest(self.two_tables(tmp_path, "intersection")).ids == ["a", "b"]

    def test_no_usable_samples(self, tmp_path):
        with pytest.raises(DataLoadError, match="no usable samples"):
            load_manifest(self.two_tables(tmp_path, "intersection", ids_b=("p", "q", "r")))

    def test_duplicate_ids(self, tmp_path):
        path = self.two_tables(tmp_path, ids_b=("a", "a", "d"))
        with pytest.raises(DataLoadError, match="duplicate"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        path = self.two_tables(tmp_path)
        (tmp_path / "y.csv").unlink()
        with pytest.raises(DataLoadError, match="missing"):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataLoadError):
            load_manifest(tmp_path / "nope.json")

    def test_top_variance(self, tmp_path):
        write_table(tmp_path / "x.csv", ["a", "b", "c"],
                    np.array([[1, 0, 5, 2], [3, 0, 1, 2], [5, 0, 3, 8]], dtype=float))
        write_table(tmp_path / "y.csv", ["a", "b", "c"], np.ones((3, 1)))
        (tmp_path / "m.json").write_text(json.dumps({"version": 1, "modalities": [
            {"name": "x", "kind": "tabular", "file": "x.csv", "top_variance": 2},
            {"name": "y", "kind": "tabular", "file": "y.csv"},
        ]}))
        ds = load_manifest(tmp_path / "m.json")
        assert ds.schema[0].dim == 2
        assert np.array_equal(ds.samples[0].payloads[0], [2.0, 1.0])

    def test_roundtrip(self, tmp_path, schema4, rng):
        ds = split(make_dataset(schema4, 25, rng, full_length=False), 0.2, seed=0)
        back = load_manifest(save_manifest(ds, tmp_path / "out"))
        assert back.ids == sorted(ds.ids)
        order = {sid: i for i, sid in enumerate(ds.ids)}
        for s in back.samples:
            o = ds.samples[order[s.id]]
            assert s.presence == o.presence and s.split == o.split and s.label == o.label
            assert s.regression == o.regression
            for p, q in zip(s.payloads, o.payloads):
                assert (p is None and q is None) or np.array_equal(p, q)
        assert back.schema == ds.schema

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.lists(st.booleans(), min_size=3, max_size=3).filter(any), min_size=1, max_size=8))
    def test_roundtrip_presence(self, tmp_path_factory, rows):
        schema = make_schema(("sequence", "tabular", "tabular"), (2, 1, 2), (3, 1, 2))
        rng = np.random.default_rng(0)
        ds = Dataset(schema, tuple(random_samples(schema, len(rows), rng, presence=np.array(rows))))
        back = load_manifest(save_manifest(ds, tmp_path_factory.mktemp("rt")))
        assert np.array_equal(back.presence_matrix(), ds.presence_matrix())
