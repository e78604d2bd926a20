"""Synthetic generation, preprocessing, HVG selection, batch sampling and TSV storage."""

import gzip

import numpy as np
import pytest

from celldiff import data as dd
from celldiff.kernels import energy_distance
from tests.conftest import TINY


class TestSynthetic:
    def test_same_seed_identical(self):
        a = dd.generate_synthetic(dd.SynthConfig(**TINY))
        b = dd.generate_synthetic(dd.SynthConfig(**TINY))
        assert a.X.tobytes() == b.X.tobytes()
        assert all(np.array_equal(a.meta[k], b.meta[k]) for k in a.meta)

    def test_zero_latent_scale_collapses_replicates(self):
        ds = dd.generate_synthetic(dd.SynthConfig(**{**TINY, "latent_scale": 0.0, "cell_noise": 0.0,
                                                     "zero_inflation": 0.0}))
        m = ds.mask(context="ctx00", perturbation="pert00")
        rep = ds.meta["replicate"][m]
        np.testing.assert_array_equal(ds.X[m][rep == 0][0], ds.X[m][rep == 1][0])

    def test_zero_inflation_rate(self):
        ds = dd.generate_synthetic(dd.SynthConfig(n_genes=100, n_contexts=2, n_perturbations=5,
                                                  cells_per_replicate=100, heldout_contexts=1,
                                                  zero_inflation=0.9))
        assert ds.X.size >= 10**5
        assert np.mean(ds.X == 0) >= 0.85

    def test_nonnegative_float32(self, tiny_dataset):
        assert tiny_dataset.X.dtype == np.float32
        assert np.all(tiny_dataset.X >= 0)

    def test_holdout_share_and_split_integrity(self):
        cfg = dd.SynthConfig(n_contexts=4, n_perturbations=10, heldout_contexts=2, n_genes=8,
                             cells_per_replicate=5)
        ds = dd.generate_synthetic(cfg)
        train = set(ds.conditions("train"))
        test = set(ds.conditions("test"))
        assert not train & test
        for c in ("ctx02", "ctx03"):
            assert sum(1 for cc, _ in test if cc == c) >= 0.3 * cfg.n_perturbations
        # every condition lives in exactly one split
        ctx, pert, split = (np.asarray(ds.meta[k]) for k in ("context", "perturbation", "split"))
        for key in set(zip(ctx, pert)):
            assert len(set(split[(ctx == key[0]) & (pert == key[1])])) == 1

    def test_infeasible_split(self):
        with pytest.raises(ValueError, match="infeasible"):
            dd.generate_synthetic(dd.SynthConfig(n_perturbations=2, holdout_frac=0.5, valid_frac=0.5))

    def test_invalid_zero_inflation(self):
        with pytest.raises(ValueError):
            dd.SynthConfig(zero_inflation=1.0)

    def test_replicate_gap_below_perturbation_gap(self):
        ds = dd.generate_synthetic(dd.SynthConfig(n_contexts=1, heldout_contexts=1, n_perturbations=10,
                                                  cells_per_replicate=200, seed=3))
        ctx, pert, rep = (np.asarray(ds.meta[k]) for k in ("context", "perturbation", "replicate"))
        within, between = [], []
        for p in range(0, 10, 2):
            a = ds.X[(pert == f"pert{p:02d}") & (rep == 0)]
            b = ds.X[(pert == f"pert{p:02d}") & (rep == 1)]
            c = ds.X[(pert == f"pert{p + 1:02d}") & (rep == 0)]
            within.append(energy_distance(a, b))
            between.append(energy_distance(a, c))
        assert np.mean(within) > 0
        assert 2 * np.mean(within) < np.mean(between)


class TestPreprocess:
    def test_hand_value(self):
        counts = np.zeros((1, 5))
        counts[0, 0], counts[0, 1] = 100, 9900
        out = dd.preprocess(counts)
        assert out[0, 0] == pytest.approx(np.log1p(100) / 10)
        assert out[0, 0] == pytest.approx(0.46152, abs=1e-5)

    def test_all_zero_cell(self):
        np.testing.assert_array_equal(dd.preprocess(np.zeros((2, 3))), 0.0)

    def test_library_size_invariance(self):
        c = np.random.default_rng(0).integers(0, 50, (4, 6)).astype(float)
        np.testing.assert_allclose(dd.preprocess(c), dd.preprocess(2 * c), rtol=1e-14)

    def test_range(self):
        c = np.random.default_rng(1).integers(0, 1000, (50, 20)).astype(float)
        out = dd.preprocess(c)
        assert out.min() >= 0 and out.max() <= np.log1p(1e4) / 10

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            dd.preprocess([[1.0, -1.0]])


class TestHVG:
    def test_constant_gene_never_selected(self):
        X = np.random.default_rng(0).random((30, 4))
        X[:, 2] = 0.5
        assert 2 not in dd.select_hvg(X, 3)

    def test_identity_when_k_equals_g(self):
        X = np.random.default_rng(1).random((10, 5))
        assert sorted(dd.select_hvg(X, 5)) == list(range(5))

    def test_planted_gene_first(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((200, 8))
        X[:, 5] *= np.sqrt(10)
        assert dd.select_hvg(X, 1)[0] == 5

    def test_ties_lower_index_first(self):
        X = np.tile([[0.0], [1.0]], (5, 4))
        np.testing.assert_array_equal(dd.select_hvg(X, 2), [0, 1])

    def test_too_many(self):
        with pytest.raises(ValueError):
            dd.select_hvg(np.ones((3, 2)), 3)


class TestSampling:
    def test_single_cell_repeated(self, tiny_dataset):
        ds = tiny_dataset.subset(np.arange(tiny_dataset.n_cells) == 7)
        out = dd.sample_batch(ds, 4, np.random.default_rng(0))
        assert out.shape == (4, 8)
        assert np.all(out == ds.X[0])

    def test_distinct_when_enough(self, tiny_dataset):
        idx = np.flatnonzero(tiny_dataset.mask(context="ctx00", perturbation="pert01"))
        rows = dd.sample_rows(idx, 10, np.random.default_rng(1))
        assert len(set(rows.tolist())) == 10

    def test_deterministic(self, tiny_dataset):
        a = dd.sample_batch(tiny_dataset, 5, np.random.default_rng(3), context="ctx01")
        b = dd.sample_batch(tiny_dataset, 5, np.random.default_rng(3), context="ctx01")
        np.testing.assert_array_equal(a, b)

    def test_no_match(self, tiny_dataset):
        with pytest.raises(ValueError, match="nope"):
            dd.sample_batch(tiny_dataset, 3, np.random.default_rng(0), context="nope")


class TestDownsample:
    def test_keeps_fraction_per_condition(self, tiny_dataset):
        small = dd.downsample(tiny_dataset, 0.25, seed=0)
        for c, p in tiny_dataset.conditions("train", include_control=True):
            before = tiny_dataset.mask(context=c, perturbation=p, split="train").sum()
            after = small.mask(context=c, perturbation=p, split="train").sum()
            assert after == max(2, round(0.25 * before))
        for split in ("valid", "test"):
            assert small.mask(split=split).sum() == tiny_dataset.mask(split=split).sum()

    def test_invalid_fraction(self, tiny_dataset):
        with pytest.raises(ValueError):
            dd.downsample(tiny_dataset, 0.0)


class TestStorage:
    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_round_trip(self, tiny_dataset, tmp_path, suffix):
        mpath, tpath = dd.save_dataset(tiny_dataset, str(tmp_path / "d") + suffix)
        back = dd.load_dataset(str(tmp_path / "d") + suffix)
        assert back.X.tobytes() == tiny_dataset.X.tobytes()
        assert back.genes == tiny_dataset.genes
        for k in dd.META_COLUMNS:
            np.testing.assert_array_equal(back.meta[k], tiny_dataset.meta[k])
        if suffix:
            with gzip.open(mpath, "rt") as fh:
                assert fh.readline().startswith("g000\t")

    def test_file_layout(self, tiny_dataset, tmp_path):
        mpath, tpath = dd.save_dataset(tiny_dataset, tmp_path / "d")
        assert mpath.name == "d.matrix.tsv" and tpath.name == "d.meta.tsv"
        assert tpath.read_text().splitlines()[0] == "\t".join(dd.META_COLUMNS)

    def test_truncated_matrix(self, tiny_dataset, tmp_path):
        mpath, _ = dd.save_dataset(tiny_dataset, tmp_path / "d")
        lines = mpath.read_text().splitlines(keepends=True)
        mpath.write_text("".join(lines[:-3]))
        with pytest.raises(dd.DataFormatError, match=f"expected {tiny_dataset.n_cells}, found {tiny_dataset.n_cells - 3}"):
            dd.load_dataset(tmp_path / "d")

    def test_ragged_row_names_line(self, tiny_dataset, tmp_path):
        mpath, _ = dd.save_dataset(tiny_dataset, tmp_path / "d")
        lines = mpath.read_text().splitlines(keepends=True)
        lines[4] = "0.1\t0.2\n"
        mpath.write_text("".join(lines))
        with pytest.raises(dd.DataFormatError, match=":5:"):
            dd.load_dataset(tmp_path / "d")

    def test_malformed_meta_header(self, tiny_dataset, tmp_path):
        _, tpath = dd.save_dataset(tiny_dataset, tmp_path / "d")
        lines = tpath.read_text().splitlines(keepends=True)
        lines[0] = "cell_id\tcontext\n"
        tpath.write_text("".join(lines))
        with pytest.raises(dd.DataFormatError, match=":1:"):
            dd.load_dataset(tmp_path / "d")

    def test_empty_rejected(self, tiny_dataset, tmp_path):
        with pytest.raises(dd.DataFormatError):
            dd.save_dataset(tiny_dataset.subset(np.zeros(tiny_dataset.n_cells, bool)), tmp_path / "e")

    def test_metadata_length_checked(self):
        meta = {k: np.array(["a"]) for k in dd.META_COLUMNS}
        with pytest.raises(dd.DataFormatError):
            dd.Dataset(np.zeros((2, 1)), ["g"], meta)
