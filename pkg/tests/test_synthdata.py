import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossrank.errors import ConfigError, GenerationError, ValidationError
from crossrank.metrics import kmeans, v_score
from crossrank.preprocess import SpotDataset, l1_normalize, log_transform, preprocess
from crossrank.synthdata import (SynthConfig, calibrate_dropout, generate, inject_distortion,
                                 read_labels, write_synthetic)


def small(**kw):
    base = dict(grid_h=6, grid_w=7, n_genes=30, image_dim=10, latent_dim=4)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="module")
def default_set():
    return generate(SynthConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(target_sparsity=1.0), dict(target_sparsity=-0.1), dict(grid_h=2, grid_w=4),
        dict(n_clusters=1), dict(modality_noise_sigma=-1.0), dict(nuisance_dims=65),
        dict(nuisance_sigma=-1.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SynthConfig(**kw).validate()


class TestGenerate:
    def test_shapes(self, default_set):
        ds, labels, latent = default_set
        assert ds.n_spots == 400 and len(ds.gene_ids) == 200 and ds.image_dim == 64
        assert labels.shape == (400,) and latent.shape == (400, 8)
        assert set(labels.tolist()) == {0, 1, 2}

    def test_sparsity_band(self, default_set):
        ds = default_set[0]
        assert 0.78 <= (ds.expression == 0).mean() <= 0.82

    @settings(max_examples=8)
    @given(st.floats(0.5, 0.9), st.integers(0, 1000))
    def test_sparsity_band_across_targets(self, target, seed):
        ds, _, _ = generate(small(target_sparsity=target, seed=seed))
        assert abs((ds.expression == 0).mean() - target) <= 0.02

    def test_deterministic(self):
        a, la, za = generate(small(seed=4))
        b, lb, zb = generate(small(seed=4))
        np.testing.assert_array_equal(a.expression, b.expression)
        np.testing.assert_array_equal(a.image_features, b.image_features)
        np.testing.assert_array_equal(la, lb)
        np.testing.assert_array_equal(za, zb)
        c, _, _ = generate(small(seed=5))
        assert not np.array_equal(a.expression, c.expression)

    def test_nonnegative_and_pipeline_ready(self, default_set):
        ds = default_set[0]
        assert (ds.expression >= 0).all()
        out = preprocess(ds)
        assert out.flags["zero_spots"] == []
        assert np.isfinite(out.expression).all()

    def test_noise_grows_left_to_right(self):
        cfg = small(grid_w=20, grid_h=20, modality_noise_sigma=1.0)
        clean, _, _ = generate(SynthConfig(**{**cfg.__dict__, "modality_noise_sigma": 0.0}))
        noisy, _, _ = generate(cfg)
        resid = noisy.image_features - clean.image_features
        x = noisy.coords[:, 0]
        assert resid[x < 5].std() < resid[x >= 15].std()

    def test_noise_free_features_are_function_of_latent(self):
        ds, _, latent = generate(small(modality_noise_sigma=0.0, spatial_smooth_passes=0))
        # tanh read-out: arctanh(features) is exactly affine in the latent
        y = np.arctanh(ds.image_features)
        a = np.hstack([latent, np.ones((len(latent), 1))])
        coef, *_ = np.linalg.lstsq(a, y, rcond=None)
        np.testing.assert_allclose(a @ coef, y, atol=1e-8)

    @pytest.mark.parametrize("seed", [0, 3])
    def test_noise_free_clusters_agree_across_modalities(self, seed):
        ds, _, _ = generate(SynthConfig(modality_noise_sigma=0.0, spatial_smooth_passes=0, seed=seed))
        expr = log_transform(l1_normalize(ds)).expression
        assert v_score(kmeans(expr, 3, seed=0), kmeans(ds.image_features, 3, seed=0)) >= 0.9

    def test_regions_are_spatially_contiguous(self, default_set):
        ds, labels, _ = default_set
        where = {tuple(c): labels[i] for i, c in enumerate(ds.coords.tolist())}
        for k in set(labels.tolist()):
            cells = {c for c, l in where.items() if l == k}
            seen, stack = set(), [next(iter(cells))]
            while stack:
                x, y = stack.pop()
                if (x, y) in seen:
                    continue
                seen.add((x, y))
                stack.extend(n for n in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)) if n in cells)
            assert seen == cells

    def test_nuisance_lies_in_low_dim_subspace(self):
        base, _, _ = generate(small(image_dim=12))
        shifted, _, _ = generate(small(image_dim=12, nuisance_dims=3, nuisance_sigma=5.0))
        diff = shifted.image_features - base.image_features
        s = np.linalg.svd(diff, compute_uv=False)
        assert s[2] > 1.0 and s[3] < 1e-9 * s[0]
        np.testing.assert_array_equal(shifted.expression, base.expression)

    def test_unreachable_sparsity(self):
        with pytest.raises(GenerationError):
            calibrate_dropout(np.ones(100, dtype=bool), np.full(100, 0.5), 0.2)

    def test_calibration_hits_target(self):
        u = np.random.default_rng(0).random(10000)
        rate = calibrate_dropout(np.zeros(10000, dtype=bool), u, 0.3)
        assert abs((u < rate).mean() - 0.3) <= 0.02


class TestDistortions:
    @pytest.fixture
    def dense(self):
        ds, _, _ = generate(small())
        return ds.with_expression(ds.expression + 1.0)

    @pytest.mark.parametrize("kind", ["dropout", "spatial_noise", "gene_shuffle"])
    def test_zero_strength_is_identity(self, dense, kind):
        out = inject_distortion(dense, kind, 0.0)
        np.testing.assert_array_equal(out.expression, dense.expression)

    @pytest.mark.parametrize("kind", ["dropout", "spatial_noise", "gene_shuffle"])
    def test_structure_preserved(self, dense, kind):
        out = inject_distortion(dense, kind, 0.5, seed=1)
        assert out.expression.shape == dense.expression.shape
        np.testing.assert_array_equal(out.coords, dense.coords)
        np.testing.assert_array_equal(out.image_features, dense.image_features)
        assert out.gene_ids == dense.gene_ids

    def test_dropout_fraction(self):
        n = 200
        ds = SpotDataset([str(i) for i in range(n)], [(i, 0) for i in range(n)], np.ones((n, 100)),
                         np.zeros((n, 1)), [f"g{j}" for j in range(100)])
        out = inject_distortion(ds, "dropout", 0.5, seed=3)
        assert abs((out.expression == 0).mean() - 0.5) <= 0.02

    def test_gene_shuffle_is_column_permutation(self, dense):
        out = inject_distortion(dense, "gene_shuffle", 0.6, seed=2)
        before = sorted(map(tuple, dense.expression.T.tolist()))
        after = sorted(map(tuple, out.expression.T.tolist()))
        assert before == after
        assert not np.array_equal(out.expression, dense.expression)

    def test_spatial_noise_nonnegative(self, dense):
        out = inject_distortion(dense, "spatial_noise", 2.0, seed=0)
        assert (out.expression >= 0).all()

    def test_errors(self, dense):
        with pytest.raises(ValidationError):
            inject_distortion(dense, "blur", 0.1)
        with pytest.raises(ValidationError):
            inject_distortion(dense, "dropout", -0.1)


def test_write_synthetic(tmp_path):
    ds, labels, latent = generate(small())
    write_synthetic(tmp_path, ds, labels, latent)
    got = read_labels(tmp_path / "labels.csv")
    assert [got[s] for s in ds.spot_ids] == labels.tolist()
    assert (tmp_path / "latent.csv").read_text().count("\n") == ds.n_spots + 1
