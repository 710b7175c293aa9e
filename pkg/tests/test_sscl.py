import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from hsicl import nn
from hsicl.dataset import make_splits, make_synthetic_cube, normalize, compute_band_stats, sample_patches
from hsicl.exceptions import DegenerateInputError, ShapeError
from hsicl.rng import Rng
from hsicl.sscl import ContrastiveEncoder, augment, augment_batch, encode, init_encoder, nt_xent

from oracles import encode_loop, nt_xent_loop


def random_batch(seed, n=None, d=None):
    g = np.random.default_rng(seed)
    n = n or int(g.integers(1, 9))
    d = d or int(g.integers(2, 17))
    return g.normal(size=(2 * n, d))


@pytest.fixture(scope="module")
def synthetic_patches():
    patches = sample_patches(make_synthetic_cube(seed=1), 3, "single")
    plan = make_splits(len(patches), 0)
    return normalize(patches, compute_band_stats(patches, plan.cls_train)), plan


class TestAugment:
    def test_views_are_flips_of_the_patch(self):
        patch = np.arange(18.0).reshape(3, 3, 2)
        flips = [patch, patch[:, ::-1], patch[::-1], patch[::-1, ::-1]]
        rng = Rng(0)
        for _ in range(20):
            for view in augment(patch, rng):
                assert any(np.array_equal(view, f) for f in flips)

    def test_flip_frequencies_are_uniform(self):
        patch = np.arange(9.0).reshape(3, 3, 1)
        flips = [patch, patch[:, ::-1], patch[::-1], patch[::-1, ::-1]]
        counts = np.zeros(4)
        rng = Rng(1)
        n = 4000
        for _ in range(n):
            view = augment(patch, rng).view_a
            counts[[np.array_equal(view, f) for f in flips].index(True)] += 1
        # each share is 1/4 with standard error ~0.007
        assert np.all(np.abs(counts / n - 0.25) < 0.03)

    def test_batch_matches_per_patch_calls(self):
        batch = np.random.default_rng(0).normal(size=(5, 3, 3, 2))
        a, b = Rng(9), Rng(9)
        views = augment_batch(batch, a)
        for i, patch in enumerate(batch):
            va, vb = augment(patch, b)
            np.testing.assert_array_equal(views[2 * i], va)
            np.testing.assert_array_equal(views[2 * i + 1], vb)


class TestNtXent:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_pairwise_loop(self, seed):
        T = (0.05, 0.1, 0.5, 1.0)[seed % 4]
        z = random_batch(seed)
        assert abs(nt_xent(z, T).item() - nt_xent_loop(z, T)) < 1e-6

    def test_single_pair_is_exactly_zero(self):
        assert nt_xent(random_batch(0, n=1), 0.1).item() == 0.0

    def test_orthonormal_pairs(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert abs(nt_xent(z, 1.0).item() - math.log(1 + 2 * math.exp(-1))) < 1e-9

    @given(st.integers(0, 10_000), st.data())
    def test_pair_permutation_invariance(self, seed, data):
        z = random_batch(seed)
        n = len(z) // 2
        perm = data.draw(st.permutations(range(n)))
        swapped = np.concatenate([z[[2 * k, 2 * k + 1]] for k in perm])
        assert abs(nt_xent(z, 0.1).item() - nt_xent(swapped, 0.1).item()) < 1e-6

    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_positive_scale_invariance(self, seed, c):
        z = random_batch(seed)
        scales = np.random.default_rng(seed).uniform(0.1, 10, (len(z), 1)) * c
        assert abs(nt_xent(z, 0.5).item() - nt_xent(z * scales, 0.5).item()) < 1e-6

    def test_errors(self):
        with pytest.raises(ValueError):
            nt_xent(random_batch(0), 0.0)
        with pytest.raises(ValueError):
            nt_xent(np.ones((3, 2)), 0.1)
        with pytest.raises(ShapeError):
            nt_xent(np.ones(4), 0.1)
        z = random_batch(0, n=2)
        z[1] = 0
        with pytest.raises(DegenerateInputError):
            nt_xent(z, 0.1)

    def test_loss_is_float64(self):
        assert nt_xent(random_batch(1).astype(np.float32), 0.1).dtype == np.float64


def test_encode_matches_per_pixel_loop():
    params = init_encoder(Rng(0), 5, 4, width=6, dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 5))
    np.testing.assert_allclose(encode(params, x).data, encode_loop(params, x), atol=1e-12)


def test_encode_rejects_wrong_band_count():
    params = init_encoder(Rng(0), 5, 4)
    with pytest.raises(ShapeError):
        encode(params, np.zeros((1, 3, 3, 4)))


class TestEstimator:
    def test_fit_lowers_loss_and_transforms(self, synthetic_patches):
        patches, plan = synthetic_patches
        X = patches.pixels
        enc = ContrastiveEncoder(hidden_size=8, epochs=15, batch_size=32, lr=1e-2, dropout=0.1)
        enc.fit(X[plan.pretrain_train], X_val=X[plan.pretrain_val])
        losses = [r["train_loss"] for r in enc.history_]
        assert losses[-1] < losses[0]
        assert all(np.isfinite(losses))
        assert enc.transform(X).shape == (len(X), 9 * 8)
        z = enc.project(X[:5])
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, rtol=1e-5)
        assert 0 <= enc.best_epoch_ < 15

    def test_fit_is_deterministic(self, synthetic_patches):
        X = synthetic_patches[0].pixels
        kw = dict(hidden_size=4, epochs=3, batch_size=16)
        a = ContrastiveEncoder(**kw).fit(X)
        b = ContrastiveEncoder(**kw).fit(X)
        assert nn.digest(a.params_) == nn.digest(b.params_)
        assert nn.digest(ContrastiveEncoder(**kw, random_state=1).fit(X).params_) != nn.digest(a.params_)

    def test_save_load_roundtrip(self, synthetic_patches, tmp_path):
        X = synthetic_patches[0].pixels
        enc = ContrastiveEncoder(hidden_size=4, epochs=2, batch_size=16).fit(X)
        enc.save(tmp_path / "ckpt")
        back = ContrastiveEncoder.load(tmp_path / "ckpt")
        np.testing.assert_array_equal(back.transform(X), enc.transform(X))
        assert back.get_params() == enc.get_params()

    def test_sklearn_clone_and_params(self):
        enc = ContrastiveEncoder(hidden_size=64, temperature=0.5)
        c = clone(enc)
        assert c.get_params()["hidden_size"] == 64 and c.get_params()["temperature"] == 0.5
        assert not hasattr(c, "params_")

    def test_rejects_non_square_patches(self):
        with pytest.raises(ShapeError):
            ContrastiveEncoder(epochs=1).fit(np.zeros((4, 3, 2, 5)))
