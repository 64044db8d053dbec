import numpy as np
import pytest

from exitwise.errors import InputError
from exitwise.heads import (ExitHead, HeadTrainConfig, TextBank, cls_feature,
                            head_embed, head_forward, head_loss_and_grads,
                            init_head, ssa_aggregate, train_head)
from exitwise.tensor import layer_norm


def unit_rows(rng, k, e):
    m = rng.normal(size=(k, e)).astype(np.float32)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestSsaAggregate:
    def test_identical_patches(self):
        rng = np.random.default_rng(0)
        token = rng.normal(size=4).astype(np.float32)
        z = np.vstack([rng.normal(size=4).astype(np.float32), np.tile(token, (5, 1))])
        want = layer_norm(token[None, :])[0]
        assert np.allclose(ssa_aggregate(z), want, atol=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(9, 6)).astype(np.float32)
        perm = np.concatenate([[0], 1 + rng.permutation(8)])
        assert np.allclose(ssa_aggregate(z), ssa_aggregate(z[perm]), atol=1e-6)

    def test_ignores_cls(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(5, 4)).astype(np.float32)
        z2 = z.copy()
        z2[0] = 100.0
        assert np.array_equal(ssa_aggregate(z), ssa_aggregate(z2))

    def test_variance_reduction_monte_carlo(self):
        # patch tokens = centroid + iid noise (sigma=1): pre-norm mean has
        # per-element variance ~ sigma^2 / N
        rng = np.random.default_rng(3)
        n, d, trials = 196, 8, 10000
        centroid = rng.normal(size=d)
        agg = np.empty((trials, d))
        for t in range(trials):
            tokens = centroid + rng.normal(size=(n, d))
            agg[t] = tokens.mean(axis=0)  # independent oracle of the aggregate
        var = agg.var(axis=0).mean()
        assert 0.8 / n <= var <= 1.2 / n

    def test_needs_patches(self):
        with pytest.raises(InputError):
            ssa_aggregate(np.ones((1, 4), np.float32))


class TestClsFeature:
    def test_returns_row_zero(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(5, 4)).astype(np.float32)
        assert np.array_equal(cls_feature(z), z[0])

    def test_independent_of_patches(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(5, 4)).astype(np.float32)
        z2 = z.copy()
        z2[1:] = rng.normal(size=(4, 4))
        assert np.array_equal(cls_feature(z), cls_feature(z2))

    def test_ssa_beats_cls_on_noisy_centroids(self):
        # nearest-prototype classification: the patch aggregate averages the
        # noise away, the singleton [CLS] carries none of the signal
        rng = np.random.default_rng(6)
        k, d, n, samples = 4, 16, 32, 300
        centroids = rng.normal(size=(k, d)).astype(np.float32)
        protos_ssa = np.stack([layer_norm(c[None, :])[0] for c in centroids])
        correct_ssa = correct_cls = 0
        for _ in range(samples):
            y = rng.integers(k)
            z = np.empty((n + 1, d), np.float32)
            z[0] = 0.3 * rng.normal(size=d)
            z[1:] = centroids[y] + 2.0 * rng.normal(size=(n, d))
            f_ssa = ssa_aggregate(z)
            f_cls = cls_feature(z)
            correct_ssa += int(np.argmax(protos_ssa @ f_ssa) == y)
            correct_cls += int(np.argmax(centroids @ f_cls) == y)
        assert correct_ssa > correct_cls


class TestHeadForward:
    def test_single_class_bank(self):
        rng = np.random.default_rng(7)
        bank = TextBank(unit_rows(rng, 1, 4))
        head = init_head(0, 6, 4, rng)
        p = head_forward(rng.normal(size=6).astype(np.float32), head, bank)
        assert p.shape == (1,)
        assert p[0] == 1.0

    def test_aligned_embedding_wins(self):
        rng = np.random.default_rng(8)
        bank = TextBank(np.eye(4, dtype=np.float32), logit_scale=100.0)
        d = 6
        head = ExitHead(0, np.zeros((d, d), np.float32), np.zeros(d, np.float32),
                        np.zeros((4, d), np.float32),
                        np.array([0, 0, 1, 0], np.float32))
        p = head_forward(rng.normal(size=d).astype(np.float32), head, bank)
        assert np.argmax(p) == 2
        assert p[2] > 0.99

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(9)
        bank = TextBank(unit_rows(rng, 7, 5))
        head = init_head(0, 8, 5, rng)
        feats = rng.normal(size=(10, 8)).astype(np.float32)
        p = head_forward(feats, head, bank)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_output_rescale_invariance(self):
        # the embedding is unit-normalized before scoring, so scaling the
        # output layer by any positive constant leaves the probabilities alone
        rng = np.random.default_rng(10)
        bank = TextBank(unit_rows(rng, 6, 5))
        head = init_head(0, 8, 5, rng)
        f = rng.normal(size=8).astype(np.float32)
        base = head_forward(f, head, bank)
        for c in (0.5, 2.0, 10.0):
            scaled = ExitHead(0, head.w1, head.b1,
                              np.float32(c) * head.w2, np.float32(c) * head.b2)
            assert np.allclose(head_forward(f, scaled, bank), base, atol=1e-5)


class TestTraining:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.rng = rng
        self.bank = TextBank(unit_rows(rng, 2, 4))
        # linearly separable 2-class toy in d=8
        n = 120
        self.labels = rng.integers(0, 2, size=n)
        centers = rng.normal(size=(2, 8)) * 2.0
        self.features = (centers[self.labels]
                         + 0.3 * rng.normal(size=(n, 8))).astype(np.float32)

    def test_separable_toy_reaches_high_accuracy(self):
        cfg = HeadTrainConfig(lr=2e-3, epochs=200, batch_size=32, seed=0)
        head, history = train_head(self.features, self.labels, self.bank, cfg)
        p = head_forward(self.features, head, self.bank)
        acc = np.mean(np.argmax(p, axis=1) == self.labels)
        assert acc >= 0.99
        assert history[-1] < history[0]

    def test_distill_lambda_zero_equals_hard(self):
        teacher = self.rng.normal(size=(len(self.labels), 4))
        hard = HeadTrainConfig(supervision="hard", epochs=5, seed=3)
        dist = HeadTrainConfig(supervision="distill", distill_weight=0.0,
                               epochs=5, seed=3)
        h1, hist1 = train_head(self.features, self.labels, self.bank, hard)
        h2, hist2 = train_head(self.features, self.labels, self.bank, dist,
                               teacher=teacher)
        assert hist1 == hist2
        assert np.array_equal(h1.w1, h2.w1)
        assert np.array_equal(h1.w2, h2.w2)

    def test_distill_requires_teacher(self):
        cfg = HeadTrainConfig(supervision="distill", epochs=1)
        with pytest.raises(InputError):
            train_head(self.features, self.labels, self.bank, cfg)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        d, e, k, s = 5, 3, 4, 6
        x = rng.normal(size=(s, d))
        y = rng.integers(0, k, size=s)
        bank = rng.normal(size=(k, e))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        teacher = rng.normal(size=(s, e))
        teacher /= np.linalg.norm(teacher, axis=1, keepdims=True)
        params = [rng.normal(size=(d, d)) * 0.3, rng.normal(size=d) * 0.1,
                  rng.normal(size=(e, d)) * 0.3, rng.normal(size=e) * 0.1]
        _, grads = head_loss_and_grads(params, x, y, bank, 10.0, 0.4, teacher)

        eps = 1e-6
        checked = 0
        for pi, g in enumerate(grads):
            flat_idx = rng.choice(params[pi].size, size=min(3, params[pi].size),
                                  replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, params[pi].shape)
                orig = params[pi][idx]
                params[pi][idx] = orig + eps
                hi, _ = head_loss_and_grads(params, x, y, bank, 10.0, 0.4, teacher)
                params[pi][idx] = orig - eps
                lo, _ = head_loss_and_grads(params, x, y, bank, 10.0, 0.4, teacher)
                params[pi][idx] = orig
                fd = (hi - lo) / (2 * eps)
                denom = max(abs(fd), abs(g[idx]), 1e-8)
                assert abs(fd - g[idx]) / denom < 1e-3
                checked += 1
        assert checked >= 10
