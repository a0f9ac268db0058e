import numpy as np
import pytest

from recurq import (
    DomainError,
    FeatureMatrix,
    LabelEmbeddings,
    RqModel,
    TrainConfig,
    adam_step,
    adaptive_margin_loss,
    distortion_losses,
    encode,
    grad_hard_distortion,
    grad_soft_distortion,
    kmeans_init,
    reconstruct_hard,
    reconstruct_soft,
    train,
    triplet_loss,
)
from recurq.synth import synth_dataset
from recurq.train import AdamState, _forward, hard_distortion_value, soft_distortion_value

FD_STEP = 1e-6


def random_instance(rng, k=8, d=4, m=2, n=3, gamma=3.0):
    model = RqModel(rng.normal(size=(k, d)), float(rng.uniform(0.3, 0.8)), gamma, m)
    x = rng.normal(size=(n, d))
    return x, model


def soft_value_oracle(x, codebook, w, gamma, residuals):
    """Straightforward per-sample recomputation of E_s with frozen residuals."""
    total = 0.0
    n, m_levels = x.shape[0], len(residuals)
    for i in range(n):
        acc = np.zeros(x.shape[1])
        for m in range(1, m_levels + 1):
            scaled = w ** (m - 1) * codebook
            h = residuals[m - 1][i]
            dists = np.array([np.linalg.norm(c - h) for c in scaled])
            logits = -gamma * dists
            logits -= logits.max()
            p = np.exp(logits)
            p /= p.sum()
            acc = acc + p @ scaled
            total += np.linalg.norm(acc - x[i])
    return total / n


class TestDistortionLosses:
    def test_exact_hard_hit(self):
        model = RqModel([[1.0, 0.0], [0.0, 1.0]], 0.5, 5.0, 1)
        report = distortion_losses(np.array([[1.0, 0.0]]), model)
        assert report.e_hard == 0.0
        assert report.e_soft > 0.0

    def test_single_codeword_soft_equals_hard(self):
        model = RqModel(np.array([[0.3, 0.7]]), 0.5, 5.0, 3)
        report = distortion_losses(np.array([[1.0, -1.0], [0.2, 0.4]]), model)
        assert np.allclose(report.per_level_hard, report.per_level_soft)
        assert report.e_joint == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(20)
        x, model = random_instance(rng, k=8, d=5, m=3, n=6)
        report = distortion_losses(x, model)
        hard = np.zeros(model.levels)
        soft = np.zeros(model.levels)
        for row in x:
            codes, trace = encode(row, model)
            for m in range(1, model.levels + 1):
                hard[m - 1] += np.linalg.norm(reconstruct_hard(codes, model, m) - row)
                soft[m - 1] += np.linalg.norm(reconstruct_soft(trace, m) - row)
        hard /= x.shape[0]
        soft /= x.shape[0]
        assert np.allclose(report.per_level_hard, hard)
        assert np.allclose(report.per_level_soft, soft)
        assert report.e_hard == pytest.approx(hard.sum())
        assert report.e_joint == pytest.approx(abs(hard.sum() - soft.sum()))

    def test_empty_batch_rejected(self):
        model = RqModel([[1.0, 0.0], [0.0, 1.0]], 0.5, 5.0, 1)
        with pytest.raises(DomainError):
            distortion_losses(np.empty((0, 2)), model)


class TestSoftGradient:
    def test_single_codeword_collapses_to_norm_gradient(self):
        c = np.array([[0.5, -0.3]])
        x = np.array([[1.0, 1.0]])
        model = RqModel(c, 0.5, 4.0, 1)
        d_c, d_w = grad_soft_distortion(x, model)
        expected = (c[0] - x[0]) / np.linalg.norm(c[0] - x[0])
        assert np.allclose(d_c[0], expected)
        assert d_w == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        for trial in range(50):
            x, model = random_instance(rng, k=8, d=4, m=2)
            fw = _forward(x, model)
            d_c, d_w = grad_soft_distortion(x, model, fw)
            c, w, g = model.codebook, model.scale, model.gamma
            for _ in range(4):
                i, j = int(rng.integers(8)), int(rng.integers(4))
                cp, cm = c.copy(), c.copy()
                cp[i, j] += FD_STEP
                cm[i, j] -= FD_STEP
                fd = (
                    soft_value_oracle(x, cp, w, g, fw.residuals)
                    - soft_value_oracle(x, cm, w, g, fw.residuals)
                ) / (2 * FD_STEP)
                assert d_c[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
            fd_w = (
                soft_value_oracle(x, c, w + FD_STEP, g, fw.residuals)
                - soft_value_oracle(x, c, w - FD_STEP, g, fw.residuals)
            ) / (2 * FD_STEP)
            assert d_w == pytest.approx(fd_w, rel=1e-4, abs=1e-7)

    def test_symmetric_level_one_w_gradient_is_zero(self):
        c = np.array([[1.0, 0.0], [-1.0, 0.0]])
        model = RqModel(c, 0.5, 2.0, 1)
        _, d_w = grad_soft_distortion(np.array([[0.0, 0.0]]), model)
        assert d_w == 0.0


class TestHardGradient:
    def test_single_level_structure(self):
        rng = np.random.default_rng(22)
        c = rng.normal(size=(4, 3))
        x = rng.normal(size=(1, 3))
        model = RqModel(c, 0.5, 4.0, 1)
        d_c, d_w = grad_hard_distortion(x, model)
        fw = _forward(x, model)
        b = fw.codes[0, 0]
        recon = c[b]
        expected = (recon - x[0]) / np.linalg.norm(recon - x[0])
        assert np.allclose(d_c[b], expected)
        mask = np.ones(4, dtype=bool)
        mask[b] = False
        assert np.all(d_c[mask] == 0.0)
        assert d_w == 0.0

    def test_matches_finite_differences_fixed_assignments(self):
        rng = np.random.default_rng(23)
        for trial in range(50):
            x, model = random_instance(rng, k=8, d=4, m=3)
            fw = _forward(x, model)
            d_c, d_w = grad_hard_distortion(x, model, fw)
            c, w = model.codebook, model.scale
            for _ in range(4):
                i, j = int(rng.integers(8)), int(rng.integers(4))
                cp, cm = c.copy(), c.copy()
                cp[i, j] += FD_STEP
                cm[i, j] -= FD_STEP
                fd = (
                    hard_distortion_value(x, RqModel(cp, w, 3.0, 3), fw.codes)
                    - hard_distortion_value(x, RqModel(cm, w, 3.0, 3), fw.codes)
                ) / (2 * FD_STEP)
                assert d_c[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
            fd_w = (
                hard_distortion_value(x, RqModel(c, w + FD_STEP, 3.0, 3), fw.codes)
                - hard_distortion_value(x, RqModel(c, w - FD_STEP, 3.0, 3), fw.codes)
            ) / (2 * FD_STEP)
            assert d_w == pytest.approx(fd_w, rel=1e-4, abs=1e-7)

    def test_zero_distortion_gives_zero_gradient(self):
        c = np.array([[1.0, 0.0], [0.0, 1.0]])
        model = RqModel(c, 0.5, 4.0, 1)
        d_c, d_w = grad_hard_distortion(np.array([[1.0, 0.0]]), model)
        assert np.all(d_c == 0.0)
        assert d_w == 0.0


class TestTripletLoss:
    def test_inactive_hinge(self):
        a = np.zeros(3)
        p = np.array([0.2, 0.0, 0.0])
        n = np.array([1.0, 0.0, 0.0])
        loss, (ga, gp, gn) = triplet_loss(a, p, n, 0.5)
        assert loss == 0.0
        assert np.all(ga == 0) and np.all(gp == 0) and np.all(gn == 0)

    def test_active_value(self):
        a = np.zeros(2)
        p = np.array([1.0, 0.0])
        n = np.array([0.2, 0.0])
        loss, _ = triplet_loss(a, p, n, 0.5)
        assert loss == pytest.approx(1.3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            a, p, n = rng.normal(size=(3, 4))
            loss, grads = triplet_loss(a, p, n, 2.0)
            if loss == 0.0:
                continue
            for vec_idx, base in enumerate((a, p, n)):
                for j in range(4):
                    vp, vm = base.copy(), base.copy()
                    vp[j] += FD_STEP
                    vm[j] -= FD_STEP
                    args_p = [a, p, n]
                    args_m = [a, p, n]
                    args_p[vec_idx] = vp
                    args_m[vec_idx] = vm
                    fd = (
                        triplet_loss(*args_p, 2.0)[0] - triplet_loss(*args_m, 2.0)[0]
                    ) / (2 * FD_STEP)
                    assert grads[vec_idx][j] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestAdaptiveMarginLoss:
    def test_orthogonal_aligned_case(self):
        emb = LabelEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]))
        loss, _ = adaptive_margin_loss(np.array([1.0, 0.0]), {0}, emb)
        assert loss == pytest.approx(0.0)

    def test_wrong_label(self):
        emb = LabelEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0]]))
        loss, _ = adaptive_margin_loss(np.array([0.0, 1.0]), {0}, emb)
        assert loss == pytest.approx(2.0)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(25)
        v = rng.normal(size=(5, 6))
        emb = LabelEmbeddings(v)
        z = rng.normal(size=6)
        labels = {1, 3}
        loss, _ = adaptive_margin_loss(z, labels, emb)

        def cos(u, t):
            return float(u @ t / (np.linalg.norm(u) * np.linalg.norm(t)))

        expected = 0.0
        for i in labels:
            for j in set(range(5)) - labels:
                delta = 1.0 - cos(v[i], v[j])
                expected += max(0.0, delta - cos(v[i], z) + cos(v[j], z))
        assert loss == pytest.approx(expected)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(26)
        for _ in range(50):
            emb = LabelEmbeddings(rng.normal(size=(4, 5)))
            z = rng.normal(size=5)
            _, dz = adaptive_margin_loss(z, {0, 2}, emb)
            for j in range(5):
                zp, zm = z.copy(), z.copy()
                zp[j] += FD_STEP
                zm[j] -= FD_STEP
                fd = (
                    adaptive_margin_loss(zp, {0, 2}, emb)[0]
                    - adaptive_margin_loss(zm, {0, 2}, emb)[0]
                ) / (2 * FD_STEP)
                assert dz[j] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_rejects_zero_vector(self):
        emb = LabelEmbeddings(np.array([[1.0, 0.0]]))
        with pytest.raises(DomainError):
            adaptive_margin_loss(np.zeros(2), {0}, emb)


class TestKmeans:
    def test_two_separated_clouds(self):
        rng = np.random.default_rng(27)
        a = rng.normal(0.0, 0.01, size=(50, 3)) + np.array([10.0, 0.0, 0.0])
        b = rng.normal(0.0, 0.01, size=(50, 3)) - np.array([10.0, 0.0, 0.0])
        x = np.vstack([a, b])
        centroids = kmeans_init(x, 2, seed=1)
        centroids = centroids[np.argsort(centroids[:, 0])]
        assert np.allclose(centroids[1], a.mean(axis=0), atol=1e-9)
        assert np.allclose(centroids[0], b.mean(axis=0), atol=1e-9)

    def test_single_centroid_is_mean(self):
        rng = np.random.default_rng(28)
        x = rng.normal(size=(40, 5))
        centroids = kmeans_init(x, 1, seed=2)
        assert np.allclose(centroids[0], x.mean(axis=0))

    def test_sse_nonincreasing(self):
        rng = np.random.default_rng(29)

        def sse(x, centroids):
            d2 = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
            return d2.min(axis=1).sum()

        for seed in range(100):
            x = rng.normal(size=(60, 4))
            prev = None
            for iters in range(1, 6):
                centroids = kmeans_init(x, 5, iters=iters, seed=seed)
                cur = sse(x, centroids)
                if prev is not None:
                    assert cur <= prev + 1e-9
                prev = cur

    def test_too_few_points(self):
        with pytest.raises(DomainError):
            kmeans_init(np.zeros((3, 2)), 4)


class TestAdam:
    def _config(self, lr=0.001):
        return TrainConfig(k=2, m=1, lr=lr)

    def test_first_step_magnitude(self):
        params = {"theta": np.array(0.0)}
        state = AdamState()
        adam_step(params, {"theta": np.array(1.0)}, state, self._config())
        assert params["theta"] == pytest.approx(-0.001, rel=1e-6)

    def test_zero_gradient_leaves_params(self):
        params = {"theta": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"theta": np.zeros(2)}, state, self._config())
        assert np.array_equal(params["theta"], [1.0, -2.0])

    def test_ten_step_quadratic_matches_reference(self):
        config = self._config(lr=0.01)
        params = {"theta": np.array(3.0)}
        state = AdamState()
        # hand-rolled scalar reference
        theta, m, v = 3.0, 0.0, 0.0
        for t in range(1, 11):
            g = 2.0 * theta  # d/dtheta theta^2
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            theta -= 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            adam_step(
                params, {"theta": 2.0 * params["theta"]}, state, config
            )
        assert float(params["theta"]) == pytest.approx(theta, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState(), self._config())


class TestTrain:
    def test_perfect_capacity_keeps_zero_distortion(self):
        rng = np.random.default_rng(30)
        x = rng.normal(size=(16, 4))
        fm = FeatureMatrix(x)
        config = TrainConfig(
            k=16, m=1, init="kmeans", epochs_stage2=3, epochs_stage3=3, seed=5,
            loss_flags=frozenset({"hard_distortion"}),
        )
        model, log = train(fm, config)
        report = distortion_losses(x, model)
        assert report.e_hard <= 1e-9

    def test_training_improves_over_random_baseline(self):
        fm = synth_dataset(n=1500, d=16, clusters=8, spread=0.1, seed=3)
        config = TrainConfig(
            k=16, m=2, init="kmeans", epochs_stage2=5, epochs_stage3=10, seed=3
        )
        model, log = train(fm, config)
        rng = np.random.default_rng(99)
        baseline = RqModel(
            rng.normal(0, fm.data.std(), size=(16, 16)), 0.5, config.gamma, 2
        )
        trained = distortion_losses(fm.data, model).e_hard
        random_init = distortion_losses(fm.data, baseline).e_hard
        assert trained < 0.5 * random_init

    def test_bit_reproducible(self):
        fm = synth_dataset(n=400, d=8, clusters=4, spread=0.15, seed=11)
        config = TrainConfig(k=8, m=2, epochs_stage2=3, epochs_stage3=4, seed=17)
        m1, log1 = train(fm, config)
        m2, log2 = train(fm, config)
        assert np.array_equal(m1.codebook, m2.codebook)
        assert m1.scale == m2.scale
        assert [r.get("e_hard") for r in log1] == [r.get("e_hard") for r in log2]

    def test_losses_nonnegative_in_log(self):
        fm = synth_dataset(n=300, d=8, clusters=4, spread=0.2, seed=1)
        config = TrainConfig(k=8, m=2, epochs_stage2=3, epochs_stage3=3, seed=2)
        _, log = train(fm, config)
        for record in log:
            for key in ("e_hard", "e_soft", "e_joint"):
                if key in record:
                    assert record[key] >= 0.0

    def test_ablation_flags_are_live(self):
        fm = synth_dataset(n=300, d=8, clusters=4, spread=0.2, seed=4)
        base = dict(k=8, m=2, epochs_stage2=4, epochs_stage3=4, seed=9, init="kmeans")
        full = train(fm, TrainConfig(**base))[0]
        soft_only = train(
            fm, TrainConfig(**base, loss_flags=frozenset({"soft_distortion"}))
        )[0]
        e_full = distortion_losses(fm.data, full).e_hard
        e_soft = distortion_losses(fm.data, soft_only).e_hard
        assert e_full != e_soft

    def test_hard_only_never_regresses_from_kmeans(self):
        fm = synth_dataset(n=500, d=8, clusters=6, spread=0.15, seed=12)
        config = TrainConfig(
            k=8, m=1, init="kmeans", epochs_stage2=8, epochs_stage3=0, seed=12,
            loss_flags=frozenset({"hard_distortion"}),
        )
        model, _ = train(fm, config)
        # same init derivation as the trainer
        rng = np.random.default_rng(np.uint64(12))
        init_seed = int(rng.integers(2 ** 32))
        init = RqModel(kmeans_init(fm.data, 8, seed=init_seed), 0.5, config.gamma, 1)
        final = distortion_losses(fm.data, model).e_hard
        assert final <= distortion_losses(fm.data, init).e_hard + 1e-12

    def test_gamma_annealing_runs(self):
        fm = synth_dataset(n=200, d=8, clusters=4, spread=0.2, seed=13)
        config = TrainConfig(
            k=8, m=2, epochs_stage2=2, epochs_stage3=4, seed=13, gamma_final=50.0
        )
        model, log = train(fm, config)
        assert model.gamma == config.gamma
        assert any(r["stage"] == 3 for r in log)

    def test_stage1_requires_labels(self):
        fm = FeatureMatrix(np.random.default_rng(0).normal(size=(20, 4)))
        config = TrainConfig(k=4, m=1, enable_stage1=True)
        with pytest.raises(DomainError):
            train(fm, config)

    def test_stage1_pipeline_runs(self):
        fm = synth_dataset(n=120, d=8, clusters=4, spread=0.2, seed=6)
        rng = np.random.default_rng(7)
        emb = LabelEmbeddings(rng.normal(size=(4, 6)))
        config = TrainConfig(
            k=8,
            m=2,
            enable_stage1=True,
            epochs_stage1=2,
            epochs_stage2=2,
            epochs_stage3=2,
            batch_size=64,
            seed=8,
        )
        model, log = train(fm, config, emb)
        stages = {r["stage"] for r in log}
        assert stages == {1, 2, 3}
        assert model.levels == 2
        # head output dim: D/2 + embedding dim
        assert model.dim == 8 // 2 + 6
