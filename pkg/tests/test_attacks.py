import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisec import attacks, models
from noisec import numcore as nc
from noisec.formats import FormatError


class LinearModel:
    """Logits = W x + b over the flattened image; convex cross-entropy in x."""

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, np.float32)
        k = self.weight.shape[0]
        self.bias = np.zeros(k, np.float32) if bias is None else np.asarray(bias, np.float32)

    def forward(self, x):
        x = x if isinstance(x, nc.Tensor) else nc.Tensor(np.asarray(x, np.float32))
        return nc.linear(nc.flatten(x), nc.Tensor(self.weight), nc.Tensor(self.bias))

    def probs(self, x):
        z = np.asarray(x, np.float64).reshape(len(x), -1) @ self.weight.T.astype(np.float64) + self.bias
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def loss(self, x, y):
        return -np.log(self.probs(x)[np.arange(len(x)), y])


def as_image(values):
    return np.asarray(values, np.float32).reshape(1, 1, 1, -1)


def _uniform_batch(rng, n=4, shape=(3, 8, 8)):
    return rng.uniform(0, 1, (n, *shape)).astype(np.float32)


class TestFGSM:
    # d loss / d x = p1 * (W1 - W0) = p1 * [2, -3] for true class 0
    toy = LinearModel([[0.0, 0.0], [2.0, -3.0]])

    def test_hand_computed_gradient(self):
        x = as_image([0.5, 0.5])
        p1 = self.toy.probs(x)[0, 1]
        g = attacks.loss_gradient(self.toy, x, np.array([0]))
        np.testing.assert_allclose(g.ravel(), p1 * np.array([2.0, -3.0]), rtol=1e-6)

    def test_toy_step(self):
        adv = attacks.fgsm(self.toy, as_image([0.5, 0.5]), np.array([0]), eps=0.1)
        np.testing.assert_allclose(adv.x_mal.ravel(), [0.6, 0.4], atol=1e-7)

    def test_eps_zero_is_identity(self, tiny_classifier, rng):
        x = _uniform_batch(rng)
        adv = attacks.fgsm(tiny_classifier, x, np.arange(4) % 4, eps=0.0)
        np.testing.assert_array_equal(adv.x_mal, x)
        assert not np.any(adv.eta)

    def test_rejects_out_of_box_input(self, tiny_classifier):
        with pytest.raises(ValueError):
            attacks.fgsm(tiny_classifier, np.full((1, 3, 8, 8), 1.5, np.float32), np.array([0]), 0.1)

    def test_gradient_needs_taped_model(self):
        class Detached:
            def forward(self, x):
                return nc.Tensor(np.zeros((len(x.data), 2), np.float32))

        with pytest.raises(attacks.AttackError):
            attacks.fgsm(Detached(), as_image([0.5, 0.5]), np.array([0]), 0.1)


class TestIterative:
    def test_single_step_bim_equals_fgsm(self, tiny_classifier, rng):
        x, y = _uniform_batch(rng), np.array([0, 1, 2, 3])
        a = attacks.fgsm(tiny_classifier, x, y, eps=0.03)
        b = attacks.bim(tiny_classifier, x, y, eps=0.03, alpha=0.05, iters=1)
        np.testing.assert_array_equal(a.x_mal, b.x_mal)

    def test_pgd_without_random_start_equals_bim(self, tiny_classifier, rng):
        x, y = _uniform_batch(rng), np.array([3, 2, 1, 0])
        a = attacks.bim(tiny_classifier, x, y, eps=0.02, alpha=0.005, iters=6)
        b = attacks.pgd(tiny_classifier, x, y, eps=0.02, alpha=0.005, iters=6, random_start=False)
        np.testing.assert_array_equal(a.x_mal, b.x_mal)

    def test_zero_iterations(self, tiny_classifier, rng):
        x = _uniform_batch(rng)
        np.testing.assert_array_equal(attacks.bim(tiny_classifier, x, np.zeros(4, int), 0.1, 0.01, 0).x_mal, x)

    def test_loss_nondecreasing_on_convex_toy(self, rng):
        model = LinearModel(rng.standard_normal((3, 6)))
        x = rng.uniform(0.2, 0.8, (5, 1, 1, 6)).astype(np.float32)
        y = np.array([0, 1, 2, 0, 1])
        losses = [model.loss(x, y)]
        for iters in range(1, 8):
            losses.append(model.loss(attacks.bim(model, x, y, eps=0.15, alpha=0.03, iters=iters).x_mal, y))
        for before, after in zip(losses, losses[1:]):
            assert np.all(after >= before - 1e-9)

    def test_random_start_is_seeded(self, tiny_classifier, rng):
        x, y = _uniform_batch(rng), np.zeros(4, int)
        a = attacks.pgd(tiny_classifier, x, y, 0.03, 0.01, 3, random_start=True, seed=5)
        b = attacks.pgd(tiny_classifier, x, y, 0.03, 0.01, 3, random_start=True, seed=5)
        np.testing.assert_array_equal(a.x_mal, b.x_mal)

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.3), st.sampled_from(["FGSM", "BIM", "PGD"]))
    def test_linf_bound_and_box(self, tiny_classifier, seed, eps, kind):
        rng = np.random.default_rng(seed)
        x = rng.choice([0.0, 1.0, 0.3, 0.7], (2, 3, 8, 8)).astype(np.float32)
        cfg = attacks.AttackConfig(kind, eps=eps, alpha=0.05, iters=3, random_start=True, seed=seed)
        adv = attacks.run_attack(cfg, tiny_classifier, x, np.array([0, 1]))
        assert np.all(np.abs(adv.x_mal.astype(np.float64) - x) <= eps)
        assert adv.x_mal.min() >= 0.0 and adv.x_mal.max() <= 1.0
        assert np.all(adv.linf() <= eps)

    @given(st.floats(1e-6, 0.5), st.integers(0, 2**32 - 1))
    def test_projection_is_exact(self, eps, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, 50).astype(np.float32)
        out = attacks.project_linf(x, x + rng.uniform(-1, 1, 50), eps)
        assert out.dtype == np.float32
        assert np.all(np.abs(out.astype(np.float64) - x.astype(np.float64)) <= eps)
        assert np.all((out >= 0) & (out <= 1))


def _fd_logit_jacobian(model, x, h=1e-3):
    def logits(v):
        out = model.forward(v)
        return (out[0] if isinstance(out, tuple) else out).data.astype(np.float64)

    flat = x.astype(np.float64).ravel()
    cols = []
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        zu = logits(up.astype(np.float32).reshape(x.shape))[0]
        zd = logits(down.astype(np.float32).reshape(x.shape))[0]
        cols.append((zu - zd) / (2 * h))
    return np.array(cols).T


class TestJSMA:
    def test_jacobian_matches_finite_differences(self, tiny_classifier, rng):
        x = rng.uniform(0.2, 0.8, (1, 3, 8, 8)).astype(np.float32)
        jac = attacks.jacobian(tiny_classifier, x)[0].reshape(4, -1)
        fd = _fd_logit_jacobian(tiny_classifier, x)
        np.testing.assert_allclose(jac, fd, atol=5e-3)

    def test_first_choice_matches_bruteforce_saliency(self):
        rng = np.random.default_rng(3)
        model = LinearModel(rng.standard_normal((3, 8)))
        x = as_image(rng.uniform(0.2, 0.6, 8))
        y, target = np.array([0]), 1
        fd = _fd_logit_jacobian(model, x)
        g_t, g_o = fd[target], fd.sum(axis=0) - fd[target]
        scores = [abs(a) * abs(b) if a > 0 and b < 0 else 0.0 for a, b in zip(g_t, g_o)]
        assert max(scores) > 0
        expected = int(np.argmax(scores))
        adv = attacks.jsma(model, x, y, theta=0.1, gamma=1 / 8, y_target=np.array([target]))
        changed = np.flatnonzero(adv.eta.ravel())
        assert changed.tolist() == [expected]

    def test_saliency_sign_gate(self):
        s = attacks.jsma_saliency(np.array([1.0, 1.0, -1.0]), np.array([-2.0, 2.0, -2.0]))
        np.testing.assert_array_equal(s, [2.0, 0.0, 0.0])
        s = attacks.jsma_saliency(np.array([-1.0, 1.0]), np.array([3.0, -3.0]), increase=False)
        np.testing.assert_array_equal(s, [3.0, 0.0])

    def test_gamma_zero_is_identity(self, tiny_classifier, rng):
        x = _uniform_batch(rng)
        np.testing.assert_array_equal(attacks.jsma(tiny_classifier, x, np.zeros(4, int), 0.25, 0.0).x_mal, x)

    @pytest.mark.parametrize("gamma", [0.01, 0.05, 0.2])
    def test_budget(self, tiny_classifier, rng, gamma):
        x = rng.uniform(0, 0.5, (3, 3, 8, 8)).astype(np.float32)
        adv = attacks.jsma(tiny_classifier, x, np.array([0, 1, 2]), 0.25, gamma)
        budget = math.ceil(gamma * 3 * 8 * 8)
        assert np.all(np.count_nonzero(adv.eta.reshape(3, -1), axis=1) <= budget)
        assert np.all(adv.eta >= 0)

    def test_all_stuck_raises(self):
        # the target logit does not depend on the input at all
        model = LinearModel([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(attacks.AttackError):
            attacks.jsma(model, as_image([0.5, 0.5]), np.array([0]), 0.1, 1.0)

    def test_default_target(self):
        np.testing.assert_array_equal(attacks.target_classes(np.array([0, 3, 9]), 10), [1, 4, 0])


class TestUAP:
    def test_zero_iterations(self, tiny_classifier, rng):
        delta = attacks.uap(tiny_classifier, _uniform_batch(rng), step=1.0, iters=0, budget=1.0)
        assert not np.any(delta)

    def test_budget_and_accuracy_drop(self, small_task):
        clf, _, test = small_task
        pool = test.images[:40]
        delta = attacks.uap(clf, pool, step=2.0, iters=3, budget=2.0, seed=0)
        assert np.sqrt(np.sum(delta.astype(np.float64) ** 2)) <= 2.0 + 1e-5
        adv = attacks.uap_attack(clf, test.images, test.labels, delta)
        assert models.accuracy(clf, models.LabeledDataset(adv.x_mal, test.labels, 4)) < models.accuracy(clf, test)

    def test_same_perturbation_before_clipping(self, rng):
        x = rng.uniform(0.3, 0.7, (3, 3, 4, 4)).astype(np.float32)
        delta = rng.uniform(-0.1, 0.1, (3, 4, 4)).astype(np.float32)
        out = attacks.apply_universal(x, delta)
        for row in out - x:
            np.testing.assert_allclose(row, delta, atol=1e-6)


class TestCW:
    def test_c_zero_keeps_input(self, tiny_classifier, rng):
        x = _uniform_batch(rng)
        adv = attacks.cw(tiny_classifier, x, np.zeros(4, int), c=0.0, kappa=0.0, steps=20, lr=0.01)
        np.testing.assert_array_equal(adv.x_mal, x)

    def test_one_dimensional_boundary(self):
        # margin Z0 - Z1 = 2x - 1 for target 1, so the boundary sits at x = 0.5
        model = LinearModel([[1.0], [-1.0]], bias=[-0.5, 0.5])
        adv = attacks.cw(model, as_image([0.9]), np.array([0]), c=5.0, kappa=0.0, steps=2000, lr=2e-4)
        assert abs(float(adv.x_mal.ravel()[0]) - 0.5) <= 1e-2

    def test_returns_best_iterate(self, small_task):
        clf, _, test = small_task
        x, y = test.images[:6], test.labels[:6]
        adv, history = attacks.cw(clf, x, y, c=1.0, kappa=5.0, steps=30, lr=0.05, return_history=True)
        target = attacks.target_classes(y, 4)
        z = clf.forward(adv.x_mal)[0].data.astype(np.float64)
        rival = np.where(np.eye(4, dtype=bool)[target], -np.inf, z).max(axis=1)
        margin = rival - z[np.arange(6), target]
        obj = adv.l2() + 1.0 * np.maximum(margin, -5.0)
        np.testing.assert_allclose(obj, history.min(axis=0), rtol=1e-4, atol=1e-4)

    def test_stays_in_box(self, tiny_classifier, rng):
        adv = attacks.cw(tiny_classifier, _uniform_batch(rng), np.zeros(4, int), 10.0, 1.0, 10, 0.5)
        assert adv.x_mal.min() >= 0 and adv.x_mal.max() <= 1


class TestBadNet:
    def _data(self, rng, n=100):
        return models.LabeledDataset(
            rng.uniform(0.3, 0.7, (n, 3, 8, 8)).astype(np.float32), rng.integers(0, 4, n), 4
        )

    @pytest.mark.parametrize("rate,n,expected", [(0.1, 100, 10), (0.29, 100, 29), (0.005, 100, 0), (1.0, 7, 7), (0.5, 7, 3)])
    def test_poison_count(self, rate, n, expected):
        assert attacks.poison_count(n, rate) == expected

    def test_poison_relabels_exactly_the_chosen_samples(self, rng):
        data = self._data(rng)
        trig = attacks.yellow_box((3, 8, 8))
        out = attacks.badnet_poison(data, trig, target_class=2, poison_rate=0.1, seed=4)
        idx = attacks.poison_indices(100, 0.1, 4)
        assert len(idx) == 10
        assert np.all(out.labels[idx] == 2)
        rest = np.setdiff1d(np.arange(100), idx)
        np.testing.assert_array_equal(out.labels[rest], data.labels[rest])
        np.testing.assert_array_equal(out.images[rest], data.images[rest])

    def test_rate_below_one_sample_leaves_data_unchanged(self, rng):
        data = self._data(rng, n=50)
        out = attacks.badnet_poison(data, attacks.yellow_box((3, 8, 8)), 0, 0.01)
        np.testing.assert_array_equal(out.images, data.images)
        np.testing.assert_array_equal(out.labels, data.labels)

    def test_full_rate_triggers_everything(self, rng):
        data = self._data(rng, n=20)
        trig = attacks.yellow_box((3, 8, 8))
        out = attacks.badnet_poison(data, trig, 1, 1.0)
        assert np.all(out.labels == 1)
        np.testing.assert_array_equal(out.images[:, :, 6:, 6:], np.broadcast_to(trig.patch, (20, 3, 2, 2)))

    def test_black_image_noise_norm(self):
        black = np.zeros((1, 3, 8, 8), np.float32)
        adv = attacks.badnet_attack(_Constant(), black, np.array([0]), attacks.yellow_box((3, 8, 8)))
        assert adv.l2()[0] == pytest.approx(math.sqrt(8))

    def test_idempotent_and_local(self, rng):
        x = rng.uniform(0, 1, (2, 3, 8, 8)).astype(np.float32)
        trig = attacks.yellow_box((3, 8, 8), corner="top-left")
        once = attacks.badnet_apply(x, trig)
        np.testing.assert_array_equal(attacks.badnet_apply(once, trig), once)
        mask = np.ones_like(x, bool)
        mask[:, :, :2, :2] = False
        np.testing.assert_array_equal(once[mask], x[mask])

    def test_out_of_bounds(self):
        trig = attacks.Trigger(np.ones((3, 2, 2)), row=7, col=0)
        with pytest.raises(ValueError):
            attacks.badnet_apply(np.zeros((3, 8, 8)), trig)


class _Constant:
    def forward(self, x):
        n = len(x.data if isinstance(x, nc.Tensor) else x)
        return nc.Tensor(np.tile([[1.0, 0.0]], (n, 1)).astype(np.float32))


class TestConfigAndDispatch:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            attacks.AttackConfig("DEEPFOOL")

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            attacks.AttackConfig("FGSM", eps=-1)
        with pytest.raises(ValueError):
            attacks.AttackConfig("JSMA", gamma=1.5)
        with pytest.raises(ValueError):
            attacks.AttackConfig("CW", norm="Linf")

    @pytest.mark.parametrize("kind", ["FGSM", "BIM", "PGD", "JSMA", "CW", "UAP"])
    def test_deterministic(self, kind, tiny_classifier, rng):
        x, y = _uniform_batch(rng, n=3), np.array([0, 1, 2])
        cfg = attacks.AttackConfig(kind, eps=0.03, iters=3, steps=5, uap_iters=1, uap_budget=1.0, uap_step=1.0,
                                   random_start=True, seed=9)
        a = attacks.run_attack(cfg, tiny_classifier, x, y)
        b = attacks.run_attack(cfg, tiny_classifier, x, y)
        np.testing.assert_array_equal(a.x_mal, b.x_mal)

    def test_badnet_needs_trigger(self, tiny_classifier, rng):
        with pytest.raises(ValueError):
            attacks.run_attack(attacks.AttackConfig("BADNET"), tiny_classifier, _uniform_batch(rng), np.zeros(4, int))


class TestBatchFile:
    @pytest.fixture
    def sample(self, tiny_classifier, rng):
        x = _uniform_batch(rng, n=3)
        adv = attacks.fgsm(tiny_classifier, x, np.array([0, 1, 2]), eps=0.05)
        adv.source_index = np.array([7, 2, 11])
        return adv

    def test_round_trip(self, sample):
        cfg = attacks.AttackConfig("FGSM", eps=0.05, seed=3)
        batch = attacks.parse_attack_batch(attacks.attack_batch_bytes(sample, cfg, "cd" * 32))
        assert (batch.kind, batch.seed, batch.config_hash) == ("FGSM", 3, "cd" * 32)
        assert batch.config["eps"] == 0.05
        np.testing.assert_array_equal(batch.index, [7, 2, 11])
        np.testing.assert_array_equal(batch.eta, sample.eta)
        np.testing.assert_array_equal(batch.success, sample.success)

    def test_rebuild(self, sample):
        images = np.zeros((12, 3, 8, 8), np.float32)
        images[[7, 2, 11]] = sample.x_nat
        cfg = attacks.AttackConfig("FGSM", eps=0.05)
        rebuilt = attacks.parse_attack_batch(attacks.attack_batch_bytes(sample, cfg)).rebuild(images)
        np.testing.assert_allclose(rebuilt.x_mal, sample.x_mal, atol=1e-7)

    def test_truncation_and_magic(self, sample):
        raw = attacks.attack_batch_bytes(sample, attacks.AttackConfig("FGSM"))
        with pytest.raises(FormatError):
            attacks.parse_attack_batch(raw[:-3])
        with pytest.raises(FormatError):
            attacks.parse_attack_batch(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            attacks.parse_attack_batch(raw + b"\0")
