"""The ten acceptance criteria, each printed as one PASS/FAIL line in the summary.

The desk experiment (train all models, attack, detect) runs once per session
and is shared by criteria 3, 4, 5, 6, 8, 9 and 10.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from noisec import attacks, baselines, cli, config, experiment, metrics, models, pipeline
from noisec import numcore as nc

from oracles import brute_auroc, brute_ks, classifier_forward_ref, conv2d_ref, conv_transpose2d_ref, log_softmax_ref

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.yaml"
TINY = ROOT / "configs" / "tiny.yaml"

WHITEBOX_MAIN = ("FGSM", "BIM", "PGD", "UAP", "BADNET")
BLACKBOX_MAIN = ("FGSM", "BIM", "PGD")
BASELINES = ("MAGNET_L1", "MAGNET_JSD")


@pytest.fixture(scope="session")
def desk():
    cfg = config.load_config(DESK)
    start = time.perf_counter()
    train, test = experiment.load_data(cfg)
    ms = experiment.train_models(cfg, train, test)
    trained = time.perf_counter()
    report = experiment.run_experiment(cfg, ms)
    done = time.perf_counter()
    return {"cfg": cfg, "models": ms, "report": report, "train_s": trained - start, "eval_s": done - trained}


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def _random_classifier(rng):
    depth = int(rng.integers(1, 3))
    channels = tuple(int(c) for c in rng.integers(2, 5, depth))
    strides = tuple(int(s) for s in rng.choice([1, 2], depth))
    shape = (int(rng.choice([1, 3])), int(rng.integers(4, 7)), int(rng.integers(4, 7)))
    classes = int(rng.integers(2, 5))
    clf = models.build_classifier(shape, classes, int(rng.integers(classes, 7)), int(rng.integers(2**31)), channels, strides)
    x = rng.uniform(0, 1, (2, *shape)).astype(np.float32)
    y = rng.integers(0, classes, 2)

    def taped(p, xt):
        return nc.cross_entropy(clf.forward(xt, p)[0], y)

    def oracle(params, x64):
        logits, _, pre = classifier_forward_ref(params, clf.arch, x64)
        return -np.mean(log_softmax_ref(logits)[np.arange(len(y)), y]), pre

    return clf, x, taped, oracle


def _ae_forward_ref(params, arch, x):
    pre = []
    h = x
    for i, s in enumerate(arch.encoder_strides):
        a = conv2d_ref(h, params[f"enc{i}.w"], params[f"enc{i}.b"], s, 1)
        pre.append(a)
        h = np.maximum(a, 0.0)
    z = h.reshape(len(h), -1) @ params["bottleneck.w"].T + params["bottleneck.b"]
    a = z @ params["expand.w"].T + params["expand.b"]
    pre.append(a)
    h = np.maximum(a, 0.0).reshape((len(x),) + arch.grid())
    dec = models._DECODER_STRIDES
    for i, s in enumerate(dec):
        h = conv_transpose2d_ref(h, params[f"dec{i}.w"], params[f"dec{i}.b"], s, 1, s - 1)
        if i < len(dec) - 1:
            pre.append(h)
            h = np.maximum(h, 0.0)
    return h, pre


def _random_autoencoder(rng):
    shape = (int(rng.choice([1, 3])), 4, 4)
    channels = tuple(int(c) for c in rng.integers(2, 4, 3))
    ae = models.build_autoencoder(shape, int(rng.integers(2, 6)), channels, int(rng.integers(2**31)))
    x = rng.uniform(0, 1, (2, *shape)).astype(np.float32)
    target = rng.uniform(0, 1, x.shape)

    def taped(p, xt):
        return nc.mse(ae.forward(xt, p), target.astype(np.float32))

    def oracle(params, x64):
        out, pre = _ae_forward_ref(params, ae.arch, x64)
        return np.mean((out - target) ** 2), pre

    return ae, x, taped, oracle


def _randomise_biases(model, rng):
    # zero biases put pre-activations of dead regions exactly on the ReLU kink
    for name, value in model.params.items():
        if name.endswith(".b"):
            model.params[name] = (rng.standard_normal(value.shape) * 0.5).astype(np.float32)


def _gradient_error(model, x, taped, oracle, rng, h=1e-6, directions=3):
    """Worst relative error of autodiff directional derivatives against central differences.

    Returns None when the input sits within reach of a ReLU kink, where
    central differences are not a valid oracle.
    """
    params64 = {k: v.astype(np.float64) for k, v in model.params.items()}
    x64 = x.astype(np.float64)
    _, pre = oracle(params64, x64)
    if min(np.abs(a).min() for a in pre) < 1e-4:
        return None
    p = model.tensors(requires_grad=True)
    xt = nc.Tensor(x, requires_grad=True)
    nc.backward(taped(p, xt))
    grads = {k: t.grad.astype(np.float64) for k, t in p.items()}
    grads["input"] = xt.grad.astype(np.float64)
    worst = 0.0
    for name, g in grads.items():
        for _ in range(directions):
            v = rng.standard_normal(g.shape)

            def loss_at(step):
                if name == "input":
                    return oracle(params64, x64 + step * v)[0]
                shifted = dict(params64)
                shifted[name] = params64[name] + step * v
                return oracle(shifted, x64)[0]

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            ad = float(np.sum(g * v))
            # floor: a directional derivative near zero is judged against the full gradient scale
            scale = max(abs(fd), abs(ad), 1e-3 * np.linalg.norm(g) * np.linalg.norm(v), 1e-12)
            worst = max(worst, abs(ad - fd) / scale)
    return worst


def test_criterion_1_gradient_correctness(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errors, skipped = [], 0
    while len(errors) < 120:
        build = _random_classifier if len(errors) % 2 == 0 else _random_autoencoder
        model, x, taped, oracle = build(rng)
        _randomise_biases(model, rng)
        err = _gradient_error(model, x, taped, oracle, rng)
        if err is None:
            skipped += 1
            continue
        errors.append(err)
    elapsed = time.perf_counter() - start
    worst = max(errors)
    ok = worst < 1e-3 and elapsed < 60
    criterion(1, ok, f"{len(errors)} nets ({skipped} kink rejects), max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. attack norm contracts
# ---------------------------------------------------------------------------

def test_criterion_2_linf_contract(desk, criterion):
    ms = desk["models"]
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    checked = violations = 0
    for kind in ("FGSM", "BIM", "PGD"):
        for chunk in range(4):
            idx = rng.choice(len(ms.test), 84, replace=False)
            x, y = ms.test.images[idx], ms.test.labels[idx]
            eps = float(rng.choice([0.001, 0.005, 0.03, 0.1, 0.3]))
            cfg = attacks.AttackConfig(kind, eps=eps, alpha=eps / 3, iters=5, random_start=True, seed=chunk)
            adv = attacks.run_attack(cfg, ms.target, x, y)
            diff = np.abs(adv.x_mal.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1).max(axis=1)
            in_box = (adv.x_mal >= 0).all(axis=(1, 2, 3)) & (adv.x_mal <= 1).all(axis=(1, 2, 3))
            violations += int(np.sum((diff > eps) | ~in_box))
            checked += len(x)
    elapsed = time.perf_counter() - start
    ok = checked >= 1000 and violations == 0 and elapsed < 120
    criterion(2, ok, f"{checked} samples, {violations} violations, {elapsed:.1f}s")
    assert checked >= 1000 and violations == 0
    assert elapsed < 120


def test_criterion_2_fgsm_l2_on_cifar_shape(criterion):
    clf = models.build_classifier((3, 32, 32), 10, 32, seed=1, channels=(8, 16), strides=(1, 2))
    rng = np.random.default_rng(3)
    x = rng.uniform(0.1, 0.9, (16, 3, 32, 32)).astype(np.float32)
    adv = attacks.fgsm(clf, x, rng.integers(0, 10, 16), eps=0.005)
    l2 = adv.l2()
    ok = np.all(np.abs(l2 - 0.277) <= 1e-3)
    criterion(2, ok, f"FGSM eps=0.005 on 3072 dims: l2 in [{l2.min():.5f}, {l2.max():.5f}] (expected 0.277 +- 1e-3)")
    assert ok


# ---------------------------------------------------------------------------
# 3. BadNet stamp and backdoor training
# ---------------------------------------------------------------------------

def test_criterion_3_badnet(desk, criterion):
    black = np.zeros((1, 3, 16, 16), np.float32)
    trigger = attacks.yellow_box((3, 16, 16), size=2)
    eta = attacks.badnet_apply(black, trigger) - black
    l2 = float(np.sqrt(np.sum(eta.astype(np.float64) ** 2)))
    mm = desk["report"].model_metrics
    drop = mm["target_test_accuracy"] - mm["poisoned_test_accuracy"]
    ok = l2 == math.sqrt(8) and mm["triggered_accuracy"] <= 0.15 and drop <= 0.05
    criterion(
        3, ok,
        f"stamp l2 {l2:.6f}; triggered accuracy {mm['triggered_accuracy']:.3f}; clean drop {100 * drop:.2f} points; "
        f"train {desk['train_s']:.0f}s",
    )
    assert l2 == math.sqrt(8)
    assert mm["triggered_accuracy"] <= 0.15
    assert drop <= 0.05
    assert desk["train_s"] < 600


# ---------------------------------------------------------------------------
# 4. matched-norm protocol
# ---------------------------------------------------------------------------

def test_criterion_4_permutation_multiset(criterion):
    rng = np.random.default_rng(4)
    bad = 0
    for trial in range(10_000):
        shape = (int(rng.integers(1, 4)), 3, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        eta = (rng.standard_normal(shape) * rng.choice([1e-3, 0.05, 1.0])).astype(np.float32)
        perm = metrics.permute_noise(eta, trial)
        same = all(
            np.array_equal(np.sort(a.ravel()).view(np.uint32), np.sort(b.ravel()).view(np.uint32)) for a, b in zip(eta, perm)
        )
        bad += not same
    criterion(4, bad == 0, f"10000 permutations, {bad} multiset mismatches")
    assert bad == 0


def test_criterion_4_magnet_l1_near_chance(desk, criterion):
    cells = [c for c in desk["report"].cells if c.detector == "MAGNET_L1"]
    off = [f"{c.setting}/{c.attack} {c.auroc:.3f}" for c in cells if abs(c.auroc - 0.5) > 0.07]
    values = ", ".join(f"{c.attack}{'(bb)' if c.setting == 'blackbox' else ''} {c.auroc:.3f}" for c in cells)
    criterion(4, not off, f"MagNet(L1) AUROC: {values}")
    assert not off, off


# ---------------------------------------------------------------------------
# 5. detector ordering
# ---------------------------------------------------------------------------

def _ordering_failures(report, setting, attacks_, floor, margin):
    failures, shown = [], []
    for attack in attacks_:
        gmm = report.cell(setting, attack, "GMM").auroc
        best_baseline = max(report.cell(setting, attack, b).auroc for b in BASELINES)
        shown.append(f"{attack} {gmm:.3f}/{best_baseline:.3f}")
        if gmm < floor or gmm - best_baseline < margin:
            failures.append(attack)
    return failures, shown


def test_criterion_5_whitebox_ordering(desk, criterion):
    failures, shown = _ordering_failures(desk["report"], "whitebox", WHITEBOX_MAIN, 0.90, 0.15)
    total = desk["train_s"] + desk["eval_s"]
    criterion(5, not failures and total < 900, f"white-box GMM/best-baseline: {', '.join(shown)}; runtime {total:.0f}s")
    assert not failures, failures
    assert total < 900


def test_criterion_5_blackbox_ordering(desk, criterion):
    failures, shown = _ordering_failures(desk["report"], "blackbox", BLACKBOX_MAIN, 0.75, 0.10)
    criterion(5, not failures, f"black-box GMM/best-baseline: {', '.join(shown)}")
    assert not failures, failures


# ---------------------------------------------------------------------------
# 6. FPR calibration
# ---------------------------------------------------------------------------

def test_criterion_6_calibrated_fpr(desk, criterion):
    cfg = desk["cfg"]
    checked, worst = 0, 0.0
    for stack in desk["report"].stacks.values():
        for name, scores in stack.calibration_scores.items():
            theta = stack.thresholds[name].theta
            false_alarms = sum(1 for s in scores if s > theta)
            assert false_alarms <= math.floor(cfg.max_fpr * len(scores))
            worst = max(worst, false_alarms / len(scores))
            checked += 1
    for cell in desk["report"].cells:
        assert cell.calibration_fpr <= cfg.max_fpr
    criterion(6, worst <= cfg.max_fpr, f"{checked} thresholds, worst calibration FPR {worst:.4f}")


# ---------------------------------------------------------------------------
# 7. metric oracles
# ---------------------------------------------------------------------------

def test_criterion_7_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    auroc_bad = ks_bad = 0
    for _ in range(1000):
        n_ben, n_mal = rng.integers(1, 30, 2)
        # a coarse grid forces ties
        ben = rng.integers(0, 12, n_ben) / 4.0
        mal = rng.integers(0, 12, n_mal) / 4.0 + rng.choice([0.0, 0.5])
        auroc_bad += metrics.auroc(ben, mal) != brute_auroc(ben, mal)
        a, b = rng.standard_normal(rng.integers(2, 25)).round(1), rng.standard_normal(rng.integers(2, 25)).round(1)
        ks_bad += metrics.ks_statistic(a, b) != brute_ks(a, b)
    same = rng.standard_normal((40, 5))
    identical_ok = np.all(metrics.ks_neglogp(same, same.copy()) == 0.0)
    jsd_bad = 0
    for _ in range(10_000):
        k = int(rng.integers(2, 11))
        p, q = rng.dirichlet(np.full(k, 0.3)), rng.dirichlet(np.full(k, 0.3))
        if rng.random() < 0.2:
            p = np.eye(k)[rng.integers(k)]
        value = baselines.jsd(p, q)
        jsd_bad += not (0.0 <= value <= math.log(2))
    ok = auroc_bad == 0 and ks_bad == 0 and identical_ok and jsd_bad == 0
    criterion(
        7, ok,
        f"AUROC mismatches {auroc_bad}/1000, KS mismatches {ks_bad}/1000, identical -log p = 0: {bool(identical_ok)}, "
        f"JSD out of bounds {jsd_bad}/10000",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. EM sanity
# ---------------------------------------------------------------------------

def test_criterion_8_em_sanity(desk, criterion):
    stack = desk["report"].stacks["target"]
    feats = pipeline.extract_noise_features(stack.ae, stack.clf, desk["models"].train.images[:600])
    rng = np.random.default_rng(8)
    decreases = below_floor = 0
    iterations = []
    for seed in range(50):
        if seed % 2 == 0:
            data = feats
        else:
            centres = rng.standard_normal((4, 6)) * 4
            data = centres[rng.integers(0, 4, 400)] + rng.standard_normal((400, 6)) * rng.uniform(0.1, 2.0, 6)
        gmm = pipeline.fit_detector("GMM", data, n_components=10, seed=seed)
        h = gmm.history.log_likelihood
        decreases += sum(1 for a, b in zip(h, h[1:]) if b < a)
        below_floor += int(np.sum(gmm.variances < pipeline.VAR_FLOOR))
        iterations.append(len(h))
    ok = decreases == 0 and below_floor == 0
    criterion(8, ok, f"50 fits ({min(iterations)}-{max(iterations)} iterations): {decreases} decreases, {below_floor} variances below floor")
    assert ok


# ---------------------------------------------------------------------------
# 9. feature separation
# ---------------------------------------------------------------------------

def test_criterion_9_feature_separation(desk, criterion):
    shown, failures = [], []
    for summary in desk["report"].attacks:
        if summary.setting != "whitebox":
            continue
        ratio = summary.ks_mal_mean / max(summary.ks_ben_mean, 1e-12)
        shown.append(f"{summary.attack} {summary.ks_mal_mean:.1f}/{summary.ks_ben_mean:.2f}={ratio:.1f}x")
        if ratio < 5:
            failures.append(summary.attack)
    criterion(9, not failures, "KS -log p mal/ben: " + ", ".join(shown))
    assert not failures, failures


# ---------------------------------------------------------------------------
# 10. end-to-end determinism
# ---------------------------------------------------------------------------

def test_criterion_10_desk_report_is_reproducible(desk, criterion):
    again = experiment.run_experiment(desk["cfg"], desk["models"])
    first = desk["report"]
    same = (first.to_json(), first.to_csv(), first.roc_csv()) == (again.to_json(), again.to_csv(), again.roc_csv())
    criterion(10, same, f"desk eval repeated on the same models: reports byte-identical = {same}")
    assert same


def test_criterion_10_cli_eval_from_scratch(tmp_path, criterion):
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["eval", "--config", str(TINY), "--out", str(out)]) == 0
        outputs.append({name: (out / name).read_bytes() for name in ("report.json", "report.csv", "roc.csv")})
    same = outputs[0] == outputs[1]
    criterion(10, same, f"two `eval` runs including training: byte-identical = {same}")
    assert same


# ---------------------------------------------------------------------------
# desk model contracts (not numbered criteria)
# ---------------------------------------------------------------------------

def test_desk_autoencoder_reconstruction_error(desk):
    ms = desk["models"]
    assert models.reconstruction_mse(ms.ae, ms.test) <= 0.01


def test_desk_reconstruction_noise_tracks_added_noise(desk):
    # the bound needs the added noise to exceed the AE's own error on clean
    # inputs (l2 about 1.3 here), so the amplitude is well above the attack budgets
    ms = desk["models"]
    x = ms.test.images[:250]
    signs = np.random.default_rng(0).choice([-1.0, 1.0], x.shape)
    x_noisy = np.clip(x + 0.12 * signs, 0, 1).astype(np.float32)
    added = (x_noisy.astype(np.float64) - x).reshape(len(x), -1)
    recovered = models.recon_noise(ms.ae, x_noisy).reshape(len(x), -1)
    assert np.all(np.linalg.norm(recovered - added, axis=1) <= np.linalg.norm(added, axis=1))
