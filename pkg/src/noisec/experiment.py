"""End-to-end evaluation: train, attack, pair, score, report."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from .baselines import magnet_jsd, magnet_l1
from .config import BASELINE_KINDS, ExperimentConfig
from .data import generate_synthetic, import_cifar_bin, load_dataset
from .formats import sha256_hex
from .metrics import auroc, ks_neglogp, matched_norm_benign, prf1_at_threshold, roc_points
from .models import (
    Autoencoder,
    Classifier,
    LabeledDataset,
    TrainConfig,
    accuracy,
    build_classifier,
    checkpoint_bytes,
    features,
    load_checkpoint,
    reconstruction_mse,
    save_checkpoint,
    train_autoencoder,
    train_classifier,
)
from .pipeline import (
    DETECTOR_KINDS,
    Detector,
    Threshold,
    calibrate_threshold,
    extract_noise_features,
    fit_detector,
    split_calibration,
)

log = logging.getLogger(__name__)

SURROGATE_SEED_OFFSET = 1000
AE_SEED_OFFSET = 2000
POISON_SEED_OFFSET = 3000
PAIRING_SEED_OFFSET = 4000
SPLIT_SEED_OFFSET = 5000


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc
    log.info("%s done in %.1fs", name, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.path is None:
        return generate_synthetic(replace(d.synthetic, seed=d.synthetic.seed + cfg.seed))
    reader = import_cifar_bin if d.cifar else load_dataset
    train = reader(d.path, split="train")
    if d.test_path is not None:
        return train, reader(d.test_path, split="test")
    # no separate test file: hold out a seeded fraction
    fit_idx, test_idx = split_calibration(len(train), d.synthetic.test_fraction, cfg.seed)
    return train.subset(fit_idx), train.subset(test_idx)


def _train_config(c, seed: int, sigma: float = 0.0) -> TrainConfig:
    return TrainConfig(
        epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, seed=seed, sigma=sigma,
        optimizer=c.optimizer, momentum=getattr(c, "momentum", 0.0),
    )


def _fresh_classifier(c, train: LabeledDataset, seed: int) -> Classifier:
    return build_classifier(train.image_shape, train.num_classes, c.feature_dim, seed, c.channels, c.strides)


@dataclass
class ModelSet:
    train: LabeledDataset
    test: LabeledDataset
    target: Classifier
    surrogate: Classifier
    ae: Autoencoder
    poisoned: Classifier | None = None
    trigger: atk.Trigger | None = None
    backdoor_target: int = 0

    def named(self) -> dict[str, Classifier | Autoencoder]:
        out = {"target": self.target, "surrogate": self.surrogate, "autoencoder": self.ae}
        if self.poisoned is not None:
            out["poisoned"] = self.poisoned
        return out

    def checksums(self) -> dict[str, str]:
        return {k: sha256_hex(checkpoint_bytes(m)) for k, m in self.named().items()}


def make_trigger(cfg: ExperimentConfig, image_shape) -> atk.Trigger:
    b = cfg.backdoor
    return atk.yellow_box(image_shape, b.trigger_size, b.corner)


def train_models(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset) -> ModelSet:
    s = cfg.seed
    with stage("train:target"):
        target = _fresh_classifier(cfg.classifier, train, s)
        train_classifier(target, train, _train_config(cfg.classifier, s))
    with stage("train:surrogate"):
        surrogate = _fresh_classifier(cfg.surrogate, train, s + SURROGATE_SEED_OFFSET)
        train_classifier(surrogate, train, _train_config(cfg.surrogate, s + SURROGATE_SEED_OFFSET))
    with stage("train:autoencoder"):
        a = cfg.autoencoder
        ae, _ = train_autoencoder(train, _train_config(a, s + AE_SEED_OFFSET, a.sigma), channels=a.channels, bottleneck=a.bottleneck)
    poisoned = trigger = None
    if "BADNET" in cfg.whitebox:
        with stage("train:poisoned"):
            trigger = make_trigger(cfg, train.image_shape)
            dirty = atk.badnet_poison(train, trigger, cfg.backdoor.target_class, cfg.backdoor.poison_rate, s + POISON_SEED_OFFSET)
            # the unpoisoned twin is the target: same architecture, init seed and schedule
            poisoned = _fresh_classifier(cfg.classifier, train, s)
            train_classifier(poisoned, dirty, _train_config(cfg.classifier, s))
    return ModelSet(train, test, target, surrogate, ae, poisoned, trigger, cfg.backdoor.target_class)


CHECKPOINT_DIR = "models"


def save_models(ms: ModelSet, out_dir, config_hash: str) -> dict[str, Path]:
    root = Path(out_dir) / CHECKPOINT_DIR
    root.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, model in ms.named().items():
        paths[name] = root / f"{name}.nsck"
        save_checkpoint(model, paths[name], config_hash)
    return paths


def load_models(cfg: ExperimentConfig, out_dir, train: LabeledDataset, test: LabeledDataset) -> ModelSet:
    """Reload checkpoints written by ``save_models``; FileNotFoundError if any is missing."""
    root = Path(out_dir) / CHECKPOINT_DIR
    names = ["target", "surrogate", "autoencoder"] + (["poisoned"] if "BADNET" in cfg.whitebox else [])
    loaded = {}
    for name in names:
        path = root / f"{name}.nsck"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}; run `train` first")
        loaded[name] = load_checkpoint(path)
    trigger = make_trigger(cfg, train.image_shape) if "poisoned" in loaded else None
    return ModelSet(train, test, loaded["target"], loaded["surrogate"], loaded["autoencoder"], loaded.get("poisoned"), trigger, cfg.backdoor.target_class)


# ---------------------------------------------------------------------------
# detection stacks
# ---------------------------------------------------------------------------

@dataclass
class DetectionStack:
    """AE + feature extractor + fitted detectors and their calibrated thresholds."""

    ae: Autoencoder
    clf: Classifier
    detectors: dict[str, Detector | None]
    thresholds: dict[str, Threshold] = field(default_factory=dict)
    calibration_scores: dict[str, np.ndarray] = field(default_factory=dict)

    def scores(self, x: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        feats = None
        for name, det in self.detectors.items():
            if name == "MAGNET_L1":
                out[name] = magnet_l1(self.ae, x)
            elif name == "MAGNET_JSD":
                out[name] = magnet_jsd(self.ae, self.clf, x)
            else:
                if feats is None:
                    feats = extract_noise_features(self.ae, self.clf, x)
                out[name] = det.score(feats)
        return out


def fit_stack(cfg: ExperimentConfig, ae: Autoencoder, clf: Classifier, benign: np.ndarray) -> DetectionStack:
    fit_idx, cal_idx = split_calibration(len(benign), cfg.calibration_fraction, cfg.seed + SPLIT_SEED_OFFSET)
    feats = extract_noise_features(ae, clf, benign[fit_idx])
    detectors: dict[str, Detector | None] = {}
    for name in cfg.detectors:
        if name in DETECTOR_KINDS:
            detectors[name] = fit_detector(name, feats, k=cfg.knn_k, n_components=cfg.gmm_components, seed=cfg.seed)
        else:
            detectors[name] = None
    stack = DetectionStack(ae, clf, detectors)
    stack.calibration_scores = stack.scores(benign[cal_idx])
    stack.thresholds = {k: calibrate_threshold(v, cfg.max_fpr) for k, v in stack.calibration_scores.items()}
    return stack


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    setting: str
    attack: str
    detector: str
    auroc: float
    precision: float
    recall: float
    f1: float
    fpr: float
    threshold: float
    calibration_fpr: float
    n_calibration: int


@dataclass
class AttackSummary:
    setting: str
    attack: str
    samples: int
    success_rate: float
    mean_l2: float
    mean_linf: float
    mean_benign_l2_clipped: float
    ks_mal_mean: float
    ks_ben_mean: float


@dataclass
class EvalReport:
    config_hash: str
    config: dict
    checksums: dict[str, str]
    model_metrics: dict[str, float]
    cells: list[CellResult] = field(default_factory=list)
    attacks: list[AttackSummary] = field(default_factory=list)
    ks: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    roc: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    # in-memory audit trail, not serialised
    stacks: dict[str, DetectionStack] = field(default_factory=dict, repr=False)
    scores: dict[str, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def cell(self, setting: str, attack: str, detector: str) -> CellResult:
        for c in self.cells:
            if (c.setting, c.attack, c.detector) == (setting, attack, detector):
                return c
        raise KeyError((setting, attack, detector))

    def summary(self, setting: str, attack: str) -> AttackSummary:
        for a in self.attacks:
            if (a.setting, a.attack) == (setting, attack):
                return a
        raise KeyError((setting, attack))

    def to_json(self) -> str:
        doc = {
            "config_hash": self.config_hash,
            "config": self.config,
            "checksums": self.checksums,
            "model_metrics": self.model_metrics,
            "cells": [asdict(c) for c in self.cells],
            "attacks": [asdict(a) for a in self.attacks],
            "ks_neglogp": self.ks,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "attack", "detector", "metric", "value", "config_hash"])
        for c in self.cells:
            for metric in ("auroc", "precision", "recall", "f1", "fpr", "threshold", "calibration_fpr"):
                w.writerow([c.setting, c.attack, c.detector, metric, repr(float(getattr(c, metric))), self.config_hash])
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "attack", "detector", "threshold", "fpr", "tpr", "config_hash"])
        for key in sorted(self.roc):
            setting, attack, detector = key.split("/")
            for t, f, r in self.roc[key]:
                w.writerow([setting, attack, detector, repr(t), repr(f), repr(r), self.config_hash])
        return buf.getvalue()

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "report.json", "csv": out / "report.csv", "roc": out / "roc.csv"}
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.to_csv())
        paths["roc"].write_text(self.roc_csv())
        return paths


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def select_sources(models: list[Classifier], data: LabeledDataset, n: int, seed: int, exclude_label: int | None = None) -> np.ndarray:
    """Seeded choice of test samples that every listed model classifies correctly."""
    ok = np.ones(len(data), bool)
    for m in models:
        ok &= m.infer(data.images)[0].argmax(axis=1) == data.labels
    if exclude_label is not None:
        ok &= data.labels != exclude_label
    idx = np.flatnonzero(ok)
    idx = idx[np.random.default_rng(seed).permutation(idx.size)][:n]
    if idx.size < 2:
        raise ValueError("fewer than two correctly classified source samples")
    return np.sort(idx)


def _attack_config(cfg: ExperimentConfig, kind: str) -> atk.AttackConfig:
    a = cfg.attacks[kind]
    return replace(a, seed=a.seed + cfg.seed)


def evaluate_pairs(
    report: EvalReport,
    cfg: ExperimentConfig,
    setting: str,
    stack: DetectionStack,
    mal: atk.MaliciousSample,
    x_nat: np.ndarray,
    pairing_seed: int,
) -> None:
    x_ben = matched_norm_benign(x_nat, mal.eta, pairing_seed)
    s_ben, s_mal = stack.scores(x_ben), stack.scores(mal.x_mal)
    report.scores[f"{setting}/{mal.kind}"] = {"benign": s_ben, "malicious": s_mal}
    for name in stack.detectors:
        thr = stack.thresholds[name]
        rates = prf1_at_threshold(s_ben[name], s_mal[name], thr.theta)
        cal_fp = int(np.sum(stack.calibration_scores[name] > thr.theta))
        report.cells.append(
            CellResult(
                setting, mal.kind, name, auroc(s_ben[name], s_mal[name]),
                rates.precision, rates.recall, rates.f1, rates.fpr,
                thr.theta, cal_fp / thr.n_calibration, thr.n_calibration,
            )
        )
        report.roc[f"{setting}/{mal.kind}/{name}"] = roc_points(s_ben[name], s_mal[name])
    t_nat = extract_noise_features(stack.ae, stack.clf, x_nat)
    ks_mal = ks_neglogp(extract_noise_features(stack.ae, stack.clf, mal.x_mal), t_nat)
    ks_ben = ks_neglogp(extract_noise_features(stack.ae, stack.clf, x_ben), t_nat)
    report.ks[f"{setting}/{mal.kind}"] = {"malicious": ks_mal.tolist(), "benign": ks_ben.tolist()}
    ben_l2 = np.sqrt(np.sum((x_ben.astype(np.float64) - x_nat).reshape(len(x_nat), -1) ** 2, axis=1))
    report.attacks.append(
        AttackSummary(
            setting, mal.kind, len(mal), float(np.mean(mal.success)), float(np.mean(mal.l2())),
            float(np.mean(mal.linf())), float(np.mean(ben_l2)), float(ks_mal.mean()), float(ks_ben.mean()),
        )
    )


def model_metrics(ms: ModelSet) -> dict[str, float]:
    out = {
        "target_test_accuracy": accuracy(ms.target, ms.test),
        "surrogate_test_accuracy": accuracy(ms.surrogate, ms.test),
        "autoencoder_test_mse": reconstruction_mse(ms.ae, ms.test),
    }
    if ms.poisoned is not None:
        out["poisoned_test_accuracy"] = accuracy(ms.poisoned, ms.test)
        out.update(backdoor_metrics(ms.poisoned, ms.test, ms.trigger, ms.backdoor_target))
    return out


def backdoor_metrics(model: Classifier, test: LabeledDataset, trigger: atk.Trigger, target_class: int) -> dict[str, float]:
    """Accuracy on triggered non-target test samples and the rate at which they hit the target class."""
    keep = test.labels != target_class
    pred = model.infer(atk.badnet_apply(test.images[keep], trigger))[0].argmax(axis=1)
    return {
        "triggered_accuracy": float(np.mean(pred == test.labels[keep])),
        "attack_success_rate": float(np.mean(pred == target_class)),
    }


def run_experiment(cfg: ExperimentConfig, models: ModelSet | None = None) -> EvalReport:
    """Full white-box and black-box evaluation; deterministic given the config."""
    if models is None:
        with stage("data"):
            train, test = load_data(cfg)
        models = train_models(cfg, train, test)
    ms = models
    with stage("metrics:models"):
        # the output directory is not part of the experiment, as in the config hash
        echo = {k: v for k, v in json.loads(json.dumps(cfg.to_dict())).items() if k != "out"}
        report = EvalReport(cfg.hash(), echo, ms.checksums(), model_metrics(ms))

    benign_pool = ms.train.images[: cfg.detector_train_samples]
    with stage("fit:target"):
        target_stack = fit_stack(cfg, ms.ae, ms.target, benign_pool)
    report.stacks["target"] = target_stack
    with stage("select"):
        src = select_sources([ms.target, ms.surrogate], ms.test, cfg.attack_samples, cfg.seed)
    x_nat, y = ms.test.images[src], ms.test.labels[src]
    uap_pool = ms.train.images

    for setting, kinds, generator in (("whitebox", cfg.whitebox, ms.target), ("blackbox", cfg.blackbox, ms.surrogate)):
        for i, kind in enumerate(kinds):
            acfg = _attack_config(cfg, kind)
            pairing_seed = cfg.seed + PAIRING_SEED_OFFSET + i
            if kind == "BADNET":
                with stage("fit:poisoned"):
                    stack = fit_stack(cfg, ms.ae, ms.poisoned, benign_pool)
                report.stacks["poisoned"] = stack
                with stage("select:badnet"):
                    bsrc = select_sources([ms.poisoned], ms.test, cfg.attack_samples, cfg.seed, cfg.backdoor.target_class)
                with stage(f"{setting}:attack:{kind}"):
                    mal = atk.run_attack(acfg, ms.poisoned, ms.test.images[bsrc], ms.test.labels[bsrc], trigger=ms.trigger)
                    mal.source_index = bsrc
                with stage(f"{setting}:score:{kind}"):
                    evaluate_pairs(report, cfg, setting, stack, mal, ms.test.images[bsrc], pairing_seed)
                continue
            with stage(f"{setting}:attack:{kind}"):
                mal = atk.run_attack(acfg, generator, x_nat, y, scorer=ms.target, fit_images=uap_pool)
                mal.source_index = src
            with stage(f"{setting}:score:{kind}"):
                evaluate_pairs(report, cfg, setting, target_stack, mal, x_nat, pairing_seed)
    return report
