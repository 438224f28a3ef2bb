"""Noise-feature detector: reconstruction noise -> penultimate features ->
anomaly score -> FPR-calibrated verdict."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .formats import FormatError, Reader, decode_nsck, encode_nsck, frame, unframe
from .models import Autoencoder, Classifier, features, model_from_entries, recon_noise

DETECTOR_KINDS = ("KNN", "GMM", "MAX", "STD")
VAR_FLOOR = 1e-6
EM_TOL = 1e-5
EM_MAX_ITER = 200
EM_RESTARTS = 5


class NotFittedError(RuntimeError):
    pass


class DegenerateFitError(RuntimeError):
    pass


def extract_noise_features(ae: Autoencoder, clf: Classifier, x: np.ndarray) -> np.ndarray:
    """tau = F(x - A(x))."""
    return features(clf, recon_noise(ae, x))


# ---------------------------------------------------------------------------
# detectors
# ---------------------------------------------------------------------------

class Detector:
    kind = ""

    def fit(self, feats: np.ndarray) -> "Detector":
        return self

    def score(self, feats: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {}


class MaxDetector(Detector):
    kind = "MAX"

    def score(self, feats):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        return feats.max(axis=1)


class StdDetector(Detector):
    kind = "STD"

    def score(self, feats):
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        return feats.std(axis=1)


class KNNDetector(Detector):
    """Distance to the k-th nearest stored benign feature (self included)."""

    kind = "KNN"

    def __init__(self, k: int = 5):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.train: np.ndarray | None = None

    def fit(self, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if len(feats) < self.k + 1:
            raise ValueError(f"KNN needs at least k+1 = {self.k + 1} benign points")
        self.train = feats
        return self

    def score(self, feats):
        if self.train is None:
            raise NotFittedError("KNN detector is not fitted")
        q = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if q.shape[1] != self.train.shape[1]:
            raise ValueError("feature length mismatch")
        out = np.empty(len(q))
        for start in range(0, len(q), 64):
            block = q[start : start + 64]
            diff = block[:, None, :] - self.train[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            out[start : start + 64] = np.partition(dist, self.k - 1, axis=1)[:, self.k - 1]
        return out

    def state(self):
        return {"train": self.train, "k": np.array([self.k], np.float64)}


@dataclass
class GMMFit:
    log_likelihood: list[float] = field(default_factory=list)
    restarts: int = 0
    converged: bool = False


class GMMDetector(Detector):
    """Diagonal-covariance Gaussian mixture; score = negative log-likelihood."""

    kind = "GMM"

    def __init__(self, n_components: int = 10, seed: int = 0, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER):
        self.n_components = n_components
        self.seed = seed
        self.tol = tol
        self.max_iter = max_iter
        self.weights = self.means = self.variances = None
        self.history = GMMFit()

    def _log_joint(self, x: np.ndarray, weights, means, variances) -> np.ndarray:
        # (n, K): log pi_k + log N(x | mu_k, diag var_k)
        d = x.shape[1]
        inv = 1.0 / variances
        maha = (x * x) @ inv.T - 2.0 * x @ (means * inv).T + np.sum(means * means * inv, axis=1)
        logdet = np.sum(np.log(variances), axis=1)
        return np.log(weights) - 0.5 * (d * math.log(2 * math.pi) + logdet + maha)

    @staticmethod
    def _logsumexp(a: np.ndarray) -> np.ndarray:
        m = a.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]

    def _m_step(self, x: np.ndarray, resp: np.ndarray):
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-3):
            raise DegenerateFitError("mixture component collapsed")
        weights = nk / nk.sum()
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ (x * x)) / nk[:, None] - means * means
        return weights, means, np.maximum(variances, VAR_FLOOR)

    def _fit_once(self, x: np.ndarray, rng: np.random.Generator) -> list[float]:
        n, k = len(x), self.n_components
        centers = x[rng.choice(n, size=k, replace=False)]
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=-1)
        resp = np.zeros((n, k))
        resp[np.arange(n), d2.argmin(axis=1)] = 1.0
        # unassigned centres still own their own seed point
        for j in range(k):
            if resp[:, j].sum() == 0:
                raise DegenerateFitError("empty initial cluster")
        params = self._m_step(x, resp)
        history: list[float] = []
        for _ in range(self.max_iter):
            lj = self._log_joint(x, *params)
            ll = self._logsumexp(lj)
            history.append(float(ll.mean()))
            if len(history) > 1:
                if history[-1] < history[-2] - 1e-9 * abs(history[-2]):
                    raise AssertionError(f"EM log-likelihood decreased: {history[-2]} -> {history[-1]}")
                if history[-1] - history[-2] < self.tol:
                    self.history.converged = True
                    break
            resp = np.exp(lj - ll[:, None])
            params = self._m_step(x, resp)
        self.weights, self.means, self.variances = params
        return history

    def fit(self, feats):
        x = np.asarray(feats, dtype=np.float64)
        if len(x) < max(self.n_components, 10):
            raise ValueError(f"GMM needs at least {max(self.n_components, 10)} benign points")
        # distinct points are needed for distinct initial centres
        if len(np.unique(x, axis=0)) < self.n_components:
            raise DegenerateFitError("fewer distinct points than mixture components")
        self.history = GMMFit()
        for attempt in range(EM_RESTARTS + 1):
            rng = np.random.default_rng([self.seed, attempt])
            try:
                self.history.log_likelihood = self._fit_once(x, rng)
                self.history.restarts = attempt
                return self
            except DegenerateFitError:
                continue
        raise DegenerateFitError(f"EM failed after {EM_RESTARTS} restarts")

    def score_samples(self, feats) -> np.ndarray:
        if self.weights is None:
            raise NotFittedError("GMM detector is not fitted")
        x = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if x.shape[1] != self.means.shape[1]:
            raise ValueError("feature length mismatch")
        return self._logsumexp(self._log_joint(x, self.weights, self.means, self.variances))

    def score(self, feats):
        return -self.score_samples(feats)

    def state(self):
        return {"weights": self.weights, "means": self.means, "variances": self.variances}


def make_detector(kind: str, k: int = 5, n_components: int = 10, seed: int = 0) -> Detector:
    kind = kind.upper()
    if kind == "KNN":
        return KNNDetector(k)
    if kind == "GMM":
        return GMMDetector(n_components, seed)
    if kind == "MAX":
        return MaxDetector()
    if kind == "STD":
        return StdDetector()
    raise ValueError(f"unknown detector kind {kind!r}")


def fit_detector(kind: str, benign_features: np.ndarray, **kwargs) -> Detector:
    return make_detector(kind, **kwargs).fit(benign_features)


def score(detector: Detector, feats: np.ndarray) -> np.ndarray:
    return detector.score(feats)


# ---------------------------------------------------------------------------
# threshold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Threshold:
    theta: float
    max_fpr: float
    n_calibration: int


def calibrate_threshold(benign_scores, max_fpr: float) -> Threshold:
    """Smallest calibration score theta with fraction(scores > theta) <= max_fpr."""
    s = np.sort(np.asarray(benign_scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise ValueError("no calibration scores")
    if not 0.0 < max_fpr < 1.0:
        raise ValueError("max_fpr must lie in (0, 1)")
    allowed = int(math.floor(max_fpr * n))
    while (allowed + 1) / n <= max_fpr:
        allowed += 1
    while allowed and allowed / n > max_fpr:
        allowed -= 1
    return Threshold(float(s[n - 1 - allowed]), max_fpr, n)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class NoiSecBundle:
    ae: Autoencoder
    classifier: Classifier
    detector: Detector
    threshold: Threshold

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.detector.score(extract_noise_features(self.ae, self.classifier, x))


@dataclass(frozen=True)
class Verdict:
    score: float
    malicious: bool

    @property
    def label(self) -> str:
        return "malicious" if self.malicious else "benign"


def detect(bundle: NoiSecBundle, x: np.ndarray) -> list[Verdict]:
    x = np.asarray(x, dtype=np.float32)
    scores = bundle.scores(x if x.ndim == 4 else x[None])
    return [Verdict(float(s), bool(s > bundle.threshold.theta)) for s in scores]


def split_calibration(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (fit, calibration) index sets."""
    perm = np.random.default_rng(seed).permutation(n)
    n_cal = max(1, int(round(n * fraction)))
    return np.sort(perm[n_cal:]), np.sort(perm[:n_cal])


def build_bundle(
    ae: Autoencoder,
    clf: Classifier,
    benign_images: np.ndarray,
    kind: str,
    max_fpr: float = 0.01,
    calibration_fraction: float = 0.2,
    seed: int = 0,
    **detector_kwargs,
) -> NoiSecBundle:
    """Training phase: fit the detector on benign noise features and calibrate on a held-out split."""
    feats = extract_noise_features(ae, clf, benign_images)
    fit_idx, cal_idx = split_calibration(len(feats), calibration_fraction, seed)
    det = fit_detector(kind, feats[fit_idx], **detector_kwargs)
    thr = calibrate_threshold(det.score(feats[cal_idx]), max_fpr)
    return NoiSecBundle(ae, clf, det, thr)


def detector_bytes(det: Detector) -> bytes:
    tag = det.kind.encode("ascii")
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in det.state().items()}
    if isinstance(det, GMMDetector):
        # float32 would perturb the fitted mixture; keep exact copies alongside
        arrays = {}
        for k, v in det.state().items():
            arrays[k + ".hi"] = v.astype(np.float32)
            arrays[k + ".lo"] = (v - v.astype(np.float32).astype(np.float64)).astype(np.float32)
    return struct.pack("<I", len(tag)) + tag + encode_nsck(arrays)


def detector_from_bytes(buf: bytes, start: int, end: int) -> Detector:
    r = Reader(buf, start, end)
    kind = r.take(r.u32()).decode("ascii")
    entries, _ = decode_nsck(buf, r.pos, end)
    det = make_detector(kind)
    if isinstance(det, KNNDetector):
        det.k = int(entries["k"][0])
        det.train = entries["train"].astype(np.float64)
    elif isinstance(det, GMMDetector):
        joined = {k[:-3]: entries[k].astype(np.float64) + entries[k[:-3] + ".lo"].astype(np.float64) for k in entries if k.endswith(".hi")}
        det.weights, det.means, det.variances = joined["weights"], joined["means"], joined["variances"]
        det.n_components = len(det.weights)
    return det


BUNDLE_MAGIC = b"NSBD"


def bundle_bytes(bundle: NoiSecBundle, config_hash: str | None = None) -> bytes:
    from .models import checkpoint_bytes

    t = bundle.threshold
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<I", 1),
        frame(checkpoint_bytes(bundle.ae, config_hash)),
        frame(checkpoint_bytes(bundle.classifier, config_hash)),
        frame(detector_bytes(bundle.detector)),
        frame(struct.pack("<ddI", t.theta, t.max_fpr, t.n_calibration)),
    ]
    return b"".join(parts)


def bundle_from_bytes(buf: bytes) -> NoiSecBundle:
    r = Reader(buf)
    if r.take(4) != BUNDLE_MAGIC:
        raise FormatError("bad magic: not a detector bundle")
    if r.u32() != 1:
        raise FormatError("unsupported bundle version")
    sections = [unframe(r) for _ in range(4)]
    ae = model_from_entries(decode_nsck(buf, *sections[0])[0])
    clf = model_from_entries(decode_nsck(buf, *sections[1])[0])
    if not isinstance(ae, Autoencoder) or not isinstance(clf, Classifier):
        raise FormatError("bundle sections hold the wrong model kinds")
    det = detector_from_bytes(buf, *sections[2])
    theta, max_fpr, n_cal = struct.unpack("<ddI", buf[sections[3][0] : sections[3][1]])
    return NoiSecBundle(ae, clf, det, Threshold(theta, max_fpr, n_cal))
