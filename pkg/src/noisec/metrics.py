"""Detection metrics and the matched-norm benign control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

P_FLOOR = 1e-300
KS_TERMS = 100


def matched_norm_benign(x_nat: np.ndarray, eta_mal: np.ndarray, seed: int) -> np.ndarray:
    """Benign control with the same perturbation entries in random positions.

    Returns ``clip(x_nat + permute(eta_mal))``; before clipping every p-norm of
    the benign perturbation equals that of ``eta_mal``. A 4-d input is a batch
    and each sample's entries are permuted among themselves.
    """
    x_nat = np.asarray(x_nat, dtype=np.float32)
    eta_mal = np.asarray(eta_mal, dtype=np.float32)
    if x_nat.shape != eta_mal.shape:
        raise ValueError(f"shape mismatch {x_nat.shape} vs {eta_mal.shape}")
    return np.clip(x_nat + permute_noise(eta_mal, seed), 0.0, 1.0)


def permute_noise(eta: np.ndarray, seed: int) -> np.ndarray:
    """Uniform random permutation of the entries of each sample."""
    eta = np.asarray(eta)
    rng = np.random.default_rng(seed)
    if eta.ndim < 4:
        flat = eta.reshape(-1)
        return flat[rng.permutation(flat.size)].reshape(eta.shape)
    rows = eta.reshape(len(eta), -1)
    out = np.empty_like(rows)
    for i, row in enumerate(rows):
        out[i] = row[rng.permutation(row.size)]
    return out.reshape(eta.shape)


def auroc(benign_scores, malicious_scores) -> float:
    """P(s_mal > s_ben) + 0.5 * P(s_mal == s_ben) over all pairs."""
    ben = np.sort(np.asarray(benign_scores, dtype=np.float64).ravel())
    mal = np.asarray(malicious_scores, dtype=np.float64).ravel()
    if not ben.size or not mal.size:
        raise ValueError("auroc needs non-empty score sets")
    below = np.searchsorted(ben, mal, side="left")
    not_above = np.searchsorted(ben, mal, side="right")
    # twice the Mann-Whitney U, kept integral so the result is exact
    twice_u = int(np.sum(2 * below + (not_above - below)))
    return twice_u / (2 * ben.size * mal.size)


def roc_points(benign_scores, malicious_scores) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) for every distinct threshold, verdict ``score > threshold``."""
    ben = np.asarray(benign_scores, dtype=np.float64).ravel()
    mal = np.asarray(malicious_scores, dtype=np.float64).ravel()
    thresholds = np.unique(np.concatenate([ben, mal]))
    ben_sorted, mal_sorted = np.sort(ben), np.sort(mal)
    fpr = (ben.size - np.searchsorted(ben_sorted, thresholds, side="right")) / ben.size
    tpr = (mal.size - np.searchsorted(mal_sorted, thresholds, side="right")) / mal.size
    pts = [(-math.inf, 1.0, 1.0)]
    pts += [(float(t), float(f), float(r)) for t, f, r in zip(thresholds, fpr, tpr)]
    return pts


def ks_statistic(a, b) -> float:
    """Two-sample KS statistic max |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_sf(lam: float, terms: int = KS_TERMS) -> float:
    """Survival function of the Kolmogorov distribution, Q(lam) = P(K > lam)."""
    if lam <= 0.0:
        return 1.0
    if lam < 1.0:
        # Jacobi-theta form converges quickly for small arguments
        s = sum(math.exp(-((2 * j - 1) ** 2) * math.pi**2 / (8 * lam * lam)) for j in range(1, terms + 1))
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    s = sum((-1) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam) for j in range(1, terms + 1))
    return min(1.0, max(0.0, 2.0 * s))


def ks_pvalue(d: float, n_a: int, n_b: int) -> float:
    ne = n_a * n_b / (n_a + n_b)
    sq = math.sqrt(ne)
    return kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d)


def ks_neglogp(sample_a: np.ndarray, sample_b: np.ndarray) -> np.ndarray:
    """Per-feature -ln p of the two-sample KS test.

    Inputs are (n_a, d) and (n_b, d); p is floored at 1e-300.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2 or a.shape[1] != b.shape[1]:
        raise ValueError("ks_neglogp needs >= 2 points per sample and matching feature counts")
    out = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        d = ks_statistic(a[:, j], b[:, j])
        out[j] = -math.log(max(ks_pvalue(d, a.shape[0], b.shape[0]), P_FLOOR))
    return out + 0.0  # normalise -0.0


@dataclass(frozen=True)
class DetectionRates:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    fpr: float


def prf1_at_threshold(benign_scores, malicious_scores, theta: float) -> DetectionRates:
    """Counts and rates for the verdict rule ``score > theta``."""
    if not math.isfinite(theta):
        raise ValueError("threshold must be finite")
    ben = np.asarray(benign_scores, dtype=np.float64)
    mal = np.asarray(malicious_scores, dtype=np.float64)
    tp = int(np.sum(mal > theta))
    fn = mal.size - tp
    fp = int(np.sum(ben > theta))
    tn = ben.size - fp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return DetectionRates(tp, fp, tn, fn, precision, recall, f1, fpr)
