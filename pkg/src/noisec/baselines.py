"""Reconstruction-based comparison detectors: L1 residual and JSD of confidences."""

from __future__ import annotations

import numpy as np

from .models import Autoencoder, Classifier, predict, recon_noise, reconstruct

LOG_FLOOR = 1e-12


def magnet_l1(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    """||x - A(x)||_1 per sample."""
    x = np.asarray(x, dtype=np.float32)
    eta = recon_noise(ae, x if x.ndim == 4 else x[None]).astype(np.float64)
    return np.abs(eta).reshape(len(eta), -1).sum(axis=1)


def _kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # terms with p = 0 contribute nothing; the floor only guards the logs
    return np.sum(np.where(p > 0, p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR))), 0.0), axis=-1)


def jsd(p, q) -> np.ndarray:
    """Jensen-Shannon divergence in nats along the last axis, within [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    # averaging both orders makes the result exactly symmetric in (p, q)
    raw = 0.5 * (_kl(p, m) + _kl(q, m))
    return np.clip(raw, 0.0, np.log(2.0))


def magnet_jsd(ae: Autoencoder, clf: Classifier, x: np.ndarray) -> np.ndarray:
    """JSD between the classifier's confidences on x and on A(x)."""
    x = np.asarray(x, dtype=np.float32)
    x = x if x.ndim == 4 else x[None]
    return jsd(predict(clf, x), predict(clf, reconstruct(ae, x)))
