"""Adversarial and backdoor attacks against a taped classifier.

Every attack works on a batch ``x`` of shape (n, C, H, W) with pixels in
[0, 1]. A model is anything whose ``forward(x)`` returns logits or a
``(logits, features)`` pair of taped tensors.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import numcore as nc
from .formats import FormatError, Reader, decode_tensor, encode_tensor
from .models import LabeledDataset

ATTACK_KINDS = ("FGSM", "BIM", "PGD", "JSMA", "UAP", "CW", "BADNET")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    kind: str
    eps: float = 0.005
    alpha: float = 0.01
    iters: int = 10
    random_start: bool = False
    theta: float = 0.25
    gamma: float = 0.20
    c: float = 0.01
    kappa: float = 10.0
    norm: str = "L2"
    steps: int = 100
    lr: float = 0.01
    uap_step: float = 12.5
    uap_iters: int = 50
    uap_budget: float = 2.0
    uap_inner: str = "deepfool"
    uap_fit_samples: int = 200
    uap_target_rate: float = 0.8
    poison_rate: float = 0.1
    target_class: int = 0
    trigger_size: int = 2
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.kind in ("BIM", "PGD") and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.iters < 0 or self.steps < 0 or self.uap_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.kappa < 0 or self.c < 0:
            raise ValueError("kappa and c must be >= 0")
        if self.norm != "L2":
            raise ValueError("only the L2 norm is supported for CW")
        if self.uap_inner != "deepfool":
            raise ValueError("only the deepfool inner step is supported for UAP")
        if not 0.0 < self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in (0, 1]")


@dataclass
class MaliciousSample:
    """Attack output for a batch; every field has the batch on axis 0."""

    x_mal: np.ndarray
    eta: np.ndarray
    source_index: np.ndarray
    kind: str
    success: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def __len__(self) -> int:
        return len(self.x_mal)

    @property
    def x_nat(self) -> np.ndarray:
        return self.x_mal - self.eta

    def l2(self) -> np.ndarray:
        return np.sqrt(np.sum(self.eta.astype(np.float64).reshape(len(self), -1) ** 2, axis=1))

    def linf(self) -> np.ndarray:
        return np.abs(self.eta).reshape(len(self), -1).max(axis=1)


def _logits(model, x) -> nc.Tensor:
    out = model.forward(x)
    return out[0] if isinstance(out, tuple) else out


def model_labels(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate(
        [_logits(model, x[i : i + batch_size]).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
    )


def _pack(model_or_scorer, x: np.ndarray, x_mal: np.ndarray, y: np.ndarray, kind: str, index=None) -> MaliciousSample:
    x_mal = x_mal.astype(np.float32)
    index = np.arange(len(x)) if index is None else np.asarray(index)
    success = model_labels(model_or_scorer, x_mal) != y
    return MaliciousSample(x_mal, x_mal - x, index, kind, success)


def _input_grad(model, x: np.ndarray, loss_fn) -> tuple[np.ndarray, np.ndarray]:
    """(d loss / d x, logits) for a batch."""
    xt = nc.Tensor(x, requires_grad=True)
    logits = _logits(model, xt)
    loss = loss_fn(logits)
    if not loss.requires_grad:
        raise AttackError("gradient unavailable: the model output is not taped to its input")
    nc.backward(loss)
    if xt.grad is None:
        raise AttackError("gradient unavailable: the model output is not taped to its input")
    return xt.grad, logits.data


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the summed cross-entropy, so samples do not interact."""
    return _input_grad(model, x, lambda z: nc.cross_entropy(z, y, reduction="sum"))[0]


def _check_box(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError("expected a batch of shape (n, C, H, W)")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("inputs must lie in [0, 1]")
    return x


def project_linf(x: np.ndarray, candidate: np.ndarray, eps: float) -> np.ndarray:
    """Float32 point of the eps-ball around x intersected with [0, 1].

    The result satisfies |out - x| <= eps in exact arithmetic, so the bound
    survives any later float32 or float64 subtraction.
    """
    x32 = np.asarray(x, dtype=np.float32)
    x64 = x32.astype(np.float64)
    cand = np.clip(np.asarray(candidate, dtype=np.float64), x64 - eps, x64 + eps)
    out = np.clip(cand, 0.0, 1.0).astype(np.float32)
    while True:
        diff = out.astype(np.float64) - x64
        bad = np.abs(diff) > eps
        if not bad.any():
            return out
        # a single step back towards x undoes a round-to-nearest overshoot
        out[bad] = np.nextafter(out[bad], x32[bad])


def _sign64(g: np.ndarray) -> np.ndarray:
    # float64 so eps * sign lands exactly on the projection bound
    return nc.sign(g).astype(np.float64)


def fgsm(model, x, y_true, eps: float, scorer=None) -> MaliciousSample:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = _check_box(x)
    y = np.asarray(y_true)
    g = loss_gradient(model, x, y)
    x_adv = project_linf(x, x.astype(np.float64) + eps * _sign64(g), eps)
    return _pack(scorer or model, x, x_adv, y, "FGSM")


def _iterative(model, x, y, eps, alpha, iters, start, kind, scorer) -> MaliciousSample:
    if eps < 0 or alpha <= 0 or iters < 0:
        raise ValueError("need eps >= 0, alpha > 0 and iters >= 0")
    x_adv = start
    for _ in range(iters):
        g = loss_gradient(model, x_adv, y)
        x_adv = project_linf(x, x_adv.astype(np.float64) + alpha * _sign64(g), eps)
    return _pack(scorer or model, x, x_adv, y, kind)


def bim(model, x, y_true, eps: float, alpha: float, iters: int, scorer=None) -> MaliciousSample:
    x = _check_box(x)
    return _iterative(model, x, np.asarray(y_true), eps, alpha, iters, x, "BIM", scorer)


def pgd(
    model, x, y_true, eps: float, alpha: float, iters: int, random_start: bool = False, seed: int = 0, scorer=None
) -> MaliciousSample:
    x = _check_box(x)
    start = x
    if random_start:
        rng = np.random.default_rng(seed)
        start = project_linf(x, x + rng.uniform(-eps, eps, x.shape), eps)
    return _iterative(model, x, np.asarray(y_true), eps, alpha, iters, start, "PGD", scorer)


def target_classes(y: np.ndarray, num_classes: int) -> np.ndarray:
    return (np.asarray(y) + 1) % num_classes


def jacobian(model, x: np.ndarray) -> np.ndarray:
    """d logits / d x as (n, K, *x.shape[1:]), one taped pass over K replicas."""
    n = len(x)
    k = _logits(model, x[:1]).shape[1]
    rep = np.repeat(x, k, axis=0)
    sel = np.tile(np.eye(k, dtype=np.float32), (n, 1))
    g, _ = _input_grad(model, rep, lambda z: nc.sum(nc.mul(z, nc.Tensor(sel))))
    return g.reshape(n, k, *x.shape[1:])


def jsma_saliency(grad_target: np.ndarray, grad_others: np.ndarray, increase: bool = True) -> np.ndarray:
    """Single-feature saliency, zero wherever the sign gate rejects a feature."""
    if increase:
        gate = (grad_target > 0) & (grad_others < 0)
    else:
        gate = (grad_target < 0) & (grad_others > 0)
    return np.where(gate, np.abs(grad_target) * np.abs(grad_others), 0.0)


def jsma(model, x, y_true, theta: float, gamma: float, y_target=None, scorer=None) -> MaliciousSample:
    """Greedy saliency attack towards ``y_target`` (default (y+1) mod K)."""
    if theta == 0:
        raise ValueError("theta must be nonzero")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    x = _check_box(x)
    y = np.asarray(y_true)
    n, d = len(x), int(np.prod(x.shape[1:]))
    k = _logits(model, x[:1]).shape[1]
    target = target_classes(y, k) if y_target is None else np.asarray(y_target)
    budget = math.ceil(gamma * d - 1e-12)
    increase = theta > 0
    x_adv = x.reshape(n, d).astype(np.float64)
    # a feature leaves the search domain once modified or saturated
    domain = (x_adv < 1.0) if increase else (x_adv > 0.0)
    active = np.ones(n, bool)
    onehot = np.eye(k, dtype=np.float32)[target]
    for step in range(budget):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        xa = x_adv[idx].astype(np.float32).reshape(len(idx), *x.shape[1:])
        g_t, logits = _input_grad(model, xa, lambda z: nc.sum(nc.mul(z, nc.Tensor(onehot[idx]))))
        g_all, _ = _input_grad(model, xa, nc.sum)
        done = logits.argmax(axis=1) == target[idx]
        g_t = g_t.reshape(len(idx), d).astype(np.float64)
        sal = jsma_saliency(g_t, g_all.reshape(len(idx), d) - g_t, increase)
        sal = np.where(domain[idx], sal, 0.0)
        best = sal.argmax(axis=1)
        stuck = sal[np.arange(len(idx)), best] <= 0
        if step == 0 and np.all(stuck & ~done):
            raise AttackError("no feature with positive saliency")
        move = ~done & ~stuck
        rows, cols = idx[move], best[move]
        x_adv[rows, cols] = np.clip(x_adv[rows, cols] + theta, 0.0, 1.0)
        domain[rows, cols] = False
        active[idx[~move]] = False
    x_mal = x_adv.astype(np.float32).reshape(x.shape)
    return _pack(scorer or model, x, x_mal, y, "JSMA")


def _deepfool(model, x: np.ndarray, overshoot: float = 0.02, max_iter: int = 50) -> np.ndarray:
    """Minimal L2 step moving a single image across its nearest linearised boundary."""
    label = int(_logits(model, x[None]).data.argmax())
    r_total = np.zeros(x.shape, np.float64)
    for _ in range(max_iter):
        x_cur = np.clip(x + (1 + overshoot) * r_total, 0.0, 1.0).astype(np.float32)
        jac = jacobian(model, x_cur[None])[0].astype(np.float64)
        z = _logits(model, x_cur[None]).data[0].astype(np.float64)
        if int(z.argmax()) != label:
            break
        w = jac - jac[label]
        f = z - z[label]
        norms = np.sqrt(np.sum(w.reshape(len(z), -1) ** 2, axis=1))
        norms[label] = np.inf
        if not np.any(np.isfinite(norms) & (norms > 0)):
            raise AttackError("deepfool found no boundary direction: the model is locally constant")
        usable = np.isfinite(norms) & (norms > 0)
        ratio = np.where(usable, np.abs(f) / np.where(usable, norms, 1.0), np.inf)
        l = int(np.argmin(ratio))
        r_total += (abs(f[l]) + 1e-4) / norms[l] ** 2 * w[l]
    return (1 + overshoot) * r_total


def _project_l2(v: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(v * v)))
    return v * (radius / norm) if norm > radius else v


def apply_universal(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(x + delta.astype(np.float32), 0.0, 1.0).astype(np.float32)


def uap(
    model,
    images,
    step: float,
    iters: int,
    budget: float,
    target_rate: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Universal perturbation by aggregating per-sample deepfool steps.

    ``step`` caps the L2 length of each aggregated deepfool step, ``iters``
    is the number of passes over ``images`` and ``budget`` the L2 radius of
    the returned perturbation. Passes stop once the fooling rate on
    ``images`` reaches ``target_rate``.
    """
    images = _check_box(images)
    if not len(images):
        raise ValueError("uap needs a non-empty dataset")
    if budget <= 0 or step <= 0:
        raise ValueError("budget and step must be > 0")
    delta = np.zeros(images.shape[1:], np.float64)
    if iters == 0:
        return delta.astype(np.float32)
    clean = model_labels(model, images)
    rng = np.random.default_rng(seed)
    for _ in range(iters):
        for i in rng.permutation(len(images)):
            x_pert = apply_universal(images[i : i + 1], delta)
            if int(model_labels(model, x_pert)[0]) != clean[i]:
                continue
            r = _project_l2(_deepfool(model, x_pert[0]), step)
            delta = _project_l2(delta + r, budget)
        fooled = np.mean(model_labels(model, apply_universal(images, delta)) != clean)
        if fooled >= target_rate:
            break
    return delta.astype(np.float32)


def uap_attack(model, x, y_true, delta: np.ndarray, scorer=None) -> MaliciousSample:
    x = _check_box(x)
    return _pack(scorer or model, x, apply_universal(x, delta), np.asarray(y_true), "UAP")


def cw(
    model,
    x,
    y_true,
    c: float,
    kappa: float,
    steps: int,
    lr: float,
    y_target=None,
    scorer=None,
    return_history: bool = False,
):
    """Targeted L2 attack by projected gradient descent on the perturbation.

    Minimises ||delta||_2 + c * max(max_{i != t} Z_i - Z_t, -kappa) subject to
    x + delta in [0, 1] and returns the iterate with the lowest objective.
    """
    if c < 0 or kappa < 0:
        raise ValueError("c and kappa must be >= 0")
    x = _check_box(x)
    y = np.asarray(y_true)
    n = len(x)
    k = _logits(model, x[:1]).shape[1]
    target = target_classes(y, k) if y_target is None else np.asarray(y_target)
    x64 = x.astype(np.float64)
    w = x64.copy()
    best = x64.copy()
    best_obj = np.full(n, np.inf)
    history = []
    rows = np.arange(n)
    for it in range(steps + 1):
        delta = w - x64
        norm = np.sqrt(np.sum(delta.reshape(n, -1) ** 2, axis=1))
        wt = nc.Tensor(w.astype(np.float32), requires_grad=True)
        logits = _logits(model, wt)
        z = logits.data.astype(np.float64)
        others = z.copy()
        others[rows, target] = -np.inf
        rival = others.argmax(axis=1)
        margin = z[rows, rival] - z[rows, target]
        obj = norm + c * np.maximum(margin, -kappa)
        if not np.all(np.isfinite(obj)):
            raise AttackError("CW optimisation diverged")
        history.append(obj.copy())
        improved = obj < best_obj
        best[improved] = w[improved]
        best_obj[improved] = obj[improved]
        if it == steps:
            break
        mask = np.zeros((n, k), np.float32)
        live = margin > -kappa
        mask[rows[live], rival[live]] = c
        mask[rows[live], target[live]] -= c
        nc.backward(nc.sum(nc.mul(logits, nc.Tensor(mask))))
        g = wt.grad.astype(np.float64)
        safe = np.where(norm > 0, norm, 1.0).reshape(n, *([1] * (x.ndim - 1)))
        g += np.where(norm.reshape(safe.shape) > 0, delta / safe, 0.0)
        w = np.clip(w - lr * g, 0.0, 1.0)
    x_mal = best.astype(np.float32)
    out = _pack(scorer or model, x, x_mal, y, "CW")
    return (out, np.array(history)) if return_history else out


# ---------------------------------------------------------------------------
# backdoor
# ---------------------------------------------------------------------------

@dataclass
class Trigger:
    patch: np.ndarray
    row: int
    col: int

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float32)
        if self.patch.ndim != 3:
            raise ValueError("trigger patch must be (C, h, w)")
        if self.patch.min() < 0.0 or self.patch.max() > 1.0:
            raise ValueError("trigger values must lie in [0, 1]")
        if self.row < 0 or self.col < 0:
            raise ValueError("trigger anchor must be non-negative")

    def check_fits(self, image_shape) -> None:
        c, h, w = image_shape
        pc, ph, pw = self.patch.shape
        if pc != c or self.row + ph > h or self.col + pw > w:
            raise ValueError(f"trigger {self.patch.shape} at ({self.row}, {self.col}) does not fit image {tuple(image_shape)}")


def yellow_box(image_shape, size: int = 2, corner: str = "bottom-right") -> Trigger:
    c, h, w = image_shape
    if c != 3:
        raise ValueError("a yellow trigger needs three channels")
    patch = np.zeros((3, size, size), np.float32)
    patch[0] = patch[1] = 1.0
    row = h - size if "bottom" in corner else 0
    col = w - size if "right" in corner else 0
    return Trigger(patch, row, col)


def badnet_apply(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    batch = x[None] if single else x
    trigger.check_fits(batch.shape[1:])
    out = batch.copy()
    _, ph, pw = trigger.patch.shape
    out[:, :, trigger.row : trigger.row + ph, trigger.col : trigger.col + pw] = trigger.patch
    return out[0] if single else out


def poison_count(n: int, rate: float) -> int:
    # exact decimal arithmetic so 0.29 * 100 poisons 29 samples, not 28
    return math.floor(Fraction(str(rate)) * n)


def poison_indices(n: int, rate: float, seed: int) -> np.ndarray:
    if not 0.0 < rate <= 1.0:
        raise ValueError("poison_rate must lie in (0, 1]")
    return np.sort(np.random.default_rng(seed).permutation(n)[: poison_count(n, rate)])


def badnet_poison(data: LabeledDataset, trigger: Trigger, target_class: int, poison_rate: float, seed: int = 0) -> LabeledDataset:
    trigger.check_fits(data.image_shape)
    if not 0 <= target_class < data.num_classes:
        raise ValueError("target class out of range")
    idx = poison_indices(len(data), poison_rate, seed)
    images, labels = data.images.copy(), data.labels.copy()
    if idx.size:
        images[idx] = badnet_apply(images[idx], trigger)
        labels[idx] = target_class
    return LabeledDataset(images, labels, data.num_classes, data.split)


def badnet_attack(poisoned_model, x, y_true, trigger: Trigger, scorer=None) -> MaliciousSample:
    x = _check_box(x)
    return _pack(scorer or poisoned_model, x, badnet_apply(x, trigger), np.asarray(y_true), "BADNET")


# ---------------------------------------------------------------------------
# dispatch and persistence
# ---------------------------------------------------------------------------

def run_attack(
    cfg: AttackConfig, model, x, y, scorer=None, fit_images=None, trigger: Trigger | None = None
) -> MaliciousSample:
    """Generate malicious samples with ``model``; success is judged by ``scorer``."""
    kind = cfg.kind
    if kind == "FGSM":
        return fgsm(model, x, y, cfg.eps, scorer)
    if kind == "BIM":
        return bim(model, x, y, cfg.eps, cfg.alpha, cfg.iters, scorer)
    if kind == "PGD":
        return pgd(model, x, y, cfg.eps, cfg.alpha, cfg.iters, cfg.random_start, cfg.seed, scorer)
    if kind == "JSMA":
        return jsma(model, x, y, cfg.theta, cfg.gamma, scorer=scorer)
    if kind == "CW":
        return cw(model, x, y, cfg.c, cfg.kappa, cfg.steps, cfg.lr, scorer=scorer)
    if kind == "UAP":
        pool = x if fit_images is None else fit_images
        pool = pool[: cfg.uap_fit_samples]
        delta = uap(model, pool, cfg.uap_step, cfg.uap_iters, cfg.uap_budget, cfg.uap_target_rate, cfg.seed)
        return uap_attack(model, x, y, delta, scorer)
    if kind == "BADNET":
        if trigger is None:
            raise ValueError("BADNET needs a trigger")
        return badnet_attack(model, x, y, trigger, scorer)
    raise ValueError(f"unknown attack kind {kind!r}")


BATCH_MAGIC = b"NSAB"
BATCH_VERSION = 1


def attack_batch_bytes(sample: MaliciousSample, cfg: AttackConfig, config_hash: str = "") -> bytes:
    echo = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    kind = sample.kind.encode("ascii")
    parts = [
        BATCH_MAGIC,
        struct.pack("<I", BATCH_VERSION),
        struct.pack("<I", len(kind)),
        kind,
        struct.pack("<I", len(echo)),
        echo,
        struct.pack("<Q", cfg.seed),
        struct.pack("<I", len(config_hash)),
        config_hash.encode("ascii"),
        struct.pack("<I", len(sample)),
    ]
    for i in range(len(sample)):
        parts.append(struct.pack("<I", int(sample.source_index[i])))
        parts.append(encode_tensor("eta", sample.eta[i]))
        parts.append(bytes([bool(sample.success[i])]))
    return b"".join(parts)


@dataclass
class AttackBatch:
    kind: str
    config: dict
    seed: int
    config_hash: str
    index: np.ndarray
    eta: np.ndarray
    success: np.ndarray

    def rebuild(self, images: np.ndarray) -> MaliciousSample:
        """Attach the stored perturbations to their source images."""
        x = np.asarray(images, dtype=np.float32)[self.index]
        return MaliciousSample(x + self.eta, self.eta, self.index, self.kind, self.success)


def parse_attack_batch(buf: bytes) -> AttackBatch:
    r = Reader(buf)
    if r.take(4) != BATCH_MAGIC:
        raise FormatError("bad magic: not an attack batch")
    if r.u32() != BATCH_VERSION:
        raise FormatError("unsupported attack batch version")
    kind = r.take(r.u32()).decode("ascii")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    (seed,) = r.unpack("Q")
    config_hash = r.take(r.u32()).decode("ascii")
    count = r.u32()
    index, etas, success = [], [], []
    for _ in range(count):
        index.append(r.u32())
        etas.append(decode_tensor(r)[1])
        flag = r.take(1)[0]
        if flag > 1:
            raise FormatError("success flag must be 0 or 1")
        success.append(bool(flag))
    if r.remaining():
        raise FormatError("trailing bytes after attack records")
    eta = np.stack(etas) if etas else np.zeros((0,), np.float32)
    return AttackBatch(kind, config, seed, config_hash, np.array(index, np.int64), eta, np.array(success, bool))
