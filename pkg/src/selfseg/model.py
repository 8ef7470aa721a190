"""Reference segmenter: a per-voxel linear softmax classifier on local intensity features.

Any object with the same ``predict`` contract can stand in for it; the pipeline
only needs probability maps and hard labels.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import ClassTable, LabelMap, ProbMap, argmax_labels, largest_foreground_component

log = logging.getLogger(__name__)


class MissingPhaseError(KeyError):
    def __init__(self, phase):
        super().__init__(phase)
        self.phase = phase

    def __str__(self):
        return f"missing phase {self.phase!r}"


@dataclass(frozen=True)
class FeatureConfig:
    phases: tuple = ("non_contrast", "pancreatic", "venous")
    radius: int = 1

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("neighbourhood radius must be >= 0")
        if not self.phases:
            raise ValueError("at least one phase is required")
        object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def n_features(self):
        return 3 * len(self.phases) + 1


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    smooth: float = 1e-5
    ce_floor: float = 1e-7

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0 or (self.dice_weight == 0 and self.ce_weight == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.smooth <= 0:
            raise ValueError("smoothing must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 16
    batch_size: int = 256
    lr: float = 0.5
    lr_schedule: str = "step"         # constant | step
    lr_step: int = 5                  # epochs between decays (step schedule)
    lr_gamma: float = 0.5
    seed: int = 0
    validation_fraction: float = 0.2
    class_balanced: bool = True
    samples_per_case: int = 4000

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation fraction must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.samples_per_case < 1:
            raise ValueError("batch size and samples per case must be positive")

    def lr_at(self, epoch):
        if self.lr_schedule == "step":
            return self.lr * self.lr_gamma ** (epoch // self.lr_step)
        return self.lr


@dataclass(frozen=True, eq=False)
class Features:
    values: np.ndarray      # (n_voxels, n_features), raster order
    dims: tuple
    spacing: tuple
    config: FeatureConfig


@dataclass(frozen=True, eq=False)
class LinearSoftmaxModel:
    classes: ClassTable
    weights: np.ndarray          # (n_classes, n_features)
    feature_config: FeatureConfig
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (len(self.classes), self.feature_config.n_features):
            raise ValueError(f"weight matrix shape {w.shape} does not match classes/features")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        std = np.array(self.std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("normalisation std must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mean", np.array(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", std)

    @classmethod
    def fresh(cls, classes, feature_config, rng=None):
        f = feature_config.n_features
        w = np.zeros((len(classes), f)) if rng is None else rng.normal(0.0, 0.01, (len(classes), f))
        return cls(classes, w, feature_config, np.zeros(f), np.ones(f))

    def digest(self):
        return hashlib.sha256(model_to_json(self).encode()).hexdigest()


def _box_stats(img, r):
    if r == 0:
        return img, np.zeros_like(img)
    size = 2 * r + 1
    mean = ndimage.uniform_filter(img, size=size, mode="nearest")
    sq = ndimage.uniform_filter(img * img, size=size, mode="nearest")
    return mean, np.sqrt(np.maximum(sq - mean * mean, 0.0))


def extract_features(images, config):
    """Raw intensity, box mean and box std per phase, plus a constant 1.

    Windows are clamped at the volume edges.
    """
    for p in config.phases:
        if p not in images:
            raise MissingPhaseError(p)
    grids = [images[p] for p in config.phases]
    dims = grids[0].dims
    if any(g.dims != dims for g in grids):
        raise ValueError("phase grids differ in dims")
    cols = []
    for g in grids:
        img = g.data.astype(np.float64)
        mean, std = _box_stats(img, config.radius)
        cols += [img.ravel(order="F"), mean.ravel(order="F"), std.ravel(order="F")]
    cols.append(np.ones(int(np.prod(dims))))
    return Features(np.stack(cols, axis=1), dims, grids[0].spacing, config)


def normalization_stats(matrices, weights=None):
    """Per-feature mean/std over the rows of ``matrices``; degenerate features pass through.

    ``weights`` (one non-negative vector per matrix) turns these into weighted
    statistics, so the training set can be standardised under the same
    distribution the sampler draws from.
    """
    if weights is None:
        weights = [np.ones(m.shape[0]) for m in matrices]
    total = sum(float(w.sum()) for w in weights)
    mean = sum(w @ m for m, w in zip(matrices, weights)) / total
    var = sum(w @ ((m - mean) ** 2) for m, w in zip(matrices, weights)) / total
    std = np.sqrt(var)
    flat = std < 1e-12
    # constant columns (the bias in particular) keep their raw value
    mean[flat] = 0.0
    std[flat] = 1.0
    return mean, std


def _sampling_weights(pools, n_rows, balanced):
    """Per-voxel probability of being drawn for one case (each case contributes equally)."""
    w = np.zeros(n_rows)
    present = [idx for idx in pools.values() if len(idx)]
    if balanced:
        for idx in present:
            w[idx] = 1.0 / (len(present) * len(idx))
    else:
        n = sum(len(idx) for idx in present)
        for idx in present:
            w[idx] = 1.0 / n
    return w


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _logits(model, X):
    return ((X - model.mean) / model.std) @ model.weights.T


def forward(model, feats):
    """Class distribution per voxel as a ProbMap."""
    X = feats.values if isinstance(feats, Features) else np.asarray(feats)
    if X.ndim != 2 or X.shape[1] != model.feature_config.n_features:
        raise ValueError(f"feature dimension {X.shape[-1]} != model's {model.feature_config.n_features}")
    P = softmax(_logits(model, X))
    if not isinstance(feats, Features):
        return P
    C = len(model.classes)
    data = P.T.reshape((C,) + tuple(feats.dims), order="F")
    return ProbMap(data, model.classes, feats.spacing)


def _flatten(probs, target):
    if isinstance(probs, ProbMap):
        C = probs.data.shape[0]
        P = probs.data.reshape(C, -1, order="F").T.astype(np.float64)
    else:
        P = np.asarray(probs, dtype=np.float64)
    y = target.array.ravel(order="F") if isinstance(target, LabelMap) else np.asarray(target).ravel()
    return P, y.astype(np.intp)


def dice_ce_loss(P, y, cfg):
    """Combined soft-Dice + cross-entropy on flat arrays.

    ``P`` is (n, C) softmax output, ``y`` integer targets. Returns
    (loss, dLoss/dlogits) with the gradient taken through the softmax.
    Background (class 0) contributes to the CE term only.
    """
    n, C = P.shape
    G = np.zeros_like(P)
    G[np.arange(n), y] = 1.0
    dL_dP = np.zeros_like(P)
    loss = 0.0
    if cfg.dice_weight > 0 and C > 1:
        Pf, Gf = P[:, 1:], G[:, 1:]
        inter = (Pf * Gf).sum(axis=0)
        denom = Pf.sum(axis=0) + Gf.sum(axis=0) + cfg.smooth
        numer = 2.0 * inter + cfg.smooth
        loss += cfg.dice_weight * (1.0 - np.mean(numer / denom))
        d = (2.0 * Gf * denom - numer) / denom ** 2
        dL_dP[:, 1:] -= cfg.dice_weight * d / (C - 1)
    if cfg.ce_weight > 0:
        pt = P[np.arange(n), y]
        loss += cfg.ce_weight * float(-np.mean(np.log(np.maximum(pt, cfg.ce_floor))))
        live = pt > cfg.ce_floor
        dL_dP[np.arange(n)[live], y[live]] -= cfg.ce_weight / (n * pt[live])
    # softmax Jacobian: dz_k = p_k (dp_k - sum_j p_j dp_j)
    grad = P * (dL_dP - (P * dL_dP).sum(axis=1, keepdims=True))
    return float(loss), grad


def loss_and_grad(probs, target, cfg=LossConfig()):
    P, y = _flatten(probs, target)
    if P.shape[0] != y.shape[0]:
        raise ValueError("probabilities and target differ in size")
    loss, grad = dice_ce_loss(P, y, cfg)
    if isinstance(probs, ProbMap):
        grad = grad.T.reshape(probs.data.shape, order="F")
    return loss, grad


@dataclass(eq=False)
class TrainCase:
    case_id: str
    features: Features
    labels: LabelMap
    weight: np.ndarray = None    # optional sampling mask, voxels with 0 are never drawn


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    selected_epoch: int = -1
    initial_loss: float = float("nan")
    init_hash: str = ""
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {"epochs": self.epochs, "selected_epoch": self.selected_epoch,
                "initial_loss": self.initial_loss, "init_hash": self.init_hash,
                "train_ids": self.train_ids, "val_ids": self.val_ids, "warnings": self.warnings}


def _class_dice(pred, truth, c):
    p, g = pred == c, truth == c
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (sp + sg)


def _sample(rng, pools, n, balanced):
    if not balanced:
        allv = np.concatenate(list(pools.values()))
        return rng.choice(allv, size=n, replace=True)
    present = [c for c in sorted(pools) if len(pools[c])]
    per = max(1, n // len(present))
    return np.concatenate([rng.choice(pools[c], size=per, replace=True) for c in present])


def train(cases, train_cfg=TrainConfig(), loss_cfg=LossConfig(), classes=None, init=None,
          val_cases=None, select_classes=None, postprocess=True):
    """Mini-batch SGD on sampled voxels; returns (model, TrainLog).

    The end-of-epoch checkpoint with the best mean validation Dice over
    ``select_classes`` (default: the tumour class if the table has one, else all
    foreground classes) is returned; ties keep the earlier epoch.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("no training cases")
    classes = classes or cases[0].labels.classes
    fcfg = cases[0].features.config if init is None else init.feature_config
    rng = np.random.default_rng(train_cfg.seed)
    tlog = TrainLog()

    if val_cases is None:
        if train_cfg.validation_fraction > 0:
            if len(cases) < 2:
                raise ValueError("need at least 2 cases for a validation split")
            n_val = min(len(cases) - 1, max(1, int(round(train_cfg.validation_fraction * len(cases)))))
            perm = rng.permutation(len(cases))
            val_cases = [cases[i] for i in sorted(perm[:n_val])]
            cases = [cases[i] for i in sorted(perm[n_val:])]
        else:
            val_cases = []
    tlog.train_ids = [c.case_id for c in cases]
    tlog.val_ids = [c.case_id for c in val_cases]
    if select_classes is None:
        select_classes = (classes.id_of("tumor"),) if "tumor" in classes.names else classes.foreground

    pools = []
    for c in cases:
        y = c.labels.array.ravel(order="F")
        ok = np.ones(y.shape, bool) if c.weight is None else (np.asarray(c.weight).ravel(order="F") > 0)
        pools.append({k: np.flatnonzero(ok & (y == k)) for k in classes.ids})
    mean, std = normalization_stats(
        [c.features.values for c in cases],
        [_sampling_weights(p, c.features.values.shape[0], train_cfg.class_balanced) for p, c in zip(pools, cases)])
    if init is None:
        w0 = LinearSoftmaxModel.fresh(classes, fcfg, rng).weights
    else:
        w0 = init.weights.copy()
    model = LinearSoftmaxModel(classes, w0, fcfg, mean, std)
    tlog.init_hash = model.digest()

    present = {k for p in pools for k, v in p.items() if len(v)}
    Xn = [(c.features.values - mean) / std for c in cases]
    for k in classes.ids:
        if k not in present:
            msg = f"class {classes.names[k]!r} absent from all training cases"
            log.warning(msg)
            tlog.warnings.append(msg)

    W = model.weights.copy()
    best_score, best_W = -np.inf, W.copy()
    for epoch in range(train_cfg.epochs):
        xs, ys = [], []
        for pool, X, c in zip(pools, Xn, cases):
            idx = _sample(rng, pool, train_cfg.samples_per_case, train_cfg.class_balanced)
            xs.append(X[idx])
            ys.append(c.labels.array.ravel(order="F")[idx].astype(np.intp))
        Xe, ye = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(ye))
        Xe, ye = Xe[order], ye[order]
        if epoch == 0:
            tlog.initial_loss = dice_ce_loss(softmax(Xe @ W.T), ye, loss_cfg)[0]
        lr = train_cfg.lr_at(epoch)
        losses = []
        for s in range(0, len(ye), train_cfg.batch_size):
            Xb, yb = Xe[s:s + train_cfg.batch_size], ye[s:s + train_cfg.batch_size]
            loss, G = dice_ce_loss(softmax(Xb @ W.T), yb, loss_cfg)
            W -= lr * (G.T @ Xb)
            losses.append(loss)
        entry = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                 "epoch_end_loss": dice_ce_loss(softmax(Xe @ W.T), ye, loss_cfg)[0]}
        if val_cases:
            snap = LinearSoftmaxModel(classes, W, fcfg, mean, std)
            per_class = {k: [] for k in classes.foreground}
            for vc in val_cases:
                _, lab = predict(snap, vc.features, postprocess=postprocess, hard=True)
                for k in classes.foreground:
                    per_class[k].append(_class_dice(lab.array, vc.labels.array, k))
            vd = {classes.names[k]: float(np.mean(v)) for k, v in per_class.items()}
            score = float(np.mean([vd[classes.names[k]] for k in select_classes]))
            entry["val_dice"] = vd
            entry["val_score"] = score
        else:
            score = epoch  # no validation: keep the last epoch
        if score > best_score:
            best_score, best_W = score, W.copy()
            tlog.selected_epoch = epoch
        tlog.epochs.append(entry)
    return LinearSoftmaxModel(classes, best_W, fcfg, mean, std), tlog


def _as_features(model, images):
    if isinstance(images, Features):
        if images.config.phases == model.feature_config.phases and images.config.radius == model.feature_config.radius:
            return images
        return select_features(images, model.feature_config)
    return extract_features(images, model.feature_config)


def select_features(feats, config):
    """Column subset of a richer feature matrix (same radius) for ``config.phases``."""
    if feats.config.radius != config.radius:
        raise ValueError("feature radius mismatch")
    cols = []
    for p in config.phases:
        if p not in feats.config.phases:
            raise MissingPhaseError(p)
        i = feats.config.phases.index(p)
        cols += [3 * i, 3 * i + 1, 3 * i + 2]
    cols.append(feats.values.shape[1] - 1)
    return Features(feats.values[:, cols], feats.dims, feats.spacing, config)


def predict(model, images, postprocess=False, hard=False):
    """ProbMap for ``images`` (phase dict or Features).

    With ``postprocess`` the hard labels are argmax followed by the
    largest-component filter and ``(probs, labels)`` is returned; ``hard``
    alone returns argmax labels without the filter.
    """
    feats = _as_features(model, images)
    probs = forward(model, feats)
    if not (postprocess or hard):
        return probs
    lab = argmax_labels(probs)
    if postprocess:
        lab = largest_foreground_component(lab)
    return probs, lab


def _hex(a):
    return [float(v).hex() for v in np.ravel(a)]


def model_to_json(model):
    d = {
        "format": "selfseg-linear-softmax",
        "version": 1,
        "classes": model.classes.to_json(),
        "feature_config": {"phases": list(model.feature_config.phases), "radius": model.feature_config.radius},
        "mean": _hex(model.mean),
        "std": _hex(model.std),
        "weights": [_hex(row) for row in model.weights],
    }
    return json.dumps(d, indent=1)


def model_from_json(text):
    d = json.loads(text)
    fcfg = FeatureConfig(tuple(d["feature_config"]["phases"]), int(d["feature_config"]["radius"]))
    unhex = lambda xs: np.array([float.fromhex(v) for v in xs])
    return LinearSoftmaxModel(ClassTable.from_json(d["classes"]),
                              np.array([unhex(r) for r in d["weights"]]).reshape(-1, fcfg.n_features),
                              fcfg, unhex(d["mean"]), unhex(d["std"]))


def save_model(path, model):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(model_to_json(model))


def load_model(path):
    return model_from_json(Path(path).read_text())
