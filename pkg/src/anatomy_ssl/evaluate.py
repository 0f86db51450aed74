"""Anomaly scoring, detection metrics, linear probing and position-cluster quality.

The anomaly score is a *normality* score: 1.0 for a perfect reconstruction and
smaller as residuals grow. Detection metrics therefore treat NORMAL as the
positive class. The linear probe predicts ABNORMAL, so its metrics treat
abnormal as positive. Every report names its positive class.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import kernels
from .backbone import SiameseModel, ViTEncoder, patchify
from .errors import ConfigurationError, EvaluationError, IntegrityError


@dataclass
class MetricsReport:
    auc: float
    acc: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    positive_class: str
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        d = self.as_dict()
        extra = d.pop("extra")
        lines = [f"{k}={v}" for k, v in d.items()]
        lines += [f"extra.{k}={v}" for k, v in sorted(extra.items())]
        return "\n".join(lines) + "\n"


class ScoredSample(NamedTuple):
    id: str
    score: float
    label: str
    residuals: np.ndarray  # (L,) pixel-sum squared error per patch


# --------------------------------------------------------------------------- scoring


def anomaly_score_from_patches(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``(mean_j exp(||y_j - x_j||^2))^-1`` per image; ``y``, ``x`` are (..., L, P)."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape:
        raise IntegrityError(f"reconstruction {y.shape} and input {x.shape} differ")
    resid = ((y - x) ** 2).sum(axis=-1)
    return 1.0 / np.exp(resid).mean(axis=-1)


@torch.no_grad()
def reconstruct(model: SiameseModel, images, encoder: str = "teacher", batch_size: int = 64) -> np.ndarray:
    """Decode every token of every image (no mask substitution); returns (n, L, P) float64."""
    enc = _encoder(model, encoder)
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = []
    for s in range(0, len(images), batch_size):
        x = torch.from_numpy(images[s:s + batch_size])
        out.append(model.decoder(enc(x)).double().numpy())
    y = np.concatenate(out)
    return y[0] if single else y


def score_images(model: SiameseModel, images, encoder: str = "teacher", batch_size: int = 64):
    """Return ``(scores (n,), residuals (n, L))`` for an (n, H, W) stack."""
    images = np.asarray(images, dtype=np.float64)
    y = reconstruct(model, images, encoder, batch_size)
    x = patchify(torch.from_numpy(images), model.cfg.patch).numpy()
    x = x.astype(np.float32).astype(np.float64)  # the network saw float32 pixels
    return anomaly_score_from_patches(y, x), ((y - x) ** 2).sum(axis=-1)


def anomaly_score(model: SiameseModel, image, encoder: str = "teacher") -> float:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape != (model.cfg.image_size, model.cfg.image_size):
        raise IntegrityError(f"image shape {image.shape} does not match model input {model.cfg.image_size}")
    return float(score_images(model, image[None], encoder)[0][0])


def _encoder(model: SiameseModel, which: str) -> ViTEncoder:
    if which == "teacher":
        return model.teacher
    if which == "student":
        return model.student
    raise ConfigurationError(f"encoder must be 'teacher' or 'student', got {which!r}")


# --------------------------------------------------------------------------- metrics


def auc(scores, positive) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if scores.shape != positive.shape or scores.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D of equal length")
    if positive.all() or not positive.any():
        raise EvaluationError("AUC needs both classes present")
    return float(kernels.auc_rank(scores, positive))


def _confusion(pred, positive):
    tp = int(np.sum(pred & positive))
    fp = int(np.sum(pred & ~positive))
    tn = int(np.sum(~pred & ~positive))
    fn = int(np.sum(~pred & positive))
    return tp, fp, tn, fn


def _report(scores, positive, threshold, positive_class, **extra) -> MetricsReport:
    pred = scores >= threshold
    tp, fp, tn, fn = _confusion(pred, positive)
    acc = (tp + tn) / len(scores)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return MetricsReport(auc(scores, positive), acc, f1, float(threshold), tp, fp, tn, fn, positive_class, extra)


def youden_threshold(scores, positive) -> float:
    """Threshold (predict positive when ``score >= t``) maximising TPR + TNR - 1."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    best_j, best_t = -np.inf, None
    n_pos, n_neg = positive.sum(), (~positive).sum()
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        j = (pred & positive).sum() / n_pos + (~pred & ~positive).sum() / n_neg - 1.0
        if j > best_j:
            best_j, best_t = j, t
    return float(best_t)


def detection_metrics(scores, abnormal) -> MetricsReport:
    """Metrics for normality scores with NORMAL as the positive class."""
    scores = np.asarray(scores, dtype=np.float64)
    normal = ~np.asarray(abnormal, dtype=bool)
    if normal.all() or not normal.any():
        raise EvaluationError("detection needs both normal and abnormal samples")
    return _report(scores, normal, youden_threshold(scores, normal), "normal")


def detect(model: SiameseModel, dataset, encoder: str = "teacher") -> tuple[MetricsReport, list[ScoredSample]]:
    images = dataset.stack()
    abnormal = dataset.labels()
    if abnormal.all() or not abnormal.any():
        raise EvaluationError("detection dataset must contain normal and abnormal images")
    scores, resid = score_images(model, images, encoder)
    report = detection_metrics(scores, abnormal)
    samples = [ScoredSample(e.id, float(s), e.label, r) for e, s, r in zip(dataset.entries, scores, resid)]
    return report, samples


def write_scores(path: str | Path, samples: Sequence[ScoredSample]) -> None:
    lines = ["id\tscore\tlabel"] + [f"{s.id}\t{s.score!r}\t{s.label}" for s in samples]
    Path(path).write_text("\n".join(lines) + "\n")


def write_report(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(report.to_text())


# --------------------------------------------------------------------------- linear probe


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-3
    max_iter: int = 200
    encoder: str = "teacher"


@torch.no_grad()
def pooled_features(encoder: ViTEncoder, images, batch_size: int = 64) -> np.ndarray:
    """Global average pool of the token sequence, (n, dim) float64."""
    encoder.eval()
    images = np.asarray(images, dtype=np.float32)
    feats = [encoder(torch.from_numpy(images[s:s + batch_size])).mean(dim=1) for s in range(0, len(images), batch_size)]
    return torch.cat(feats).double().numpy()


@torch.no_grad()
def token_features(encoder: ViTEncoder, images, batch_size: int = 64) -> np.ndarray:
    encoder.eval()
    images = np.asarray(images, dtype=np.float32)
    feats = [encoder(torch.from_numpy(images[s:s + batch_size])) for s in range(0, len(images), batch_size)]
    return torch.cat(feats).double().numpy()


def fit_logistic(features, targets, cfg: ProbeConfig = ProbeConfig()):
    """Affine logistic classifier on standardised features; returns a scoring function."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    xt = torch.from_numpy((x - mu) / sd)
    yt = torch.from_numpy(y)
    w = torch.zeros(x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], lr=1.0, max_iter=cfg.max_iter, line_search_fn="strong_wolfe",
                            tolerance_grad=1e-10, tolerance_change=1e-12)

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(xt @ w + b, yt) + cfg.l2 * w.pow(2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    w_np, b_np = w.detach().numpy().copy(), float(b.detach())

    def decision(f):
        return ((np.asarray(f, dtype=np.float64) - mu) / sd) @ w_np + b_np

    return decision


def encoder_bytes(encoder: torch.nn.Module) -> bytes:
    buf = io.BytesIO()
    for name, t in sorted(encoder.state_dict().items()):
        buf.write(name.encode())
        buf.write(t.detach().cpu().numpy().tobytes())
    return buf.getvalue()


def linear_probe(
    encoder: ViTEncoder, train_images, train_abnormal, test_images, test_abnormal, cfg: ProbeConfig = ProbeConfig(),
    freeze_check: bool = True,
) -> MetricsReport:
    """Train an affine probe on frozen pooled features; report held-out metrics (abnormal positive)."""
    train_abnormal = np.asarray(train_abnormal, dtype=bool)
    test_abnormal = np.asarray(test_abnormal, dtype=bool)
    for lab, name in ((train_abnormal, "training"), (test_abnormal, "held-out")):
        if lab.all() or not lab.any():
            raise EvaluationError(f"{name} labels contain a single class")
    before = encoder_bytes(encoder) if freeze_check else None
    f_train = pooled_features(encoder, train_images)
    f_test = pooled_features(encoder, test_images)
    decision = fit_logistic(f_train, train_abnormal, cfg)
    if freeze_check and encoder_bytes(encoder) != before:
        raise IntegrityError("encoder parameters changed during linear probing")
    train_acc = float(np.mean((decision(f_train) >= 0) == train_abnormal))
    return _report(decision(f_test), test_abnormal, 0.0, "abnormal", train_acc=train_acc)


# --------------------------------------------------------------------------- cluster quality


def position_groups(num_tokens: int, grid: int = 3) -> np.ndarray:
    """Map raster token index -> cell of a ``grid`` x ``grid`` partition of the token map."""
    side = int(round(np.sqrt(num_tokens)))
    if side * side != num_tokens:
        raise ConfigurationError(f"{num_tokens} tokens do not form a square map")
    r, c = np.divmod(np.arange(num_tokens), side)
    return (r * grid // side) * grid + (c * grid // side)


def silhouette_cosine(features, groups) -> float:
    """Mean silhouette under cosine distance; a zero ``max(a, b)`` contributes 0."""
    f = np.asarray(features, dtype=np.float64)
    groups = np.asarray(groups)
    labels, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    if labels.size < 2:
        raise EvaluationError("silhouette needs at least two groups")
    if counts.min() < 2:
        raise EvaluationError("every group needs at least two samples")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    u = f / np.where(norms > 0, norms, 1.0)
    sums = np.zeros((labels.size, f.shape[1]))
    np.add.at(sums, inverse, u)
    # mean cosine distance of every sample to every group
    self_sim = (u * u).sum(axis=1)
    dot = u @ sums.T  # (n, G)
    mean_d = 1.0 - dot / counts
    own = np.arange(f.shape[0]), inverse
    mean_d[own] = 1.0 - (dot[own] - self_sim) / (counts[inverse] - 1)
    mean_d[np.abs(mean_d) < 1e-12] = 0.0
    a = mean_d[own]
    mean_d[own] = np.inf
    b = mean_d.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def landmark_tokens(num_tokens: int, grid: int = 3) -> np.ndarray:
    """Raster index of the token nearest the centre of each ``grid`` x ``grid`` cell."""
    side = int(round(np.sqrt(num_tokens)))
    if side * side != num_tokens:
        raise ConfigurationError(f"{num_tokens} tokens do not form a square map")
    centre = (2 * np.arange(grid) + 1) * side // (2 * grid)
    return (centre[:, None] * side + centre[None, :]).ravel()


def cluster_quality(encoder: ViTEncoder, images, grid: int = 3, mode: str = "landmarks") -> float:
    """Cosine silhouette of token features grouped by image location.

    ``landmarks`` keeps one token per grid cell (its centre) across all images,
    so each of the grid*grid groups is one fixed location. ``partition`` keeps
    every token and groups it by the cell it falls in.
    """
    feats = token_features(encoder, images)  # (n, L, dim)
    n, l, d = feats.shape
    if mode == "landmarks":
        keep = landmark_tokens(l, grid)
        return silhouette_cosine(feats[:, keep].reshape(-1, d), np.tile(np.arange(keep.size), n))
    if mode == "partition":
        return silhouette_cosine(feats.reshape(n * l, d), np.tile(position_groups(l, grid), n))
    raise ConfigurationError(f"unknown cluster mode {mode!r}")
