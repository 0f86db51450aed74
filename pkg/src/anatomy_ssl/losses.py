"""Token-wise contrastive losses, weighted restoration loss and the total objective.

Similarity between two probability rows is ``f(q, c) = exp(-H(q, c) / tau)`` with
``H(q, c) = -sum_k q_k log c_k``. All ratios of sums of ``f`` are evaluated in the
log domain, so float32 training does not underflow when ``H / tau`` is large.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigurationError, IntegrityError, NumericalError

EPS = 1e-8
# stands in for log(0) inside masked log-sum-exp; finite so masked rows keep finite gradients
_NEG = -1e30


def cross_entropy_sim(q, c, eps: float = EPS):
    """``H(q, c) = -sum_k q_k log max(c_k, eps)`` over the last axis."""
    q = torch.as_tensor(q)
    c = torch.as_tensor(c, dtype=q.dtype)
    return -(q * torch.log(torch.clamp(c, min=eps))).sum(-1)


def similarity_kernel(q, c, tau: float, eps: float = EPS):
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    return torch.exp(-cross_entropy_sim(q, c, eps) / tau)


def _pairwise_ce(q: torch.Tensor, c: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``out[..., n, m] = H(q[..., n, :], c[..., m, :])``."""
    return -(q @ torch.log(torch.clamp(c, min=eps)).transpose(-1, -2))


def _masked_logsumexp(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(torch.where(mask, x, torch.full_like(x, _NEG)), dim=-1)


def structure_loss(probs: torch.Tensor, labels, prototypes, tau: float = 0.1) -> tuple[torch.Tensor, int]:
    """Pull every normal token toward its own position's prototype, away from all others.

    ``probs`` is (B, L, K) student rows, ``labels`` (B, L) with True = abnormal,
    ``prototypes`` (L, K). Returns the loss averaged over the realised normal
    anchors and that anchor count (0 means the batch had no normal token and the
    loss is a graph-connected zero).
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    protos = torch.as_tensor(np.asarray(prototypes), dtype=probs.dtype)
    b, l, k = probs.shape
    if protos.shape != (l, k):
        raise IntegrityError(f"prototype bank {tuple(protos.shape)} does not match tokens ({l}, {k})")
    normal = ~torch.as_tensor(np.asarray(labels), dtype=torch.bool)
    if normal.shape != (b, l):
        raise IntegrityError(f"labels {tuple(normal.shape)} do not match tokens ({b}, {l})")
    logits = -_pairwise_ce(probs, protos) / tau  # (B, L, L): token j vs prototype m
    own = torch.diagonal(logits, dim1=1, dim2=2)  # (B, L)
    terms = torch.logsumexp(logits, dim=-1) - own
    anchors = int(normal.sum())
    if anchors == 0:
        return probs.sum() * 0.0, 0
    return terms[normal].sum() / anchors, anchors


def category_loss(probs: torch.Tensor, labels, prototypes, tau: float = 0.1) -> tuple[torch.Tensor, int]:
    """Same-position consistency among normal tokens, with abnormal tokens as negatives.

    For a normal anchor ``i`` at position ``j``:

    * positives: every other normal token at ``j``;
    * negatives: every abnormal token at ``j``, plus the similarity of each of those
      abnormal tokens to the prototype ``c_j``.

    Anchors at positions with fewer than two normal tokens have no positive and
    are skipped. Abnormal tokens are never anchors. Returns ``(loss, anchors)``.
    """
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    protos = torch.as_tensor(np.asarray(prototypes), dtype=probs.dtype)
    b, l, k = probs.shape
    if protos.shape != (l, k):
        raise IntegrityError(f"prototype bank {tuple(protos.shape)} does not match tokens ({l}, {k})")
    abnormal = torch.as_tensor(np.asarray(labels), dtype=torch.bool)
    if abnormal.shape != (b, l):
        raise IntegrityError(f"labels {tuple(abnormal.shape)} do not match tokens ({b}, {l})")
    normal = ~abnormal

    q = probs.transpose(0, 1)  # (L, B, K)
    tok = -_pairwise_ce(q, q) / tau  # (L, anchor i, other b)
    proto = -cross_entropy_sim(q, protos[:, None, :]) / tau  # (L, B): abnormal b vs c_j

    ab = abnormal.T  # (L, B)
    nb = normal.T
    not_self = ~torch.eye(b, dtype=torch.bool)
    pos_mask = nb[:, None, :] & not_self  # (L, B, B)
    neg_mask = ab[:, None, :].expand(l, b, b)

    all_logits = torch.cat([tok, proto[:, None, :].expand(l, b, b)], dim=-1)
    all_mask = torch.cat([pos_mask | neg_mask, neg_mask], dim=-1)
    log_pos = _masked_logsumexp(tok, pos_mask)
    log_all = _masked_logsumexp(all_logits, all_mask)

    valid = nb & (nb.sum(dim=1, keepdim=True) >= 2)  # (L, B)
    anchors = int(valid.sum())
    if anchors == 0:
        return probs.sum() * 0.0, 0
    return (log_all - log_pos)[valid].sum() / anchors, anchors


def restoration_loss(y: torch.Tensor, x_patches: torch.Tensor, labels, beta: float = 4.0) -> torch.Tensor:
    """Weighted patch MSE: ``mean_i (1/L) sum_j w_j mean_pixels((y - x)^2)``, ``w_j = beta`` on lesions."""
    if beta < 1:
        raise ConfigurationError(f"beta must be >= 1, got {beta}")
    if y.shape != x_patches.shape:
        raise IntegrityError(f"reconstruction {tuple(y.shape)} and target {tuple(x_patches.shape)} differ")
    lab = torch.as_tensor(np.asarray(labels), dtype=torch.bool)
    if lab.shape != y.shape[:-1]:
        raise IntegrityError(f"labels {tuple(lab.shape)} do not match patches {tuple(y.shape[:-1])}")
    err = (y - x_patches).pow(2).mean(dim=-1)
    w = torch.where(lab, torch.full_like(err, float(beta)), torch.ones_like(err))
    return (w * err).mean()


@dataclass
class LossBreakdown:
    l_stru: float
    l_cate: float
    l_cst: float
    l_recon: float
    l_total: float
    stru_anchors: int = -1
    cate_anchors: int = -1

    def as_dict(self) -> dict:
        return asdict(self)


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def check_finite(**parts) -> None:
    for name, v in parts.items():
        if not math.isfinite(_value(v)):
            raise NumericalError(f"loss term {name} is not finite ({_value(v)})")


def total_loss(l_stru, l_cate, l_recon, stru_anchors: int = -1, cate_anchors: int = -1):
    """Unweighted sum of the three terms; returns ``(total, LossBreakdown)``.

    ``total`` keeps the autograd graph when the parts are tensors.
    """
    check_finite(l_stru=l_stru, l_cate=l_cate, l_recon=l_recon)
    l_cst = l_stru + l_cate
    total = l_cst + l_recon
    return total, LossBreakdown(
        _value(l_stru), _value(l_cate), _value(l_cst), _value(l_recon), _value(total), stru_anchors, cate_anchors
    )
