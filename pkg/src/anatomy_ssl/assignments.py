"""Token probabilities and the spatial-aware prototype bank.

Student rows are a temperature softmax. Teacher rows come from Sinkhorn-Knopp
balancing, either independently for every token position over its B x K slice
(``position_wise=True``) or over all B*L tokens jointly. Per-position balancing
forces every position's batch-mean row to uniform, which erases the prototype
bank's spatial information, so training uses the joint mode. Teacher rows never
carry gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from . import kernels
from .errors import ConfigurationError, IntegrityError, NumericalError


@dataclass
class TokenProbBlock:
    probs: torch.Tensor | np.ndarray  # (B, L, K), rows sum to 1
    labels: np.ndarray  # (B, L) bool, True = abnormal

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.labels.shape != tuple(self.probs.shape[:2]):
            raise IntegrityError(f"labels {self.labels.shape} do not match probs {tuple(self.probs.shape)}")


def student_probs(logits, tau_s: float = 0.1) -> torch.Tensor:
    if tau_s <= 0:
        raise ConfigurationError(f"tau_s must be positive, got {tau_s}")
    logits = torch.as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite student logits")
    return torch.softmax(logits / tau_s, dim=-1)


def teacher_probs(logits, tau_t: float, iters: int = 3, position_wise: bool = True) -> np.ndarray:
    """Sinkhorn-Knopp assignments, returned as float64 (B, L, K) rows summing to 1.

    Every round scales each column of a B x K slice to mass B/K and then each
    row to 1; the last operation is always a row normalisation.
    """
    if tau_t <= 0:
        raise ConfigurationError(f"tau_t must be positive, got {tau_t}")
    if iters < 1:
        raise ConfigurationError(f"iters must be >= 1, got {iters}")
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    scores = np.asarray(logits, dtype=np.float64) / tau_t
    if scores.ndim != 3:
        raise IntegrityError(f"expected (B, L, K) logits, got shape {scores.shape}")
    if np.isnan(scores).any() or np.isposinf(scores).any():
        raise NumericalError("non-finite teacher logits")
    b, l, k = scores.shape
    if not position_wise:
        scores = scores.reshape(b * l, 1, k)
    # column scaling is the first operation, so a per-column shift is free
    col_max = scores.max(axis=0, keepdims=True)
    if not np.isfinite(col_max).all():
        raise NumericalError("a column of teacher logits is entirely -inf")
    q = np.exp(scores - col_max)
    if (q.sum(axis=2) == 0).any():
        raise NumericalError("a teacher row underflowed to zero mass")
    if q.shape[0] == 1:
        # a single row cannot be balanced; column scaling would flatten it to uniform
        q = np.exp(scores - scores.max(axis=2, keepdims=True))
        q /= q.sum(axis=2, keepdims=True)
    else:
        q = kernels.sinkhorn_balance(np.ascontiguousarray(q), int(iters))
    if not np.isfinite(q).all():
        raise NumericalError("Sinkhorn produced non-finite assignments")
    return q.reshape(b, l, k)


@dataclass
class PrototypeBank:
    """L x K per-position probability prototypes updated by momentum, not by gradients."""

    prototypes: np.ndarray  # (L, K) float64
    momentum: float = 0.9
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1], got {self.momentum}")
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)

    @classmethod
    def empty(cls, num_tokens: int, num_prototypes: int, momentum: float = 0.9) -> "PrototypeBank":
        return cls(np.full((num_tokens, num_prototypes), 1.0 / num_prototypes), momentum, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.prototypes.shape


def update_prototypes(bank: PrototypeBank, teacher) -> PrototypeBank:
    """First call copies the batch-mean teacher rows; later calls blend with momentum."""
    probs = teacher.probs if isinstance(teacher, TokenProbBlock) else teacher
    if isinstance(teacher, TokenProbBlock) and teacher.labels.any():
        raise IntegrityError("prototype updates take teacher rows of normal images only")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[1:] != bank.shape:
        raise IntegrityError(f"teacher block {probs.shape} does not match bank {bank.shape}")
    batch_mean = probs.mean(axis=0)
    if bank.step == 0:
        new = batch_mean.copy()
    else:
        m = bank.momentum
        new = m * bank.prototypes + (1.0 - m) * batch_mean
    return PrototypeBank(new, bank.momentum, bank.step + 1)


class TokenSplit(NamedTuple):
    normal: np.ndarray  # (B, L) bool
    abnormal: np.ndarray  # (B, L) bool
    normal_counts: np.ndarray  # (L,) B+_j
    abnormal_counts: np.ndarray  # (L,) B-_j


def split_tokens(block: TokenProbBlock) -> TokenSplit:
    abnormal = block.labels
    normal = ~abnormal
    return TokenSplit(normal, abnormal, normal.sum(axis=0), abnormal.sum(axis=0))
