"""Teacher credibility and the distillation / regularisation loss terms.

The selective term weights each logit channel of each sample by how far the
frozen global model can be trusted there::

    M_class[k]  = A[k, k] * (1 - max_{j != k} A[j, k])
    M_sample(x) = 1 - sqrt(1 - p_teacher(x)[y])
    M(x)[k]     = M_max * max(0, M_class[k] * M_sample(x) - 0.1)
    L_ssd       = mean_x || M(x) * (z_teacher - z) ||^2

where ``A`` is the teacher's row-normalised confusion matrix on a small
server-side auxiliary set.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fedssd.data import LabeledDataset
from fedssd.errors import ShapeError
from fedssd.metrics import confusion_counts
from fedssd.nn import (
    Batch,
    ModelParams,
    _forward,
    backprop,
    cross_entropy,
    cross_entropy_grad,
    log_softmax,
    softmax_probs,
)

# Dead-zone threshold below which a channel is not distilled at all.
DEAD_ZONE = 0.1


@dataclass(frozen=True)
class CredibilityMatrix:
    """Row ``k1`` holds the teacher's prediction frequencies for true class ``k1``."""

    matrix: np.ndarray
    support: np.ndarray
    round: int = 0

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "support": self.support.tolist(),
            "matrix": self.matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CredibilityMatrix:
        return cls(np.asarray(d["matrix"], dtype=np.float64), np.asarray(d["support"]), d["round"])


def credibility_matrix(
    teacher: ModelParams, aux: LabeledDataset, round: int = 0
) -> CredibilityMatrix:
    counts = confusion_counts(teacher, aux)
    support = counts.sum(axis=1)
    if np.any(support == 0):
        missing = np.flatnonzero(support == 0).tolist()
        raise ValueError(f"auxiliary set has no samples of classes {missing}")
    return CredibilityMatrix(counts / support[:, None], support, round)


def class_weights(cred: CredibilityMatrix | np.ndarray) -> np.ndarray:
    a = cred.matrix if isinstance(cred, CredibilityMatrix) else np.asarray(cred, dtype=np.float64)
    k = a.shape[0]
    off = a.copy()
    np.fill_diagonal(off, -np.inf)
    # worst rate at which another class is mistaken for column k
    worst = off.max(axis=0) if k > 1 else np.zeros(1)
    return np.diag(a) * (1.0 - worst)


def sample_weight(p_true):
    """``1 - sqrt(1 - p_true)``; works elementwise on arrays."""
    p = np.asarray(p_true, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0) or np.isnan(p).any():
        raise ValueError("p_true must lie in [0, 1]")
    out = 1.0 - np.sqrt(1.0 - p)
    return float(out) if out.ndim == 0 else out


def weight_vector(m_class: np.ndarray, m_sample, m_max: float, dead_zone: float = DEAD_ZONE):
    """Per-channel distillation weights.

    ``m_sample`` may be a scalar (one sample, returns shape ``(K,)``) or a
    length-``b`` vector (returns ``(b, K)``). ``dead_zone`` is experimental;
    leave it at its default to keep the published weighting.
    """
    if m_max < 0:
        raise ValueError("m_max must be non-negative")
    m_class = np.asarray(m_class, dtype=np.float64)
    m_sample = np.asarray(m_sample, dtype=np.float64)
    if m_sample.ndim == 1:
        m_sample = m_sample[:, None]
    return m_max * np.maximum(m_class * m_sample - dead_zone, 0.0)


def _check_pair(z_teacher: np.ndarray, z_student: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zt = np.asarray(z_teacher, dtype=np.float64)
    zs = np.asarray(z_student, dtype=np.float64)
    if zt.shape != zs.shape or zs.ndim != 2:
        raise ShapeError(f"teacher logits {zt.shape} vs student logits {zs.shape}")
    return zt, zs


def ssd_loss(z_teacher, z_student, weights) -> tuple[float, np.ndarray]:
    """Weighted squared logit distance and its gradient with respect to ``z_student``."""
    zt, zs = _check_pair(z_teacher, z_student)
    m = np.broadcast_to(np.asarray(weights, dtype=np.float64), zs.shape)
    b = zs.shape[0]
    diff = zs - zt
    m2 = m * m
    loss = float(np.sum(m2 * diff * diff) / b)
    return loss, 2.0 * m2 * diff / b


def mse_distill_loss(z_teacher, z_student, alpha: float) -> tuple[float, np.ndarray]:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    zt, zs = _check_pair(z_teacher, z_student)
    b = zs.shape[0]
    diff = zs - zt
    return float(alpha * np.sum(diff * diff) / b), 2.0 * alpha * diff / b


def kl_distill_loss(z_teacher, z_student, tau: float, alpha: float) -> tuple[float, np.ndarray]:
    """``alpha * tau^2 * mean KL(softmax(z_t/tau) || softmax(z_s/tau))``."""
    if alpha < 0 or not tau > 0:
        raise ValueError("need alpha >= 0 and tau > 0")
    zt, zs = _check_pair(z_teacher, z_student)
    b = zs.shape[0]
    log_q = log_softmax(zt / tau)
    log_p = log_softmax(zs / tau)
    q = np.exp(log_q)
    kl = np.sum(q * (log_q - log_p)) / b
    grad = alpha * tau * (np.exp(log_p) - q) / b
    return float(alpha * tau * tau * kl), grad


def prox_term(w: ModelParams, w_global: ModelParams, mu: float) -> tuple[float, ModelParams]:
    """``mu/2 * ||w - w_global||^2`` and its parameter gradient."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    w.check_same_shape(w_global)
    diff = w.flat() - w_global.flat()
    return float(0.5 * mu * diff @ diff), w.with_flat(mu * diff)


class LossMode(str, enum.Enum):
    CE_ONLY = "ce"
    SSD = "ssd"
    KL_CONST = "kl"
    MSE_CONST = "mse"
    PROX = "prox"


# command-line algorithm names
ALGORITHMS = {
    "fedavg": LossMode.CE_ONLY,
    "ssd": LossMode.SSD,
    "kl": LossMode.KL_CONST,
    "mse": LossMode.MSE_CONST,
    "fedprox": LossMode.PROX,
}


@dataclass(frozen=True)
class CompositeLossSpec:
    """Which term is added to cross-entropy, and its strength.

    ``coefficient`` is ``M_max`` for SSD, ``alpha`` for the constant
    distillation losses and ``mu`` for the proximal term.
    """

    mode: LossMode = LossMode.CE_ONLY
    coefficient: float = 0.0
    tau: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", LossMode(self.mode))
        if not self.coefficient >= 0:
            raise ValueError("loss coefficient must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def needs_teacher(self) -> bool:
        return self.mode in (LossMode.SSD, LossMode.KL_CONST, LossMode.MSE_CONST)

    @property
    def active(self) -> bool:
        """False when the extra term is identically zero."""
        return self.mode is not LossMode.CE_ONLY and self.coefficient > 0

    @classmethod
    def for_algorithm(cls, name: str, *, m_max=0.01, mu=0.01, alpha=0.01, tau=1.0):
        mode = ALGORITHMS[name]
        coef = {
            LossMode.CE_ONLY: 0.0,
            LossMode.SSD: m_max,
            LossMode.KL_CONST: alpha,
            LossMode.MSE_CONST: alpha,
            LossMode.PROX: mu,
        }[mode]
        return cls(mode, coef, tau)


@dataclass(frozen=True)
class Teacher:
    """Frozen global model plus what the selective term derives from it."""

    params: ModelParams
    class_weights: np.ndarray | None = None


@dataclass
class LossValues:
    ce: float
    distill: float

    @property
    def total(self) -> float:
        return self.ce + self.distill


def ssd_batch_weights(
    teacher_logits: np.ndarray, labels: np.ndarray, m_class: np.ndarray, m_max: float
) -> np.ndarray:
    p = softmax_probs(teacher_logits)
    p_true = p[np.arange(labels.shape[0]), labels]
    return weight_vector(m_class, sample_weight(np.clip(p_true, 0.0, 1.0)), m_max)


def backward(
    params: ModelParams,
    batch: Batch,
    spec: CompositeLossSpec,
    teacher: Teacher | None = None,
    *,
    weights: np.ndarray | None = None,
) -> tuple[LossValues, ModelParams]:
    """Composite loss and its exact gradient, averaged over the batch.

    ``weights`` overrides the per-sample SSD weights (otherwise derived from
    the teacher and its class weights). When the extra term is inactive the
    returned gradient is the cross-entropy gradient bit for bit.
    """
    if spec.mode is not LossMode.CE_ONLY and teacher is None:
        raise ValueError(f"loss mode {spec.mode.value!r} needs the global model")
    acts = _forward(params, batch.inputs)
    z = acts[-1]
    probs = softmax_probs(z)
    ce = cross_entropy(probs, batch.labels)
    g_logits = cross_entropy_grad(probs, batch.labels)
    distill = 0.0
    prox_grad = None

    if spec.active and spec.needs_teacher:
        z_t = _forward(teacher.params, batch.inputs)[-1]
        if spec.mode is LossMode.SSD:
            if weights is None:
                if teacher.class_weights is None:
                    raise ValueError("SSD needs the teacher's class weights")
                weights = ssd_batch_weights(
                    z_t, batch.labels, teacher.class_weights, spec.coefficient
                )
            if np.any(weights):
                distill, g = ssd_loss(z_t, z, weights)
                g_logits = g_logits + g
        elif spec.mode is LossMode.MSE_CONST:
            distill, g = mse_distill_loss(z_t, z, spec.coefficient)
            g_logits = g_logits + g
        else:
            distill, g = kl_distill_loss(z_t, z, spec.tau, spec.coefficient)
            g_logits = g_logits + g
    elif spec.active and spec.mode is LossMode.PROX:
        distill, prox_grad = prox_term(params, teacher.params, spec.coefficient)

    grads = backprop(params, acts, g_logits)
    if prox_grad is not None:
        grads = grads.with_flat(grads.flat() + prox_grad.flat())
    return LossValues(ce, distill), grads


def composite_loss(
    params: ModelParams,
    batch: Batch,
    spec: CompositeLossSpec,
    teacher: Teacher | None = None,
    *,
    weights: np.ndarray | None = None,
) -> float:
    """Scalar loss only; used as the finite-difference target."""
    return backward(params, batch, spec, teacher, weights=weights)[0].total
