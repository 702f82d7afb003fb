"""Teacher-student self-distillation: sharpening, centering, EMA, multi-view loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clamp_min, log, log_softmax, no_grad, softmax
from .models import DinoNet


@dataclass
class DistillState:
    center: np.ndarray
    tau_s: float = 0.1
    tau_t: float = 0.04
    center_momentum: float = 0.9
    teacher_momentum: float = 0.996
    step: int = 0

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 < self.center_momentum < 1:
            raise ValueError("center momentum must lie in (0, 1)")
        if not 0 < self.teacher_momentum <= 1:
            raise ValueError("teacher momentum must lie in (0, 1]")
        self.center = np.asarray(self.center, dtype=np.float64)
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")

    @classmethod
    def zeros(cls, out_dim: int, **kw) -> DistillState:
        return cls(np.zeros(out_dim), **kw)


@dataclass
class ViewBatch:
    """Per-view image arrays, each ``(B, pixels)``.

    Global and synthetic views are seen by teacher and student; local views
    (lower resolution) only by the student.
    """

    global_views: list[np.ndarray]
    local_views: list[np.ndarray] = field(default_factory=list)
    synthetic_views: list[np.ndarray] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return len(self.global_views[0])


# -- probabilities and cross-entropy ---------------------------------------

def sharpen_student(L_s, tau_s: float) -> Tensor:
    L_s = L_s if isinstance(L_s, Tensor) else Tensor(np.asarray(L_s, dtype=np.float64))
    return softmax(L_s * (1.0 / tau_s))


def sharpen_teacher(L_t, center, tau_t: float) -> np.ndarray:
    """Centred, sharpened teacher distribution; always a constant (no graph)."""
    L = L_t.data if isinstance(L_t, Tensor) else np.asarray(L_t)
    z = (L - np.asarray(center, dtype=L.dtype)) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(P_t, P_s) -> Tensor:
    """Mean over rows of ``-sum_k P_t[k] log P_s[k]`` with ``P_s`` clamped at 1e-12."""
    P_s = P_s if isinstance(P_s, Tensor) else Tensor(np.asarray(P_s, dtype=np.float64))
    P_t = P_t.data if isinstance(P_t, Tensor) else np.asarray(P_t)
    terms = Tensor(P_t.astype(P_s.dtype)) * log(clamp_min(P_s, 1e-12))
    if terms.ndim == 1:
        return -terms.sum()
    return -terms.sum(axis=-1).mean()


def entropy(P) -> float:
    P = np.asarray(P, dtype=np.float64)
    return float(-(P * np.log(np.clip(P, 1e-300, None))).sum(axis=-1).mean())


# -- moving averages -------------------------------------------------------

def update_center(center, teacher_logits, m: float) -> np.ndarray:
    """``m * c + (1 - m) * mean(teacher_logits, axis=0)``."""
    L = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    c = np.asarray(center)
    # accumulate in 64-bit and round once so 32-bit centers do not drift
    batch_mean = L.reshape(-1, L.shape[-1]).mean(axis=0, dtype=np.float64)
    out = m * c.astype(np.float64) + (1.0 - m) * batch_mean
    return out.astype(np.result_type(c.dtype, L.dtype))


def update_teacher_ema(teacher: DinoNet, student: DinoNet, lam: float) -> DinoNet:
    """In place: every teacher tensor becomes ``lam * phi + (1 - lam) * theta``."""
    t_params = teacher.parameters()
    s_params = student.parameters()
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, phi in t_params.items():
        theta = s_params[name].data
        if phi.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}: {phi.shape} vs {theta.shape}")
        phi.data = (lam * phi.data.astype(np.float64) + (1.0 - lam) * theta).astype(phi.dtype)
    return teacher


# -- the multi-view loss ---------------------------------------------------

def teacher_logits(teacher: DinoNet, images) -> np.ndarray:
    with no_grad():
        _, L = teacher(images)
    return L.data


def _pair_weights(n_teacher: int, n_student: int, n_global: int, gen_weight: float) -> np.ndarray:
    """Weight of each (teacher view, student view) pair; same-view pairs get 0.

    Teacher views are ordered [globals..., synthetics...]; student views are
    [globals..., synthetics..., locals...] so indices below ``n_teacher``
    refer to the same view on both sides.
    """
    W = np.ones((n_teacher, n_student))
    idx = np.arange(n_teacher)
    W[idx, idx] = 0.0
    synthetic_t = idx >= n_global
    cols = np.arange(n_student)
    synthetic_s = (cols >= n_global) & (cols < n_teacher)
    W[synthetic_t[:, None] | synthetic_s[None, :]] *= gen_weight
    return W


def dino_terms(batch: ViewBatch, student: DinoNet, teacher: DinoNet, state: DistillState,
               gen_weight: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Return (loss, raw teacher logits of all teacher views) without touching the center."""
    teacher_views = list(batch.global_views) + list(batch.synthetic_views)
    if len(teacher_views) < 2:
        raise ValueError("dino_loss needs at least two teacher views")
    student_views = teacher_views + list(batch.local_views)
    B = batch.batch_size
    n_t, n_s = len(teacher_views), len(student_views)

    L_t = teacher_logits(teacher, np.concatenate(teacher_views, axis=0))
    P_t = sharpen_teacher(L_t, state.center, state.tau_t).reshape(n_t, B, -1)

    # student: the local views may differ in resolution, so encode per group
    same_res = np.concatenate(teacher_views, axis=0)
    groups = [same_res] + ([np.concatenate(batch.local_views, axis=0)] if batch.local_views else [])
    logp = []
    for g in groups:
        _, L_s = student(g)
        logp.append(log_softmax(L_s * (1.0 / state.tau_s)))

    W = _pair_weights(n_t, n_s, len(batch.global_views), gen_weight)
    total_w = W.sum()
    if total_w <= 0:
        raise ValueError("no valid (teacher, student) view pairs")
    # sum_{i,j} W_ij CE(P_t[i], P_s[j]) = -sum_j <Q_j, log P_s[j]>, with Q_j = sum_i W_ij P_t[i]
    Q = np.einsum("ij,ibk->jbk", W, P_t)
    loss = None
    start = 0
    for lp in logp:
        n_views = lp.shape[0] // B
        q = Q[start:start + n_views].reshape(n_views * B, -1).astype(lp.dtype)
        term = (Tensor(q) * lp).sum()
        loss = term if loss is None else loss + term
        start += n_views
    return loss * (-1.0 / (B * total_w)), L_t


def dino_loss(batch: ViewBatch, student: DinoNet, teacher: DinoNet, state: DistillState,
              gen_weight: float = 1.0, update: bool = True) -> Tensor:
    """Mean cross-entropy over all distinct (teacher view, student view) pairs.

    With ``update`` the center absorbs this step's teacher logits once.
    Pairs touching a synthetic view are weighted by ``gen_weight``.
    """
    loss, L_t = dino_terms(batch, student, teacher, state, gen_weight)
    if update:
        state.center = update_center(state.center, L_t, state.center_momentum)
    return loss


# -- schedules -------------------------------------------------------------

@dataclass
class ScheduleConfig:
    base_lr: float = 5e-4
    batch_size: int = 128
    min_lr: float = 1e-6
    warmup_steps: int = 0
    wd_start: float = 0.04
    wd_end: float = 0.4
    momentum_start: float = 0.996

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


def _cosine(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def cosine_schedules(step: int, total_steps: int, cfg: ScheduleConfig) -> tuple[float, float, float]:
    """(learning rate, weight decay, teacher momentum) at ``step`` of ``total_steps``."""
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    peak = cfg.peak_lr
    if step < cfg.warmup_steps:
        lr = peak * step / cfg.warmup_steps
    else:
        span = max(total_steps - cfg.warmup_steps, 1)
        lr = _cosine(peak, cfg.min_lr, min((step - cfg.warmup_steps) / span, 1.0))
    wd = _cosine(cfg.wd_start, cfg.wd_end, frac)
    lam = _cosine(cfg.momentum_start, 1.0, frac)
    return lr, wd, lam
