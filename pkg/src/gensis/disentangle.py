"""Disentanglement pretext task on interpolated images.

The student sees the interpolated image; its target is the teacher's
distribution over the alpha-blend of the two source images' head logits,
centred and sharpened exactly like an ordinary teacher output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .autodiff import Tensor, log_softmax, no_grad
from .distill import DistillState, ViewBatch, dino_terms, sharpen_teacher, update_center
from .geometry import entangle_logits, mix_pixels
from .models import DinoNet, project

ENTANGLE_AFTER_HEAD = "head"
ENTANGLE_BEFORE_HEAD = "backbone"


class EntanglementPositionError(ValueError):
    """Pre-head entanglement was requested without enabling the ablation."""


@dataclass
class DisentangleBatch:
    """Primary/secondary sources, their interpolation and its per-sample alpha."""

    primary: np.ndarray
    secondary: np.ndarray
    interpolated: np.ndarray | None
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (len(self.primary),)).copy()
        if self.interpolated is None:
            raise ValueError("missing interpolated image for disentanglement batch")
        if len(self.interpolated) != len(self.primary) or len(self.secondary) != len(self.primary):
            raise ValueError("disentanglement batch components differ in length")
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise ValueError("alpha must lie in [0, 1]")

    @classmethod
    def pixel_baseline(cls, primary, secondary, alpha) -> DisentangleBatch:
        """Batch whose interpolated image is the pixel-space blend of the sources."""
        return cls(primary, secondary, mix_pixels(primary, secondary, np.asarray(alpha)), alpha)

    def augmented(self, augment: Callable[[np.ndarray], np.ndarray]) -> DisentangleBatch:
        """Apply an independent draw of ``augment`` to each of the three images."""
        return replace(self, primary=augment(self.primary), secondary=augment(self.secondary),
                       interpolated=augment(self.interpolated))


def entangled_teacher_logits(batch: DisentangleBatch, teacher: DinoNet, position: str = ENTANGLE_AFTER_HEAD,
                             allow_pre_head: bool = False) -> np.ndarray:
    B = len(batch.primary)
    with no_grad():
        e, L = teacher(np.concatenate([batch.primary, batch.secondary], axis=0))
        if position == ENTANGLE_AFTER_HEAD:
            return entangle_logits(L.data[:B], L.data[B:], batch.alpha).astype(L.dtype)
        if position != ENTANGLE_BEFORE_HEAD:
            raise ValueError(f"unknown entanglement position {position!r}")
        if not allow_pre_head:
            raise EntanglementPositionError("pre-head entanglement is only available as an ablation")
        mixed = entangle_logits(e.data[:B], e.data[B:], batch.alpha).astype(e.dtype)
        return project(teacher.head, mixed).data


def disentangle_terms(batch: DisentangleBatch, student: DinoNet, teacher: DinoNet, state: DistillState,
                      position: str = ENTANGLE_AFTER_HEAD, allow_pre_head: bool = False) -> tuple[Tensor, np.ndarray]:
    """(loss, entangled teacher logits); the center is left untouched."""
    L_ent = entangled_teacher_logits(batch, teacher, position, allow_pre_head)
    P_ent = sharpen_teacher(L_ent, state.center, state.tau_t)
    _, L_int = student(batch.interpolated)
    logp = log_softmax(L_int * (1.0 / state.tau_s))
    loss = (Tensor(P_ent.astype(logp.dtype)) * logp).sum() * (-1.0 / len(batch.primary))
    return loss, L_ent


def disentangle_loss(batch: DisentangleBatch, student: DinoNet, teacher: DinoNet, state: DistillState,
                     position: str = ENTANGLE_AFTER_HEAD, allow_pre_head: bool = False,
                     update: bool = False) -> Tensor:
    """Batch mean of ``H(P_ent, P_int)``.

    ``batch`` should already hold augmented views. With ``update`` the
    entangled logits are folded into the center.
    """
    loss, L_ent = disentangle_terms(batch, student, teacher, state, position, allow_pre_head)
    if update:
        state.center = update_center(state.center, L_ent, state.center_momentum)
    return loss


def disentangle_loss_pixel_baseline(primary, secondary, alpha, student: DinoNet, teacher: DinoNet,
                                    state: DistillState, augment: Callable[[np.ndarray], np.ndarray] | None = None,
                                    update: bool = False) -> Tensor:
    """Same objective with the interpolated input replaced by a pixel blend."""
    batch = DisentangleBatch.pixel_baseline(primary, secondary, alpha)
    if augment is not None:
        batch = batch.augmented(augment)
    return disentangle_loss(batch, student, teacher, state, update=update)


def total_gensis_loss(view_batch: ViewBatch | None, dis_batch: DisentangleBatch | None, student: DinoNet,
                      teacher: DinoNet, state: DistillState, lambda_dis: float = 1.0, lambda_gen: float = 1.0,
                      center_includes_entangled: bool = True, position: str = ENTANGLE_AFTER_HEAD,
                      allow_pre_head: bool = False, update: bool = True) -> Tensor:
    """``dino_loss + lambda_dis * disentangle_loss`` with one center update.

    Either part may be ``None`` to disable it. The center update sees every
    teacher logit row of this step (entangled rows included unless
    ``center_includes_entangled`` is off).
    """
    loss = None
    stream = []
    if view_batch is not None:
        loss, L_t = dino_terms(view_batch, student, teacher, state, lambda_gen)
        stream.append(L_t)
    if dis_batch is not None and lambda_dis != 0.0:
        d_loss, L_ent = disentangle_terms(dis_batch, student, teacher, state, position, allow_pre_head)
        loss = d_loss * lambda_dis if loss is None else loss + d_loss * lambda_dis
        if center_includes_entangled:
            stream.append(L_ent)
    if loss is None:
        raise ValueError("total_gensis_loss: both loss parts are disabled")
    if update and stream:
        state.center = update_center(state.center, np.concatenate(stream, axis=0), state.center_momentum)
    return loss
