"""Embedding-conditioned diffusion: schedule, training loss, DDIM + guidance.

The denoiser works on images rescaled from [0, 1] to [-1, 1]; ``generate``
maps the chain's final state back and clamps only at that point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .geometry import slerp

NATURAL_GUIDANCE = 6.0
HISTOPATHOLOGY_GUIDANCE = 1.75


@dataclass
class NoiseSchedule:
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    betas: np.ndarray = field(init=False, repr=False)
    alphas_cumprod: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if not 1 <= self.ddim_steps <= self.num_timesteps:
            raise ValueError("ddim_steps must lie in [1, num_timesteps]")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.num_timesteps, dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)

    def abar(self, t) -> np.ndarray:
        """Cumulative signal fraction at 1-based ``t``; ``abar(0) == 1``."""
        t = np.asarray(t, dtype=np.int64)
        padded = np.concatenate([[1.0], self.alphas_cumprod])
        return padded[t]

    def timesteps(self, steps: int | None = None) -> np.ndarray:
        """Strictly increasing DDIM sub-sequence of length ``steps`` ending at T."""
        S = self.ddim_steps if steps is None else int(steps)
        if not 1 <= S <= self.num_timesteps:
            raise ValueError("steps must lie in [1, num_timesteps]")
        ts = np.round(np.linspace(self.num_timesteps / S, self.num_timesteps, S)).astype(np.int64)
        if np.any(np.diff(ts) <= 0) or ts[-1] != self.num_timesteps:
            raise ValueError("degenerate DDIM sub-sequence")
        return ts


@dataclass
class GenRequest:
    embedding: np.ndarray | None
    seed: int
    guidance: float = NATURAL_GUIDANCE
    steps: int = 50

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance weight must be non-negative")


def to_model_space(images):
    return np.asarray(images) * 2.0 - 1.0


def to_image_space(x):
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)


# -- training --------------------------------------------------------------

def diffusion_train_loss(denoiser, x0, e, rng: np.random.Generator, schedule: NoiseSchedule,
                         p_drop: float = 0.1) -> Tensor:
    """Epsilon-prediction MSE with random timesteps and conditioning dropout.

    ``denoiser`` is any callable ``(x_t, t, cond, null) -> Tensor``;
    ``e`` is the frozen embedding batch (treated as a constant).
    """
    x0 = to_model_space(np.atleast_2d(x0))
    B, dim = x0.shape
    t = rng.integers(1, schedule.num_timesteps + 1, size=B)
    eps = rng.standard_normal((B, dim))
    drop = rng.random(B) < p_drop
    ab = schedule.abar(t)[:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    e = None if e is None else np.atleast_2d(e.data if isinstance(e, Tensor) else e)
    pred = denoiser(x_t, t, e, drop)
    diff = pred - Tensor(eps.astype(pred.dtype))
    return (diff * diff).mean()


# -- sampling --------------------------------------------------------------

def cfg_combine(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance: ``eps_uncond + w * (eps_cond - eps_uncond)``."""
    if w == 1.0:
        return np.array(eps_cond, copy=True)
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_update(x_t, eps_hat, abar_t: float, abar_prev: float):
    """Deterministic (eta = 0) DDIM move between two signal levels."""
    x0_hat = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps_hat


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    return ddim_update(x_t, eps_hat, float(schedule.abar(t)), float(schedule.abar(t_prev)))


def ddim_chain(denoiser, z: np.ndarray, cond, guidance: float, schedule: NoiseSchedule,
               steps: int | None = None) -> np.ndarray:
    """Run the S-step chain from ``z`` (model space, float64 state) down to t=0.

    ``cond`` is a ``(B, D)`` array or ``None``; with guidance the conditional
    and unconditional predictions come from one stacked forward pass.
    """
    x = np.array(z, dtype=np.float64, copy=True)
    B = x.shape[0]
    ts = schedule.timesteps(steps)
    prev = np.concatenate([[0], ts[:-1]])
    use_uncond = cond is None or guidance != 1.0
    use_cond = cond is not None and guidance != 0.0
    for t, tp in zip(ts[::-1], prev[::-1]):
        with no_grad():
            if use_cond and use_uncond:
                stacked = np.concatenate([x, x], axis=0)
                null = np.concatenate([np.zeros(B, bool), np.ones(B, bool)])
                c2 = np.concatenate([cond, cond], axis=0)
                out = denoiser(stacked, np.full(2 * B, t), c2, null).data.astype(np.float64)
                eps = cfg_combine(out[:B], out[B:], guidance)
            elif use_cond:
                eps = denoiser(x, np.full(B, t), cond, None).data.astype(np.float64)
            else:
                eps = denoiser(x, np.full(B, t), None, None).data.astype(np.float64)
        x = ddim_step(x, eps, int(t), int(tp), schedule)
    return x


def noise_for_seeds(seeds, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def generate_batch(denoiser, embeddings, seeds, guidance: float, schedule: NoiseSchedule,
                   steps: int | None = None) -> np.ndarray:
    """Images in [0, 1] for a batch of (embedding, seed) requests sharing guidance/steps."""
    dim = denoiser.image_dim
    z = noise_for_seeds(seeds, dim)
    cond = None if embeddings is None else np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    x = ddim_chain(denoiser, z, cond, guidance, schedule, steps)
    return to_image_space(x).astype(np.float32)


def generate(denoiser, req: GenRequest, schedule: NoiseSchedule) -> np.ndarray:
    emb = None if req.embedding is None else np.asarray(req.embedding)[None, :]
    return generate_batch(denoiser, emb, [req.seed], req.guidance, schedule, req.steps)[0]


def generate_interpolated(denoiser, e1, e2, alpha: float, req: GenRequest, schedule: NoiseSchedule) -> np.ndarray:
    e_int = slerp(e1, e2, alpha)
    return generate(denoiser, GenRequest(e_int, req.seed, req.guidance, req.steps), schedule)
