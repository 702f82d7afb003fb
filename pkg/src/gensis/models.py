"""Encoder backbone, projection head and conditioned denoiser.

All three are small perceptron stacks over flattened ``H x W x C`` images.
Parameters live in plain ``dict[str, Tensor]`` containers so that
checkpointing and the teacher EMA can treat every network uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .autodiff import Tensor, ShapeError, concatenate, gelu, layer_norm


def _linear(rng: np.random.Generator, n_in: int, n_out: int, dtype, scale: float = 1.0):
    w = rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(n_in))
    return Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)


def _affine_ln(h: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return layer_norm(h) * gain + bias


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    return Tensor(np.asarray(x, dtype=dtype))


class _Params:
    params: dict[str, Tensor]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


@dataclass
class EncoderParams(_Params):
    """Backbone: two (linear, gelu, layer-norm) blocks and an output linear to D dims."""

    params: dict[str, Tensor]
    image_shape: tuple[int, int, int]  # (H, W, C)

    @classmethod
    def init(cls, rng, image_shape=(16, 16, 3), hidden: int = 256, embed_dim: int = 64, dtype=np.float32):
        n_in = int(np.prod(image_shape))
        p: dict[str, Tensor] = {}
        p["fc1.w"], p["fc1.b"] = _linear(rng, n_in, hidden, dtype)
        p["ln1.g"] = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
        p["ln1.b"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        p["fc2.w"], p["fc2.b"] = _linear(rng, hidden, hidden, dtype)
        p["ln2.g"] = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
        p["ln2.b"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        p["out.w"], p["out.b"] = _linear(rng, hidden, embed_dim, dtype)
        return cls(p, tuple(image_shape))

    @property
    def input_dim(self) -> int:
        return self.params["fc1.w"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["out.w"].shape[1]


@dataclass
class HeadParams(_Params):
    """Projection head D -> H -> K producing pre-softmax logits."""

    params: dict[str, Tensor]

    @classmethod
    def init(cls, rng, embed_dim: int = 64, hidden: int = 256, out_dim: int = 256, dtype=np.float32):
        p: dict[str, Tensor] = {}
        p["fc1.w"], p["fc1.b"] = _linear(rng, embed_dim, hidden, dtype)
        p["fc2.w"], p["fc2.b"] = _linear(rng, hidden, out_dim, dtype)
        return cls(p)

    @property
    def out_dim(self) -> int:
        return self.params["fc2.w"].shape[1]


@dataclass
class DenoiserParams(_Params):
    """Noise predictor over concat(x_t, time embedding, conditioning, null flag).

    The hidden width is smaller than the image, so the output also carries a
    skip term ``gain * x_t`` whose scalar gain is read off the side features;
    without it the net cannot even pass pure noise through at large t.
    The null flag is a dedicated input channel: it is 1 and the embedding
    slot is zeroed for unconditional rows, so a genuine all-zero embedding
    is still distinguishable from "no conditioning".
    """

    params: dict[str, Tensor]
    num_timesteps: int = 1000
    time_dim: int = 64
    n_layers: int = field(default=3)

    @classmethod
    def init(cls, rng, image_dim: int = 768, embed_dim: int = 64, hidden: int = 256, n_layers: int = 3,
             time_dim: int = 64, num_timesteps: int = 1000, dtype=np.float32):
        p: dict[str, Tensor] = {}
        p["in.w"], p["in.b"] = _linear(rng, image_dim + time_dim + embed_dim + 1, hidden, dtype)
        p["cond.w"], p["cond.b"] = _linear(rng, time_dim + embed_dim + 1, hidden, dtype)
        for i in range(1, n_layers):
            p[f"ln{i}.g"] = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
            p[f"ln{i}.b"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
            p[f"fc{i}.w"], p[f"fc{i}.b"] = _linear(rng, hidden, hidden, dtype)
        p["lno.g"] = Tensor(np.ones(hidden, dtype=dtype), requires_grad=True)
        p["lno.b"] = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        p["out.w"], p["out.b"] = _linear(rng, hidden, image_dim, dtype, scale=0.1)
        p["skip.w"] = Tensor(np.zeros((time_dim + embed_dim + 1, 1), dtype=dtype), requires_grad=True)
        p["skip.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        return cls(p, num_timesteps, time_dim, n_layers)

    @property
    def image_dim(self) -> int:
        return self.params["out.w"].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.params["in.w"].shape[0] - self.image_dim - self.time_dim - 1

    def __call__(self, x_t, t, cond, null=None) -> Tensor:
        return denoise(self, x_t, t, cond, null)


@dataclass
class DinoNet:
    """Backbone plus projection head; student and teacher are both DinoNets."""

    encoder: EncoderParams
    head: HeadParams

    @classmethod
    def init(cls, rng, image_shape=(16, 16, 3), hidden: int = 256, embed_dim: int = 64,
             head_hidden: int = 256, out_dim: int = 256, dtype=np.float32):
        enc = EncoderParams.init(rng, image_shape, hidden, embed_dim, dtype)
        head = HeadParams.init(rng, embed_dim, head_hidden, out_dim, dtype)
        return cls(enc, head)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def copy(self, requires_grad: bool = False) -> DinoNet:
        enc = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.encoder.params.items()}
        head = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.head.params.items()}
        return DinoNet(EncoderParams(enc, self.encoder.image_shape), HeadParams(head))

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        e = encode(self.encoder, images)
        return e, project(self.head, e)

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray], image_shape, requires_grad: bool = False) -> DinoNet:
        enc = {k[len("encoder."):]: Tensor(v, requires_grad=requires_grad) for k, v in state.items() if k.startswith("encoder.")}
        head = {k[len("head."):]: Tensor(v, requires_grad=requires_grad) for k, v in state.items() if k.startswith("head.")}
        return cls(EncoderParams(enc, tuple(image_shape)), HeadParams(head))


# -- forward passes --------------------------------------------------------

def upsample_nearest(images: np.ndarray, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Repeat pixels of flattened low-resolution views up to ``image_shape``."""
    H, W, C = image_shape
    flat = np.asarray(images)
    n = flat.shape[-1] // C
    side = int(round(math.sqrt(n)))
    if side * side * C != flat.shape[-1] or H % side or W % side:
        raise ShapeError("upsample", flat.shape, image_shape)
    f = H // side
    x = flat.reshape(flat.shape[:-1] + (side, side, C))
    x = np.repeat(np.repeat(x, f, axis=-3), f, axis=-2)
    return x.reshape(flat.shape[:-1] + (H * W * C,))


def encode(params: EncoderParams, image) -> Tensor:
    """Map flattened images (``(B, HWC)`` or a single ``(HWC,)``) to embeddings.

    Lower-resolution views (local crops) are nearest-upsampled to the
    configured input size first. Inputs in [0, 1] are centred to [-1, 1].
    """
    p = params.params
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError("encode", x.shape, (params.input_dim,))
    if x.shape[1] != params.input_dim:
        x = upsample_nearest(x, params.image_shape)
    xin = _as_input(x * 2.0 - 1.0, params.dtype)
    h = _affine_ln(gelu(xin @ p["fc1.w"] + p["fc1.b"]), p["ln1.g"], p["ln1.b"])
    h = _affine_ln(gelu(h @ p["fc2.w"] + p["fc2.b"]), p["ln2.g"], p["ln2.b"])
    e = h @ p["out.w"] + p["out.b"]
    return e[0] if single else e


def project(params: HeadParams, e) -> Tensor:
    p = params.params
    e = _as_input(e, params.dtype)
    single = e.ndim == 1
    if single:
        e = e.reshape(1, e.shape[0])
    if e.shape[1] != p["fc1.w"].shape[0]:
        raise ShapeError("project", e.shape, p["fc1.w"].shape)
    out = gelu(e @ p["fc1.w"] + p["fc1.b"]) @ p["fc2.w"] + p["fc2.b"]
    return out[0] if single else out


def timestep_embedding(t, dim: int, num_timesteps: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = (t * (1000.0 / num_timesteps))[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def denoise(params: DenoiserParams, x_t, t, cond, null=None) -> Tensor:
    """Predict the noise in ``x_t``.

    ``cond`` is a ``(B, D)`` embedding array or ``None`` (fully
    unconditional); ``null`` optionally marks individual rows as
    unconditional. Null rows see a zeroed embedding slot and flag=1.
    """
    p = params.params
    dtype = params.dtype
    x = _as_input(x_t, dtype)
    if x.ndim != 2 or x.shape[1] != params.image_dim:
        raise ShapeError("denoise", x.shape, (params.image_dim,))
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if t.min() < 1 or t.max() > params.num_timesteps:
        raise ValueError(f"denoise: timestep out of range [1, {params.num_timesteps}]")
    null_mask = np.zeros(B, dtype=bool) if null is None else np.broadcast_to(np.asarray(null, dtype=bool), (B,))
    if cond is None:
        payload = np.zeros((B, params.embed_dim), dtype=dtype)
        null_mask = np.ones(B, dtype=bool)
    else:
        c = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
        payload = np.broadcast_to(c, (B, params.embed_dim)).astype(dtype)
        payload = np.where(null_mask[:, None], 0, payload).astype(dtype)
    side = np.concatenate(
        [timestep_embedding(t, params.time_dim, params.num_timesteps).astype(dtype), payload,
         null_mask[:, None].astype(dtype)], axis=1)
    side_t = Tensor(side)
    s = gelu(side_t @ p["cond.w"] + p["cond.b"])
    h = gelu(concatenate([x, side_t], axis=1) @ p["in.w"] + p["in.b"] + s)
    for i in range(1, params.n_layers):
        h = h + gelu(_affine_ln(h, p[f"ln{i}.g"], p[f"ln{i}.b"]) @ p[f"fc{i}.w"] + p[f"fc{i}.b"] + s)
    gain = side_t @ p["skip.w"] + p["skip.b"]
    return _affine_ln(h, p["lno.g"], p["lno.b"]) @ p["out.w"] + p["out.b"] + x * gain


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    formats.write_container(path, state, formats.CHECKPOINT_MAGIC)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return formats.read_container(path, formats.CHECKPOINT_MAGIC)


def denoiser_from_state(state: dict[str, np.ndarray], num_timesteps: int, time_dim: int = 64,
                        requires_grad: bool = False) -> DenoiserParams:
    n_layers = 1 + sum(1 for k in state if k.startswith("fc") and k.endswith(".w"))
    params = {k: Tensor(v, requires_grad=requires_grad) for k, v in state.items()}
    return DenoiserParams(params, num_timesteps, time_dim, n_layers)
