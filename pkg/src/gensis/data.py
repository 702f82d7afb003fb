"""Procedural toy images and hand-crafted augmentations.

Images are flattened ``H x W x C`` float32 vectors in [0, 1]. Each image
shows one shape (disk, square, triangle, cross) in one of two colour
families on a textured background. The class id is (shape, family) and is
only exposed through :meth:`ToyDataset.evaluation_labels`.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import formats
from .distill import ViewBatch

SHAPES = ("disk", "square", "triangle", "cross")
COLOR_FAMILIES = ("warm", "cool")
# hue ranges (fraction of the colour wheel) for each family
_FAMILY_HUES = {"warm": (1.02, 1.06), "cool": (0.58, 0.62)}


@dataclass
class DatasetConfig:
    size: int = 16
    channels: int = 3
    n_train: int = 4096
    n_test: int = 1024
    supersample: int = 4
    radius_range: tuple[float, float] = (5.0, 6.5)
    position_jitter: float = 0.5
    max_rotation: float = 20.0
    texture_amplitude: float = 0.12
    background_saturation: float = 0.0
    background_value: tuple[float, float] = (0.3, 0.4)
    gradient_strength: float = 0.05
    foreground_saturation: tuple[float, float] = (0.8, 0.95)
    foreground_value: tuple[float, float] = (0.85, 1.0)

    def __post_init__(self):
        for name in ("radius_range", "background_value", "foreground_saturation", "foreground_value"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.channels != 3:
            raise ValueError("only RGB images are supported")
        if self.size < 4 or self.size % 2:
            raise ValueError("image size must be an even number >= 4")
        if self.n_train < len(SHAPES) * len(COLOR_FAMILIES) or self.n_test < 0:
            raise ValueError("dataset too small for one image per class")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, self.channels)

    @property
    def dim(self) -> int:
        return self.size * self.size * self.channels


def class_names() -> list[str]:
    return [f"{s}/{c}" for s in SHAPES for c in COLOR_FAMILIES]


class ToyDataset:
    """Train/test images plus evaluation-only labels."""

    def __init__(self, train_images, test_images, train_labels, test_labels, seed: int, config: DatasetConfig):
        self.train_images = np.ascontiguousarray(train_images, dtype=np.float32)
        self.test_images = np.ascontiguousarray(test_images, dtype=np.float32)
        self._labels = {"train": np.asarray(train_labels, dtype=np.int64),
                        "test": np.asarray(test_labels, dtype=np.int64)}
        self.seed = int(seed)
        self.config = config

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.config.image_shape

    @property
    def num_classes(self) -> int:
        return len(SHAPES) * len(COLOR_FAMILIES)

    def evaluation_labels(self, split: str) -> np.ndarray:
        """Class ids for evaluation only; training code never calls this."""
        return self._labels[split]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "counts": {"train": len(self.train_images), "test": len(self.test_images)},
            "image_shape": list(self.image_shape),
            "class_names": class_names(),
            "config": asdict(self.config),
        }


# -- rendering -------------------------------------------------------------

def _shape_mask(kind: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Coverage of unit-scale shapes in rotated local coords (u, v)."""
    disk = u * u + v * v <= 1.0
    square = np.maximum(np.abs(u), np.abs(v)) <= 0.82
    # equilateral triangle inscribed in the unit circle, apex up
    s3 = np.sqrt(3.0)
    tri = (v >= -0.5) & (s3 * u + v <= 1.0) & (-s3 * u + v <= 1.0)
    cross = ((np.abs(u) <= 0.33) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.33) & (np.abs(u) <= 1.0))
    k = kind[:, None, None]
    return np.where(k == 0, disk, np.where(k == 1, square, np.where(k == 2, tri, cross)))


def _hsv_to_rgb(h, s, v) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(float(hh) % 1.0, float(ss), float(vv)) for hh, ss, vv in zip(h, s, v)])


def _render(rng: np.random.Generator, labels: np.ndarray, cfg: DatasetConfig) -> np.ndarray:
    n = len(labels)
    S, ss = cfg.size, cfg.supersample
    shape_id = labels // len(COLOR_FAMILIES)
    family = labels % len(COLOR_FAMILIES)

    radius = rng.uniform(*cfg.radius_range, size=n)
    cx = S / 2 + rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=n)
    cy = S / 2 + rng.uniform(-cfg.position_jitter, cfg.position_jitter, size=n)
    theta = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation, size=n))

    lo = np.array([_FAMILY_HUES[COLOR_FAMILIES[f]][0] for f in family])
    hi = np.array([_FAMILY_HUES[COLOR_FAMILIES[f]][1] for f in family])
    fg = _hsv_to_rgb(rng.uniform(lo, hi), rng.uniform(*cfg.foreground_saturation, size=n),
                     rng.uniform(*cfg.foreground_value, size=n))

    bg_hue = rng.uniform(0, 1, n)
    bg_value = rng.uniform(*cfg.background_value, size=n)
    bg_a = _hsv_to_rgb(bg_hue, rng.uniform(0.0, cfg.background_saturation, n), bg_value)
    bg_b = _hsv_to_rgb(bg_hue + rng.uniform(-0.1, 0.1, n), rng.uniform(0.0, cfg.background_saturation, n),
                       np.clip(bg_value + rng.uniform(-cfg.gradient_strength, cfg.gradient_strength, n), 0, 1))

    # supersampled coverage, box-filtered down to S x S
    g = (np.arange(S * ss) + 0.5) / ss
    yy, xx = np.meshgrid(g, g, indexing="ij")
    dx = xx[None] - cx[:, None, None]
    dy = yy[None] - cy[:, None, None]
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    u = (c * dx + s * dy) / radius[:, None, None]
    v = (-s * dx + c * dy) / radius[:, None, None]
    cover = _shape_mask(shape_id, u, -v).astype(np.float64)
    cover = cover.reshape(n, S, ss, S, ss).mean(axis=(2, 4))[..., None]

    # background: linear gradient between two muted colours plus fine texture
    phi = rng.uniform(0, 2 * np.pi, n)
    px = (np.arange(S) + 0.5) / S
    py, pxx = np.meshgrid(px, px, indexing="ij")
    ramp = 0.5 + 0.5 * (np.cos(phi)[:, None, None] * (pxx - 0.5) + np.sin(phi)[:, None, None] * (py - 0.5)) * 1.6
    ramp = np.clip(ramp, 0, 1)[..., None]
    bg = bg_a[:, None, None, :] * (1 - ramp) + bg_b[:, None, None, :] * ramp
    bg = bg + cfg.texture_amplitude * rng.standard_normal((n, S, S, 1))

    img = bg * (1 - cover) + fg[:, None, None, :] * cover
    img = img + 0.02 * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).reshape(n, -1).astype(np.float32)


def _balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    return labels


def generate_dataset(seed: int, config: DatasetConfig | None = None, chunk: int = 512) -> ToyDataset:
    """Deterministic class-balanced dataset for ``seed``."""
    cfg = config or DatasetConfig()
    root = np.random.SeedSequence(int(seed))
    lab_ss, train_ss, test_ss = root.spawn(3)
    n_classes = len(SHAPES) * len(COLOR_FAMILIES)
    lrng = np.random.default_rng(lab_ss)
    y_train = _balanced_labels(lrng, cfg.n_train, n_classes)
    y_test = _balanced_labels(lrng, cfg.n_test, n_classes)

    def render_all(labels, ss):
        rng = np.random.default_rng(ss)
        parts = [_render(rng, labels[i:i + chunk], cfg) for i in range(0, len(labels), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, cfg.dim), np.float32)

    return ToyDataset(render_all(y_train, train_ss), render_all(y_test, test_ss), y_train, y_test, seed, cfg)


def save_dataset(path, ds: ToyDataset) -> None:
    arrays = {
        "train/images": ds.train_images,
        "train/labels": ds.evaluation_labels("train").astype(np.float32),
        "test/images": ds.test_images,
        "test/labels": ds.evaluation_labels("test").astype(np.float32),
    }
    formats.write_container(path, arrays, formats.DATASET_MAGIC)
    Path(str(path) + ".json").write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True))


def load_dataset(path) -> ToyDataset:
    arrays = formats.read_container(path, formats.DATASET_MAGIC)
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = DatasetConfig(**meta["config"])
    return ToyDataset(arrays["train/images"], arrays["test/images"], arrays["train/labels"].astype(np.int64),
                      arrays["test/labels"].astype(np.int64), meta["seed"], cfg)


# -- augmentations ---------------------------------------------------------

@dataclass
class AugConfig:
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    n_local: int = 2
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    blur_prob: float = 0.5
    solarize_prob: float = 0.2

    def __post_init__(self):
        self.global_scale = tuple(self.global_scale)
        self.local_scale = tuple(self.local_scale)
        self.ratio = tuple(self.ratio)
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1")
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ValueError("ratio range must be positive and ordered")
        if self.n_local < 0:
            raise ValueError("n_local must be >= 0")
        for name in ("flip_prob", "jitter_prob", "blur_prob", "solarize_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")


def _as_batch(images: np.ndarray, image_shape) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 1
    H, W, C = image_shape
    return images.reshape(-1, H, W, C), single


def _resized_crop(x: np.ndarray, scale, ratio, out: int, rng: np.random.Generator) -> np.ndarray:
    B, H, W, C = x.shape
    area = rng.uniform(*scale, size=B)
    log_r = rng.uniform(np.log(ratio[0]), np.log(ratio[1]), size=B)
    r = np.exp(log_r)
    w = np.minimum(np.sqrt(area * r) * W, W)
    h = np.minimum(np.sqrt(area / r) * H, H)
    x0 = rng.uniform(0, 1, size=B) * (W - w)
    y0 = rng.uniform(0, 1, size=B) * (H - h)
    grid = np.arange(out) + 0.5
    xs = np.clip(x0[:, None] + grid[None] * (w / out)[:, None] - 0.5, 0, W - 1)
    ys = np.clip(y0[:, None] + grid[None] * (h / out)[:, None] - 0.5, 0, H - 1)
    xi0 = np.floor(xs).astype(np.int64)
    yi0 = np.floor(ys).astype(np.int64)
    xi1 = np.minimum(xi0 + 1, W - 1)
    yi1 = np.minimum(yi0 + 1, H - 1)
    fx = (xs - xi0)[:, None, :, None]
    fy = (ys - yi0)[:, :, None, None]
    b = np.arange(B)[:, None, None]

    def gather(yi, xi):
        return x[b, yi[:, :, None], xi[:, None, :]]

    top = gather(yi0, xi0) * (1 - fx) + gather(yi0, xi1) * fx
    bot = gather(yi1, xi0) * (1 - fx) + gather(yi1, xi1) * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _box_blur(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = x.shape[1:3]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + H, dx:dx + W]
    return acc / 9.0


def vanilla_augment(images, cfg: AugConfig, rng: np.random.Generator, image_shape=(16, 16, 3),
                    role: str = "global") -> np.ndarray:
    """Crop, flip, brightness/contrast jitter, blur, solarize; output clamped to [0, 1].

    Global views keep the input resolution; local views are rendered at half
    resolution. Accepts one flattened image or a batch.
    """
    x, single = _as_batch(images, image_shape)
    B, H = x.shape[0], x.shape[1]
    if role == "global":
        scale, out = cfg.global_scale, H
    elif role == "local":
        scale, out = cfg.local_scale, H // 2
    else:
        raise ValueError(f"unknown view role {role!r}")
    x = _resized_crop(x, scale, cfg.ratio, out, rng)

    flip = rng.random(B) < cfg.flip_prob
    x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)

    jit = rng.random(B) < cfg.jitter_prob
    bright = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, B)
    contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, B)
    if jit.any():
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        jittered = ((x - mean) * contrast[:, None, None, None] + mean) * bright[:, None, None, None]
        x = np.where(jit[:, None, None, None], np.clip(jittered, 0, 1), x)

    blur = rng.random(B) < cfg.blur_prob
    if blur.any():
        x = np.where(blur[:, None, None, None], _box_blur(x), x)

    sol = rng.random(B) < cfg.solarize_prob
    thresh = rng.uniform(0.5, 0.9, B)
    if sol.any():
        value = x.max(axis=-1, keepdims=True)
        invert = sol[:, None, None, None] & (value > thresh[:, None, None, None])
        x = np.where(invert, 1.0 - x, x)

    x = np.clip(x, 0.0, 1.0).astype(np.float32).reshape(B, -1)
    return x[0] if single else x


def sample_views(images, cfg: AugConfig, rng: np.random.Generator, image_shape=(16, 16, 3)) -> ViewBatch:
    """Two global views and ``cfg.n_local`` half-resolution local views per image."""
    globals_ = [vanilla_augment(images, cfg, rng, image_shape, "global") for _ in range(2)]
    locals_ = [vanilla_augment(images, cfg, rng, image_shape, "local") for _ in range(cfg.n_local)]
    return ViewBatch(globals_, locals_)
