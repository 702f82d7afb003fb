"""Offline self-augmentation cache: build, persist, bind to a dataset, sample.

File layout (little-endian)::

    magic        4 bytes  b"GSAC"
    version      u8
    height, width, channels, record_count, ddim_steps   5 x u32
    dataset_seed i64
    record_count x
        kind        u8     0 = generative, 1 = interpolated
        primary     u32
        secondary   i32    -1 for generative records
        alpha       f32    NaN for generative records
        noise_seed  u64
        guidance    f32
        payload     H*W*C x f32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule, generate_batch
from .geometry import AlphaPolicy, slerp
from .autodiff import no_grad
from .formats import FormatError
from .models import encode

CACHE_MAGIC = b"GSAC"
CACHE_VERSION = 1
GENERATIVE = 0
INTERPOLATED = 1
KIND_NAMES = {GENERATIVE: "generative", INTERPOLATED: "interpolated"}
_HEADER = struct.Struct("<4sB5Iq")


class ProvenanceError(RuntimeError):
    """A cache was bound to a dataset other than the one it was built from."""


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kind", "u1"), ("primary", "<u4"), ("secondary", "<i4"), ("alpha", "<f4"),
                     ("noise_seed", "<u8"), ("guidance", "<f4"), ("payload", "<f4", (dim,))])


def _kind_code(kind) -> int:
    if isinstance(kind, str):
        for code, name in KIND_NAMES.items():
            if name == kind:
                return code
        raise ValueError(f"unknown augmentation kind {kind!r}")
    if int(kind) not in KIND_NAMES:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    return int(kind)


@dataclass(frozen=True)
class AugRecord:
    kind: int
    source_primary: int
    source_secondary: int | None
    alpha: float | None
    noise_seed: int
    guidance: float
    payload: np.ndarray

    def __post_init__(self):
        if self.kind == INTERPOLATED:
            if self.source_secondary is None or self.alpha is None:
                raise ValueError("interpolated records need a secondary source and alpha")
        elif self.kind == GENERATIVE:
            if self.source_secondary is not None or self.alpha is not None:
                raise ValueError("generative records carry exactly one source")
        else:
            raise ValueError(f"unknown augmentation kind {self.kind}")


class AugCache:
    """Column-oriented record store; rows are kept in insertion order."""

    def __init__(self, image_shape, dataset_seed: int, records: np.ndarray, ddim_steps: int = 50,
                 model_checksum: str = ""):
        self.image_shape = tuple(int(d) for d in image_shape)
        self.dataset_seed = int(dataset_seed)
        self.ddim_steps = int(ddim_steps)
        self.model_checksum = model_checksum
        dim = int(np.prod(self.image_shape))
        if records.dtype != _record_dtype(dim):
            records = records.astype(_record_dtype(dim))
        self._rows = records
        self._validate_rows()
        self._index: dict[int, dict[int, np.ndarray]] | None = None

    def _validate_rows(self) -> None:
        r = self._rows
        interp = r["kind"] == INTERPOLATED
        gen = r["kind"] == GENERATIVE
        if not np.all(interp | gen):
            raise FormatError("cache contains an unknown record kind")
        if np.any(interp & ((r["secondary"] < 0) | np.isnan(r["alpha"]))):
            raise FormatError("interpolated record without secondary source or alpha")
        if np.any(gen & ((r["secondary"] != -1) | ~np.isnan(r["alpha"]))):
            raise FormatError("generative record with a secondary source or alpha")

    # -- construction / access -------------------------------------------

    @classmethod
    def from_records(cls, records, image_shape, dataset_seed: int, ddim_steps: int = 50,
                     model_checksum: str = "") -> AugCache:
        dim = int(np.prod(image_shape))
        rows = np.zeros(len(records), dtype=_record_dtype(dim))
        for i, rec in enumerate(records):
            rows[i] = (rec.kind, rec.source_primary, -1 if rec.source_secondary is None else rec.source_secondary,
                       np.nan if rec.alpha is None else rec.alpha, rec.noise_seed, rec.guidance, rec.payload)
        return cls(image_shape, dataset_seed, rows, ddim_steps, model_checksum)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def payloads(self) -> np.ndarray:
        return self._rows["payload"]

    def record(self, i: int) -> AugRecord:
        r = self._rows[i]
        interp = int(r["kind"]) == INTERPOLATED
        return AugRecord(int(r["kind"]), int(r["primary"]), int(r["secondary"]) if interp else None,
                         float(r["alpha"]) if interp else None, int(r["noise_seed"]), float(r["guidance"]),
                         np.array(r["payload"]))

    def records(self):
        for i in range(len(self)):
            yield self.record(i)

    def _lookup(self) -> dict[int, dict[int, np.ndarray]]:
        if self._index is None:
            index: dict[int, dict[int, np.ndarray]] = {}
            for code in KIND_NAMES:
                rows = np.flatnonzero(self._rows["kind"] == code)
                prim = self._rows["primary"][rows]
                order = np.argsort(prim, kind="stable")
                rows, prim = rows[order], prim[order]
                uniq, starts = np.unique(prim, return_index=True)
                bounds = np.append(starts, len(prim))
                index[code] = {int(u): rows[bounds[j]:bounds[j + 1]] for j, u in enumerate(uniq)}
            self._index = index
        return self._index

    def matching(self, primary_index: int, kind) -> np.ndarray:
        """Row indices of records for ``primary_index`` of the given kind."""
        return self._lookup()[_kind_code(kind)].get(int(primary_index), np.zeros(0, dtype=np.int64))

    def sample_rows(self, primary_indices, kind, rng: np.random.Generator) -> np.ndarray:
        """One uniformly chosen matching row per requested primary index."""
        table = self._lookup()[_kind_code(kind)]
        out = np.empty(len(primary_indices), dtype=np.int64)
        picks = rng.random(len(primary_indices))
        for j, p in enumerate(primary_indices):
            rows = table.get(int(p))
            if rows is None or len(rows) == 0:
                raise KeyError(f"no {KIND_NAMES[_kind_code(kind)]} record for primary index {int(p)}")
            out[j] = rows[min(int(picks[j] * len(rows)), len(rows) - 1)]
        return out

    def bind(self, dataset) -> AugCache:
        """Check that this cache was built from ``dataset``; returns self."""
        if int(dataset.seed) != self.dataset_seed:
            raise ProvenanceError(f"cache built for dataset seed {self.dataset_seed}, got {dataset.seed}")
        if tuple(dataset.image_shape) != self.image_shape:
            raise ProvenanceError(f"cache image shape {self.image_shape} does not match {dataset.image_shape}")
        n = len(dataset.train_images)
        r = self._rows
        if len(r) and (r["primary"].max() >= n or r["secondary"].max() >= n):
            raise ProvenanceError("cache references images outside the dataset")
        return self

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        H, W, C = self.image_shape
        head = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, H, W, C, len(self), self.ddim_steps, self.dataset_seed)
        return head + self._rows.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, model_checksum: str = "") -> AugCache:
        if len(blob) < _HEADER.size:
            raise FormatError("truncated cache header")
        magic, version, H, W, C, count, steps, seed = _HEADER.unpack_from(blob)
        if magic != CACHE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version}")
        dt = _record_dtype(H * W * C)
        body = blob[_HEADER.size:]
        if len(body) != count * dt.itemsize:
            raise FormatError(f"header announces {count} records but body holds {len(body) / dt.itemsize:g}")
        rows = np.frombuffer(body, dtype=dt).copy()
        return cls((H, W, C), seed, rows, steps, model_checksum)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())
        Path(str(path) + ".json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> AugCache:
        side = Path(str(path) + ".json")
        checksum = json.loads(side.read_text()).get("model_checksum", "") if side.exists() else ""
        return cls.from_bytes(Path(path).read_bytes(), checksum)

    def manifest(self) -> dict:
        r = self._rows
        alphas = r["alpha"][r["kind"] == INTERPOLATED]
        values, counts = np.unique(alphas, return_counts=True)
        return {
            "records": len(self),
            "counts": {name: int((r["kind"] == code).sum()) for code, name in KIND_NAMES.items()},
            "alpha_histogram": {f"{v:.4g}": int(c) for v, c in zip(values, counts)},
            "guidance": sorted({float(g) for g in np.unique(r["guidance"])}),
            "ddim_steps": self.ddim_steps,
            "dataset_seed": self.dataset_seed,
            "image_shape": list(self.image_shape),
            "model_checksum": self.model_checksum,
        }


def fetch(cache: AugCache, primary_index: int, kind, rng: np.random.Generator) -> AugRecord:
    """A uniformly chosen record of ``kind`` for ``primary_index``."""
    return cache.record(int(cache.sample_rows([primary_index], kind, rng)[0]))


def fetch_batch(cache: AugCache, primary_indices, kind, rng: np.random.Generator):
    """Vectorized :func:`fetch`: (payloads, secondaries, alphas) for a batch."""
    rows = cache.sample_rows(primary_indices, kind, rng)
    r = cache.rows[rows]
    return np.array(r["payload"]), r["secondary"].astype(np.int64), r["alpha"].astype(np.float64)


# -- building ----------------------------------------------------------------

def derive_noise_seed(base_seed: int, kind: int, primary: int, slot: int) -> int:
    """Independent 64-bit noise seed for one record."""
    return int(np.random.SeedSequence([int(base_seed), kind, int(primary), int(slot)]).generate_state(1, np.uint64)[0])


def embed_images(encoder, images, chunk: int = 1024) -> np.ndarray:
    with no_grad():
        parts = [encode(encoder, images[s:s + chunk]).data for s in range(0, len(images), chunk)]
    return np.concatenate(parts).astype(np.float64)


def _render(denoiser, cond, seeds, guidance, schedule, steps, chunk) -> np.ndarray:
    out = np.empty((len(seeds), denoiser.image_dim), dtype=np.float32)
    for s in range(0, len(seeds), chunk):
        out[s:s + chunk] = generate_batch(denoiser, cond[s:s + chunk], seeds[s:s + chunk], guidance, schedule, steps)
    return out


def build_generative_cache(dataset, encoder, denoiser, per_image: int = 4, guidance: float = 6.0,
                           steps: int = 50, schedule: NoiseSchedule | None = None, seed: int = 0,
                           chunk: int = 512, model_checksum: str = "", embeddings=None) -> AugCache:
    """``per_image`` synthetic variations of every training image, one noise seed each."""
    if per_image < 1:
        raise ValueError("per_image must be >= 1")
    schedule = schedule or NoiseSchedule()
    emb = embed_images(encoder, dataset.train_images) if embeddings is None else np.asarray(embeddings)
    N = len(emb)
    primary = np.repeat(np.arange(N), per_image)
    slot = np.tile(np.arange(per_image), N)
    seeds = np.array([derive_noise_seed(seed, GENERATIVE, p, k) for p, k in zip(primary, slot)], dtype=np.uint64)
    payload = _render(denoiser, emb[primary], seeds, guidance, schedule, steps, chunk)
    rows = np.zeros(len(primary), dtype=_record_dtype(denoiser.image_dim))
    rows["kind"] = GENERATIVE
    rows["primary"] = primary
    rows["secondary"] = -1
    rows["alpha"] = np.nan
    rows["noise_seed"] = seeds
    rows["guidance"] = guidance
    rows["payload"] = payload
    return AugCache(dataset.image_shape, dataset.seed, rows, steps, model_checksum)


def draw_secondaries(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each primary i, a uniform index in ``[0, n)`` other than i."""
    if n < 2:
        raise ValueError("need at least two images to pair")
    j = rng.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def build_interpolated_cache(dataset, encoder, denoiser, policy: AlphaPolicy | None = None,
                             guidance: float = 6.0, steps: int = 50, schedule: NoiseSchedule | None = None,
                             seed: int = 0, chunk: int = 512, model_checksum: str = "",
                             embeddings=None, normalize: bool = False) -> AugCache:
    """One record per (primary image, alpha in the policy support).

    Each primary gets one secondary partner, drawn uniformly from the other
    training images and shared across its alpha values. ``normalize``
    conditions on the unit-norm SLERP direction instead of norm-blended
    embeddings.
    """
    policy = policy or AlphaPolicy.fixed(0.5)
    schedule = schedule or NoiseSchedule()
    emb = embed_images(encoder, dataset.train_images) if embeddings is None else np.asarray(embeddings)
    N = len(emb)
    partner = draw_secondaries(N, np.random.default_rng(np.random.SeedSequence([int(seed), INTERPOLATED])))
    support = np.asarray(policy.support(), dtype=np.float64)
    primary = np.repeat(np.arange(N), len(support))
    secondary = partner[primary]
    alpha = np.tile(support, N)
    slot = np.tile(np.arange(len(support)), N)
    seeds = np.array([derive_noise_seed(seed, INTERPOLATED, p, k) for p, k in zip(primary, slot)], dtype=np.uint64)
    cond = slerp(emb[primary], emb[secondary], alpha, normalize=normalize)
    payload = _render(denoiser, cond, seeds, guidance, schedule, steps, chunk)
    rows = np.zeros(len(primary), dtype=_record_dtype(denoiser.image_dim))
    rows["kind"] = INTERPOLATED
    rows["primary"] = primary
    rows["secondary"] = secondary
    rows["alpha"] = alpha
    rows["noise_seed"] = seeds
    rows["guidance"] = guidance
    rows["payload"] = payload
    return AugCache(dataset.image_shape, dataset.seed, rows, steps, model_checksum)
