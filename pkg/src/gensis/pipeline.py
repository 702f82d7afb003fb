"""Stage runner: vanilla pretraining, diffusion training, cache building,
enhanced pretraining and evaluation, each leaving a manifest behind.

A run directory looks like::

    config.json            resolved configuration
    metrics.jsonl          one JSON object per logged event
    dataset.gsds(.json)    toy dataset + sidecar manifest
    vanilla.gswt           teacher weights after hand-crafted-only training
    eldm.gswt              embedding-conditioned denoiser
    gen_w6_s50.gsac        generative cache (guidance / steps in the name)
    interp_a0.5_w6_s50.gsac  interpolated cache (alpha support in the name)
    gensis*.gswt           enhanced teachers, one per ablation variant
    manifests/*.json       one RunManifest per stage invocation
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import augcache, data, evalkit
from .augcache import AugCache, GENERATIVE, INTERPOLATED
from .config import TrainConfig
from .diffusion import NoiseSchedule, diffusion_train_loss
from .disentangle import DisentangleBatch, total_gensis_loss
from .distill import DistillState, ScheduleConfig, cosine_schedules, update_teacher_ema
from .formats import file_sha256
from .geometry import AlphaPolicy
from .models import DenoiserParams, DinoNet, denoiser_from_state, load_checkpoint, save_checkpoint
from .optim import AdamW

log = logging.getLogger(__name__)

STAGES = ("pretrain-vanilla", "train-eldm", "gen-augs", "pretrain-gensis", "eval")
_STAGE_IDS = {name: i for i, name in enumerate(STAGES)}


class StageError(RuntimeError):
    """A stage cannot run (missing input, wrong provenance, busy run directory)."""


class ChecksumError(StageError):
    """An input artifact differs from what its producing stage recorded."""


class CollapseError(RuntimeError):
    """Embeddings stopped varying across the probe batch."""


# -- run directory bookkeeping ----------------------------------------------

def code_version() -> str:
    """Content hash over this package's source files."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    stage: str
    variant: str
    config_hash: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_clock_s: float
    code_version: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        return cls(**d)


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.manifest_dir = self.root / "manifests"

    def path(self, name: str) -> Path:
        return self.root / name

    def manifest_path(self, stage: str, variant: str) -> Path:
        return self.manifest_dir / f"{stage}.{variant}.json"

    def write_manifest(self, m: RunManifest) -> Path:
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        p = self.manifest_path(m.stage, m.variant)
        p.write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True))
        return p

    def manifests(self) -> list[RunManifest]:
        if not self.manifest_dir.exists():
            return []
        return [RunManifest.from_dict(json.loads(p.read_text())) for p in sorted(self.manifest_dir.glob("*.json"))]

    def producer(self, artifact: str) -> RunManifest | None:
        """The manifest that lists ``artifact`` among its outputs."""
        for m in self.manifests():
            if artifact in m.outputs:
                return m
        return None

    def verify(self, artifacts) -> dict[str, str]:
        """Check each artifact against its producer's recorded checksum."""
        sums = {}
        for name in artifacts:
            p = self.path(name)
            if not p.exists():
                raise StageError(f"missing input artifact {name}; run the stage that produces it first")
            m = self.producer(name)
            if m is None:
                raise StageError(f"no manifest records {name}; its provenance is unknown")
            actual = file_sha256(p)
            if actual != m.outputs[name]:
                raise ChecksumError(f"{name} does not match the checksum recorded by {m.stage}")
            sums[name] = actual
        return sums

    def log_metrics(self, row: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def read_metrics(self) -> list[dict]:
        p = self.root / "metrics.jsonl"
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lock = self.root / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StageError(f"{self.root} is in use by another process (remove {lock} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)


def stage_rng(cfg: TrainConfig, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _STAGE_IDS[stage], *extra]))


def _finish(run: RunDir, cfg: TrainConfig, stage: str, variant: str, inputs: dict, outputs, t0: float,
            details: dict | None = None) -> RunManifest:
    m = RunManifest(stage, variant, cfg.hash(), dict(inputs), {name: file_sha256(run.path(name)) for name in outputs},
                    round(time.perf_counter() - t0, 3), code_version(), details or {})
    run.write_manifest(m)
    return m


def _save_config(run: RunDir, cfg: TrainConfig) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    cfg.save(run.path("config.json"))


# -- names ----------------------------------------------------------------

DATASET = "dataset.gsds"
VANILLA = "vanilla.gswt"
ELDM = "eldm.gswt"


def _fmt(x: float) -> str:
    return f"{x:g}"


def gen_cache_name(cfg: TrainConfig) -> str:
    d = cfg.diffusion
    return f"gen_w{_fmt(d.guidance)}_s{d.ddim_steps}.gsac"


def interp_cache_name(cfg: TrainConfig) -> str:
    d = cfg.diffusion
    alphas = "-".join(_fmt(a) for a in cfg.gensis.policy.support())
    norm = "_unit" if cfg.gensis.slerp_normalize else ""
    return f"interp_a{alphas}{norm}_w{_fmt(d.guidance)}_s{d.ddim_steps}.gsac"


def vanilla_variant(global_only: bool) -> str:
    return "vanilla-global" if global_only else "vanilla"


def gensis_variant(cfg: TrainConfig) -> str:
    g = cfg.gensis
    parts = ["gensis"]
    if g.pixel_baseline:
        parts.append("pixel")
    elif not g.disentangle:
        parts.append("nodis")
    if not g.generative and not g.pixel_baseline:
        parts.append("nogen")
    if g.global_only:
        parts.append("global")
    policy = g.policy
    if policy != AlphaPolicy.fixed(0.5):
        parts.append("a" + "-".join(_fmt(a) for a in policy.support()))
    if g.entangle_position != "head":
        parts.append(g.entangle_position)
    if g.slerp_normalize:
        parts.append("unit")
    if cfg.diffusion.guidance != 6.0 or cfg.diffusion.ddim_steps != 50:
        parts.append(f"w{_fmt(cfg.diffusion.guidance)}s{cfg.diffusion.ddim_steps}")
    return "-".join(parts)


# -- shared helpers ---------------------------------------------------------

def load_dataset_checked(run: RunDir, cfg: TrainConfig) -> data.ToyDataset:
    ds = data.load_dataset(run.path(DATASET))
    if ds.seed != cfg.data_seed:
        raise StageError(f"run directory holds dataset seed {ds.seed}, config asks for {cfg.data_seed}")
    return ds


def load_teacher(run: RunDir, name: str, image_shape) -> DinoNet:
    return DinoNet.from_state_dict(load_checkpoint(run.path(name)), image_shape)


def embed(encoder, images, chunk: int = 1024) -> np.ndarray:
    return augcache.embed_images(encoder, images, chunk)


def feature_banks(net: DinoNet, ds: data.ToyDataset):
    train = evalkit.FeatureBank(embed(net.encoder, ds.train_images), ds.evaluation_labels("train"), "train")
    test = evalkit.FeatureBank(embed(net.encoder, ds.test_images), ds.evaluation_labels("test"), "test")
    return train, test


def probe_std(net: DinoNet, probe: np.ndarray) -> float:
    """Mean per-dimension std of unit-normalized embeddings over the probe batch."""
    e = embed(net.encoder, probe)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    return float(e.std(axis=0).mean())


@dataclass
class SelfAugmentation:
    """Where the enhanced stage gets its synthetic views and disentanglement inputs."""

    gen_cache: AugCache | None = None
    interp_cache: AugCache | None = None
    pixel_policy: AlphaPolicy | None = None
    pixel_partner: np.ndarray | None = None


def train_dino(cfg: TrainConfig, ds: data.ToyDataset, rng: np.random.Generator, run: RunDir, tag: str,
               n_local: int, selfaug: SelfAugmentation | None = None,
               progress: Callable[[dict], None] | None = None) -> DinoNet:
    """Teacher-student training; returns the teacher.

    Without ``selfaug`` this is plain multi-crop DINO. With it, each step adds
    one cached synthetic view per image and/or the disentanglement term.
    """
    mc, dc = cfg.model, cfg.distill
    X = ds.train_images
    N = len(X)
    student = DinoNet.init(rng, ds.image_shape, mc.hidden, mc.embed_dim, mc.head_hidden, mc.out_dim)
    teacher = student.copy()
    state = DistillState.zeros(mc.out_dim, tau_s=dc.tau_s, tau_t=dc.tau_t, center_momentum=dc.center_momentum,
                               teacher_momentum=dc.teacher_momentum)
    opt = AdamW(student.parameters())
    aug = replace(cfg.augment, n_local=n_local)
    steps_per_epoch = max(N // dc.batch_size, 1)
    total = dc.epochs * steps_per_epoch
    sched = ScheduleConfig(dc.base_lr, dc.batch_size, dc.min_lr, int(dc.warmup_fraction * total), dc.wd_start,
                           dc.wd_end, dc.teacher_momentum)
    probe = X[:dc.probe_size]
    low_std = 0
    selfaug = selfaug or SelfAugmentation()
    use_dis = selfaug.interp_cache is not None or selfaug.pixel_policy is not None

    def global_aug(images):
        return data.vanilla_augment(images, aug, rng, ds.image_shape, "global")

    step = 0
    for epoch in range(dc.epochs):
        order = rng.permutation(N)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * dc.batch_size:(b + 1) * dc.batch_size]
            lr, wd, lam = cosine_schedules(step, total, sched)
            views = data.sample_views(X[idx], aug, rng, ds.image_shape)
            if selfaug.gen_cache is not None:
                synth, _, _ = augcache.fetch_batch(selfaug.gen_cache, idx, GENERATIVE, rng)
                views.synthetic_views = [global_aug(synth)]
            dis = None
            if use_dis:
                if selfaug.pixel_policy is not None:
                    partner = selfaug.pixel_partner[idx]
                    alpha = selfaug.pixel_policy.sample(rng, len(idx))
                    dis = DisentangleBatch.pixel_baseline(X[idx], X[partner], alpha)
                else:
                    interp, partner, alpha = augcache.fetch_batch(selfaug.interp_cache, idx, INTERPOLATED, rng)
                    dis = DisentangleBatch(X[idx], X[partner], interp, alpha)
                dis = dis.augmented(global_aug)
            opt.zero_grad()
            loss = total_gensis_loss(views, dis, student, teacher, state, dc.lambda_dis, dc.lambda_gen,
                                     cfg.gensis.center_includes_entangled, cfg.gensis.entangle_position,
                                     allow_pre_head=cfg.gensis.entangle_position != "head")
            loss.backward()
            opt.step(lr, wd)
            update_teacher_ema(teacher, student, lam)
            running += loss.item()
            step += 1
        row = {"stage": tag, "epoch": epoch + 1, "loss": running / steps_per_epoch, "lr": lr, "wd": wd,
               "teacher_momentum": lam}
        if (epoch + 1) % dc.eval_every == 0 or epoch + 1 == dc.epochs:
            std = probe_std(teacher, probe)
            train_bank, test_bank = feature_banks(teacher, ds)
            row["knn20"] = evalkit.knn_accuracy(train_bank, test_bank, 20, cfg.eval.knn_temperature)
            row["embedding_std"] = std
            low_std = low_std + 1 if std < 1e-3 else 0
            if low_std >= 3:
                run.log_metrics({**row, "event": "collapse"})
                raise CollapseError(f"{tag}: embedding std below 1e-3 for 3 consecutive evaluations")
        run.log_metrics(row)
        if progress:
            progress(row)
        log.info("%s epoch %d loss %.4f %s", tag, epoch + 1, row["loss"],
                 f"knn20 {row['knn20']:.3f}" if "knn20" in row else "")
    return teacher


# -- stages ---------------------------------------------------------------

def stage_pretrain_vanilla(cfg: TrainConfig, out_dir=None, global_only: bool = False) -> RunManifest:
    """Write the dataset (if absent) and train DINO with hand-crafted views only."""
    run = RunDir(out_dir or cfg.out_dir)
    variant = vanilla_variant(global_only)
    with run.lock():
        t0 = time.perf_counter()
        _save_config(run, cfg)
        if run.path(DATASET).exists():
            inputs = run.verify([DATASET])
            ds = load_dataset_checked(run, cfg)
        else:
            ds = data.generate_dataset(cfg.data_seed, cfg.dataset)
            data.save_dataset(run.path(DATASET), ds)
            _finish(run, cfg, "dataset", "default", {}, [DATASET], t0, {"seed": ds.seed, **ds.manifest()["counts"]})
            inputs = run.verify([DATASET])
        rng = stage_rng(cfg, "pretrain-vanilla", int(global_only))
        n_local = 0 if global_only else cfg.augment.n_local
        teacher = train_dino(cfg, ds, rng, run, variant, n_local)
        name = f"{variant}.gswt"
        save_checkpoint(run.path(name), teacher.state_dict())
        return _finish(run, cfg, "pretrain-vanilla", variant, inputs, [name], t0, {"n_local": n_local})


def stage_train_eldm(cfg: TrainConfig, out_dir=None) -> RunManifest:
    """Train the denoiser conditioned on frozen vanilla-teacher embeddings."""
    run = RunDir(out_dir or cfg.out_dir)
    dc = cfg.diffusion
    with run.lock():
        t0 = time.perf_counter()
        inputs = run.verify([DATASET, VANILLA])
        ds = load_dataset_checked(run, cfg)
        teacher = load_teacher(run, VANILLA, ds.image_shape)
        emb = embed(teacher.encoder, ds.train_images)
        rng = stage_rng(cfg, "train-eldm")
        schedule = NoiseSchedule(dc.num_timesteps, dc.beta_start, dc.beta_end, dc.ddim_steps)
        den = DenoiserParams.init(rng, ds.config.dim, emb.shape[1], dc.hidden, dc.n_layers, dc.time_dim,
                                  dc.num_timesteps)
        opt = AdamW(den.params)
        N = len(emb)
        window = []
        for step in range(dc.train_steps):
            idx = rng.integers(0, N, size=min(dc.batch_size, N))
            lr = dc.lr * min(1.0, (step + 1) / dc.warmup_steps) if dc.warmup_steps else dc.lr
            opt.zero_grad()
            loss = diffusion_train_loss(den, ds.train_images[idx], emb[idx], rng, schedule, dc.p_drop)
            loss.backward()
            opt.step(lr, 0.0)
            window.append(loss.item())
            if (step + 1) % 100 == 0 or step + 1 == dc.train_steps:
                run.log_metrics({"stage": "eldm", "step": step + 1, "loss": float(np.mean(window)), "lr": lr})
                window = []
        save_checkpoint(run.path(ELDM), den.state_dict())
        return _finish(run, cfg, "train-eldm", "default", inputs, [ELDM], t0, {"steps": dc.train_steps})


def _load_denoiser(run: RunDir, cfg: TrainConfig) -> DenoiserParams:
    dc = cfg.diffusion
    return denoiser_from_state(load_checkpoint(run.path(ELDM)), dc.num_timesteps, dc.time_dim)


def _cache_build_params(cfg: TrainConfig, kind: int) -> dict:
    """Every config value that shapes a cache's contents."""
    d = cfg.diffusion
    params = {"seed": cfg.seed, "num_timesteps": d.num_timesteps, "beta_start": d.beta_start,
              "beta_end": d.beta_end, "ddim_steps": d.ddim_steps, "guidance": d.guidance}
    if kind == GENERATIVE:
        params["per_image"] = d.per_image
    else:
        params["alphas"] = list(cfg.gensis.policy.support())
        params["slerp_normalize"] = cfg.gensis.slerp_normalize
    return params


def _cache_up_to_date(run: RunDir, name: str, inputs: dict, build: dict) -> bool:
    m = run.producer(name)
    if m is None or not run.path(name).exists():
        return False
    return (m.inputs == inputs and m.details.get("build") == build
            and file_sha256(run.path(name)) == m.outputs[name])


def stage_gen_augs(cfg: TrainConfig, out_dir=None, force: bool = False) -> RunManifest:
    """Build (or reuse, when its inputs are unchanged) both augmentation caches."""
    run = RunDir(out_dir or cfg.out_dir)
    dc = cfg.diffusion
    with run.lock():
        t0 = time.perf_counter()
        inputs = run.verify([DATASET, VANILLA, ELDM])
        ds = load_dataset_checked(run, cfg)
        teacher = load_teacher(run, VANILLA, ds.image_shape)
        den = _load_denoiser(run, cfg)
        schedule = NoiseSchedule(dc.num_timesteps, dc.beta_start, dc.beta_end, dc.ddim_steps)
        emb = embed(teacher.encoder, ds.train_images)
        outputs, built = [], {}
        gen_name, int_name = gen_cache_name(cfg), interp_cache_name(cfg)
        gen_build, int_build = _cache_build_params(cfg, GENERATIVE), _cache_build_params(cfg, INTERPOLATED)
        if force or not _cache_up_to_date(run, gen_name, inputs, gen_build):
            t1 = time.perf_counter()
            cache = augcache.build_generative_cache(ds, teacher.encoder, den, dc.per_image, dc.guidance,
                                                    dc.ddim_steps, schedule, cfg.seed, dc.sample_chunk,
                                                    inputs[ELDM], emb)
            cache.save(run.path(gen_name))
            _finish(run, cfg, "gen-augs", gen_name, inputs, [gen_name], t1, {**cache.manifest(), "build": gen_build})
            built[gen_name] = cache.manifest()
        outputs.append(gen_name)
        if force or not _cache_up_to_date(run, int_name, inputs, int_build):
            t1 = time.perf_counter()
            cache = augcache.build_interpolated_cache(ds, teacher.encoder, den, cfg.gensis.policy, dc.guidance,
                                                      dc.ddim_steps, schedule, cfg.seed, dc.sample_chunk,
                                                      inputs[ELDM], emb, cfg.gensis.slerp_normalize)
            cache.save(run.path(int_name))
            _finish(run, cfg, "gen-augs", int_name, inputs, [int_name], t1, {**cache.manifest(), "build": int_build})
            built[int_name] = cache.manifest()
        outputs.append(int_name)
        run.log_metrics({"stage": "gen-augs", "built": sorted(built), "reused": sorted(set(outputs) - set(built)),
                         "seconds": time.perf_counter() - t0})
        details = {"built": sorted(built), "reused": sorted(set(outputs) - set(built))}
        return RunManifest("gen-augs", "summary", cfg.hash(), inputs,
                           {n: file_sha256(run.path(n)) for n in outputs}, round(time.perf_counter() - t0, 3),
                           code_version(), details)


def stage_pretrain_gensis(cfg: TrainConfig, out_dir=None) -> RunManifest:
    """Retrain from scratch with self-augmentations and the disentanglement task."""
    run = RunDir(out_dir or cfg.out_dir)
    g = cfg.gensis
    variant = gensis_variant(cfg)
    with run.lock():
        t0 = time.perf_counter()
        needed = [DATASET]
        use_gen = g.generative and not g.pixel_baseline
        use_interp = g.disentangle and not g.pixel_baseline
        if use_gen:
            needed.append(gen_cache_name(cfg))
        if use_interp:
            needed.append(interp_cache_name(cfg))
        inputs = run.verify(needed)
        ds = load_dataset_checked(run, cfg)
        selfaug = SelfAugmentation()
        if use_gen:
            selfaug.gen_cache = AugCache.load(run.path(gen_cache_name(cfg))).bind(ds)
        if use_interp:
            selfaug.interp_cache = AugCache.load(run.path(interp_cache_name(cfg))).bind(ds)
        if g.pixel_baseline and g.disentangle:
            selfaug.pixel_policy = g.policy
            pair_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, INTERPOLATED]))
            selfaug.pixel_partner = augcache.draw_secondaries(len(ds.train_images), pair_rng)
        rng = stage_rng(cfg, "pretrain-gensis")
        n_local = 0 if g.global_only else cfg.augment.n_local
        teacher = train_dino(cfg, ds, rng, run, variant, n_local, selfaug)
        name = f"{variant}.gswt"
        save_checkpoint(run.path(name), teacher.state_dict())
        return _finish(run, cfg, "pretrain-gensis", variant, inputs, [name], t0,
                       {"n_local": n_local, "generative": use_gen, "disentangle": g.disentangle,
                        "pixel_baseline": g.pixel_baseline, "alpha_policy": g.alpha_policy})


def diffusion_diagnostics(cfg: TrainConfig, run: RunDir, ds: data.ToyDataset, teacher: DinoNet,
                          train_bank: evalkit.FeatureBank) -> dict:
    """Class retention of generated samples and two-source recall of interpolations."""
    out: dict = {}
    labels = ds.evaluation_labels("train")
    k = 20
    gen_name, int_name = gen_cache_name(cfg), interp_cache_name(cfg)
    rng = stage_rng(cfg, "eval", 1)
    n = cfg.diffusion.diagnostic_samples
    if run.path(gen_name).exists():
        cache = AugCache.load(run.path(gen_name)).bind(ds)
        rows = rng.choice(len(cache), size=min(n, len(cache)), replace=False)
        emb = embed(teacher.encoder, cache.payloads[rows])
        pred = evalkit.knn_classify(train_bank, emb, k, cfg.eval.knn_temperature)
        src = labels[cache.rows["primary"][rows]]
        out["class_retention"] = float(np.mean(pred == src))
        out["class_retention_samples"] = int(len(rows))
    if run.path(int_name).exists():
        cache = AugCache.load(run.path(int_name)).bind(ds)
        half = np.flatnonzero(np.isclose(cache.rows["alpha"], 0.5))
        pool = half if len(half) else np.arange(len(cache))
        rows = rng.choice(pool, size=min(n, len(pool)), replace=False)
        r = cache.rows[rows]
        l1, l2 = labels[r["primary"]], labels[r["secondary"]]
        keep = l1 != l2
        emb = embed(teacher.encoder, r["payload"][keep])
        sim = evalkit._normalize(emb) @ train_bank.embeddings.T
        top = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        nb = labels[top]
        both = (nb == l1[keep][:, None]).any(axis=1) & (nb == l2[keep][:, None]).any(axis=1)
        out["interp_both_sources"] = float(both.mean()) if len(both) else float("nan")
        out["interp_pairs"] = int(keep.sum())
    return out


def stage_eval(cfg: TrainConfig, out_dir=None) -> dict:
    """k-NN (k in cfg.eval.knn_k) and linear probe for every teacher checkpoint in the run."""
    run = RunDir(out_dir or cfg.out_dir)
    with run.lock():
        t0 = time.perf_counter()
        ds = load_dataset_checked(run, cfg)
        ckpts = [m for m in run.manifests() if m.stage in ("pretrain-vanilla", "pretrain-gensis")]
        if not ckpts:
            raise StageError("no pretrained checkpoints to evaluate")
        names = [n for m in ckpts for n in m.outputs]
        inputs = run.verify([DATASET] + names)
        results: dict = {"checkpoints": {}, "provenance": {}}
        vanilla_bank = None
        for m in ckpts:
            for name in m.outputs:
                net = load_teacher(run, name, ds.image_shape)
                train_bank, test_bank = feature_banks(net, ds)
                row = {"stage": "eval", "checkpoint": name, "variant": m.variant}
                for k in cfg.eval.knn_k:
                    row[f"knn{k}"] = evalkit.knn_accuracy(train_bank, test_bank, k, cfg.eval.knn_temperature)
                probe = evalkit.linear_probe(train_bank, test_bank, cfg.eval.probe_epochs, cfg.eval.probe_lr_grid,
                                             seed=cfg.seed)
                row["linear"] = probe.accuracy
                row["linear_lr"] = probe.lr
                run.log_metrics(row)
                results["checkpoints"][m.variant] = row
                results["provenance"][name] = provenance_chain(run, name)
                if name == VANILLA:
                    vanilla_bank = (net, train_bank)
        if vanilla_bank is not None and run.path(ELDM).exists():
            run.verify([ELDM])
            diag = diffusion_diagnostics(cfg, run, ds, vanilla_bank[0], vanilla_bank[1])
            run.log_metrics({"stage": "eval", "diagnostics": diag})
            results["diffusion"] = diag
        base = results["checkpoints"].get("vanilla")
        if base is not None:
            results["deltas"] = {v: {f"knn{k}": r[f"knn{k}"] - base[f"knn{k}"] for k in cfg.eval.knn_k}
                                 for v, r in results["checkpoints"].items() if v.startswith("gensis")}
        results["dataset_seed"] = ds.seed
        (run.root / "eval.json").write_text(json.dumps(results, indent=2, sort_keys=True))
        _finish(run, cfg, "eval", "default", inputs, ["eval.json"], t0)
        return results


def provenance_chain(run: RunDir, artifact: str) -> list[dict]:
    """Walk producer manifests from ``artifact`` back to the dataset."""
    chain, seen, todo = [], set(), [artifact]
    while todo:
        name = todo.pop()
        if name in seen:
            continue
        seen.add(name)
        m = run.producer(name)
        if m is None:
            continue
        chain.append({"artifact": name, "stage": m.stage, "variant": m.variant, "sha256": m.outputs[name]})
        todo.extend(m.inputs)
    return chain


def run_all(cfg: TrainConfig, out_dir=None) -> dict:
    """Every stage in order with the given config."""
    stage_pretrain_vanilla(cfg, out_dir)
    stage_train_eldm(cfg, out_dir)
    stage_gen_augs(cfg, out_dir)
    stage_pretrain_gensis(cfg, out_dir)
    return stage_eval(cfg, out_dir)
