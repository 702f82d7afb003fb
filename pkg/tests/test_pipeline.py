import json

import numpy as np
import pytest

from gensis import pipeline
from gensis.augcache import AugCache, ProvenanceError
from gensis.cli import main
from gensis.config import TrainConfig
from gensis.data import generate_dataset

TINY = {
    "dataset": {"size": 8, "n_train": 64, "n_test": 32},
    "model": {"hidden": 16, "embed_dim": 8, "head_hidden": 16, "out_dim": 16},
    "distill": {"epochs": 2, "batch_size": 16, "eval_every": 1, "probe_size": 32},
    "diffusion": {"num_timesteps": 50, "ddim_steps": 5, "hidden": 16, "n_layers": 2, "time_dim": 8,
                  "train_steps": 10, "warmup_steps": 5, "batch_size": 16, "per_image": 2, "diagnostic_samples": 16},
    "eval": {"probe_epochs": 3},
}


def tiny_cfg(out_dir, **over):
    d = json.loads(json.dumps(TINY))
    for section, values in over.items():
        if isinstance(values, dict):
            d.setdefault(section, {}).update(values)
        else:
            d[section] = values
    d["out_dir"] = str(out_dir)
    return TrainConfig.from_dict(d)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(root)
    results = pipeline.run_all(cfg)
    return cfg, pipeline.RunDir(root), results


def test_all_stages_leave_manifests(full_run):
    _, run, _ = full_run
    stages = {m.stage for m in run.manifests()}
    assert set(pipeline.STAGES) <= stages
    for m in run.manifests():
        assert m.config_hash == full_run[0].hash()
        assert m.code_version == pipeline.code_version()


def test_every_artifact_has_one_producer(full_run):
    _, run, _ = full_run
    produced = [name for m in run.manifests() for name in m.outputs]
    assert len(produced) == len(set(produced))
    on_disk = {p.name for p in run.root.iterdir() if p.suffix in (".gswt", ".gsac", ".gsds")}
    assert on_disk <= set(produced)


def test_eval_report(full_run):
    cfg, run, results = full_run
    variant = pipeline.gensis_variant(cfg)
    assert variant == "gensis-w6s5"
    assert set(results["checkpoints"]) == {"vanilla", variant}
    for row in results["checkpoints"].values():
        assert 0 <= row["knn10"] <= 1 and 0 <= row["knn20"] <= 1 and 0 <= row["linear"] <= 1
    assert set(results["deltas"]) == {variant}
    assert 0 <= results["diffusion"]["class_retention"] <= 1
    assert json.loads((run.root / "eval.json").read_text()) == json.loads(json.dumps(results))


def test_provenance_reaches_dataset(full_run):
    cfg, run, results = full_run
    name = pipeline.gensis_variant(cfg) + ".gswt"
    chain = results["provenance"][name]
    assert chain[0]["artifact"] == name
    assert {c["artifact"] for c in chain} == {name, "dataset.gsds", "eldm.gswt", "vanilla.gswt",
                                              pipeline.gen_cache_name(cfg), pipeline.interp_cache_name(cfg)}


def test_metrics_log_has_periodic_knn(full_run):
    _, run, _ = full_run
    rows = [r for r in run.read_metrics() if r.get("stage") == "vanilla"]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all("knn20" in r and "embedding_std" in r for r in rows)
    assert any(r.get("stage") == "eldm" for r in run.read_metrics())


def test_config_echoed_in_run_dir(full_run):
    cfg, run, _ = full_run
    assert TrainConfig.load(run.path("config.json")) == cfg


def test_stage_twice_gives_identical_checksums(tmp_path):
    a = pipeline.stage_pretrain_vanilla(tiny_cfg(tmp_path / "a"))
    b = pipeline.stage_pretrain_vanilla(tiny_cfg(tmp_path / "b"))
    assert a.outputs == b.outputs


def test_gen_augs_reuses_unchanged_caches(full_run):
    cfg, run, _ = full_run
    m = pipeline.stage_gen_augs(cfg)
    assert m.details["built"] == [] and len(m.details["reused"]) == 2


def test_gen_augs_rebuilds_when_build_params_change(full_run):
    cfg, run, _ = full_run
    d = cfg.to_dict()
    d["diffusion"]["per_image"] = 1
    m = pipeline.stage_gen_augs(TrainConfig.from_dict(d))
    assert m.details["built"] == [pipeline.gen_cache_name(cfg)]
    assert len(AugCache.load(run.path(pipeline.gen_cache_name(cfg)))) == 64
    m = pipeline.stage_gen_augs(cfg)
    assert m.details["built"] == [pipeline.gen_cache_name(cfg)]
    assert len(AugCache.load(run.path(pipeline.gen_cache_name(cfg)))) == 128


def test_unit_slerp_gets_its_own_cache(full_run):
    cfg, run, _ = full_run
    d = cfg.to_dict()
    d["gensis"]["slerp_normalize"] = True
    unit = TrainConfig.from_dict(d)
    assert pipeline.interp_cache_name(unit) != pipeline.interp_cache_name(cfg)
    m = pipeline.stage_gen_augs(unit)
    assert m.details["built"] == [pipeline.interp_cache_name(unit)]
    a = AugCache.load(run.path(pipeline.interp_cache_name(cfg)))
    b = AugCache.load(run.path(pipeline.interp_cache_name(unit)))
    assert np.array_equal(a.rows["secondary"], b.rows["secondary"])
    assert not np.array_equal(a.payloads, b.payloads)


def test_tampered_input_refused(tmp_path):
    cfg = tiny_cfg(tmp_path)
    pipeline.stage_pretrain_vanilla(cfg)
    blob = bytearray(pipeline.RunDir(tmp_path).path("vanilla.gswt").read_bytes())
    blob[-1] ^= 0xFF
    pipeline.RunDir(tmp_path).path("vanilla.gswt").write_bytes(bytes(blob))
    with pytest.raises(pipeline.ChecksumError):
        pipeline.stage_train_eldm(cfg)


def test_missing_input_refused(tmp_path):
    with pytest.raises(pipeline.StageError, match="missing"):
        pipeline.stage_train_eldm(tiny_cfg(tmp_path))


def test_dataset_seed_mismatch_refused(full_run, tmp_path):
    cfg, run, _ = full_run
    other = tiny_cfg(run.root, dataset_seed=5)
    with pytest.raises(pipeline.StageError, match="seed"):
        pipeline.stage_eval(other)


def test_cache_bound_to_wrong_dataset(full_run):
    cfg, run, _ = full_run
    cache = AugCache.load(run.path(pipeline.gen_cache_name(cfg)))
    with pytest.raises(ProvenanceError):
        cache.bind(generate_dataset(cfg.data_seed + 1, cfg.dataset))


def test_lock_excludes_second_owner(tmp_path):
    run = pipeline.RunDir(tmp_path)
    with run.lock():
        with pytest.raises(pipeline.StageError, match="in use"):
            with run.lock():
                pass
    with run.lock():
        pass


def test_collapse_guard(tmp_path):
    # a zero learning rate with zero-width input signal leaves embeddings constant
    cfg = tiny_cfg(tmp_path, distill={"epochs": 3, "base_lr": 1e-12, "min_lr": 0.0})
    ds = generate_dataset(0, cfg.dataset)
    ds.train_images[...] = 0.5
    with pytest.raises(pipeline.CollapseError):
        pipeline.train_dino(cfg, ds, np.random.default_rng(0), pipeline.RunDir(tmp_path), "probe", 0)
    assert pipeline.RunDir(tmp_path).read_metrics()[-1]["event"] == "collapse"


def test_variant_names():
    cfg = TrainConfig()
    assert pipeline.gensis_variant(cfg) == "gensis"
    assert pipeline.gen_cache_name(cfg) == "gen_w6_s50.gsac"
    assert pipeline.interp_cache_name(cfg) == "interp_a0.5_w6_s50.gsac"
    nodis = TrainConfig.from_dict({"gensis": {"disentangle": False, "global_only": True}})
    assert pipeline.gensis_variant(nodis) == "gensis-nodis-global"
    pix = TrainConfig.from_dict({"gensis": {"pixel_baseline": True}})
    assert pipeline.gensis_variant(pix) == "gensis-pixel"


def test_cli_stage_and_error_exit(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    assert main(["pretrain-vanilla", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["stage"] == "pretrain-vanilla" and "vanilla.gswt" in printed["outputs"]
    assert main(["pretrain-gensis", "--config", str(cfg_path), "--out-dir", str(out)]) == 2
    assert "missing" in capsys.readouterr().err
