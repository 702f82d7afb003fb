import numpy as np
import pytest

from gensis.augcache import (
    GENERATIVE,
    INTERPOLATED,
    AugCache,
    AugRecord,
    ProvenanceError,
    build_generative_cache,
    build_interpolated_cache,
    draw_secondaries,
    fetch,
    fetch_batch,
)
from gensis.data import DatasetConfig, generate_dataset
from gensis.diffusion import NoiseSchedule
from gensis.formats import FormatError
from gensis.geometry import AlphaPolicy
from gensis.models import DenoiserParams, DinoNet

CFG = DatasetConfig(size=8, n_train=16, n_test=8)
SCHEDULE = NoiseSchedule(num_timesteps=100, ddim_steps=5)


@pytest.fixture(scope="module")
def setup():
    ds = generate_dataset(0, CFG)
    net = DinoNet.init(np.random.default_rng(1), CFG.image_shape, hidden=16, embed_dim=6, head_hidden=8, out_dim=8)
    den = DenoiserParams.init(np.random.default_rng(2), image_dim=CFG.dim, embed_dim=6, hidden=16, n_layers=2,
                              time_dim=8, num_timesteps=100)
    return ds, net.encoder, den


def gen_cache(setup, **kw):
    ds, enc, den = setup
    return build_generative_cache(ds, enc, den, schedule=SCHEDULE, steps=5, **kw)


def interp_cache(setup, policy=None, **kw):
    ds, enc, den = setup
    return build_interpolated_cache(ds, enc, den, policy=policy, schedule=SCHEDULE, steps=5, **kw)


@pytest.fixture(scope="module")
def generative(setup):
    return gen_cache(setup, per_image=4)


@pytest.fixture(scope="module")
def interpolated(setup):
    return interp_cache(setup, AlphaPolicy.uniform_choice())


def test_generative_record_count(generative):
    # per_image records for every training image; at full scale 4 x 4096 = 16384
    assert len(generative) == 4 * 16
    assert np.all(np.bincount(generative.rows["primary"]) == 4)
    assert np.all(generative.rows["kind"] == GENERATIVE)


def test_generative_rebuild_is_bitwise(setup, generative):
    assert gen_cache(setup, per_image=4).to_bytes() == generative.to_bytes()


def test_different_seed_changes_payload(setup, generative):
    other = gen_cache(setup, per_image=4, seed=1)
    assert not np.array_equal(other.payloads, generative.payloads)


def test_payloads_in_unit_range(generative, interpolated):
    for cache in (generative, interpolated):
        assert cache.payloads.min() >= 0.0 and cache.payloads.max() <= 1.0
        assert cache.payloads.dtype == np.float32


def test_noise_seeds_unique(generative):
    assert len(np.unique(generative.rows["noise_seed"])) == len(generative)


def test_fixed_policy_one_record_per_image(setup):
    cache = interp_cache(setup, AlphaPolicy.fixed(0.5))
    assert len(cache) == 16
    assert np.all(cache.rows["alpha"] == np.float32(0.5))


def test_uniform_choice_record_count(interpolated):
    assert len(interpolated) == 4 * 16
    assert interpolated.manifest()["alpha_histogram"] == {"0.2": 16, "0.4": 16, "0.6": 16, "0.8": 16}


def test_secondary_never_primary(interpolated):
    r = interpolated.rows
    assert np.all(r["secondary"] != r["primary"])
    assert np.all(r["kind"] == INTERPOLATED)


def test_secondary_shared_across_alphas(interpolated):
    r = interpolated.rows
    for p in range(16):
        assert len(np.unique(r["secondary"][r["primary"] == p])) == 1


def test_draw_secondaries_uniform_and_distinct():
    rng = np.random.default_rng(0)
    n = 5
    draws = np.stack([draw_secondaries(n, rng) for _ in range(4000)])
    assert np.all(draws != np.arange(n))
    for i in range(n):
        freq = np.bincount(draws[:, i], minlength=n) / len(draws)
        others = np.delete(freq, i)
        np.testing.assert_allclose(others, 1 / (n - 1), atol=0.03)
    with pytest.raises(ValueError):
        draw_secondaries(1, rng)


def test_fetch_single_match():
    payload = np.arange(3, dtype=np.float32)
    rec = AugRecord(GENERATIVE, 2, None, None, 11, 6.0, payload)
    cache = AugCache.from_records([rec], (1, 1, 3), dataset_seed=0)
    got = fetch(cache, 2, "generative", np.random.default_rng(0))
    assert (got.kind, got.source_primary, got.noise_seed, got.guidance) == (GENERATIVE, 2, 11, 6.0)
    assert got.payload.tobytes() == payload.tobytes()


def test_fetch_missing_raises(generative):
    with pytest.raises(KeyError):
        fetch(generative, 3, "interpolated", np.random.default_rng(0))
    with pytest.raises(ValueError, match="unknown"):
        fetch(generative, 3, "hallucinated", np.random.default_rng(0))


def test_fetch_uniform_over_matches():
    recs = [AugRecord(INTERPOLATED, 0, 1, a, k, 6.0, np.zeros(3, np.float32))
            for k, a in enumerate((0.2, 0.4, 0.6, 0.8))]
    cache = AugCache.from_records(recs, (1, 1, 3), dataset_seed=0)
    rng = np.random.default_rng(1)
    seen = np.bincount([fetch(cache, 0, INTERPOLATED, rng).noise_seed for _ in range(10_000)], minlength=4)
    np.testing.assert_allclose(seen / 10_000, 0.25, atol=0.05 * 0.25)


def test_fetch_batch(interpolated):
    payloads, secondaries, alphas = fetch_batch(interpolated, [0, 5, 5], "interpolated", np.random.default_rng(2))
    assert payloads.shape == (3, CFG.dim)
    assert set(alphas) <= {np.float32(a) for a in (0.2, 0.4, 0.6, 0.8)}
    assert secondaries[1] == secondaries[2] != 5


def test_round_trip_bitwise(tmp_path, interpolated):
    path = tmp_path / "c.gsac"
    interpolated.save(path)
    back = AugCache.load(path)
    assert back.to_bytes() == interpolated.to_bytes()
    assert back.manifest() == interpolated.manifest()
    back.save(tmp_path / "again.gsac")
    assert (tmp_path / "again.gsac").read_bytes() == path.read_bytes()


def test_truncated_or_corrupt_blob_rejected(generative):
    blob = generative.to_bytes()
    with pytest.raises(FormatError):
        AugCache.from_bytes(blob[:-1])
    with pytest.raises(FormatError, match="magic"):
        AugCache.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        AugCache.from_bytes(blob[:10])


def test_record_invariants():
    with pytest.raises(ValueError):
        AugRecord(INTERPOLATED, 0, None, 0.5, 0, 6.0, np.zeros(3))
    with pytest.raises(ValueError):
        AugRecord(GENERATIVE, 0, 1, None, 0, 6.0, np.zeros(3))


def test_bind_accepts_source_dataset(setup, generative):
    assert generative.bind(setup[0]) is generative


def test_bind_rejects_other_seed(generative):
    with pytest.raises(ProvenanceError, match="seed"):
        generative.bind(generate_dataset(1, CFG))


def test_bind_rejects_smaller_dataset(generative):
    small = generate_dataset(0, DatasetConfig(size=8, n_train=8, n_test=0))
    with pytest.raises(ProvenanceError):
        generative.bind(small)
