import numpy as np
import pytest

from ginflow import container, datagen
from ginflow.datagen import GroundTruthSpec, LabeledDataset
from ginflow.flow import build_random_mixer


@pytest.fixture(scope="module")
def big():
    spec = GroundTruthSpec(n_samples=100_000)
    z, u, means, variances = datagen.gen_latents(spec)
    return spec, z, u, means, variances


@pytest.fixture(scope="module")
def small():
    return datagen.generate(GroundTruthSpec(n_samples=2000))


class TestLatents:
    def test_noise_std_near_scale(self, big):
        _, z, *_ = big
        sd = z[:, 2:].std(axis=0)
        assert np.all((sd >= 0.009) & (sd <= 0.011))

    def test_means_in_range(self, big):
        _, _, _, means, variances = big
        assert np.all((means >= -5) & (means <= 5))
        assert np.all((variances >= 0.5) & (variances <= 3))

    def test_class_means_match_spec(self, big):
        _, z, u, means, variances = big
        for c in range(5):
            sel = z[u == c, :2]
            bound = 4 * np.sqrt(variances[c] / len(sel))
            assert np.all(np.abs(sel.mean(axis=0) - means[c]) < bound)

    def test_balanced_labels(self, big):
        counts = np.bincount(big[2])
        assert counts.max() - counts.min() <= 1

    def test_reproducible(self):
        spec = GroundTruthSpec(n_samples=500, data_seed=3)
        a, b = datagen.gen_latents(spec), datagen.gen_latents(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_data_seed_changes_sample(self):
        a = datagen.gen_latents(GroundTruthSpec(n_samples=100, data_seed=1))[0]
        b = datagen.gen_latents(GroundTruthSpec(n_samples=100, data_seed=2))[0]
        assert not np.array_equal(a, b)

    def test_cluster_params_independent_of_sample_count(self):
        a = datagen.gen_latents(GroundTruthSpec(n_samples=100))
        b = datagen.gen_latents(GroundTruthSpec(n_samples=1000))
        assert np.array_equal(a[2], b[2]) and np.array_equal(a[3], b[3])

    @pytest.mark.parametrize("kw", [dict(n_informative=0), dict(n_total=1, n_informative=1),
                                    dict(var_low=0.0), dict(noise_scale=0.0),
                                    dict(mean_low=5.0), dict(mixer_clamp=3.0)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            GroundTruthSpec(**kw)


class TestMix:
    def test_identity_mixer_permutes(self):
        z = np.random.default_rng(0).normal(size=(20, 10))
        x = datagen.mix(z, build_random_mixer(10, identity=True))
        np.testing.assert_array_equal(np.sort(x, axis=1), np.sort(z, axis=1))

    def test_generated_data_inverts(self, small):
        ds, mixer = small
        assert np.abs(mixer.inverse(ds.x) - ds.z).max() < 1e-6

    def test_x_equals_mixer_of_z(self, small):
        ds, mixer = small
        assert np.array_equal(ds.x, datagen.mix(ds.z, mixer))

    def test_finite_and_bounded(self, small):
        ds, _ = small
        assert np.all(np.isfinite(ds.x)) and np.abs(ds.x).max() <= datagen.PROBE_LIMIT

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            datagen.mix(np.zeros((3, 6)), build_random_mixer(10))

    def test_provenance(self, small):
        ds, mixer = small
        prov = ds.provenance
        assert prov["mixer_seed_used"] == mixer.seed
        assert prov["rejected_mixer_seeds"] == list(range(prov["spec"]["mixer_seed"], mixer.seed))
        assert prov["spec"]["n_samples"] == 2000
        assert ds.n_classes == 5

    def test_rejection_is_recorded(self, monkeypatch):
        monkeypatch.setattr(datagen, "PROBE_LIMIT", 0.5)
        with pytest.raises(datagen.NumericError):
            datagen.generate(GroundTruthSpec(n_samples=200))

    def test_identity_mixer_is_trivial(self):
        z = datagen.gen_latents(GroundTruthSpec(n_samples=1000))[0]
        assert datagen.is_trivial_mixer(build_random_mixer(10, identity=True), z, 2)

    def test_trivial_mixer_rejected(self):
        spec = GroundTruthSpec(n_samples=1000)
        z = datagen.gen_latents(spec)[0]
        ds, mixer = datagen.generate(spec)
        assert ds.provenance["rejected_mixer_seeds"]
        assert not datagen.is_trivial_mixer(mixer, z, 2)
        for seed in ds.provenance["rejected_mixer_seeds"]:
            assert datagen.is_trivial_mixer(build_random_mixer(10, seed=seed), z, 2)

    def test_trivial_check_can_be_disabled(self):
        spec = GroundTruthSpec(n_samples=1000, reject_trivial=False)
        assert datagen.generate(spec)[1].seed == spec.mixer_seed

    def test_generate_is_pure(self):
        spec = GroundTruthSpec(n_samples=300, data_seed=4, mixer_seed=2)
        a, b = datagen.generate(spec)[0], datagen.generate(spec)[0]
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)


class TestAugment:
    def test_zero_sigma_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        out = datagen.augment(x, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_half_normal_mean(self):
        x = np.zeros((1000, 100))
        d = np.abs(datagen.augment(x, 0.01, np.random.default_rng(1)) - x)
        assert d.mean() == pytest.approx(0.01 * np.sqrt(2 / np.pi), rel=0.01)

    def test_fresh_noise(self):
        rng = np.random.default_rng(2)
        x = np.zeros((5, 5))
        assert not np.array_equal(datagen.augment(x, 0.01, rng), datagen.augment(x, 0.01, rng))

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            datagen.augment(np.zeros((1, 1)), -1.0)


class TestFiles:
    def test_round_trip_bit_identical(self, small, tmp_path):
        ds, _ = small
        back = datagen.load(datagen.save(ds, tmp_path / "d.bin"))
        for name in ("x", "u", "z"):
            assert np.array_equal(getattr(back, name), getattr(ds, name))
        assert back.provenance == ds.provenance

    def test_save_is_deterministic(self, small, tmp_path):
        ds, _ = small
        a = datagen.save(ds, tmp_path / "a.bin").read_bytes()
        assert a == datagen.save(ds, tmp_path / "b.bin").read_bytes()

    def test_without_latents(self, tmp_path):
        ds = LabeledDataset(np.ones((3, 2)), np.array([0, 1, 0]))
        back = datagen.load(datagen.save(ds, tmp_path / "d.bin"))
        assert back.z is None and back.provenance is None

    def test_truncated(self, small, tmp_path):
        path = datagen.save(small[0], tmp_path / "d.bin")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(container.CorruptFileError):
            datagen.load(path)

    def test_checksum_flip(self, small, tmp_path):
        path = datagen.save(small[0], tmp_path / "d.bin")
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(container.CorruptFileError):
            datagen.load(path)

    def test_wrong_magic(self, small, tmp_path):
        path = small[1].save(tmp_path / "model.ckpt")
        with pytest.raises(container.CorruptFileError):
            datagen.load(path)

    def test_subset(self, small):
        sub = small[0].subset(10)
        assert len(sub) == 10 and sub.dim == 10
