import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrf.signal_chain import (
    SINR_LEVELS_DB,
    InterferenceKind,
    OfdmConfig,
    ber,
    emi_bursts,
    from_channels,
    gen_interference,
    make_dataset,
    make_sample,
    make_sweep,
    measured_sinr_db,
    mix,
    ofdm_demodulate,
    ofdm_modulate,
    power,
    qpsk_demap,
    qpsk_map,
    read_samples,
    split_counts,
    to_channels,
    write_samples,
)

SMALL = OfdmConfig(n_symbols=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestOfdmConfig:
    def test_defaults(self):
        cfg = OfdmConfig()
        assert cfg.samples_per_symbol == 80
        assert cfg.n_samples == 40_960
        assert cfg.n_bits == 57_344

    def test_desk_numerology(self):
        cfg = OfdmConfig(n_symbols=51)
        assert cfg.n_samples == 4080

    def test_dc_must_stay_free(self):
        with pytest.raises(ValueError):
            OfdmConfig(fft_size=64, active_subcarriers=64)


class TestQpsk:
    def test_zero_pair(self):
        s = qpsk_map([0, 0])
        assert s[0] == pytest.approx(np.sqrt(0.5) * (1 + 1j))

    def test_quadrant_rule(self):
        np.testing.assert_array_equal(qpsk_demap(np.array([-0.3 + 2.0j])), [1, 0])

    def test_round_trip(self, rng):
        bits = rng.integers(0, 2, 10_000)
        np.testing.assert_array_equal(qpsk_demap(qpsk_map(bits)), bits)

    def test_odd_bits(self):
        with pytest.raises(ValueError, match="even"):
            qpsk_map([1, 0, 1])

    def test_unit_energy(self, rng):
        assert power(qpsk_map(rng.integers(0, 2, 64))) == pytest.approx(1.0)


class TestOfdm:
    def test_full_frame_round_trip(self, rng):
        cfg = OfdmConfig()
        bits = rng.integers(0, 2, cfg.n_bits, dtype=np.uint8)
        x = ofdm_modulate(bits, cfg)
        assert x.size == 40_960
        assert ber(bits, ofdm_demodulate(x, cfg)) == 0.0

    def test_unit_power(self, rng):
        cfg = OfdmConfig()
        p = [power(ofdm_modulate(rng.integers(0, 2, cfg.n_bits), cfg)) for _ in range(100)]
        assert abs(np.mean(p) - 1.0) < 0.01
        assert np.all(np.abs(np.array(p) - 1.0) < 0.01)

    def test_cyclic_prefix(self, rng):
        x = ofdm_modulate(rng.integers(0, 2, SMALL.n_bits), SMALL).reshape(SMALL.n_symbols, 80)
        np.testing.assert_allclose(x[:, :16], x[:, -16:])

    def test_dc_bin_empty(self, rng):
        x = ofdm_modulate(rng.integers(0, 2, SMALL.n_bits), SMALL).reshape(SMALL.n_symbols, 80)
        spectrum = np.fft.fft(x[:, 16:], axis=1)
        assert np.max(np.abs(spectrum[:, 0])) < 1e-9
        assert np.max(np.abs(spectrum[:, 57:])) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ofdm_modulate(np.zeros(10), SMALL)
        with pytest.raises(ValueError):
            ofdm_demodulate(np.zeros(10), SMALL)


class TestBer:
    def test_identical_and_complement(self, rng):
        b = rng.integers(0, 2, 100)
        assert ber(b, b) == 0.0
        assert ber(b, 1 - b) == 1.0

    def test_counted_flips(self, rng):
        b = rng.integers(0, 2, 57_344)
        e = b.copy()
        idx = rng.choice(b.size, 57, replace=False)
        e[idx] ^= 1
        assert ber(b, e) == pytest.approx(57 / 57_344)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            ber([0, 1], [0])


class TestInterference:
    @pytest.mark.parametrize("kind", list(InterferenceKind))
    def test_unit_power(self, kind, rng):
        x = gen_interference(kind, 4096, rng)
        assert np.all(np.isfinite(x)) and np.any(x != 0)
        if kind is InterferenceKind.EMI:
            _, mask = emi_bursts(4096, np.random.default_rng(7))
            assert mask.any()
        else:
            assert power(x) == pytest.approx(1.0, rel=0.1)

    def test_emi_unit_power_over_support(self):
        rng = np.random.default_rng(3)
        x = gen_interference("emi", 4096, rng, noise_floor_db=-300)
        support = np.abs(x) > 1e-6
        assert power(x[support]) == pytest.approx(1.0, rel=1e-6)

    def test_emi_zero_rate_forces_a_burst(self, rng):
        x, mask = emi_bursts(1000, rng, burst_rate=0.0)
        assert 50 <= mask.sum() <= 200
        assert np.any(x != 0)

    @pytest.mark.parametrize("kind", ["cs2", "cs3", "emi"])
    def test_deterministic(self, kind):
        a = gen_interference(kind, 512, np.random.default_rng(5))
        b = gen_interference(kind, 512, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            gen_interference("radar", 100, rng)

    def test_kind_codes(self):
        for k in InterferenceKind:
            assert InterferenceKind.from_code(k.code) is k


class TestMix:
    def test_zero_db_gain_one(self, rng):
        s = np.ones(8, dtype=complex)
        i = np.exp(1j * np.arange(8))
        y = mix(s, i, 0.0, rng)
        assert power(y - s) == pytest.approx(1.0)

    def test_ten_db_gain(self, rng):
        s = np.ones(8, dtype=complex)
        i = np.ones(8, dtype=complex)
        y = mix(s, i, 10.0, rng)
        assert np.abs(y - s)[0] == pytest.approx(0.31623, abs=1e-5)

    @settings(max_examples=200, deadline=None)
    @given(sinr=st.floats(-30, 30), seed=st.integers(0, 2**32 - 1))
    def test_reproduces_sinr(self, sinr, seed):
        rng = np.random.default_rng(seed)
        s = ofdm_modulate(rng.integers(0, 2, SMALL.n_bits), SMALL)
        i = gen_interference("cs2", s.size, rng)
        y = mix(s, i, sinr, rng)
        assert abs(measured_sinr_db(s, y - s) - sinr) < 1e-6

    def test_zero_interference_rejected(self, rng):
        with pytest.raises(ValueError, match="zero power"):
            mix(np.ones(4), np.zeros(4), 0.0, rng)


class TestChannels:
    def test_round_trip(self, rng):
        x = rng.standard_normal((3, 16)) + 1j * rng.standard_normal((3, 16))
        c = to_channels(x)
        assert c.shape == (3, 2, 16) and c.dtype == np.float32
        np.testing.assert_allclose(from_channels(c), x, atol=1e-6)


class TestDatasets:
    def test_fixed_level(self, rng):
        ds = make_dataset([("cs2", 1)], 10, -10.0, rng, SMALL)
        assert len(ds) == 10
        assert all(s.sinr_db == -10.0 for s in ds)

    def test_uniform_range(self, rng):
        ds = make_dataset([("cs3", 1)], 50, "uniform", rng, SMALL)
        s = np.array([x.sinr_db for x in ds])
        assert s.min() >= -10 and s.max() <= 10

    def test_sweep_levels(self, rng):
        sweep = make_sweep([("emi", 1)], 2, rng, SMALL)
        assert list(sweep) == [float(v) for v in range(-10, 11, 2)]
        assert tuple(sweep) == SINR_LEVELS_DB

    def test_split_two_to_one(self):
        assert split_counts([("cs2", 2), ("emi", 1)], 3000) == [
            (InterferenceKind.CS2, 2000), (InterferenceKind.EMI, 1000)]

    def test_dataset_composition(self, rng):
        ds = make_dataset([("cs2", 2), ("emi", 1)], 30, 0.0, rng, SMALL)
        counts = ds.kind_counts()
        assert counts[InterferenceKind.CS2] == 20 and counts[InterferenceKind.EMI] == 10

    def test_empty_profile(self, rng):
        with pytest.raises(ValueError):
            make_dataset([], 5, 0.0, rng, SMALL)

    def test_lazy_items_reproducible(self, rng):
        ds = make_dataset([("cs3", 1)], 4, 0.0, rng, SMALL, cache=False)
        np.testing.assert_array_equal(ds[2].mixture, ds[2].mixture)

    def test_sample_components(self, rng):
        s = make_sample("cs2", 4.0, SMALL, rng)
        assert measured_sinr_db(s.soi, s.mixture - s.soi) == pytest.approx(4.0, abs=1e-9)
        assert ber(s.bits, ofdm_demodulate(s.soi, SMALL)) == 0.0


class TestRfmx:
    def test_round_trip(self, rng, tmp_path):
        samples = [make_sample(k, 2.0, SMALL, rng) for k in InterferenceKind]
        path = tmp_path / "mix.rfmx"
        assert write_samples(path, samples) == 3
        back = read_samples(path)
        for a, b in zip(samples, back):
            assert a.kind is b.kind and a.sinr_db == b.sinr_db
            np.testing.assert_array_equal(a.bits, b.bits)
            np.testing.assert_allclose(b.mixture, a.mixture, atol=1e-6)
            np.testing.assert_allclose(b.soi, a.soi, atol=1e-6)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "mix.rfmx"
        write_samples(path, [make_sample("cs2", 0.0, SMALL, rng)])
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError, match="truncated"):
            read_samples(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.rfmx"
        path.write_bytes(b"JUNK" + bytes(40))
        with pytest.raises(ValueError, match="magic"):
            read_samples(path)
