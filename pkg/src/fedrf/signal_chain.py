"""OFDM/QPSK signal of interest, synthetic interference, SINR mixing and BER.

Waveforms are complex128 numpy arrays while they live in this module; the
model sees them as ``(2, T)`` float32 (real, imag) via :func:`to_channels`.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

SINR_LEVELS_DB = tuple(float(v) for v in range(-10, 11, 2))
TRAIN_SINR_RANGE_DB = (-10.0, 10.0)
NOISE_FLOOR_DB = -20.0


class InterferenceKind(str, enum.Enum):
    CS2 = "cs2"
    CS3 = "cs3"
    EMI = "emi"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "InterferenceKind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown interference kind code {code}")


_KIND_CODES = {InterferenceKind.CS2: 0, InterferenceKind.CS3: 1, InterferenceKind.EMI: 2}


@dataclass(frozen=True)
class OfdmConfig:
    fft_size: int = 64
    cp_len: int = 16
    active_subcarriers: int = 56
    n_symbols: int = 512

    bits_per_qam_symbol = 2

    def __post_init__(self):
        if not 0 < self.active_subcarriers < self.fft_size:
            raise ValueError("active_subcarriers must leave the DC bin unused")
        if self.cp_len < 0 or self.n_symbols < 1:
            raise ValueError("invalid OFDM numerology")

    @property
    def samples_per_symbol(self) -> int:
        return self.fft_size + self.cp_len

    @property
    def n_samples(self) -> int:
        return self.samples_per_symbol * self.n_symbols

    @property
    def n_bits(self) -> int:
        return self.active_subcarriers * self.n_symbols * self.bits_per_qam_symbol

    @property
    def power_scale(self) -> float:
        # ortho IFFT of n active unit-modulus bins has body power n / fft_size
        return float(np.sqrt(self.fft_size / self.active_subcarriers))


# ---------------------------------------------------------------- QPSK / OFDM


def qpsk_map(bits) -> np.ndarray:
    """Gray QPSK: first bit picks the sign of I, second the sign of Q."""
    b = np.asarray(bits, dtype=np.uint8).ravel()
    if b.size % 2:
        raise ValueError(f"QPSK needs an even number of bits, got {b.size}")
    pairs = b.reshape(-1, 2).astype(np.float64)
    return ((1 - 2 * pairs[:, 0]) + 1j * (1 - 2 * pairs[:, 1])) / np.sqrt(2.0)


def qpsk_demap(symbols) -> np.ndarray:
    s = np.asarray(symbols).ravel()
    bits = np.empty((s.size, 2), dtype=np.uint8)
    bits[:, 0] = s.real < 0
    bits[:, 1] = s.imag < 0
    return bits.ravel()


def ofdm_modulate(bits, cfg: OfdmConfig) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint8).ravel()
    if b.size != cfg.n_bits:
        raise ValueError(f"expected {cfg.n_bits} bits, got {b.size}")
    syms = qpsk_map(b).reshape(cfg.n_symbols, cfg.active_subcarriers)
    grid = np.zeros((cfg.n_symbols, cfg.fft_size), dtype=np.complex128)
    grid[:, 1 : 1 + cfg.active_subcarriers] = syms
    body = np.fft.ifft(grid, axis=1, norm="ortho") * cfg.power_scale
    frame = np.concatenate([body[:, cfg.fft_size - cfg.cp_len :], body], axis=1)
    return frame.ravel()


def ofdm_demodulate(signal, cfg: OfdmConfig) -> np.ndarray:
    x = np.asarray(signal).ravel()
    if x.size != cfg.n_samples:
        raise ValueError(f"expected {cfg.n_samples} samples, got {x.size}")
    body = x.reshape(cfg.n_symbols, cfg.samples_per_symbol)[:, cfg.cp_len :]
    grid = np.fft.fft(body, axis=1, norm="ortho") / cfg.power_scale
    return qpsk_demap(grid[:, 1 : 1 + cfg.active_subcarriers])


def ber(bits_ref, bits_est) -> float:
    a = np.asarray(bits_ref).ravel()
    b = np.asarray(bits_est).ravel()
    if a.size != b.size:
        raise ValueError(f"bit length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty bit sequences")
    return float(np.count_nonzero(a != b)) / a.size


# ---------------------------------------------------------------- interference


def power(x) -> float:
    x = np.asarray(x)
    return float(np.mean(x.real.astype(np.float64) ** 2 + x.imag.astype(np.float64) ** 2))


def measured_sinr_db(soi, interference) -> float:
    return 10.0 * np.log10(power(soi) / power(interference))


def _white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2.0)


def rrc_taps(rolloff: float, sps: int, span: int) -> np.ndarray:
    """Root-raised-cosine pulse, ``span`` symbols each side, unit energy."""
    t = np.arange(-span * sps, span * sps + 1) / sps
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 - rolloff + 4 * rolloff / np.pi
        elif rolloff > 0 and abs(abs(4 * rolloff * ti) - 1.0) < 1e-12:
            h[i] = (rolloff / np.sqrt(2)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * rolloff))
                + (1 - 2 / np.pi) * np.cos(np.pi / (4 * rolloff))
            )
        else:
            num = np.sin(np.pi * ti * (1 - rolloff)) + 4 * rolloff * ti * np.cos(
                np.pi * ti * (1 + rolloff)
            )
            h[i] = num / (np.pi * ti * (1 - (4 * rolloff * ti) ** 2))
    return h / np.sqrt(np.sum(h * h))


def _single_carrier_qpsk(length, rng, sps=4, rolloff=0.35, max_cfo=0.05):
    span = 8
    n_sym = length // sps + 2 * span + 2
    syms = qpsk_map(rng.integers(0, 2, size=2 * n_sym))
    up = np.zeros(n_sym * sps, dtype=np.complex128)
    up[::sps] = syms
    shaped = np.convolve(up, rrc_taps(rolloff, sps, span))
    start = span * sps + int(rng.integers(0, sps))
    x = shaped[start : start + length]
    cfo = rng.uniform(-max_cfo, max_cfo)
    return x * np.exp(2j * np.pi * cfo * np.arange(length))


def _wideband_ofdm(length, rng, fft_size=128, cp_len=32):
    sym_len = fft_size + cp_len
    n_sym = length // sym_len + 2
    grid = qpsk_map(rng.integers(0, 2, size=2 * n_sym * fft_size)).reshape(n_sym, fft_size)
    body = np.fft.ifft(grid, axis=1, norm="ortho")
    frames = np.concatenate([body[:, fft_size - cp_len :], body], axis=1).ravel()
    start = int(rng.integers(0, sym_len))
    return frames[start : start + length]


def emi_bursts(length, rng, burst_rate=0.002, min_len=50, max_len=200):
    """Chirp bursts with lognormal amplitudes; returns ``(waveform, support_mask)``.

    At least one burst is always present: if the Bernoulli draw yields none
    (or ``burst_rate`` is 0), a single burst is placed at a uniform start.
    """
    starts = np.flatnonzero(rng.random(length) < burst_rate)
    if starts.size == 0:
        starts = np.array([int(rng.integers(0, length))])
    x = np.zeros(length, dtype=np.complex128)
    mask = np.zeros(length, dtype=bool)
    for s in starts:
        dur = int(rng.integers(min_len, max_len + 1))
        n = np.arange(min(dur, length - s))
        f0, f1 = rng.uniform(-0.5, 0.5, size=2)
        phase = 2 * np.pi * (f0 * n + 0.5 * (f1 - f0) / dur * n * n) + rng.uniform(0, 2 * np.pi)
        amp = np.exp(rng.normal(0.0, 1.0))
        x[s : s + n.size] += amp * np.exp(1j * phase)
        mask[s : s + n.size] = True
    return x, mask


def gen_interference(
    kind: Union[InterferenceKind, str],
    length: int,
    rng: np.random.Generator,
    burst_rate: float = 0.002,
    noise_floor_db: float = NOISE_FLOOR_DB,
) -> np.ndarray:
    """Synthetic stand-in for one interference capture, unit power over its support.

    cs2: RRC-shaped single-carrier QPSK (roll-off 0.35, 4 samples/symbol) with a
    random carrier offset in +/-0.05 of the sample rate. cs3: fully loaded
    OFDM (fft 128, cp 32) at a random timing offset. emi: sparse chirp bursts.
    Every kind carries a white floor ``noise_floor_db`` below its unit power.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    kind = InterferenceKind(kind)
    floor = 10 ** (noise_floor_db / 20.0)
    if kind is InterferenceKind.CS2:
        x = _single_carrier_qpsk(length, rng)
    elif kind is InterferenceKind.CS3:
        x = _wideband_ofdm(length, rng)
    else:
        x, mask = emi_bursts(length, rng, burst_rate=burst_rate)
        x = x / np.sqrt(power(x[mask]))
        return x + floor * _white_noise(length, rng)
    x = x / np.sqrt(power(x))
    x = x + floor * _white_noise(length, rng)
    return x / np.sqrt(power(x))


def mix(soi, interference, sinr_db: float, rng: np.random.Generator) -> np.ndarray:
    """``soi + g * exp(j*phi) * interference`` with ``g`` set for the target SINR."""
    s = np.asarray(soi, dtype=np.complex128)
    i = np.asarray(interference, dtype=np.complex128)
    if s.shape != i.shape:
        raise ValueError(f"length mismatch: soi {s.shape} vs interference {i.shape}")
    p_i = power(i)
    if p_i == 0.0:
        raise ValueError("interference has zero power")
    gain = np.sqrt(power(s) / (p_i * 10 ** (sinr_db / 10.0)))
    phi = rng.uniform(0.0, 2 * np.pi)
    return s + gain * np.exp(1j * phi) * i


def to_channels(x) -> np.ndarray:
    """Complex ``(T,)`` or ``(B, T)`` to float32 ``(2, T)`` / ``(B, 2, T)``."""
    x = np.asarray(x)
    return np.stack([x.real, x.imag], axis=-2).astype(np.float32)


def from_channels(x) -> np.ndarray:
    x = np.asarray(x)
    return x[..., 0, :].astype(np.float64) + 1j * x[..., 1, :].astype(np.float64)


# ---------------------------------------------------------------- datasets


@dataclass(eq=False)
class MixtureSample:
    mixture: np.ndarray
    soi: np.ndarray
    bits: np.ndarray
    sinr_db: float
    kind: InterferenceKind


def make_sample(
    kind, sinr_db: float, cfg: OfdmConfig, rng: np.random.Generator
) -> MixtureSample:
    bits = rng.integers(0, 2, size=cfg.n_bits, dtype=np.uint8)
    soi = ofdm_modulate(bits, cfg)
    interference = gen_interference(kind, cfg.n_samples, rng)
    mixture = mix(soi, interference, sinr_db, rng)
    return MixtureSample(mixture, soi, bits, float(sinr_db), InterferenceKind(kind))


Profile = Sequence[tuple[Union[InterferenceKind, str], float]]


def split_counts(profile: Profile, n: int) -> list[tuple[InterferenceKind, int]]:
    """Split ``n`` over the profile's kinds in proportion to its weights.

    Largest-remainder rounding, ties broken by profile order.
    """
    if not profile:
        raise ValueError("empty interference profile")
    kinds = [InterferenceKind(k) for k, _ in profile]
    w = np.array([float(v) for _, v in profile])
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("profile weights must be non-negative with a positive sum")
    exact = n * w / w.sum()
    counts = np.floor(exact).astype(int)
    rem = n - counts.sum()
    order = sorted(range(len(w)), key=lambda j: (-(exact[j] - counts[j]), j))
    for j in order[:rem]:
        counts[j] += 1
    return list(zip(kinds, counts.tolist()))


class MixtureDataset(Sequence):
    """Deterministic lazily generated list of :class:`MixtureSample`.

    Each sample owns a seed drawn up front, so any index can be generated
    independently (and in any order) with identical results.
    """

    def __init__(self, kinds, sinrs, seeds, cfg: OfdmConfig, cache: bool = True):
        self.kinds = [InterferenceKind(k) for k in kinds]
        self.sinrs = [float(s) for s in sinrs]
        self.seeds = [int(s) for s in seeds]
        if not (len(self.kinds) == len(self.sinrs) == len(self.seeds)):
            raise ValueError("kinds, sinrs and seeds must have equal length")
        self.cfg = cfg
        self._cache = {} if cache else None

    def __len__(self) -> int:
        return len(self.kinds)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        if idx < 0:
            idx += len(self)
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        s = make_sample(self.kinds[idx], self.sinrs[idx], self.cfg, np.random.default_rng(self.seeds[idx]))
        if self._cache is not None:
            self._cache[idx] = s
        return s

    def subset(self, indices) -> "MixtureDataset":
        idx = list(indices)
        sub = MixtureDataset(
            [self.kinds[i] for i in idx],
            [self.sinrs[i] for i in idx],
            [self.seeds[i] for i in idx],
            self.cfg,
            cache=self._cache is not None,
        )
        if self._cache is not None:
            for new, old in enumerate(idx):
                if old in self._cache:
                    sub._cache[new] = self._cache[old]
        return sub

    def kind_counts(self) -> dict[InterferenceKind, int]:
        out = {k: 0 for k in InterferenceKind}
        for k in self.kinds:
            out[k] += 1
        return out


def make_dataset(
    profile: Profile,
    n: int,
    sinr_mode: Union[str, float],
    rng: np.random.Generator,
    cfg: OfdmConfig = OfdmConfig(),
    cache: bool = True,
) -> MixtureDataset:
    """``n`` mixtures whose kinds follow ``profile`` (shuffled).

    ``sinr_mode`` is ``"uniform"`` for U[-10, 10] dB or a fixed level in dB.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    kinds = []
    for kind, count in split_counts(profile, n):
        kinds.extend([kind] * count)
    kinds = [kinds[i] for i in rng.permutation(n)]
    if sinr_mode == "uniform":
        sinrs = rng.uniform(*TRAIN_SINR_RANGE_DB, size=n)
    else:
        sinrs = np.full(n, float(sinr_mode))
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return MixtureDataset(kinds, sinrs, seeds, cfg, cache=cache)


def make_sweep(
    profile: Profile,
    frames_per_level: int,
    rng: np.random.Generator,
    cfg: OfdmConfig = OfdmConfig(),
    levels: Iterable[float] = SINR_LEVELS_DB,
    cache: bool = True,
) -> dict[float, MixtureDataset]:
    """One fixed-SINR test set per level."""
    return {
        float(level): make_dataset(profile, frames_per_level, float(level), rng, cfg, cache)
        for level in levels
    }


# ---------------------------------------------------------------- RFMX cache file

_RFMX_MAGIC = b"RFMX"
_RFMX_VERSION = 1
_RFMX_HEADER = struct.Struct("<4sHIIBf")


def _interleave(x) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty(2 * x.size, dtype="<f4")
    out[0::2] = x.real
    out[1::2] = x.imag
    return out


def _deinterleave(a) -> np.ndarray:
    return a[0::2].astype(np.float64) + 1j * a[1::2].astype(np.float64)


def write_samples(path, samples: Iterable[MixtureSample]) -> int:
    """Write samples as consecutive little-endian records; returns the count."""
    count = 0
    with open(path, "wb") as f:
        for s in samples:
            T = s.mixture.size
            B = s.bits.size
            f.write(_RFMX_HEADER.pack(_RFMX_MAGIC, _RFMX_VERSION, T, B, s.kind.code, s.sinr_db))
            f.write(_interleave(s.mixture).tobytes())
            f.write(_interleave(s.soi).tobytes())
            f.write(np.packbits(s.bits.astype(np.uint8)).tobytes())
            count += 1
    return count


def read_samples(path) -> list[MixtureSample]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < _RFMX_HEADER.size:
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        magic, version, T, B, code, sinr = _RFMX_HEADER.unpack_from(data, pos)
        if magic != _RFMX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r} at byte {pos}")
        if version != _RFMX_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        pos += _RFMX_HEADER.size
        nbytes = 8 * T * 2 + (B + 7) // 8
        if len(data) - pos < nbytes:
            raise ValueError(f"{path}: truncated record body at byte {pos}")
        mixture = _deinterleave(np.frombuffer(data, "<f4", 2 * T, pos))
        pos += 8 * T
        soi = _deinterleave(np.frombuffer(data, "<f4", 2 * T, pos))
        pos += 8 * T
        packed = np.frombuffer(data, np.uint8, (B + 7) // 8, pos)
        pos += (B + 7) // 8
        bits = np.unpackbits(packed)[:B]
        out.append(MixtureSample(mixture, soi, bits, float(sinr), InterferenceKind.from_code(code)))
    return out
