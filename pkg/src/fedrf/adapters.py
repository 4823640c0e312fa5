"""LoRA branches on the dilated convolutions and FiLM on the residual stream.

Attaching an adapter freezes the backbone. The adapter's trainable tensors
flatten into an :class:`AdapterVector`, the unit exchanged in each federated
round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import Parameter, kaiming_uniform
from .wavenet import WaveNet

METHOD_CODES = {"lora": 0, "film": 1, "full": 2}


class LayoutError(ValueError):
    pass


class LoraAdapter:
    """Per block: ``A_i`` (C -> r, kernel K, host dilation) and ``B_i`` (r -> 2C, 1x1)."""

    method = "lora"

    def __init__(self, A, B, rank: int, alpha: float, dilations):
        self.A = list(A)
        self.B = list(B)
        self.rank = rank
        self.alpha = alpha
        self.dilations = list(dilations)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Parameter]:
        out = []
        for a, b in zip(self.A, self.B):
            out += [a, b]
        return out


class FilmAdapter:
    """Per block: channel scale ``gamma_i`` and shift ``beta_i`` applied before the block."""

    method = "film"
    rank = 0

    def __init__(self, gamma, beta):
        self.gamma = list(gamma)
        self.beta = list(beta)

    def parameters(self) -> list[Parameter]:
        out = []
        for g, b in zip(self.gamma, self.beta):
            out += [g, b]
        return out


def _check_free(model: WaveNet) -> None:
    if model.adapter is not None:
        raise RuntimeError(f"model already has a {model.adapter.method} adapter attached")


def attach_lora(model: WaveNet, rank: int = 4, alpha: Optional[float] = None,
                rng: Optional[np.random.Generator] = None) -> LoraAdapter:
    """Freeze the backbone and add zero-output LoRA branches (alpha defaults to rank)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    _check_free(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = model.config
    C, K = cfg.channels, cfg.kernel_size
    dtype = model.params[0].values.dtype
    A, B = [], []
    for i in range(cfg.n_blocks):
        A.append(Parameter(f"lora.{i}.A", kaiming_uniform((rank, C, K), rng, dtype=dtype)))
        B.append(Parameter(f"lora.{i}.B", np.zeros((2 * C, rank, 1), dtype=dtype)))
    model.set_trainable(False)
    adapter = LoraAdapter(A, B, rank, float(rank if alpha is None else alpha), cfg.dilations)
    model.lora = adapter
    return adapter


def attach_film(model: WaveNet) -> FilmAdapter:
    """Freeze the backbone and add identity-initialised FiLM transforms."""
    _check_free(model)
    cfg = model.config
    dtype = model.params[0].values.dtype
    gamma = [Parameter(f"film.{i}.gamma", np.ones(cfg.channels, dtype=dtype)) for i in range(cfg.n_blocks)]
    beta = [Parameter(f"film.{i}.beta", np.zeros(cfg.channels, dtype=dtype)) for i in range(cfg.n_blocks)]
    model.set_trainable(False)
    adapter = FilmAdapter(gamma, beta)
    model.film = adapter
    return adapter


def count_trainable(model: WaveNet) -> int:
    return sum(p.size for p in model.parameters() if p.trainable)


# ---------------------------------------------------------------- flat vectors


@dataclass(frozen=True, eq=False)
class AdapterVector:
    method: str
    rank: int
    n_blocks: int
    channels: int
    layout: tuple  # ((name, shape), ...)
    data: np.ndarray

    def __len__(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return 4 * self.data.size

    def same_layout(self, other: "AdapterVector") -> bool:
        return (self.method, self.rank, self.n_blocks, self.channels, self.layout) == (
            other.method, other.rank, other.n_blocks, other.channels, other.layout)

    def with_data(self, data: np.ndarray) -> "AdapterVector":
        data = np.asarray(data, dtype=np.float32)
        if data.shape != self.data.shape:
            raise LayoutError(f"data length {data.size} != layout length {self.data.size}")
        return AdapterVector(self.method, self.rank, self.n_blocks, self.channels, self.layout, data)


def _exchange_params(model: WaveNet, method: str) -> list[Parameter]:
    if method == "full":
        return list(model.params)
    adapter = model.adapter
    if adapter is None or adapter.method != method:
        have = None if adapter is None else adapter.method
        raise LayoutError(f"model carries adapter {have!r}, vector is {method!r}")
    return adapter.parameters()


def pack(model: WaveNet, method: Optional[str] = None) -> AdapterVector:
    """Flatten the exchanged parameters in canonical order.

    ``method`` defaults to the attached adapter; ``"full"`` packs the whole
    backbone (full-model federated averaging).
    """
    if method is None:
        if model.adapter is None:
            raise LayoutError("no adapter attached; pass method='full' to pack the backbone")
        method = model.adapter.method
    params = _exchange_params(model, method)
    rank = model.lora.rank if method == "lora" else 0
    layout = tuple((p.name, tuple(p.shape)) for p in params)
    data = np.concatenate([p.values.ravel() for p in params]).astype(np.float32)
    cfg = model.config
    return AdapterVector(method, rank, cfg.n_blocks, cfg.channels, layout, data)


def unpack(vector: AdapterVector, model: WaveNet) -> None:
    """Overwrite the model's exchanged parameters from ``vector``."""
    params = _exchange_params(model, vector.method)
    cfg = model.config
    rank = model.lora.rank if vector.method == "lora" else 0
    if (vector.rank, vector.n_blocks, vector.channels) != (rank, cfg.n_blocks, cfg.channels):
        raise LayoutError(
            f"vector (rank={vector.rank}, R={vector.n_blocks}, C={vector.channels}) does not fit "
            f"model (rank={rank}, R={cfg.n_blocks}, C={cfg.channels})"
        )
    layout = tuple((p.name, tuple(p.shape)) for p in params)
    if layout != vector.layout:
        raise LayoutError("vector layout does not match model parameters")
    pos = 0
    for p in params:
        n = p.size
        p.values[...] = vector.data[pos : pos + n].reshape(p.shape)
        pos += n


# ---------------------------------------------------------------- FLAD files

_FLAD_MAGIC = b"FLAD"
_FLAD_HEAD = struct.Struct("<4sBBHH")


def adapter_layout(method: str, rank: int, n_blocks: int, channels: int, kernel_size: int = 3) -> tuple:
    C = channels
    out = []
    for i in range(n_blocks):
        if method == "lora":
            out += [(f"lora.{i}.A", (rank, C, kernel_size)), (f"lora.{i}.B", (2 * C, rank, 1))]
        elif method == "film":
            out += [(f"film.{i}.gamma", (C,)), (f"film.{i}.beta", (C,))]
        else:
            raise LayoutError(f"no file layout for method {method!r}")
    return tuple(out)


def write_vector(vector: AdapterVector, path) -> None:
    if vector.method not in ("lora", "film"):
        raise LayoutError("only lora/film vectors use the adapter file format")
    head = _FLAD_HEAD.pack(_FLAD_MAGIC, METHOD_CODES[vector.method], vector.rank,
                           vector.n_blocks, vector.channels)
    Path(path).write_bytes(head + vector.data.astype("<f4").tobytes())


def read_vector(path, kernel_size: int = 3) -> AdapterVector:
    data = Path(path).read_bytes()
    if len(data) < _FLAD_HEAD.size:
        raise LayoutError(f"{path}: truncated adapter header")
    magic, code, rank, R, C = _FLAD_HEAD.unpack_from(data, 0)
    if magic != _FLAD_MAGIC:
        raise LayoutError(f"{path}: bad magic {magic!r}")
    method = {v: k for k, v in METHOD_CODES.items()}.get(code)
    if method not in ("lora", "film"):
        raise LayoutError(f"{path}: unknown method code {code}")
    layout = adapter_layout(method, rank, R, C, kernel_size)
    n = sum(int(np.prod(s)) for _, s in layout)
    payload = data[_FLAD_HEAD.size :]
    if len(payload) != 4 * n:
        raise LayoutError(f"{path}: payload is {len(payload)} bytes, layout needs {4 * n}")
    values = np.frombuffer(payload, "<f4").astype(np.float32)
    return AdapterVector(method, rank, R, C, layout, values)
