"""WaveNet-style separator: gated dilated residual blocks with skip aggregation.

The network maps a 2-channel (I, Q) mixture to a 2-channel estimate of the
clean signal. Adapters (see :mod:`fedrf.adapters`) hook into the forward and
backward passes through ``model.lora`` / ``model.film``.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    Adam,
    Parameter,
    conv1d_backward,
    conv1d_forward,
    gated_activation_backward,
    gated_activation_fwd,
    kaiming_uniform,
    mse_loss,
)

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class WaveNetConfig:
    n_blocks: int = 15
    channels: int = 48
    kernel_size: int = 3
    dilation_cycle: int = 5
    causal: bool = False

    def __post_init__(self):
        for name in ("n_blocks", "channels", "kernel_size", "dilation_cycle"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    def dilation(self, block: int) -> int:
        return 2 ** (block % self.dilation_cycle)

    @property
    def dilations(self) -> list[int]:
        return [self.dilation(i) for i in range(self.n_blocks)]


def receptive_field(config: WaveNetConfig) -> int:
    return 1 + (config.kernel_size - 1) * sum(config.dilations)


def expected_param_count(config: WaveNetConfig) -> int:
    C, K, R = config.channels, config.kernel_size, config.n_blocks
    block = (2 * C * C * K + 2 * C) + (2 * C * C + 2 * C)
    return (2 * C + C) + R * block + (C * C + C) + (2 * C + 2)


class WaveNet:
    """Backbone parameters in canonical order plus the forward/backward passes."""

    def __init__(self, config: WaveNetConfig, params: Sequence[Parameter]):
        self.config = config
        self.params = list(params)
        self._by_name = {p.name: p for p in self.params}
        if len(self._by_name) != len(self.params):
            raise ValueError("duplicate parameter names")
        self.lora = None
        self.film = None

    # -- layout

    @staticmethod
    def layout(config: WaveNetConfig) -> list[tuple[str, tuple]]:
        C, K = config.channels, config.kernel_size
        out = [("input_proj.weight", (C, 2, 1)), ("input_proj.bias", (C,))]
        for i in range(config.n_blocks):
            out += [
                (f"blocks.{i}.dilated.weight", (2 * C, C, K)),
                (f"blocks.{i}.dilated.bias", (2 * C,)),
                (f"blocks.{i}.proj.weight", (2 * C, C, 1)),
                (f"blocks.{i}.proj.bias", (2 * C,)),
            ]
        out += [
            ("skip_proj.weight", (C, C, 1)),
            ("skip_proj.bias", (C,)),
            ("output_proj.weight", (2, C, 1)),
            ("output_proj.bias", (2,)),
        ]
        return out

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    @property
    def adapter(self):
        return self.lora if self.lora is not None else self.film

    def parameters(self, include_adapter: bool = True) -> list[Parameter]:
        ps = list(self.params)
        if include_adapter and self.adapter is not None:
            ps += self.adapter.parameters()
        return ps

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params:
            p.trainable = flag

    def astype(self, dtype) -> "WaveNet":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "WaveNet":
        return copy.deepcopy(self)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.params])

    # -- passes

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Separate ``(2, T)`` or batched ``(B, 2, T)`` mixtures; output has the input's shape."""
        y, _ = self._forward(_to_cbt(x), keep=False)
        return _from_cbt(y, x.ndim)

    __call__ = forward

    def forward_train(self, x: np.ndarray):
        """Forward on a channel-major ``(2, B, T)`` batch, keeping activations for backward."""
        return self._forward(x, keep=True)

    def _forward(self, x, keep):
        cfg = self.config
        if x.shape[0] != 2:
            raise ValueError(f"expected 2 input channels (I, Q), got {x.shape[0]}")
        C = cfg.channels
        cache = {"x_in": x, "blocks": []}
        h = conv1d_forward(x, self["input_proj.weight"], self["input_proj.bias"])
        skip_sum = None
        for i in range(cfg.n_blocks):
            d = cfg.dilation(i)
            bc = {}
            if self.film is not None:
                bc["x_pre"] = h
                h = self.film.gamma[i].values[:, None, None] * h + self.film.beta[i].values[:, None, None]
            bc["x"] = h
            z = conv1d_forward(
                h, self[f"blocks.{i}.dilated.weight"], self[f"blocks.{i}.dilated.bias"], d, cfg.causal
            )
            if self.lora is not None:
                a_out = conv1d_forward(h, self.lora.A[i], None, d, cfg.causal)
                b_out = conv1d_forward(a_out, self.lora.B[i], None, 1, cfg.causal)
                z = z + self.lora.scale * b_out
                bc["a_out"] = a_out
            g, sg, tv = gated_activation_fwd(z)
            u = conv1d_forward(g, self[f"blocks.{i}.proj.weight"], self[f"blocks.{i}.proj.bias"])
            skip = u[C:]
            skip_sum = skip if skip_sum is None else skip_sum + skip
            h = (h + u[:C]) / SQRT2
            if keep:
                bc.update(sg=sg, tv=tv, g=g)
                cache["blocks"].append(bc)
        s = skip_sum / np.sqrt(cfg.n_blocks)
        p = conv1d_forward(s, self["skip_proj.weight"], self["skip_proj.bias"])
        a = np.maximum(p, 0)
        y = conv1d_forward(a, self["output_proj.weight"], self["output_proj.bias"])
        if keep:
            cache.update(s=s, p=p, a=a)
        return y, (cache if keep else None)

    def backward(self, grad_y: np.ndarray, cache) -> None:
        """Accumulate gradients of every trainable parameter (channel-major ``grad_y``)."""
        cfg = self.config
        ga = conv1d_backward(grad_y, cache["a"], self["output_proj.weight"], self["output_proj.bias"])
        gp = ga * (cache["p"] > 0)
        gs = conv1d_backward(gp, cache["s"], self["skip_proj.weight"], self["skip_proj.bias"])
        g_skip = gs / np.sqrt(cfg.n_blocks)
        gh = np.zeros_like(cache["blocks"][-1]["x"])
        for i in reversed(range(cfg.n_blocks)):
            bc = cache["blocks"][i]
            d = cfg.dilation(i)
            gx = gh / SQRT2
            gu = np.concatenate([gx, g_skip], axis=0)
            gg = conv1d_backward(
                gu, bc["g"], self[f"blocks.{i}.proj.weight"], self[f"blocks.{i}.proj.bias"]
            )
            gz = gated_activation_backward(gg, bc["sg"], bc["tv"])
            gx = gx + conv1d_backward(
                gz, bc["x"], self[f"blocks.{i}.dilated.weight"], self[f"blocks.{i}.dilated.bias"],
                d, cfg.causal,
            )
            if self.lora is not None:
                ga_out = conv1d_backward(self.lora.scale * gz, bc["a_out"], self.lora.B[i], None, 1, cfg.causal)
                gx = gx + conv1d_backward(ga_out, bc["x"], self.lora.A[i], None, d, cfg.causal)
            if self.film is not None:
                gamma, beta = self.film.gamma[i], self.film.beta[i]
                if gamma.trainable:
                    gamma.grad += (gx * bc["x_pre"]).sum(axis=(1, 2))
                if beta.trainable:
                    beta.grad += gx.sum(axis=(1, 2))
                gx = gamma.values[:, None, None] * gx
            gh = gx
        conv1d_backward(
            gh, cache["x_in"], self["input_proj.weight"], self["input_proj.bias"], need_grad_x=False
        )


def _to_cbt(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[:, None, :]
    if x.ndim == 3:
        return np.ascontiguousarray(x.transpose(1, 0, 2))
    raise ValueError(f"expected (2, T) or (B, 2, T) input, got shape {x.shape}")


def _from_cbt(y: np.ndarray, ndim: int) -> np.ndarray:
    return y[:, 0] if ndim == 2 else np.ascontiguousarray(y.transpose(1, 0, 2))


def build(config: WaveNetConfig = WaveNetConfig(), rng: Optional[np.random.Generator] = None,
          dtype=np.float32) -> WaveNet:
    """Kaiming-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    params = []
    for name, shape in WaveNet.layout(config):
        if name.endswith(".bias"):
            values = np.zeros(shape, dtype=dtype)
        else:
            values = kaiming_uniform(shape, rng, dtype=dtype)
        params.append(Parameter(name, values))
    return WaveNet(config, params)


def batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    """Stack MixtureSamples into channel-major float32 ``(2, B, T)`` input and target."""
    if len(batch) == 0:
        raise ValueError("empty batch")

    def stack(waves):
        w = np.stack(waves)
        return np.stack([w.real, w.imag]).astype(np.float32)

    return stack([s.mixture for s in batch]), stack([s.soi for s in batch])


def backward_and_step(model: WaveNet, batch, optimizer: Adam) -> float:
    """One Adam step on the batch MSE; returns the loss before the step."""
    if isinstance(batch, tuple):
        x, target = batch
    else:
        x, target = batch_arrays(batch)
    if x.shape[1] == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    y, cache = model.forward_train(x)
    loss, gy = mse_loss(y, target)
    model.backward(gy, cache)
    optimizer.step()
    return loss


def evaluate_mse(model: WaveNet, samples, batch_size: int = 8) -> float:
    total, count = 0.0, 0
    for start in range(0, len(samples), batch_size):
        x, target = batch_arrays(samples[start : start + batch_size])
        y, _ = model._forward(x, keep=False)
        loss, _ = mse_loss(y, target)
        total += loss * x.shape[1]
        count += x.shape[1]
    return total / count


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"FLRF"
_CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHHHHBI")


class CheckpointError(ValueError):
    pass


def save(model: WaveNet, path) -> None:
    cfg = model.config
    head = bytearray(
        _CKPT_HEAD.pack(
            _CKPT_MAGIC, _CKPT_VERSION, cfg.n_blocks, cfg.channels, cfg.kernel_size,
            cfg.dilation_cycle, int(cfg.causal), len(model.params),
        )
    )
    for p in model.params:
        name = p.name.encode()
        head += struct.pack("<H", len(name)) + name
        head += struct.pack("<B", p.values.ndim) + struct.pack(f"<{p.values.ndim}I", *p.shape)
    payload = b"".join(p.values.astype("<f4").tobytes() for p in model.params)
    Path(path).write_bytes(bytes(head) + payload)


def header_size(path) -> int:
    """Byte length of a checkpoint's header (everything before the tensor data)."""
    data = Path(path).read_bytes()
    _, pos = _read_header(data, path)
    return pos


def _read_header(data: bytes, path):
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, R, C, K, m, causal, n = _CKPT_HEAD.unpack_from(data, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a backbone checkpoint")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = WaveNetConfig(R, C, K, m, bool(causal))
    pos = _CKPT_HEAD.size
    entries = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            entries.append((name, tuple(shape)))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated tensor table") from exc
    return (config, entries), pos


def load(path) -> WaveNet:
    data = Path(path).read_bytes()
    (config, entries), pos = _read_header(data, path)
    expected = WaveNet.layout(config)
    if len(entries) != len(expected):
        raise CheckpointError(
            f"{path}: {len(entries)} tensors stored, config implies {len(expected)}"
        )
    params = []
    for (name, shape), (ename, eshape) in zip(entries, expected):
        if name != ename:
            raise CheckpointError(f"{path}: tensor {name!r} found where {ename!r} expected")
        if shape != eshape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, expected {eshape}")
        n = int(np.prod(shape))
        if len(data) < pos + 4 * n:
            raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
        values = np.frombuffer(data, "<f4", n, pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        params.append(Parameter(name, values))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return WaveNet(config, params)


def config_dict(config: WaveNetConfig) -> dict:
    return asdict(config)
