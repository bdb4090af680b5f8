"""T5-style transformer encoder built from primitive tensor ops.

Pre-norm RMS normalization, relative position biases shared across layers,
ReLU feed-forward, no biases in linear layers, and no attention-score scaling
(the T5 convention). Every linear projection is applied through a named
registry so the quantization layer can observe and replace individual matmuls.

The FP32 path is 32-bit floating point throughout. Weights live in a simple
binary tensor archive so independent tools can produce them:

    bytes 0..8   little-endian uint64: header length H
    bytes 8..8+H UTF-8 JSON: {"version": 1, "meta": {...},
                              "tensors": {name: {"dtype": "f32"|"i8",
                                                 "shape": [...],
                                                 "offset": N}}}
    remainder    raw row-major little-endian tensor data; offsets are relative
                 to the start of the data section
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1
_DTYPES = {"f32": np.float32, "i8": np.int8}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.int8): "i8"}


# ---------------------------------------------------------------------------
# Tensor archive
# ---------------------------------------------------------------------------

def pack_archive(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header_tensors = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_NAMES:
            raise ValueError(f"tensor {name}: unsupported dtype {arr.dtype}")
        if arr.dtype == np.float32:
            data = arr.astype("<f4").tobytes()
        else:
            data = arr.tobytes()
        header_tensors[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
        }
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": ARCHIVE_VERSION, "meta": meta or {}, "tensors": header_tensors}
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def unpack_archive(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise ValueError("archive too short for header length field")
    (header_len,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    if header.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"unsupported archive version {header.get('version')}")
    data = blob[8 + header_len :]
    tensors = {}
    for name, info in header["tensors"].items():
        dtype = np.dtype(_DTYPES[info["dtype"]]).newbyteorder("<")
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(_DTYPES[info["dtype"]])
    return tensors, header.get("meta", {})


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(pack_archive(tensors, meta))


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return unpack_archive(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Configuration and inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    n_rel_buckets: int = 32
    rel_max_distance: int = 128
    eps: float = 1e-6
    max_input_len: int = 512

    def __post_init__(self):
        fields = (
            self.vocab_size, self.d_model, self.n_layers, self.n_heads,
            self.d_ff, self.n_rel_buckets, self.rel_max_distance, self.max_input_len,
        )
        if any(v <= 0 for v in fields) or self.eps <= 0:
            raise ValueError("all EncoderConfig fields must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def linear_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"layer.{i}.attn.{p}" for p in ("q", "k", "v", "o")]
            names += [f"layer.{i}.ffn.wi", f"layer.{i}.ffn.wo"]
        names.append("head.proj")
        return names

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {
            "embedding": (self.vocab_size, d),
            "rel_bias": (self.n_rel_buckets, self.n_heads),
            "final_norm": (d,),
            "head.proj": (d, 1),
        }
        for i in range(self.n_layers):
            shapes[f"layer.{i}.attn.norm"] = (d,)
            for p in ("q", "k", "v", "o"):
                shapes[f"layer.{i}.attn.{p}"] = (d, d)
            shapes[f"layer.{i}.ffn.norm"] = (d,)
            shapes[f"layer.{i}.ffn.wi"] = (d, f)
            shapes[f"layer.{i}.ffn.wo"] = (f, d)
        return shapes

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "n_rel_buckets": self.n_rel_buckets, "rel_max_distance": self.rel_max_distance,
            "eps": self.eps, "max_input_len": self.max_input_len,
        }


@dataclass
class TokenBatch:
    """Padded id matrix plus a mask that is true exactly on real tokens."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 2:
            raise ValueError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal 2-d shapes")
        if self.ids.min(initial=0) < 0:
            raise ValueError("token ids must be non-negative")

    @classmethod
    def from_sequences(cls, seqs: list[list[int]], pad_id: int = 0) -> "TokenBatch":
        width = max((len(s) for s in seqs), default=0)
        ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for row, seq in enumerate(seqs):
            ids[row, : len(seq)] = seq
            mask[row, : len(seq)] = True
        return cls(ids=ids, mask=mask)

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """out_i = gain_i * x_i / sqrt(mean(x^2) + eps), over the last axis."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[-1]:
        raise ValueError(f"gain length {gain.shape[-1]} != feature size {x.shape[-1]}")
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return gain * x / np.sqrt(ms + np.float32(eps))


def relative_position_bucket(rel: int, n_buckets: int = 32, max_distance: int = 128) -> int:
    """Bucket id for rel = key_pos - query_pos.

    Half the buckets cover each sign (negative-or-zero: 0..half-1, positive:
    half..n_buckets-1). Within a sign, distances below half/2 map exactly;
    larger ones map logarithmically up to max_distance, then saturate.
    """
    half = n_buckets // 2
    bucket = half if rel > 0 else 0
    n = abs(rel)
    max_exact = half // 2
    if n < max_exact:
        return bucket + n
    scaled = max_exact + int(
        math.log(n / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
    )
    return bucket + min(half - 1, scaled)


@lru_cache(maxsize=16)
def _bucket_matrix(seq_len: int, n_buckets: int, max_distance: int) -> torch.Tensor:
    buckets = np.empty((seq_len, seq_len), dtype=np.int64)
    for qpos in range(seq_len):
        for kpos in range(seq_len):
            buckets[qpos, kpos] = relative_position_bucket(kpos - qpos, n_buckets, max_distance)
    return torch.from_numpy(buckets)


# ---------------------------------------------------------------------------
# Linear kernels (replaced wholesale by the quantization layer)
# ---------------------------------------------------------------------------

class Fp32Linear:
    """y = x @ W with a float32 weight of shape (d_in, d_out)."""

    def __init__(self, weight: torch.Tensor):
        self.weight = weight.to(torch.float32)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight

    def tensors(self, name: str) -> dict[str, np.ndarray]:
        return {name: self.weight.numpy()}


class Model:
    """Loaded encoder weights plus the named-linear registry."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        shapes = config.tensor_shapes()
        missing = [n for n in shapes if n not in tensors]
        if missing:
            raise ValueError(f"archive missing tensor {missing[0]}")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(
                    f"tensor {name}: shape {tuple(tensors[name].shape)}, expected {shape}"
                )
        extra = sorted(set(tensors) - set(shapes))
        if extra:
            log.warning("archive has %d unused tensors (e.g. %s)", len(extra), extra[0])

        self.config = config
        t = lambda name: torch.from_numpy(np.ascontiguousarray(tensors[name], dtype=np.float32))
        self.embedding = t("embedding")
        self.rel_bias = t("rel_bias")
        self.final_norm = t("final_norm")
        self.attn_norms = [t(f"layer.{i}.attn.norm") for i in range(config.n_layers)]
        self.ffn_norms = [t(f"layer.{i}.ffn.norm") for i in range(config.n_layers)]
        self.linears: dict[str, object] = {
            name: Fp32Linear(t(name)) for name in config.linear_names()
        }
        self.scheme = "none"
        self.observer = None  # callable(name, x_2d) set during calibration

    # -- linear registry -----------------------------------------------------

    def apply_linear(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if self.observer is not None:
            self.observer(name, x)
        return self.linears[name](x)

    def _rms(self, x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
        ms = x.square().mean(dim=-1, keepdim=True)
        return gain * x * torch.rsqrt(ms + self.config.eps)

    # -- forward ---------------------------------------------------------------

    def hidden_states(self, batch: TokenBatch, collect_attention: bool = False) -> torch.Tensor:
        """Encode a token batch to (batch, seq, d_model) float32 hidden states.

        With collect_attention, per-layer attention probabilities are kept on
        self.last_attention for inspection (tests, debugging).
        """
        cfg = self.config
        self.last_attention: list[np.ndarray] = []
        if batch.seq_len > cfg.max_input_len:
            raise ValueError(f"sequence length {batch.seq_len} exceeds max {cfg.max_input_len}")
        if batch.ids.max(initial=0) >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        ids = torch.from_numpy(batch.ids)
        mask = torch.from_numpy(batch.mask)
        n_batch, seq = ids.shape
        n_heads, d_head = cfg.n_heads, cfg.d_model // cfg.n_heads

        x = self.embedding[ids]  # (B, S, D)
        buckets = _bucket_matrix(seq, cfg.n_rel_buckets, cfg.rel_max_distance)
        bias = self.rel_bias[buckets].permute(2, 0, 1).unsqueeze(0)  # (1, H, S, S)
        fully_unmasked = bool(mask.all())
        key_block = None
        if not fully_unmasked:
            key_block = torch.where(mask, 0.0, float("-inf"))[:, None, None, :]  # (B,1,1,S)

        def heads(t: torch.Tensor) -> torch.Tensor:
            return t.view(n_batch, seq, n_heads, d_head).permute(0, 2, 1, 3)

        for i in range(cfg.n_layers):
            h = self._rms(x, self.attn_norms[i])
            h2d = h.reshape(-1, cfg.d_model)
            q2d, k2d, v2d = self._project_qkv(i, h2d)
            q, k, v = (heads(t.view(n_batch, seq, -1)) for t in (q2d, k2d, v2d))
            logits = q @ k.transpose(-1, -2)  # T5: no sqrt(d) scaling
            logits += bias
            if key_block is not None:
                logits += key_block
            attn = torch.softmax(logits, dim=-1)
            if key_block is not None:
                attn = torch.nan_to_num(attn, nan=0.0)  # rows with no unmasked key
            if collect_attention:
                self.last_attention.append(attn.numpy())
            ctx = (attn @ v).permute(0, 2, 1, 3).reshape(-1, cfg.d_model).contiguous()
            x = x + self.apply_linear(f"layer.{i}.attn.o", ctx).view(n_batch, seq, -1)

            h = self._rms(x, self.ffn_norms[i]).reshape(-1, cfg.d_model)
            ff = torch.relu(self.apply_linear(f"layer.{i}.ffn.wi", h))
            ff = self.apply_linear(f"layer.{i}.ffn.wo", ff.contiguous())
            x = x + ff.view(n_batch, seq, -1)

        return self._rms(x, self.final_norm)

    def _project_qkv(self, layer: int, h2d: torch.Tensor):
        """Apply the three attention input projections, quantizing the shared
        input once when the kernels allow it."""
        names = [f"layer.{layer}.attn.{p}" for p in ("q", "k", "v")]
        first, *rest = (self.linears[n] for n in names)
        if (
            self.observer is None
            and hasattr(first, "shares_input_with")
            and all(first.shares_input_with(other) for other in rest)
        ):
            prepared = first.prepare(h2d)
            return tuple(self.linears[n].apply_prepared(*prepared) for n in names)
        return tuple(self.apply_linear(n, h2d) for n in names)

    # -- serialization ---------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out = {
            "embedding": self.embedding.numpy(),
            "rel_bias": self.rel_bias.numpy(),
            "final_norm": self.final_norm.numpy(),
        }
        for i in range(self.config.n_layers):
            out[f"layer.{i}.attn.norm"] = self.attn_norms[i].numpy()
            out[f"layer.{i}.ffn.norm"] = self.ffn_norms[i].numpy()
        for name, linear in self.linears.items():
            out.update(linear.tensors(name))
        return out

    def param_bytes(self) -> int:
        return sum(arr.nbytes for arr in self.tensors().values())


def encode(model: Model, batch: TokenBatch) -> np.ndarray:
    """Hidden states as a (batch, seq, d_model) float32 array."""
    return model.hidden_states(batch).numpy()


def load_weights(path: str | Path, config: EncoderConfig) -> Model:
    """Load a tensor archive and validate it against the config shapes."""
    tensors, _ = load_archive(path)
    model = Model(config, tensors)
    log.info("loaded %s: %.1f MB of parameters", path, model.param_bytes() / 1e6)
    return model


def random_weights(config: EncoderConfig, seed: int = 0, scale: float = 1.0) -> dict[str, np.ndarray]:
    """Deterministic random weights for toy models and benchmarks."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name == "rel_bias":
            tensors[name] = (rng.standard_normal(shape) * 0.1 * scale).astype(np.float32)
        elif name == "embedding":
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
        else:
            fan_in = shape[0]
            tensors[name] = (rng.standard_normal(shape) * scale / math.sqrt(fan_in)).astype(np.float32)
    return tensors
