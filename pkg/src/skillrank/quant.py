"""Post-training INT8 quantization of the encoder's linear layers.

Three schemes over symmetric signed INT8 (zero point 0 everywhere):

* dynamic     - weights quantized offline (per output channel by default),
                activation scale computed per forward call, per tensor.
* static      - like dynamic, but the activation scale is frozen from
                calibration maxima; runtime values beyond the calibrated
                range saturate.
* smoothquant - per-input-channel smoothing factors s migrate activation
                outliers into the weights (x/s against s-folded weights),
                then dynamic per-tensor activation quantization.

Only matmul weights are quantized; embeddings, norms and softmax stay FP32.
Rounding is half-away-from-zero. The fast inference path multiplies int8
matrices with 32-bit accumulation through torch's `_int_mm` kernel; a plain
int32 matmul is the documented reference semantics and the fallback, and the
two are exactly equal on the integer accumulator.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

from .encoder import EncoderConfig, Model, TokenBatch, load_archive, pack_archive, save_archive

log = logging.getLogger(__name__)

SCHEMES = ("none", "dynamic", "static", "smoothquant")
SMOOTH_EPS = 1e-8

try:  # int8 x int8 -> int32 kernel; bit-identical to the reference matmul
    torch._int_mm(torch.zeros(1, 1, dtype=torch.int8), torch.zeros(1, 1, dtype=torch.int8))
    _HAS_INT_MM = True
except (AttributeError, RuntimeError):  # pragma: no cover - depends on build
    _HAS_INT_MM = False


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class QuantizedTensor:
    """INT8 payload with per-tensor or per-output-channel scale; zero point 0."""

    data: np.ndarray
    scale: Union[float, np.ndarray]

    zero_point = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if np.any(np.abs(self.data.astype(np.int16)) > 127):
            raise ValueError("quantized values must lie in [-127, 127]")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scales must be positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def per_channel(self) -> bool:
        return isinstance(self.scale, np.ndarray)


@dataclass(frozen=True)
class QuantConfig:
    scheme: str = "dynamic"
    alpha: float = 0.5
    weight_granularity: str = "per_channel"
    calibration_size: int = 32
    clip_percentile: Optional[float] = None  # e.g. 99.9; None = absolute max

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.weight_granularity not in ("per_tensor", "per_channel"):
            raise ValueError(f"unknown granularity {self.weight_granularity!r}")
        if self.scheme == "smoothquant" and not (0.0 < self.alpha < 1.0):
            raise ValueError(f"smoothquant alpha must be in (0, 1), got {self.alpha}")


@dataclass
class CalibrationStats:
    """Running |activation| maxima observed at every quantized linear input."""

    per_tensor: dict[str, float] = field(default_factory=dict)
    per_channel: dict[str, np.ndarray] = field(default_factory=dict)

    def missing(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if n not in self.per_tensor]


# ---------------------------------------------------------------------------
# Core quantization ops (numpy reference semantics)
# ---------------------------------------------------------------------------

def quantize_symmetric(x: np.ndarray, granularity: str = "per_tensor") -> QuantizedTensor:
    """scale = max|x| / 127 per group; q = round-half-away(x / scale), clamped.

    An all-zero group gets scale 1 by convention. per_channel groups are the
    output channels, i.e. the columns of a (d_in, d_out) weight matrix.
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    if granularity == "per_tensor":
        amax = float(np.max(np.abs(x))) if x.size else 0.0
        scale: Union[float, np.ndarray] = amax / 127.0 if amax > 0.0 else 1.0
    elif granularity == "per_channel":
        if x.ndim != 2:
            raise ValueError("per_channel quantization expects a 2-d weight matrix")
        amax = np.max(np.abs(x), axis=0)
        scale = np.where(amax > 0.0, amax / 127.0, 1.0).astype(np.float64)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    q = np.clip(_round_half_away(x / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(data=q, scale=scale)


def dequantize(t: QuantizedTensor) -> np.ndarray:
    """x_hat = q * scale, broadcasting a per-channel scale over columns."""
    return (t.data.astype(np.float64) * t.scale).astype(np.float32)


def quantized_matmul(xq: QuantizedTensor, wq: QuantizedTensor) -> np.ndarray:
    """INT8 matmul with int32 accumulation: out = acc * scale_x * scale_w.

    xq must carry a per-tensor scale; wq may be per-tensor or per-output-channel
    (broadcast over output columns). With |q| <= 127 and inner dimensions up to
    ~130k the accumulator cannot overflow int32.
    """
    if xq.per_channel:
        raise ValueError("activation tensors use per-tensor scales")
    if xq.data.shape[-1] != wq.data.shape[0]:
        raise ValueError(f"inner dims {xq.data.shape} @ {wq.data.shape} do not match")
    acc = xq.data.astype(np.int32) @ wq.data.astype(np.int32)
    w_scale = np.asarray(wq.scale, dtype=np.float32)
    return acc.astype(np.float32) * (np.float32(xq.scale) * w_scale)


def int8_matmul_i32(xq: torch.Tensor, wq: torch.Tensor) -> torch.Tensor:
    """int8 @ int8 -> int32, via the fast kernel when present."""
    if _HAS_INT_MM:
        return torch._int_mm(xq.contiguous(), wq)
    return xq.to(torch.int32) @ wq.to(torch.int32)


def smoothquant_scales(act_max: np.ndarray, w_max: np.ndarray, alpha: float) -> np.ndarray:
    """Per-input-channel smoothing: s_j = act_max_j^alpha / w_max_j^(1-alpha)."""
    act_max = np.asarray(act_max, dtype=np.float64)
    w_max = np.asarray(w_max, dtype=np.float64)
    if act_max.shape != w_max.shape:
        raise ValueError(f"act_max {act_max.shape} and w_max {w_max.shape} differ in length")
    if np.any(act_max < 0) or np.any(w_max < 0):
        raise ValueError("channel maxima must be non-negative")
    return np.maximum(act_max, SMOOTH_EPS) ** alpha / np.maximum(w_max, SMOOTH_EPS) ** (1.0 - alpha)


# ---------------------------------------------------------------------------
# Linear kernels
# ---------------------------------------------------------------------------

class QuantizedLinear:
    """INT8 weights; per-tensor activation quantization, dynamic or static.

    prepare/apply_prepared split lets callers quantize a shared input once
    (the attention q/k/v projections read the same tensor).
    """

    def __init__(
        self,
        weight_q: np.ndarray,
        w_scale: Union[float, np.ndarray],
        smooth: Optional[np.ndarray] = None,
        act_scale: Optional[float] = None,
    ):
        self.weight_q = torch.from_numpy(np.ascontiguousarray(weight_q, dtype=np.int8))
        self.w_scale = torch.as_tensor(w_scale, dtype=torch.float32)
        self.smooth = None if smooth is None else torch.as_tensor(smooth, dtype=torch.float32)
        self.act_scale = act_scale

    _HALF = torch.tensor(0.5)

    def prepare(self, x: torch.Tensor) -> tuple[torch.Tensor, float]:
        """Per-tensor INT8 activation: round-half-away(x / s)."""
        if self.smooth is not None:
            x = x / self.smooth
        if x.numel() == 0:
            return x.to(torch.int8), self.act_scale or 1.0
        mn, mx = torch.aminmax(x)
        lo, hi = float(mn), float(mx)
        if self.act_scale is not None:
            s = self.act_scale
        else:
            amax = max(-lo, hi)
            s = amax / 127.0 if amax > 0.0 else 1.0
        if lo >= 0.0:  # relu outputs: rounding needs no sign handling
            q = x / s
            q.add_(0.5).floor_()
        else:  # round half away from zero: trunc(y + copysign(0.5, y))
            q = torch.copysign(self._HALF, x)
            q.add_(x / s)
            q.trunc_()
        if self.act_scale is not None or s < 1e-30:
            q.clamp_(-127.0, 127.0)  # static (or degenerate) scales can saturate
        return q.to(torch.int8), s

    def apply_prepared(self, xq: torch.Tensor, s: float) -> torch.Tensor:
        # int32 * f32 promotes in one kernel: fused cast + rescale
        return int8_matmul_i32(xq, self.weight_q) * (s * self.w_scale)

    def shares_input_with(self, other: object) -> bool:
        return (
            isinstance(other, QuantizedLinear)
            and self.smooth is None
            and other.smooth is None
            and self.act_scale == other.act_scale
        )

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.apply_prepared(*self.prepare(x))

    def tensors(self, name: str) -> dict[str, np.ndarray]:
        out = {
            name: self.weight_q.numpy(),
            f"{name}.scale": np.atleast_1d(self.w_scale.numpy()).astype(np.float32),
        }
        if self.smooth is not None:
            out[f"{name}.smooth"] = self.smooth.numpy()
        if self.act_scale is not None:
            out[f"{name}.act_scale"] = np.array([self.act_scale], dtype=np.float32)
        return out


class SmoothedLinear:
    """Smoothing applied without quantization: y = (x / s) @ (s-folded W).

    Mathematically identical to the original linear; used to verify that
    scale migration alone does not change the model.
    """

    def __init__(self, folded_weight: np.ndarray, smooth: np.ndarray):
        self.weight = torch.from_numpy(np.ascontiguousarray(folded_weight, dtype=np.float32))
        self.smooth = torch.as_tensor(smooth, dtype=torch.float32)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (x / self.smooth) @ self.weight

    def tensors(self, name: str) -> dict[str, np.ndarray]:
        return {name: self.weight.numpy(), f"{name}.smooth": self.smooth.numpy()}


# ---------------------------------------------------------------------------
# Model-level operations
# ---------------------------------------------------------------------------

def calibrate(model: Model, batches: list[TokenBatch], config: Optional[QuantConfig] = None) -> CalibrationStats:
    """Run the scoring path over calibration batches, recording |input| maxima
    (per tensor and per input channel) at every quantized linear.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("calibration requires at least one input batch")
    config = config or QuantConfig(scheme="static")
    stats = CalibrationStats()
    row_maxima: dict[str, list[np.ndarray]] = {}

    def observe(name: str, x: torch.Tensor):
        ax = x.abs()
        channel = ax.amax(dim=0).numpy().astype(np.float64)
        if name in stats.per_channel:
            stats.per_channel[name] = np.maximum(stats.per_channel[name], channel)
        else:
            stats.per_channel[name] = channel
        stats.per_tensor[name] = max(stats.per_tensor.get(name, 0.0), float(ax.max()))
        if config.clip_percentile is not None:
            row_maxima.setdefault(name, []).append(ax.amax(dim=1).numpy())

    model.observer = observe
    try:
        for batch in batches:
            hidden = model.hidden_states(batch)
            pooled = hidden[:, 0, :].contiguous()  # keep head.proj covered
            model.apply_linear("head.proj", pooled)
    finally:
        model.observer = None

    if config.clip_percentile is not None:
        for name, rows in row_maxima.items():
            stats.per_tensor[name] = float(np.percentile(np.concatenate(rows), config.clip_percentile))
    return stats


def _require_fp32(model: Model, name: str) -> np.ndarray:
    linear = model.linears[name]
    weight = getattr(linear, "weight", None)
    if weight is None or not isinstance(weight, torch.Tensor) or weight.dtype != torch.float32:
        raise ValueError(f"layer {name} is not an FP32 linear; quantize from the FP32 model")
    return weight.numpy()


def apply_smoothing(model: Model, stats: CalibrationStats, alpha: float = 0.5) -> Model:
    """Scale migration only (no INT8): behaviour-preserving up to FP32 rounding."""
    smoothed = copy.copy(model)
    smoothed.observer = None
    smoothed.linears = {}
    for name in model.config.linear_names():
        weight = _require_fp32(model, name)
        if name not in stats.per_channel:
            raise ValueError(f"calibration stats missing layer {name}")
        s = smoothquant_scales(stats.per_channel[name], np.max(np.abs(weight), axis=1), alpha)
        s32 = s.astype(np.float32)
        smoothed.linears[name] = SmoothedLinear(s32[:, None] * weight, s32)
    smoothed.scheme = "smooth_only"
    return smoothed


def apply_quantization(model: Model, config: QuantConfig, stats: Optional[CalibrationStats] = None) -> Model:
    """Replace every linear with an INT8 kernel according to config.scheme."""
    if config.scheme == "none":
        return model
    names = model.config.linear_names()
    if config.scheme in ("static", "smoothquant"):
        if stats is None:
            raise ValueError(f"{config.scheme} quantization requires calibration stats")
        missing = stats.missing(names)
        if missing:
            raise ValueError(f"calibration stats missing layer {missing[0]}")

    quantized = copy.copy(model)
    quantized.observer = None
    quantized.linears = {}
    for name in names:
        weight = _require_fp32(model, name)
        if config.scheme == "smoothquant":
            s = smoothquant_scales(
                stats.per_channel[name], np.max(np.abs(weight), axis=1), config.alpha
            ).astype(np.float32)
            wq = quantize_symmetric(s[:, None] * weight, config.weight_granularity)
            quantized.linears[name] = QuantizedLinear(wq.data, wq.scale, smooth=s)
        else:
            wq = quantize_symmetric(weight, config.weight_granularity)
            act_scale = None
            if config.scheme == "static":
                amax = stats.per_tensor[name]
                act_scale = amax / 127.0 if amax > 0.0 else 1.0
            quantized.linears[name] = QuantizedLinear(wq.data, wq.scale, act_scale=act_scale)
    quantized.scheme = config.scheme
    return quantized


def model_size_bytes(model: Model) -> int:
    """Size of the fully serialized parameter archive, scales included."""
    return len(pack_archive(model.tensors(), _archive_meta(model)))


def _archive_meta(model: Model) -> dict:
    return {"config": model.config.to_dict(), "scheme": model.scheme}


def save_model(model: Model, path: str | Path) -> None:
    save_archive(path, model.tensors(), _archive_meta(model))


def load_quantized_model(path: str | Path, config: Optional[EncoderConfig] = None) -> Model:
    """Load an archive written by save_model, FP32 or quantized."""
    tensors, meta = load_archive(path)
    if config is None:
        if "config" not in meta:
            raise ValueError(f"{path}: archive carries no config metadata")
        config = EncoderConfig(**meta["config"])
    scheme = meta.get("scheme", "none")
    if scheme in ("none", None):
        return Model(config, tensors)

    linear_names = set(config.linear_names())
    fp32_tensors = dict(tensors)
    replacements = {}
    for name in linear_names:
        if f"{name}.scale" not in tensors and f"{name}.smooth" not in tensors:
            raise ValueError(f"{path}: missing quantization metadata for layer {name}")
        shapes = config.tensor_shapes()
        fp32_tensors[name] = np.zeros(shapes[name], dtype=np.float32)  # placeholder
        if tensors[name].dtype == np.int8:
            scale = tensors[f"{name}.scale"]
            act = tensors.get(f"{name}.act_scale")
            replacements[name] = QuantizedLinear(
                tensors[name],
                scale if scale.size > 1 else float(scale[0]),
                smooth=tensors.get(f"{name}.smooth"),
                act_scale=None if act is None else float(act[0]),
            )
        else:
            replacements[name] = SmoothedLinear(tensors[name], tensors[f"{name}.smooth"])
        for suffix in (".scale", ".smooth", ".act_scale"):
            fp32_tensors.pop(f"{name}{suffix}", None)
    model = Model(config, fp32_tensors)
    model.linears.update(replacements)
    model.scheme = scheme
    return model
