"""Light UNet: 3D encoder-decoder with depthwise-separable convs and residual blocks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume import atomic_write_bytes, atomic_write_text

LEAKY_SLOPE = 0.01


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class NetworkSpec:
    in_channels: int = 1
    num_classes: int = 4
    num_stages: int = 4
    base_channels: int = 16
    channel_multiplier: int = 2
    max_channels: int = 128
    kernel_size: int = 3
    downsample_strides: Optional[tuple] = None  # per stage; stage 0 must be (1, 1, 1)
    conv_mode: str = "separable"
    use_residual: bool = True
    deep_supervision: bool = False
    negative_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.downsample_strides is None:
            self.downsample_strides = ((1, 1, 1),) + ((2, 2, 2),) * (self.num_stages - 1)
        self.downsample_strides = tuple(tuple(int(s) for s in st) for st in self.downsample_strides)

    def validate(self) -> None:
        problems = []
        if self.in_channels < 1:
            problems.append("in_channels must be >= 1")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.num_stages < 2:
            problems.append("num_stages must be >= 2")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            problems.append("need 1 <= base_channels <= max_channels")
        if self.channel_multiplier < 1:
            problems.append("channel_multiplier must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append("kernel_size must be odd and positive")
        if self.conv_mode not in ("separable", "regular"):
            problems.append(f"conv_mode must be 'separable' or 'regular', got {self.conv_mode!r}")
        if len(self.downsample_strides) != self.num_stages:
            problems.append(f"downsample_strides needs {self.num_stages} entries")
        elif self.downsample_strides[0] != (1, 1, 1):
            problems.append("stage 0 stride must be (1, 1, 1)")
        elif any(len(s) != 3 or min(s) < 1 for s in self.downsample_strides):
            problems.append("strides must be three positive ints per stage")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def stage_channels(self) -> list[int]:
        return [
            min(self.base_channels * self.channel_multiplier**s, self.max_channels)
            for s in range(self.num_stages)
        ]

    def total_stride(self) -> tuple[int, int, int]:
        return tuple(int(np.prod([s[a] for s in self.downsample_strides])) for a in range(3))

    def check_patch_size(self, patch_size) -> None:
        total = self.total_stride()
        bad = [(p, t) for p, t in zip(patch_size, total) if p % t]
        if bad:
            raise ShapeError(
                f"patch size {tuple(patch_size)} not divisible by total stride {total} per axis"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["downsample_strides"] = [list(s) for s in self.downsample_strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ----------------------------------------------------------------- modules


class SeparableConv3d(nn.Module):
    """Depthwise k^3 conv (carries the stride) followed by a 1x1x1 pointwise conv."""

    def __init__(self, c_in, c_out, kernel_size=3, stride=1):
        super().__init__()
        self.depthwise = nn.Conv3d(
            c_in, c_in, kernel_size, stride=stride, padding=kernel_size // 2, groups=c_in
        )
        self.pointwise = nn.Conv3d(c_in, c_out, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def make_conv(c_in, c_out, kernel_size, stride, mode):
    if mode == "separable" and c_in > 1:
        return SeparableConv3d(c_in, c_out, kernel_size, stride)
    return nn.Conv3d(c_in, c_out, kernel_size, stride=stride, padding=kernel_size // 2)


class ConvUnit(nn.Module):
    def __init__(self, c_in, c_out, kernel_size, stride, mode, slope):
        super().__init__()
        self.conv = make_conv(c_in, c_out, kernel_size, stride, mode)
        self.norm = nn.InstanceNorm3d(c_out, affine=True)
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class ResidualBlock(nn.Module):
    """Two conv units; the block input is added to the output, projected when needed."""

    def __init__(self, c_in, c_out, kernel_size, stride, mode, slope, use_residual, first_mode=None):
        super().__init__()
        self.unit1 = ConvUnit(c_in, c_out, kernel_size, stride, first_mode or mode, slope)
        self.unit2 = ConvUnit(c_out, c_out, kernel_size, 1, mode, slope)
        self.use_residual = use_residual
        self.proj = None
        if use_residual and (c_in != c_out or tuple(stride) != (1, 1, 1)):
            self.proj = nn.Conv3d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        y = self.unit2(self.unit1(x))
        if self.use_residual:
            y = y + (x if self.proj is None else self.proj(x))
        return y


class LightUNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        ch = spec.stage_channels()
        k, mode, slope = spec.kernel_size, spec.conv_mode, spec.negative_slope
        self.encoder = nn.ModuleList()
        for s in range(spec.num_stages):
            c_in = spec.in_channels if s == 0 else ch[s - 1]
            # stem is always a regular conv; a depthwise conv over one channel is degenerate
            first_mode = "regular" if s == 0 else None
            self.encoder.append(
                ResidualBlock(
                    c_in, ch[s], k, spec.downsample_strides[s], mode, slope,
                    spec.use_residual, first_mode,
                )
            )
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in range(spec.num_stages - 1):
            stride = spec.downsample_strides[s + 1]
            self.upsample.append(nn.ConvTranspose3d(ch[s + 1], ch[s], stride, stride=stride))
            self.decoder.append(
                ResidualBlock(2 * ch[s], ch[s], k, (1, 1, 1), mode, slope, spec.use_residual)
            )
        self.head = nn.Conv3d(ch[0], spec.num_classes, 1)
        self.aux_heads = nn.ModuleList()
        if spec.deep_supervision:
            for s in range(1, spec.num_stages - 1):
                self.aux_heads.append(nn.Conv3d(ch[s], spec.num_classes, 1))

    def forward(self, x, return_aux: bool = False):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        aux = []
        for s in reversed(range(len(self.decoder))):
            x = self.decoder[s](torch.cat([self.upsample[s](x), skips[s]], dim=1))
            if return_aux and s >= 1 and self.aux_heads:
                aux.append(self.aux_heads[s - 1](x))
        logits = self.head(x)
        if return_aux:
            return logits, aux[::-1]
        return logits


# ------------------------------------------------------------ parameter count


def conv_parameter_count(c_in: int, c_out: int, kernel_size: int = 3, mode: str = "separable") -> int:
    """Closed-form parameter count of one conv layer, biases included."""
    k3 = kernel_size**3
    if mode == "separable":
        return k3 * c_in + c_in + c_in * c_out + c_out
    if mode == "regular":
        return k3 * c_in * c_out + c_out
    raise ValueError(f"unknown conv mode {mode!r}")


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str  # conv | norm | proj | upsample | head
    c_in: int
    c_out: int
    mode: str
    params: int


def layer_table(spec: NetworkSpec) -> list[LayerCount]:
    """Every parameterised layer of ``LightUNet(spec)`` with its closed-form count."""
    spec.validate()
    ch = spec.stage_channels()
    k = spec.kernel_size
    rows: list[LayerCount] = []

    def conv(name, c_in, c_out, mode):
        mode = "regular" if c_in == 1 else mode
        rows.append(LayerCount(name, "conv", c_in, c_out, mode, conv_parameter_count(c_in, c_out, k, mode)))
        rows.append(LayerCount(name + ".norm", "norm", c_out, c_out, "-", 2 * c_out))

    def block(name, c_in, c_out, stride, first_mode):
        conv(f"{name}.unit1", c_in, c_out, first_mode)
        conv(f"{name}.unit2", c_out, c_out, spec.conv_mode)
        if spec.use_residual and (c_in != c_out or tuple(stride) != (1, 1, 1)):
            rows.append(LayerCount(f"{name}.proj", "proj", c_in, c_out, "regular", c_in * c_out + c_out))

    for s in range(spec.num_stages):
        c_in = spec.in_channels if s == 0 else ch[s - 1]
        block(f"encoder.{s}", c_in, ch[s], spec.downsample_strides[s], "regular" if s == 0 else spec.conv_mode)
    for s in range(spec.num_stages - 1):
        vol = int(np.prod(spec.downsample_strides[s + 1]))
        rows.append(
            LayerCount(f"upsample.{s}", "upsample", ch[s + 1], ch[s], "transposed", ch[s + 1] * ch[s] * vol + ch[s])
        )
        block(f"decoder.{s}", 2 * ch[s], ch[s], (1, 1, 1), spec.conv_mode)
    rows.append(LayerCount("head", "head", ch[0], spec.num_classes, "regular", ch[0] * spec.num_classes + spec.num_classes))
    if spec.deep_supervision:
        for s in range(1, spec.num_stages - 1):
            rows.append(
                LayerCount(f"aux_heads.{s - 1}", "head", ch[s], spec.num_classes, "regular",
                           ch[s] * spec.num_classes + spec.num_classes)
            )
    return rows


def count_parameters(spec: NetworkSpec) -> int:
    return sum(r.params for r in layer_table(spec))


def estimate_flops(spec: NetworkSpec, patch_size) -> int:
    """Rough multiply-accumulate count for one forward pass (conv layers only)."""
    spec.check_patch_size(patch_size)
    ch = spec.stage_channels()
    k3 = spec.kernel_size**3
    size = np.asarray(patch_size)
    total = 0
    for s in range(spec.num_stages):
        size = size // np.asarray(spec.downsample_strides[s])
        vox = int(np.prod(size))
        c_in = spec.in_channels if s == 0 else ch[s - 1]
        for ci in (c_in, ch[s]):
            sep = spec.conv_mode == "separable" and ci > 1
            total += vox * (k3 * ci + ci * ch[s] if sep else k3 * ci * ch[s])
        if s < spec.num_stages - 1:
            for ci in (2 * ch[s], ch[s]):
                sep = spec.conv_mode == "separable"
                total += vox * (k3 * ci + ci * ch[s] if sep else k3 * ci * ch[s])
    return int(total)


# ----------------------------------------------------------------- state


@dataclass
class NetworkState:
    """A built network: its spec, the torch module holding θ and the init seed."""

    spec: NetworkSpec
    model: LightUNet
    init_seed: int

    def named_parameters(self) -> Iterator[tuple[str, torch.Tensor]]:
        return self.model.named_parameters()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.model.parameters())

    def parameter_snapshot(self) -> dict:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}


def he_init_(model: nn.Module, generator: torch.Generator, slope: float = LEAKY_SLOPE) -> None:
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(module.weight, a=slope, generator=generator)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.InstanceNorm3d) and module.affine:
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


def build_network(spec: NetworkSpec, init_seed: int) -> NetworkState:
    spec.validate()
    model = LightUNet(spec)
    gen = torch.Generator().manual_seed(int(init_seed))
    he_init_(model, gen, spec.negative_slope)
    # channels-last makes the depthwise conv backward several times faster on CPU
    model = model.to(memory_format=torch.channels_last_3d)
    state = NetworkState(spec, model, int(init_seed))
    expected = count_parameters(spec)
    if state.num_parameters() != expected:  # pragma: no cover - guards layer_table drift
        raise AssertionError(f"built {state.num_parameters()} params, closed form says {expected}")
    return state


def _check_batch(spec: NetworkSpec, batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim == 4:
        batch = batch.unsqueeze(1)
    if batch.ndim != 5 or batch.shape[1] != spec.in_channels:
        raise ShapeError(f"expected (N, {spec.in_channels}, D, W, H), got {tuple(batch.shape)}")
    spec.check_patch_size(batch.shape[2:])
    return batch.contiguous(memory_format=torch.channels_last_3d)


def forward_logits(state: NetworkState, batch: torch.Tensor, return_aux: bool = False):
    batch = _check_batch(state.spec, batch)
    return state.model(batch, return_aux=return_aux)


def forward(state: NetworkState, batch) -> torch.Tensor:
    """Softmax probabilities ``(N, C, D, W, H)`` in evaluation mode, without gradients."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    batch = batch.to(next(state.model.parameters()).dtype)
    was_training = state.model.training
    state.model.eval()
    try:
        with torch.no_grad():
            return torch.softmax(forward_logits(state, batch), dim=1)
    finally:
        state.model.train(was_training)


# ------------------------------------------------------------- checkpoints


def save_checkpoint(state: NetworkState, directory) -> Path:
    """Write ``spec.json`` and the named-parameter archive ``params.pt``."""
    import io

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"spec": state.spec.to_dict(), "init_seed": state.init_seed,
            "num_parameters": count_parameters(state.spec)}
    atomic_write_text(directory / "spec.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    buf = io.BytesIO()
    torch.save(state.model.state_dict(), buf)
    atomic_write_bytes(directory / "params.pt", buf.getvalue())
    return directory


def load_checkpoint(directory) -> NetworkState:
    directory = Path(directory)
    meta = json.loads((directory / "spec.json").read_text(encoding="utf-8"))
    spec = NetworkSpec.from_dict(meta["spec"])
    expected = count_parameters(spec)
    params = torch.load(directory / "params.pt", map_location="cpu", weights_only=True)
    stored = sum(v.numel() for k, v in params.items())
    if stored != expected or meta.get("num_parameters", expected) != expected:
        raise ConfigurationError(
            f"{directory}: checkpoint holds {stored} parameters, spec implies {expected}"
        )
    state = build_network(spec, meta.get("init_seed", 0))
    state.model.load_state_dict(params)
    return state
