"""Pre-activation (v2) bottleneck ResNets with GroupNorm and Weight Standardization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from ..engine import Tensor, conv2d, global_avg_pool, matmul, max_pool2d, ops
from ..errors import ConfigError, DimensionError
from .norm import group_norm, resolve_groups, weight_standardize

Params = dict[str, Tensor]

# bottleneck units per stage
DEPTH_PRESETS: dict[str, tuple[int, int, int, int]] = {
    "toy-8": (1, 1, 1, 1),
    "26": (2, 2, 2, 2),
    "50": (3, 4, 6, 3),
    "101": (3, 4, 23, 3),
    "152": (3, 8, 36, 3),
}

STAGE_STRIDES = (1, 2, 2, 2)


@dataclass(frozen=True)
class ModelConfig:
    depth_preset: str = "toy-8"
    widen_factor: int = 1
    num_groups: int = 32
    gn_eps: float = 1e-5
    ws_eps: float = 1e-10
    num_classes: int = 10
    input_channels: int = 3
    # 64 reproduces the standard ResNet widths; smaller values give desk-sized toys
    base_width: int = 64
    weight_std: bool = True

    def __post_init__(self):
        if str(self.depth_preset) not in DEPTH_PRESETS:
            raise ConfigError(f"unknown depth preset {self.depth_preset!r}; choose from {sorted(DEPTH_PRESETS)}")
        object.__setattr__(self, "depth_preset", str(self.depth_preset))
        for field in ("widen_factor", "num_groups", "num_classes", "input_channels", "base_width"):
            if int(getattr(self, field)) < 1:
                raise ConfigError(f"{field} must be a positive integer")
        if self.gn_eps < 0 or self.ws_eps < 0:
            raise ConfigError("eps values must be non-negative")
        for c in self.channel_counts():
            resolve_groups(c, self.num_groups)

    @property
    def units(self) -> tuple[int, int, int, int]:
        return DEPTH_PRESETS[self.depth_preset]

    @property
    def stem_width(self) -> int:
        return self.base_width * self.widen_factor

    def stage_widths(self) -> list[tuple[int, int]]:
        """(bottleneck mid width, output width) per stage."""
        return [
            (self.base_width * 2**s * self.widen_factor, 4 * self.base_width * 2**s * self.widen_factor)
            for s in range(4)
        ]

    @property
    def feature_dim(self) -> int:
        return self.stage_widths()[-1][1]

    def channel_counts(self) -> list[int]:
        counts = [self.stem_width]
        for mid, out in self.stage_widths():
            counts += [mid, out]
        return counts

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class ResNetV2:
    """ResNet-v2 with bottleneck units, built from a ``ModelConfig``.

    Parameters live outside the object in an ordered ``name -> Tensor`` dict so
    forward passes are pure functions of ``(params, x)``.  Subclasses may
    override ``norm`` and ``conv`` to rewire the normalization (the BN
    comparison harness does this).
    """

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- layout --------------------------------------------------------------

    def block_specs(self) -> list[tuple[str, int, int, int, int]]:
        """(prefix, in_ch, mid_ch, out_ch, stride) for every bottleneck unit."""
        specs = []
        in_ch = self.config.stem_width
        for s, ((mid, out), n_units) in enumerate(zip(self.config.stage_widths(), self.config.units)):
            for u in range(n_units):
                stride = STAGE_STRIDES[s] if u == 0 else 1
                specs.append((f"stage{s + 1}/unit{u + 1}", in_ch, mid, out, stride))
                in_ch = out
        return specs

    def init_params(self, seed: int = 0) -> Params:
        cfg = self.config
        rng = np.random.default_rng(seed)
        params: Params = {}

        def conv(name, o, i, k):
            params[name] = Tensor(_he_normal(rng, (o, i, k, k)), requires_grad=True)

        def norm(name, c):
            params[f"{name}/gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
            params[f"{name}/beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)

        conv("stem/conv/w", cfg.stem_width, cfg.input_channels, 7)
        for prefix, cin, mid, out, stride in self.block_specs():
            norm(f"{prefix}/gn1", cin)
            if stride != 1 or cin != out:
                conv(f"{prefix}/proj/w", out, cin, 1)
            conv(f"{prefix}/conv1/w", mid, cin, 1)
            norm(f"{prefix}/gn2", mid)
            conv(f"{prefix}/conv2/w", mid, mid, 3)
            norm(f"{prefix}/gn3", mid)
            conv(f"{prefix}/conv3/w", out, mid, 1)
        norm("head/gn", cfg.feature_dim)
        params.update(init_head(cfg.feature_dim, cfg.num_classes))
        return params

    # -- hooks ---------------------------------------------------------------

    def conv(self, x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        if self.config.weight_std:
            w = weight_standardize(w, self.config.ws_eps)
        return conv2d(x, w, stride=stride, padding=padding)

    def norm(self, x: Tensor, params: Mapping[str, Tensor], name: str, train: bool) -> Tensor:
        groups = resolve_groups(x.shape[1], self.config.num_groups)
        return group_norm(x, params[f"{name}/gamma"], params[f"{name}/beta"], groups, self.config.gn_eps)

    # -- forward -------------------------------------------------------------

    def block(self, x: Tensor, params: Mapping[str, Tensor], prefix: str, stride: int, train: bool = False) -> Tensor:
        """One pre-activation bottleneck: GN-ReLU precedes every convolution."""
        out = ops.relu(self.norm(x, params, f"{prefix}/gn1", train))
        proj = params.get(f"{prefix}/proj/w")
        if proj is not None:
            shortcut = self.conv(out, proj, stride=stride)
        else:
            if stride != 1:
                raise DimensionError(f"{prefix}: stride {stride} needs a projection shortcut")
            shortcut = x
        h = self.conv(out, params[f"{prefix}/conv1/w"])
        h = self.conv(ops.relu(self.norm(h, params, f"{prefix}/gn2", train)), params[f"{prefix}/conv2/w"], stride, 1)
        h = self.conv(ops.relu(self.norm(h, params, f"{prefix}/gn3", train)), params[f"{prefix}/conv3/w"])
        if h.shape != shortcut.shape:
            raise DimensionError(f"{prefix}: residual {h.shape} does not match shortcut {shortcut.shape}")
        return ops.add(h, shortcut)

    def features(self, params: Mapping[str, Tensor], x: Tensor, train: bool = False) -> Tensor:
        """Pooled penultimate activations, shape (N, feature_dim)."""
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise DimensionError(f"expected N x {self.config.input_channels} x H x W input, got {x.shape}")
        h = self.conv(x, params["stem/conv/w"], stride=2, padding=3)
        h = max_pool2d(h, 3, 2, padding=1)
        for prefix, _, _, _, stride in self.block_specs():
            h = self.block(h, params, prefix, stride, train)
        h = ops.relu(self.norm(h, params, "head/gn", train))
        return global_avg_pool(h)

    def forward(
        self,
        params: Mapping[str, Tensor],
        x: Tensor,
        train: bool = False,
        dropout_rate: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        feats = self.features(params, x, train)
        if train and dropout_rate > 0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            feats = ops.dropout(feats, dropout_rate, rng)
        return ops.add(matmul(feats, params["head/fc/w"]), params["head/fc/b"])

    __call__ = forward


def init_head(feature_dim: int, num_classes: int) -> Params:
    """Zero-initialized linear classifier: uniform softmax before any update."""
    return {
        "head/fc/w": Tensor(np.zeros((feature_dim, num_classes), np.float32), requires_grad=True),
        "head/fc/b": Tensor(np.zeros(num_classes, np.float32), requires_grad=True),
    }


def resnet_block(x: Tensor, params: Mapping[str, Tensor], stride: int, config: ModelConfig, prefix: str = "block") -> Tensor:
    """Apply a single bottleneck unit whose weights sit under ``prefix`` in ``params``."""
    return ResNetV2(config).block(x, params, prefix, stride)


def build_resnet(config: ModelConfig, seed: int = 0) -> tuple[Callable[..., Tensor], Params]:
    """Return ``(forward, params)``; ``forward(params, x, ...)`` yields logits."""
    model = ResNetV2(config)
    return model.forward, model.init_params(seed)


def count_params(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def is_head_param(name: str) -> bool:
    return name.startswith("head/fc/")


def is_conv_weight(name: str) -> bool:
    return name.endswith("/w") and not is_head_param(name)


def cast_params(params: Mapping[str, Tensor], dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in params.items()}
