"""Network definitions: double-stream generator, shape controller, critics.

The generator owns two architecturally identical encoder/decoder pairs (one
for the whole image, one for the target area) joined by a single middle block
whose weights both streams share. Skip connections forward only the first
half of each encoder level's channels. Critics are PatchGAN-style with an
auxiliary 2n-way category head (n real-modality classes plus n
fake-translated-from classes); their scores are unbounded.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


class ConfigError(ValueError):
    """Raised for inconsistent network configuration."""


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    depth: int = 3
    middle_blocks: int = 2
    n_modalities: int = 3

    def __post_init__(self):
        if self.base_channels % 2 != 0:
            raise ConfigError("base_channels must be even (half-channel skips)")
        if self.depth < 1 or self.middle_blocks < 1:
            raise ConfigError("depth and middle_blocks must be >= 1")
        if self.n_modalities < 2:
            raise ConfigError("need at least 2 modalities")

    def check_resolution(self, resolution: int) -> None:
        if resolution % (2 ** self.depth) != 0:
            raise ConfigError(
                f"resolution {resolution} not divisible by 2^depth={2 ** self.depth}"
            )


@dataclass(frozen=True)
class CriticConfig:
    base_channels: int = 64
    n_strided: int = 3
    n_modalities: int = 3


def inject_modality(x: torch.Tensor, target, n_modalities: int) -> torch.Tensor:
    """Concatenate one-hot label planes: channel `target` is all ones.

    `target` is one modality id for the whole batch or a 1-D tensor of
    per-example ids.
    """
    b, _, h, w = x.shape
    if isinstance(target, torch.Tensor):
        ids = target.long()
        if ids.dim() != 1 or ids.shape[0] != b:
            raise ConfigError("per-example target ids must be 1-D of batch length")
    else:
        ids = torch.full((b,), int(target), dtype=torch.long)
    if bool((ids < 0).any()) or bool((ids >= n_modalities).any()):
        raise ConfigError(f"modality id out of range [0, {n_modalities})")
    planes = torch.zeros(b, n_modalities, dtype=x.dtype)
    planes[torch.arange(b), ids] = 1.0
    labels = planes.view(b, n_modalities, 1, 1).expand(b, n_modalities, h, w)
    return torch.cat([x, labels.to(x.dtype)], dim=1)


def half_channel_skip(feature: torch.Tensor) -> torch.Tensor:
    """Keep the first half of the channels; the skip-connection rule."""
    c = feature.shape[1]
    if c % 2 != 0:
        raise ConfigError(f"cannot halve an odd channel count ({c})")
    return feature[:, : c // 2]


def _conv_in_relu(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class StreamEncoder(nn.Module):
    """Stem plus `depth` stride-2 stages; returns bottleneck and skip features."""

    def __init__(self, in_channels: int, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.base_channels
        # no normalization on the stem: instance norm would subtract the
        # constant shift carried by the modality label planes
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, padding=1), nn.ReLU(inplace=True)
        )
        downs = []
        for _ in range(cfg.depth):
            downs.append(
                nn.Sequential(_conv_in_relu(c, 2 * c, stride=2), _conv_in_relu(2 * c, 2 * c))
            )
            c *= 2
        self.downs = nn.ModuleList(downs)
        self.out_channels = c

    def forward(self, x):
        feat = self.stem(x)
        skips = [feat]
        for down in self.downs:
            feat = down(feat)
            skips.append(feat)
        return feat, skips[:-1]  # bottleneck feeds the middle block directly


class StreamDecoder(nn.Module):
    """Mirror of the encoder; consumes half-channel skips, tanh output."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.base_channels * (2 ** cfg.depth)
        ups = []
        fuses = []
        for _ in range(cfg.depth):
            ups.append(
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                              _conv_in_relu(c, c // 2))
            )
            # concat with half of the encoder feature at this level: c//2 + c//4
            fuses.append(_conv_in_relu(c // 2 + c // 4, c // 2))
            c //= 2
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(cfg.base_channels, 1, 3, padding=1)

    def forward(self, h, skips):
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(skips)):
            h = up(h)
            h = fuse(torch.cat([h, half_channel_skip(skip)], dim=1))
        return torch.tanh(self.head(h))


class Generator(nn.Module):
    """Two encoder/decoder streams around one weight-shared middle block.

    `forward` runs both streams; `translate` runs only the whole-image stream
    (the target-area stream needs a mask, which is unavailable at test time).
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        in_ch = 1 + cfg.n_modalities
        self.encoder_x = StreamEncoder(in_ch, cfg)
        self.encoder_r = StreamEncoder(in_ch, cfg)
        self.middle = nn.Sequential(
            *[ResidualBlock(self.encoder_x.out_channels) for _ in range(cfg.middle_blocks)]
        )
        self.decoder_x = StreamDecoder(cfg)
        self.decoder_r = StreamDecoder(cfg)

    def translate(self, whole: torch.Tensor, target: int) -> torch.Tensor:
        self.cfg.check_resolution(whole.shape[-1])
        h, skips = self.encoder_x(inject_modality(whole, target, self.cfg.n_modalities))
        return self.decoder_x(self.middle(h), skips)

    def translate_area(self, area: torch.Tensor, target: int) -> torch.Tensor:
        self.cfg.check_resolution(area.shape[-1])
        h, skips = self.encoder_r(inject_modality(area, target, self.cfg.n_modalities))
        return self.decoder_r(self.middle(h), skips)

    def forward(self, whole, area, target):
        if whole.shape != area.shape:
            raise ConfigError(
                f"whole-image shape {tuple(whole.shape)} != target-area shape {tuple(area.shape)}"
            )
        return self.translate(whole, target), self.translate_area(area, target)


class SmallUNet(nn.Module):
    """Compact depth-2 U-Net used by the shape controller and the segmenter."""

    def __init__(self, in_channels=1, base_channels=16):
        super().__init__()
        c = base_channels
        self.stem = _conv_in_relu(in_channels, c)
        self.down1 = nn.Sequential(_conv_in_relu(c, 2 * c, stride=2), _conv_in_relu(2 * c, 2 * c))
        self.down2 = nn.Sequential(_conv_in_relu(2 * c, 4 * c, stride=2), _conv_in_relu(4 * c, 4 * c))
        self.up2 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _conv_in_relu(4 * c, 2 * c))
        self.fuse2 = _conv_in_relu(4 * c, 2 * c)
        self.up1 = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _conv_in_relu(2 * c, c))
        self.fuse1 = _conv_in_relu(2 * c, c)
        self.head = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x):
        f0 = self.stem(x)
        f1 = self.down1(f0)
        f2 = self.down2(f1)
        h = self.fuse2(torch.cat([self.up2(f2), f1], dim=1))
        h = self.fuse1(torch.cat([self.up1(h), f0], dim=1))
        return self.head(h)


class ShapeController(nn.Module):
    """Predicts the soft foreground stencil of an image; sigmoid-bounded."""

    def __init__(self, base_channels=16):
        super().__init__()
        self.net = SmallUNet(in_channels=1, base_channels=base_channels)

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class Discriminator(nn.Module):
    """PatchGAN critic with a global 2n-way category head.

    The src head emits an unbounded patch score map (input dims / 2^n_strided);
    the cls head emits 2 * n_modalities logits from globally pooled features.
    No normalization layers: they interact badly with the gradient penalty.
    """

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers = [nn.Conv2d(1, c, 4, stride=2, padding=1), nn.LeakyReLU(0.01, inplace=True)]
        for _ in range(cfg.n_strided - 1):
            layers += [nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.01, inplace=True)]
            c *= 2
        self.trunk = nn.Sequential(*layers)
        self.src_head = nn.Conv2d(c, 1, 3, padding=1)
        self.cls_head = nn.Linear(c, 2 * cfg.n_modalities)

    def forward(self, img):
        feat = self.trunk(img)
        src_map = self.src_head(feat)
        cls_logits = self.cls_head(feat.mean(dim=(2, 3)))
        return src_map, cls_logits


# ---------------------------------------------------------------------------
# parameter container: one npz file, named arrays plus a JSON metadata header


def save_param_file(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays with a JSON metadata header to a single file."""
    payload = {"__meta__": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, arr in arrays.items():
        if name == "__meta__":
            raise ValueError("array name '__meta__' is reserved")
        payload[name] = np.ascontiguousarray(arr)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_param_file(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with np.load(path) as z:
        if "__meta__" not in z:
            raise ConfigError(f"{path} is not a parameter file (missing metadata header)")
        meta = json.loads(z["__meta__"].tobytes().decode("utf-8"))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def flatten_module(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    """State dict as numpy arrays under a stable dotted prefix."""
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy().copy()
        for k, v in module.state_dict().items()
    }


def restore_module(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    want = prefix + "."
    for k, v in arrays.items():
        if k.startswith(want):
            state[k[len(want):]] = torch.from_numpy(np.asarray(v))
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ConfigError(f"parameter file lacks arrays for {prefix}: {sorted(missing)[:3]}...")
    module.load_state_dict(state)


def generator_config_from_meta(meta: dict) -> GeneratorConfig:
    return GeneratorConfig(**meta["generator"])


def critic_config_from_meta(meta: dict) -> CriticConfig:
    return CriticConfig(**meta["critic"])


def meta_from_configs(gen_cfg: GeneratorConfig, critic_cfg: CriticConfig, **extra) -> dict:
    meta = {
        "generator": asdict(gen_cfg),
        "critic": asdict(critic_cfg),
        "n_modalities": gen_cfg.n_modalities,
    }
    meta.update(extra)
    return meta
