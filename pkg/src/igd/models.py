"""Encoder, decoder and critic networks plus the binary weight archive.

Two backbones are available: ``desk_cnn`` (four stride-2 conv blocks, small
enough to train on a CPU in minutes) and ``resnet18_like`` (a ResNet18 trunk
with a linear projection head and a transposed-conv decoder).
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("desk_cnn", "resnet18_like")

ARCHIVE_MAGIC = b"IGDW"
ARCHIVE_VERSION = 1


@dataclass
class BackboneConfig:
    variant: str = "desk_cnn"
    latent_dim: int = 128
    input_resolution: tuple = (32, 32)
    channels: int = 1
    width: int = 16
    critic_depth: int = 3
    bias: bool = True
    pretrained_weights: str | None = None
    freeze_encoder: bool = False

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone variant {self.variant!r}; expected one of {VARIANTS}")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if len(self.input_resolution) != 2 or min(self.input_resolution) < 8:
            raise ValueError(f"input_resolution must be (H, W) with H, W >= 8, got {self.input_resolution}")
        # four stride-2 4x4 convs need at least 16 pixels per side
        if self.variant == "desk_cnn" and min(self.input_resolution) < 16:
            raise ValueError(f"desk_cnn needs input_resolution >= 16 per side, got {self.input_resolution}")
        if self.critic_depth < 1:
            raise ValueError("critic_depth must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        return d


def _act():
    return nn.LeakyReLU(0.2)


class DeskEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w, b = cfg.width, cfg.bias
        chans = [cfg.channels, w, 2 * w, 4 * w, 4 * w]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=b), _act()]
        self.trunk = nn.Sequential(*layers)
        h, wd = cfg.input_resolution
        for _ in range(4):
            h, wd = max(h // 2, 1), max(wd // 2, 1)
        self.head = nn.Linear(chans[-1] * h * wd, cfg.latent_dim, bias=b)

    def forward(self, x):
        return self.head(self.trunk(x).flatten(1))


class DeskDecoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.width
        self.out_size = cfg.input_resolution
        self.base = tuple(math.ceil(s / 16) for s in cfg.input_resolution)
        self.base_ch = 4 * w
        self.fc = nn.Linear(cfg.latent_dim, self.base_ch * self.base[0] * self.base[1])
        chans = [4 * w, 4 * w, 2 * w, w]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), _act()]
        layers.append(nn.ConvTranspose2d(w, cfg.channels, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        h = F.leaky_relu(self.fc(z), 0.2).view(-1, self.base_ch, *self.base)
        out = self.net(h)
        if tuple(out.shape[-2:]) != self.out_size:
            out = F.interpolate(out, size=self.out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(out)


class ResNetEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if cfg.channels != 3:
            net.conv1 = nn.Conv2d(cfg.channels, 64, 7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.trunk = net
        self.head = nn.Linear(512, cfg.latent_dim, bias=cfg.bias)

    def forward(self, x):
        return self.head(self.trunk(x))


class ResNetDecoder(nn.Module):
    """Mirror of the ResNet18 trunk: five x2 transposed-conv stages."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.out_size = cfg.input_resolution
        self.base = tuple(math.ceil(s / 32) for s in cfg.input_resolution)
        self.fc = nn.Linear(cfg.latent_dim, 512 * self.base[0] * self.base[1])
        chans = [512, 256, 128, 64, 64]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
        layers.append(nn.ConvTranspose2d(64, cfg.channels, 4, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        h = F.relu(self.fc(z)).view(-1, 512, *self.base)
        out = self.net(h)
        if tuple(out.shape[-2:]) != self.out_size:
            out = F.interpolate(out, size=self.out_size, mode="bilinear", align_corners=False)
        return torch.sigmoid(out)


class Critic(nn.Module):
    """Regresses the interpolation coefficient of a decoded image into [0, 1]."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.width
        layers, cin = [], cfg.channels
        for i in range(cfg.critic_depth):
            cout = w * 2 ** min(i, 2)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), _act()]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.out = nn.Linear(cin, 1)

    def forward(self, x):
        h = self.features(x).mean(dim=(-2, -1))
        return torch.sigmoid(self.out(h)).squeeze(-1)


def build_encoder(cfg: BackboneConfig) -> nn.Module:
    enc = DeskEncoder(cfg) if cfg.variant == "desk_cnn" else ResNetEncoder(cfg)
    if cfg.pretrained_weights:
        load_pretrained_encoder(enc, cfg.pretrained_weights)
    if cfg.freeze_encoder:
        for p in enc.parameters():
            p.requires_grad_(False)
    return enc


def build_decoder(cfg: BackboneConfig) -> nn.Module:
    return DeskDecoder(cfg) if cfg.variant == "desk_cnn" else ResNetDecoder(cfg)


def build_critic(cfg: BackboneConfig) -> nn.Module:
    return Critic(cfg)


class IGDNetwork(nn.Module):
    """Encoder, decoder and critic of one (global or local) model."""

    def __init__(self, cfg: BackboneConfig, with_decoder: bool = True, with_critic: bool = True):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.decoder = build_decoder(cfg) if with_decoder else None
        self.critic = build_critic(cfg) if with_critic else None

    def forward(self, x):
        z = self.encoder(x)
        x_hat = self.decoder(z) if self.decoder is not None else None
        return z, x_hat

    def generator_parameters(self):
        params = [p for p in self.encoder.parameters() if p.requires_grad]
        if self.decoder is not None:
            params += list(self.decoder.parameters())
        return params


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def parameter_counts(cfg: BackboneConfig) -> dict:
    net = IGDNetwork(cfg)
    return {
        "encoder": count_parameters(net.encoder),
        "decoder": count_parameters(net.decoder),
        "critic": count_parameters(net.critic),
    }


# -- weight archive -----------------------------------------------------------
#
# layout: magic "IGDW" | u32 format version | u64 header length | UTF-8 JSON header
#         | float32 little-endian tensors, concatenated in header order


def save_weight_archive(path, tensors, variant: str, latent_dim: int, meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", "")})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format_version": ARCHIVE_VERSION,
        "variant": variant,
        "latent_dim": int(latent_dim),
        "tensors": entries,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<IQ", ARCHIVE_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_weight_archive(path):
    """Return ``(header, OrderedDict[name -> tensor])`` read from ``path``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a weight archive (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = OrderedDict()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        t = torch.from_numpy(arr.copy())
        dtype = getattr(torch, entry.get("dtype", "float32"))
        tensors[entry["name"]] = t.to(dtype)
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after tensor data")
    return header, tensors


def load_state_into(module: nn.Module, tensors, prefix: str = "", strict: bool = True) -> list:
    """Copy archive tensors named ``prefix + key`` into ``module``; returns missing keys."""
    state = module.state_dict()
    missing = []
    for key, current in state.items():
        name = prefix + key
        if name not in tensors:
            missing.append(key)
            continue
        src = tensors[name]
        if tuple(src.shape) != tuple(current.shape):
            raise ValueError(
                f"incompatible weight shape for {name}: archive {tuple(src.shape)} vs model {tuple(current.shape)}"
            )
        state[key] = src.to(current.dtype)
    if strict and missing:
        raise ValueError(f"archive is missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    module.load_state_dict(state)
    return missing


def load_pretrained_encoder(encoder: nn.Module, path) -> None:
    """Load externally pretrained encoder weights.

    Accepts archives keyed either by the encoder's own names or prefixed with
    ``encoder.``. A trunk-only archive (e.g. distilled 512-d features) leaves
    the projection head at its fresh initialisation.
    """
    _, tensors = load_weight_archive(path)
    prefix = "encoder." if any(k.startswith("encoder.") for k in tensors) else ""
    missing = load_state_into(encoder, tensors, prefix=prefix, strict=False)
    bad = [k for k in missing if not k.startswith("head.")]
    if bad:
        raise ValueError(f"pretrained archive {path} lacks encoder tensors: {bad[:5]}")
