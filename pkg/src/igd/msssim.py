"""Multi-scale structural similarity (MS-SSIM) maps and the MAE + MS-SSIM loss.

All functions take torch tensors shaped ``(C, H, W)`` or ``(N, C, H, W)`` and
are differentiable w.r.t. both inputs. Window statistics use box windows with
reflect padding so every pixel gets a similarity value; coarser scales are
obtained by 2x2 average pooling and brought back to full resolution with
nearest-neighbour upsampling.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

EPS = 1e-12

GLOBAL_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LOCAL_WEIGHTS = (0.0516, 0.3295, 0.3463, 0.2726)


@dataclass(frozen=True)
class MsssimConfig:
    """Settings for one MS-SSIM variant.

    ``weights[m]`` is the shared contrast/structure exponent of scale ``m``;
    the luminance exponent of the coarsest scale equals ``weights[-1]``.
    """

    scales: int = 5
    window: int = 11
    weights: tuple = field(default=GLOBAL_WEIGHTS)
    k1: float = 0.01
    k2: float = 0.03
    pixel_range: float = 4.7579
    rho: float = 0.15

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if len(self.weights) != self.scales:
            raise ValueError(
                f"expected {self.scales} per-scale weights, got {len(self.weights)}"
            )
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @classmethod
    def global_default(cls, **overrides) -> "MsssimConfig":
        return cls(**{"scales": 5, "window": 11, "weights": GLOBAL_WEIGHTS, **overrides})

    @classmethod
    def local_default(cls, **overrides) -> "MsssimConfig":
        return cls(**{"scales": 4, "window": 3, "weights": LOCAL_WEIGHTS, **overrides})

    @property
    def c1(self) -> float:
        return (self.k1 * self.pixel_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.pixel_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def effective_window(window: int, height: int, width: int) -> int:
    """Largest odd window <= ``window`` that fits inside an ``height x width`` image."""
    side = min(height, width)
    fit = side if side % 2 == 1 else side - 1
    return max(1, min(window, fit))


def _as_batch(x) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    return x


def _check_pair(x, y, cfg: MsssimConfig):
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[-2:]
    need = 2 ** (cfg.scales - 1)
    if min(h, w) < need:
        raise ValueError(
            f"image of size {h}x{w} is too small for {cfg.scales} scales (needs >= {need})"
        )
    return x, y


def _box_mean(t: torch.Tensor, win: int) -> torch.Tensor:
    if win == 1:
        return t
    r = win // 2
    t = F.pad(t, (r, r, r, r), mode="reflect")
    return F.avg_pool2d(t, win, stride=1)


def _scale_terms(x: torch.Tensor, y: torch.Tensor, win: int, cfg: MsssimConfig):
    mu_x, mu_y = _box_mean(x, win), _box_mean(y, win)
    var_x = (_box_mean(x * x, win) - mu_x**2).clamp_min(0.0)
    var_y = (_box_mean(y * y, win) - mu_y**2).clamp_min(0.0)
    cov = _box_mean(x * y, win) - mu_x * mu_y
    sd_x, sd_y = torch.sqrt(var_x + EPS), torch.sqrt(var_y + EPS)

    lum = (2 * mu_x * mu_y + cfg.c1) / (mu_x**2 + mu_y**2 + cfg.c1)
    con = (2 * sd_x * sd_y + cfg.c2) / (var_x + var_y + cfg.c2)
    struct = (cov + cfg.c3) / (sd_x * sd_y + cfg.c3)
    return lum, con, struct


def msssim_map(x, y, cfg: MsssimConfig | None = None) -> torch.Tensor:
    """Per-pixel multi-scale similarity, shape ``(N, H, W)``, values in [0, 1].

    Channels are treated independently and averaged at the end.
    """
    cfg = cfg or MsssimConfig.global_default()
    x, y = _check_pair(x, y, cfg)
    n, c, h, w = x.shape
    xs = x.reshape(n * c, 1, h, w)
    ys = y.reshape(n * c, 1, h, w)

    sim = torch.ones_like(xs)
    for m, weight in enumerate(cfg.weights):
        if m > 0:
            xs, ys = F.avg_pool2d(xs, 2), F.avg_pool2d(ys, 2)
        win = effective_window(cfg.window, *xs.shape[-2:])
        lum, con, struct = _scale_terms(xs, ys, win, cfg)
        # anticorrelated windows give cs < 0; clip before the fractional power
        term = (con * struct).clamp_min(0.0).add(EPS).pow(weight)
        if m == cfg.scales - 1:
            term = term * lum.clamp_min(0.0).add(EPS).pow(weight)
        if term.shape[-2:] != (h, w):
            term = F.interpolate(term, size=(h, w), mode="nearest")
        sim = sim * term

    sim = sim.clamp(0.0, 1.0)
    return sim.reshape(n, c, h, w).mean(dim=1)


def msssim_score(x, y, cfg: MsssimConfig | None = None) -> torch.Tensor:
    """Image-level MS-SSIM: the spatial mean of :func:`msssim_map`.

    Returns a 0-d tensor for a single ``(C, H, W)`` image, else shape ``(N,)``.
    """
    single = len(x.shape) == 3
    out = msssim_map(x, y, cfg).mean(dim=(-2, -1))
    return out[0] if single else out


def recon_loss_map(x, x_hat, cfg: MsssimConfig | None = None) -> torch.Tensor:
    """Per-pixel ``rho * |x - x_hat| + (1 - rho) * (1 - m(x, x_hat))``, shape ``(N, H, W)``."""
    cfg = cfg or MsssimConfig.global_default()
    x, x_hat = _check_pair(x, x_hat, cfg)
    mae = (x - x_hat).abs().mean(dim=1)
    return cfg.rho * mae + (1.0 - cfg.rho) * (1.0 - msssim_map(x, x_hat, cfg))


def recon_loss(x, x_hat, cfg: MsssimConfig | None = None, reduction: str = "mean") -> torch.Tensor:
    """MAE + MS-SSIM reconstruction loss averaged over the image lattice.

    ``reduction="none"`` returns one value per image.
    """
    per_image = recon_loss_map(x, x_hat, cfg).mean(dim=(-2, -1))
    if reduction == "none":
        return per_image
    if reduction == "mean":
        return per_image.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
