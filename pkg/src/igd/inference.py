"""Anomaly scores and localisation heatmaps from trained global/local models.

Only the encoder and decoder of a model are used here; the critic is a
training-time regulariser.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import patch_grid
from .gac import gac_loss
from .msssim import recon_loss_map
from .trainer import ModelBundle

HEATMAP_MAGIC = b"IGDH"
HEATMAP_VERSION = 1


@dataclass
class ScoreBreakdown:
    s_global: float
    s_local: float
    s_total: float
    recon_term_g: float
    gac_term_g: float
    recon_term_l: float
    gac_term_l: float
    argmax_patch_center: tuple | None = None


def _batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float32)
    return x.unsqueeze(0) if x.dim() == 3 else x


def _check_ready(bundle: ModelBundle | None, what: str):
    if bundle is None:
        raise ValueError(f"{what} model is missing")
    if bundle.kind == "igd" and bundle.config.gac_weight > 0 and bundle.descriptor is None:
        raise ValueError(f"{what} model has no descriptor (not trained?)")


@torch.no_grad()
def score_terms(bundle: ModelBundle, x, batch_size: int = 256):
    """Per-image ``(recon_term, gac_term)`` tensors under ``bundle``.

    For DSVDD baselines the second term is the squared distance to the centre
    and the reconstruction term is zero.
    """
    x = _batch(x)
    net = bundle.network
    net.eval()
    recs, gacs = [], []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        z = net.encoder(xb)
        if bundle.kind in ("dsvdd", "dsvdd_rec"):
            recs.append(torch.zeros(len(xb)))
            gacs.append(((z - bundle.center) ** 2).sum(dim=-1))
            continue
        if net.decoder is not None:
            x_hat = net.decoder(z)
            if bundle.config.recon == "mse":
                recs.append(((xb - x_hat) ** 2).mean(dim=(1, 2, 3)))
            else:
                recs.append(recon_loss_map(xb, x_hat, bundle.msssim).mean(dim=(-2, -1)))
        else:
            recs.append(torch.zeros(len(xb)))
        if bundle.config.gac_weight > 0:
            gacs.append(gac_loss(z, bundle.descriptor, reduction="none"))
        else:
            gacs.append(torch.zeros(len(xb)))
    return torch.cat(recs), torch.cat(gacs)


def global_score(x, bundle: ModelBundle):
    """Whole-image score ``l_r + l_h``; returns ``(score, (recon_term, gac_term))``."""
    _check_ready(bundle, "global")
    rec, gac = score_terms(bundle, x)
    if torch.as_tensor(x).dim() == 3:
        r, h = rec[0].item(), gac[0].item()
        return r + h, (r, h)
    return rec + gac, (rec, gac)


def image_patches(x: torch.Tensor, size, stride):
    """Patches of one ``(C, H, W)`` image on the grid of :func:`igd.datasets.extract_patches`."""
    c, h, w = x.shape
    pad_h, pad_w, starts_h, starts_w, cen_h, cen_w = patch_grid((h, w), size, stride)
    if any(pad_h) or any(pad_w):
        x = F.pad(x.unsqueeze(0), (pad_w[0], pad_w[1], pad_h[0], pad_h[1]), mode="reflect")[0]
    ph, pw = size
    patches = torch.stack([x[:, r:r + ph, q:q + pw] for r in starts_h for q in starts_w])
    centers = [(r, q) for r in cen_h for q in cen_w]
    return patches, centers


def local_patch_scores(x, bundle: ModelBundle, stride=None):
    """Scores of every patch of one image; returns ``(scores, rec, gac, centers)``."""
    _check_ready(bundle, "local")
    size = bundle.config.patch_size
    stride = tuple(stride) if stride is not None else (max(size[0] // 2, 1), max(size[1] // 2, 1))
    x = torch.as_tensor(x, dtype=torch.float32)
    patches, centers = image_patches(x, size, stride)
    rec, gac = score_terms(bundle, patches)
    return rec + gac, rec, gac, centers


def local_score(x, bundle: ModelBundle, stride=None):
    """Max over patch centres of the local model's patch score.

    Returns ``(score, argmax_center, (recon_term, gac_term))`` for one image.
    """
    scores, rec, gac, centers = local_patch_scores(x, bundle, stride)
    k = int(torch.argmax(scores))
    r, h = rec[k].item(), gac[k].item()
    return r + h, centers[k], (r, h)


def detection_score(x, global_bundle: ModelBundle, local_bundle: ModelBundle | None, stride=None,
                    use_local: bool = True) -> ScoreBreakdown:
    """Fused score ``s_global + s_local`` for a single ``(C, H, W)`` image."""
    _check_ready(global_bundle, "global")
    if use_local:
        _check_ready(local_bundle, "local")
    x = torch.as_tensor(x, dtype=torch.float32)
    g, (rg, hg) = global_score(x, global_bundle)
    if use_local:
        l, center, (rl, hl) = local_score(x, local_bundle, stride)
    else:
        l, center, rl, hl = 0.0, None, 0.0, 0.0
    return ScoreBreakdown(s_global=g, s_local=l, s_total=g + l, recon_term_g=rg, gac_term_g=hg,
                          recon_term_l=rl, gac_term_l=hl, argmax_patch_center=center)


def detection_scores(images, global_bundle, local_bundle=None, stride=None, use_local: bool = True):
    """:func:`detection_score` over a batch, returned as a list of breakdowns."""
    _check_ready(global_bundle, "global")
    images = _batch(images)
    rec, gac = score_terms(global_bundle, images)
    local = use_local and local_bundle is not None
    if local:
        _check_ready(local_bundle, "local")
        size = local_bundle.config.patch_size
        stride = tuple(stride) if stride is not None else (max(size[0] // 2, 1), max(size[1] // 2, 1))
        _, centers = image_patches(images[0], size, stride)
        n_p = len(centers)
        rl_all, hl_all = [], []
        for i in range(0, len(images), 64):
            patches = torch.cat([image_patches(x, size, stride)[0] for x in images[i:i + 64]])
            r, h = score_terms(local_bundle, patches, batch_size=1024)
            rl_all.append(r.view(-1, n_p))
            hl_all.append(h.view(-1, n_p))
        rl_all, hl_all = torch.cat(rl_all), torch.cat(hl_all)
        best = torch.argmax(rl_all + hl_all, dim=1)
    out = []
    for i in range(len(images)):
        g = rec[i].item() + gac[i].item()
        if local:
            k = int(best[i])
            rl, hl = rl_all[i, k].item(), hl_all[i, k].item()
            l, center = rl + hl, centers[k]
        else:
            l, center, rl, hl = 0.0, None, 0.0, 0.0
        out.append(ScoreBreakdown(g, l, g + l, rec[i].item(), gac[i].item(), rl, hl, center))
    return out


@torch.no_grad()
def _global_pixel_map(x: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    net = bundle.network
    net.eval()
    x_hat = net.decoder(net.encoder(x.unsqueeze(0)))
    return recon_loss_map(x.unsqueeze(0), x_hat, bundle.msssim)[0]


@torch.no_grad()
def _local_center_map(x: torch.Tensor, bundle: ModelBundle, batch_size: int = 512) -> torch.Tensor:
    net = bundle.network
    net.eval()
    h, w = x.shape[-2:]
    patches, centers = image_patches(x, bundle.config.patch_size, (1, 1))
    vals = []
    for i in range(0, len(patches), batch_size):
        p = patches[i:i + batch_size]
        vals.append(recon_loss_map(p, net.decoder(net.encoder(p)), bundle.msssim).mean(dim=(-2, -1)))
    vals = torch.cat(vals)
    out = torch.zeros(h, w)
    rows = torch.tensor([c[0] for c in centers])
    cols = torch.tensor([c[1] for c in centers])
    out[rows, cols] = vals
    return out


def localization_map(x, global_bundle: ModelBundle, local_bundle: ModelBundle | None = None,
                     smooth: int = 0) -> np.ndarray:
    """Per-pixel anomaly map ``(H, W)``: global per-pixel reconstruction loss plus
    the local model's reconstruction loss of the patch centred at each pixel.

    ``smooth > 1`` applies an optional box blur of that width.
    """
    for b, what in ((global_bundle, "global"), (local_bundle, "local")):
        if b is not None and b.network.decoder is None:
            raise ValueError(f"{what} model has no decoder; localisation needs reconstructions")
    if global_bundle is None:
        raise ValueError("global model is missing")
    x = torch.as_tensor(x, dtype=torch.float32)
    heat = _global_pixel_map(x, global_bundle)
    if local_bundle is not None:
        heat = heat + _local_center_map(x, local_bundle)
    if smooth and smooth > 1:
        r = smooth // 2
        heat = F.avg_pool2d(F.pad(heat[None, None], (r, r, r, r), mode="replicate"), smooth, stride=1)[0, 0]
    return heat.clamp_min(0.0).numpy().astype(np.float32)


# -- export -------------------------------------------------------------------
#
# float container: magic "IGDH" | u32 version | u32 H | u32 W | H*W float32 little-endian


def save_heatmap_float(path, heat: np.ndarray) -> None:
    heat = np.asarray(heat, dtype="<f4")
    if heat.ndim != 2:
        raise ValueError("heatmap must be 2-d")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<III", HEATMAP_VERSION, *heat.shape))
        fh.write(np.ascontiguousarray(heat).tobytes())


def load_heatmap_float(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HEATMAP_MAGIC:
        raise ValueError(f"{path}: not a heatmap container")
    version, h, w = struct.unpack_from("<III", data, 4)
    if version != HEATMAP_VERSION:
        raise ValueError(f"{path}: unsupported heatmap version {version}")
    return np.frombuffer(data, dtype="<f4", count=h * w, offset=16).reshape(h, w).copy()


def save_heatmap_png(path, heat: np.ndarray) -> None:
    """8-bit grayscale, min-max normalised per image."""
    from PIL import Image

    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = heat.min(), heat.max()
    scaled = np.zeros_like(heat) if hi <= lo else (heat - lo) / (hi - lo)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


SCORE_COLUMNS = ("id", "label", "s_total", "s_global", "s_local", "recon_term_g", "gac_term_g",
                 "recon_term_l", "gac_term_l", "argmax_row", "argmax_col")


def write_scores_csv(path, ids, labels, breakdowns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for i, lab, b in zip(ids, labels, breakdowns):
            d = asdict(b)
            c = b.argmax_patch_center or ("", "")
            w.writerow([i, int(lab)] + [repr(float(d[k])) for k in SCORE_COLUMNS[2:9]] + list(c))
