"""Adversarial latent interpolation: mixing, image blending and critic losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class InterpolationBatch:
    z1: torch.Tensor
    z2: torch.Tensor
    alpha: torch.Tensor
    zeta: torch.Tensor
    x_hat_alpha: torch.Tensor
    x_hat_zeta: torch.Tensor


def interpolate_latents(z1, z2, alpha):
    """``alpha * z1 + (1 - alpha) * z2``; ``alpha`` may be a scalar or one value per row."""
    z1, z2 = torch.as_tensor(z1), torch.as_tensor(z2)
    if z1.shape != z2.shape:
        raise ValueError(f"latent shape mismatch: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    alpha = torch.as_tensor(alpha, dtype=z1.dtype, device=z1.device)
    if torch.any(alpha < 0) or torch.any(alpha > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if alpha.dim() == 1 and z1.dim() == 2:
        alpha = alpha[:, None]
    return alpha * z1 + (1 - alpha) * z2


def blend_image(x, x_hat, zeta):
    """Image-space blend ``zeta * x + (1 - zeta) * x_hat`` (one ``zeta`` per image for batches)."""
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    zeta = torch.as_tensor(zeta, dtype=x.dtype, device=x.device)
    if torch.any(zeta < 0) or torch.any(zeta > 1):
        raise ValueError("zeta must lie in [0, 1]")
    if zeta.dim() == 1:
        zeta = zeta.reshape(-1, *([1] * (x.dim() - 1)))
    return zeta * x + (1 - zeta) * x_hat


def derangement(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Random permutation of ``range(n)`` with no fixed points (``n >= 2``)."""
    if n < 2:
        raise ValueError("pairing needs at least two samples")
    idx = torch.arange(n)
    while True:
        perm = torch.randperm(n, generator=generator)
        if not torch.any(perm == idx):
            return perm


def _float(t) -> torch.Tensor:
    t = torch.as_tensor(t)
    return t if t.is_floating_point() else t.float()


def critic_loss(alpha_pred, alpha_true, zeta_pred) -> torch.Tensor:
    """Critic regression error: ``(alpha_pred - alpha)^2 + zeta_pred^2``, batch-averaged."""
    alpha_pred = _float(alpha_pred)
    alpha_true = torch.as_tensor(alpha_true, dtype=alpha_pred.dtype)
    zeta_pred = torch.as_tensor(zeta_pred, dtype=alpha_pred.dtype)
    return ((alpha_pred - alpha_true) ** 2).mean() + (zeta_pred**2).mean()


def generator_interp_reg(alpha_pred_on_interp, lambda3: float = 0.1) -> torch.Tensor:
    """Pushes the (frozen) critic towards predicting zero on decoded interpolants."""
    alpha_pred = _float(alpha_pred_on_interp)
    return lambda3 * (alpha_pred**2).mean()


def sample_interpolation(encoder, decoder, x, generator=None, alpha_max: float = 0.5) -> InterpolationBatch:
    """Draw pairs, coefficients and the decoded interpolants for a minibatch ``x``.

    Gradients flow through the encoder/decoder; callers detach as needed.
    """
    n = x.shape[0]
    z = encoder(x)
    perm = derangement(n, generator)
    alpha = torch.rand(n, generator=generator) * alpha_max
    zeta = torch.rand(n, generator=generator)
    z2 = z[perm]
    x_hat_alpha = decoder(interpolate_latents(z, z2, alpha))
    x_hat = decoder(z)
    x_hat_zeta = blend_image(x, x_hat, zeta)
    return InterpolationBatch(z, z2, alpha, zeta, x_hat_alpha, x_hat_zeta)
