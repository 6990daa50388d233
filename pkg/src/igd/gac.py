"""Gaussian anomaly classifier: descriptor estimation (E-step) and its loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianDescriptor:
    """Centre ``mu`` and isotropic spread ``sigma`` of the normal latents."""

    mu: torch.Tensor
    sigma: float
    n_samples: int

    def __post_init__(self):
        if self.mu.dim() != 1:
            raise ValueError("mu must be a 1-d tensor")
        if not self.sigma >= SIGMA_FLOOR:
            raise ValueError(f"sigma must be >= {SIGMA_FLOOR}, got {self.sigma}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {
            "Z": self.dim,
            "mu": [float(v) for v in self.mu.tolist()],
            "sigma": float(self.sigma),
            "n_samples": int(self.n_samples),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianDescriptor":
        mu = torch.tensor(d["mu"], dtype=torch.float32)
        if mu.shape[0] != d["Z"]:
            raise ValueError(f"descriptor Z={d['Z']} but mu has {mu.shape[0]} entries")
        return cls(mu=mu, sigma=float(d["sigma"]), n_samples=int(d["n_samples"]))


@torch.no_grad()
def estimate_descriptor(latents, sigma_floor: float = SIGMA_FLOOR) -> GaussianDescriptor:
    """Set the descriptor to the empirical mean and RMS distance of ``latents``.

    ``latents`` is an ``(N, Z)`` tensor or a sequence of length-Z vectors.
    """
    if isinstance(latents, torch.Tensor):
        z = latents.detach()
    else:
        latents = list(latents)
        if not latents:
            raise ValueError("cannot estimate a descriptor from zero latents")
        dims = {len(v) for v in latents}
        if len(dims) != 1:
            raise ValueError(f"latents have mismatched dimensions {sorted(dims)}")
        z = torch.stack([torch.as_tensor(v, dtype=torch.float32) for v in latents])
    if z.dim() != 2 or z.shape[0] == 0:
        raise ValueError("cannot estimate a descriptor from zero latents")
    z = z.double()
    mu = z.mean(dim=0)
    sigma = torch.sqrt(((z - mu) ** 2).sum(dim=1).mean()).item()
    return GaussianDescriptor(mu=mu.float(), sigma=max(sigma, sigma_floor), n_samples=z.shape[0])


def _sq_dist(z: torch.Tensor, d: GaussianDescriptor) -> torch.Tensor:
    z = torch.as_tensor(z)
    if z.shape[-1] != d.dim:
        raise ValueError(f"latent dimension {z.shape[-1]} does not match descriptor Z={d.dim}")
    mu = d.mu.to(dtype=z.dtype, device=z.device)
    return ((z - mu) ** 2).sum(dim=-1)


def normality_prob(z, d: GaussianDescriptor) -> torch.Tensor:
    """``exp(-||z - mu||^2 / sigma^2)``; works on a single code or a batch."""
    return torch.exp(-_sq_dist(z, d) / d.sigma**2)


def gac_loss(z, d: GaussianDescriptor, reduction: str = "mean") -> torch.Tensor:
    """Probability of the anomalous class, ``1 - normality_prob``.

    A single code gives a 0-d tensor; a batch is averaged unless
    ``reduction="none"``.
    """
    loss = 1.0 - normality_prob(z, d)
    if loss.dim() == 0 or reduction == "none":
        return loss
    if reduction == "mean":
        return loss.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
