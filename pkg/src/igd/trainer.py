"""EM training of IGD models, DSVDD baselines and checkpoint I/O."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import LabeledImageSet
from .gac import GaussianDescriptor, estimate_descriptor, gac_loss
from .interpolation import blend_image, critic_loss, derangement, generator_interp_reg, interpolate_latents
from .models import BackboneConfig, IGDNetwork, load_state_into, load_weight_archive, save_weight_archive
from .msssim import MsssimConfig, recon_loss

log = logging.getLogger(__name__)

BASELINES = ("none", "dsvdd", "dsvdd_rec")
SCOPES = ("global", "local")
RECON_KINDS = ("rec", "mse")


class TrainingDiverged(RuntimeError):
    """Raised when a loss becomes non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    rho: float = 0.15
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 256
    seed: int = 0
    model_scope: str = "global"
    baseline: str = "none"
    # weight of the Gaussian classifier loss; 0 gives the reconstruction-only ablations
    gac_weight: float = 1.0
    recon: str = "rec"
    alpha_max: float = 0.5
    patch_size: tuple = (16, 16)
    patches_per_image: int = 4
    checkpoint_every: int = 10

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        for name in ("lambda1", "lambda2", "lambda3", "gac_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (interpolation needs pairs)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.model_scope not in SCOPES:
            raise ValueError(f"model_scope must be one of {SCOPES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.recon not in RECON_KINDS:
            raise ValueError(f"recon must be one of {RECON_KINDS}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def msssim(self) -> MsssimConfig:
        if self.model_scope == "local":
            return MsssimConfig.local_default(rho=self.rho)
        return MsssimConfig.global_default(rho=self.rho)

    @property
    def uses_critic(self) -> bool:
        return self.baseline == "none" and (self.lambda1 > 0 or self.lambda3 > 0)

    @property
    def uses_decoder(self) -> bool:
        return self.lambda2 > 0 and self.baseline != "dsvdd"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d


@dataclass
class TrainState:
    epoch: int = 0
    descriptor: GaussianDescriptor | None = None
    loss_history: list = field(default_factory=list)
    displacement: list = field(default_factory=list)
    rng_state: bytes | None = None


@dataclass
class ModelBundle:
    """A trained model plus everything needed to score with it."""

    network: IGDNetwork
    backbone: BackboneConfig
    config: TrainConfig
    kind: str = "igd"
    descriptor: GaussianDescriptor | None = None
    center: torch.Tensor | None = None
    state: TrainState | None = None
    config_hash: str = ""

    @property
    def msssim(self) -> MsssimConfig:
        return self.config.msssim()

    @property
    def scope(self) -> str:
        return self.config.model_scope


def config_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    return torch.Generator().manual_seed(seed)


@torch.no_grad()
def encode_all(encoder, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    out = torch.cat([encoder(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    encoder.train(was_training)
    return out


def _recon(x, x_hat, cfg: TrainConfig, reduction="mean"):
    if cfg.recon == "mse":
        per = ((x - x_hat) ** 2).mean(dim=(1, 2, 3))
        return per.mean() if reduction == "mean" else per
    return recon_loss(x, x_hat, cfg.msssim(), reduction=reduction)


@dataclass
class InterpDraw:
    """Pairing and coefficients for one minibatch."""

    perm: torch.Tensor
    alpha: torch.Tensor
    zeta: torch.Tensor

    @classmethod
    def sample(cls, n: int, generator=None, alpha_max: float = 0.5) -> "InterpDraw":
        perm = derangement(n, generator)
        alpha = torch.rand(n, generator=generator) * alpha_max
        zeta = torch.rand(n, generator=generator)
        return cls(perm, alpha, zeta)


def critic_step(net: IGDNetwork, optimizer, x, draw: InterpDraw, cfg: TrainConfig) -> float:
    """One update of the critic on detached interpolants; encoder/decoder untouched."""
    with torch.no_grad():
        z = net.encoder(x)
        x_hat = net.decoder(z)
        x_alpha = net.decoder(interpolate_latents(z, z[draw.perm], draw.alpha.to(z.dtype)))
        x_zeta = blend_image(x, x_hat, draw.zeta.to(x.dtype))
    optimizer.zero_grad(set_to_none=True)
    loss = critic_loss(net.critic(x_alpha), draw.alpha.to(x.dtype), net.critic(x_zeta))
    (cfg.lambda1 * loss).backward()
    optimizer.step()
    return loss.item()


def total_generator_loss(net: IGDNetwork, x, descriptor: GaussianDescriptor | None, cfg: TrainConfig,
                         draw: InterpDraw | None = None):
    """Encoder/decoder objective ``gac_weight * l_h + lambda2 * (l_r + lambda3 * critic(x_alpha)^2)``.

    Returns ``(loss, parts)`` where ``parts`` holds the detached ``l_h``,
    ``l_r``, ``reg`` and ``l_fg`` terms. ``draw`` is required when the
    interpolation regulariser is active.
    """
    z = net.encoder(x)
    zero = z.new_zeros(())
    if cfg.gac_weight > 0:
        if descriptor is None:
            raise ValueError("the Gaussian classifier term needs a descriptor from the E-step")
        l_h = gac_loss(z, descriptor)
    else:
        l_h = zero
    l_r, reg = zero, zero
    if cfg.uses_decoder:
        l_r = _recon(x, net.decoder(z), cfg)
        if cfg.uses_critic and cfg.lambda3 > 0:
            if draw is None:
                raise ValueError("interpolation regulariser needs an InterpDraw")
            x_alpha = net.decoder(interpolate_latents(z, z[draw.perm], draw.alpha.to(z.dtype)))
            net.critic.requires_grad_(False)
            try:
                reg = generator_interp_reg(net.critic(x_alpha), cfg.lambda3).to(z.dtype)
            finally:
                net.critic.requires_grad_(True)
    l_fg = l_r + reg
    loss = cfg.gac_weight * l_h + cfg.lambda2 * l_fg
    parts = {"l_h": l_h.item(), "l_r": l_r.item(), "reg": reg.item(), "l_fg": l_fg.item()}
    return loss, parts


def generator_step(net: IGDNetwork, optimizer, x, descriptor, cfg: TrainConfig, draw=None) -> dict:
    optimizer.zero_grad(set_to_none=True)
    loss, parts = total_generator_loss(net, x, descriptor, cfg, draw)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite generator loss {loss.item()}", parts)
    loss.backward()
    optimizer.step()
    parts["gen"] = loss.item()
    return parts


def sample_patches(images: torch.Tensor, size, per_image: int, generator=None) -> torch.Tensor:
    """Reflect-padded patches centred at uniformly drawn pixels, ``per_image`` per image."""
    ph, pw = size
    n, c, h, w = images.shape
    if ph > h or pw > w:
        raise ValueError(f"patch size {size} exceeds image size {(h, w)}")
    padded = F.pad(images, (pw // 2, pw - 1 - pw // 2, ph // 2, ph - 1 - ph // 2), mode="reflect")
    rows = torch.randint(0, h, (n, per_image), generator=generator)
    cols = torch.randint(0, w, (n, per_image), generator=generator)
    out = [padded[i, :, r:r + ph, q:q + pw] for i in range(n) for r, q in zip(rows[i].tolist(), cols[i].tolist())]
    return torch.stack(out)


def _flat_params(net) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()]).clone()


def _epoch_data(images: torch.Tensor, cfg: TrainConfig, generator) -> torch.Tensor:
    if cfg.model_scope == "local":
        return sample_patches(images, cfg.patch_size, cfg.patches_per_image, generator)
    return images


def _as_tensor(train) -> torch.Tensor:
    if isinstance(train, LabeledImageSet):
        return torch.from_numpy(train.chw())
    return torch.as_tensor(train, dtype=torch.float32)


def _backbone_for(cfg: TrainConfig, backbone: BackboneConfig, channels: int) -> BackboneConfig:
    res = cfg.patch_size if cfg.model_scope == "local" else backbone.input_resolution
    return replace(backbone, input_resolution=tuple(res), channels=channels)


def run_em(train, cfg: TrainConfig, backbone: BackboneConfig | None = None,
           checkpoint_dir=None, hash_: str = "", progress=None):
    """Train one IGD model by alternating E-steps and M-step epochs.

    Each epoch first re-estimates the Gaussian descriptor from all training
    latents (no gradients), then runs one pass of minibatches, each doing a
    critic step followed by an encoder/decoder step. Returns ``(bundle, state)``.
    """
    if cfg.baseline != "none":
        raise ValueError("run_em trains IGD; use train_dsvdd_baseline for baselines")
    images = _as_tensor(train)
    if len(images) == 0:
        raise ValueError("training set is empty")
    backbone = _backbone_for(cfg, backbone or BackboneConfig(), images.shape[1])
    gen = seed_everything(cfg.seed)
    net = IGDNetwork(backbone, with_decoder=cfg.uses_decoder, with_critic=cfg.uses_critic)
    opt_g = torch.optim.Adam(net.generator_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_c = None
    if cfg.uses_critic:
        opt_c = torch.optim.Adam(net.critic.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    state = TrainState()
    bundle = ModelBundle(net, backbone, cfg, kind="igd", state=state, config_hash=hash_)
    for epoch in range(cfg.epochs):
        data = _epoch_data(images, cfg, gen)
        descriptor, estep_lh = None, float("nan")
        if cfg.gac_weight > 0:
            latents = encode_all(net.encoder, data)
            if not torch.isfinite(latents).all():
                raise TrainingDiverged(f"non-finite latents in the E-step of epoch {epoch + 1}",
                                       {"nonfinite": int((~torch.isfinite(latents)).sum())})
            descriptor = estimate_descriptor(latents)
            estep_lh = gac_loss(latents, descriptor).item()
        before = _flat_params(net)
        net.train()
        sums = {"l_h": 0.0, "l_d": 0.0, "l_fg": 0.0, "total": 0.0}
        batches = 0
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = data[idx]
            draw = InterpDraw.sample(len(idx), gen, cfg.alpha_max) if cfg.uses_critic else None
            l_d = critic_step(net, opt_c, x, draw, cfg) if cfg.uses_critic else 0.0
            parts = generator_step(net, opt_g, x, descriptor, cfg, draw)
            total = cfg.gac_weight * parts["l_h"] + cfg.lambda1 * l_d + cfg.lambda2 * parts["l_fg"]
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}", {**parts, "l_d": l_d})
            sums["l_h"] += parts["l_h"]
            sums["l_d"] += l_d
            sums["l_fg"] += parts["l_fg"]
            sums["total"] += total
            batches += 1
        record = {"epoch": epoch + 1, **{k: v / max(batches, 1) for k, v in sums.items()}}
        # l_h of all training latents under the descriptor fitted to them (EM objective before the M-step)
        record["l_h_estep"] = estep_lh
        state.loss_history.append(record)
        state.displacement.append(torch.linalg.vector_norm(_flat_params(net) - before).item())
        state.epoch = epoch + 1
        state.descriptor = descriptor
        if progress is not None:
            progress(record)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            bundle.descriptor = descriptor
            save_checkpoint(Path(checkpoint_dir) / f"{cfg.model_scope}_epoch{state.epoch:04d}.igdw", bundle)

    # final E-step so the descriptor matches the trained encoder
    if cfg.gac_weight > 0:
        state.descriptor = estimate_descriptor(encode_all(net.encoder, _epoch_data(images, cfg, gen)))
    bundle.descriptor = state.descriptor
    state.rng_state = gen.get_state().numpy().tobytes()
    net.eval()
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / f"{cfg.model_scope}.igdw", bundle)
    return bundle, state


def dsvdd_loss(z, center, reduction="mean"):
    dist = ((z - center) ** 2).sum(dim=-1)
    return dist.mean() if reduction == "mean" else dist


def train_dsvdd_baseline(train, cfg: TrainConfig, backbone: BackboneConfig | None = None,
                         checkpoint_dir=None, hash_: str = "") -> ModelBundle:
    """Fixed-centre hypersphere baseline (``dsvdd``) and its reconstruction variant (``dsvdd_rec``).

    The encoder has no bias terms and the centre is the mean latent of the
    untrained encoder; it is never updated.
    """
    if cfg.baseline not in ("dsvdd", "dsvdd_rec"):
        raise ValueError("cfg.baseline must be 'dsvdd' or 'dsvdd_rec'")
    images = _as_tensor(train)
    if len(images) == 0:
        raise ValueError("training set is empty")
    backbone = replace(_backbone_for(cfg, backbone or BackboneConfig(), images.shape[1]), bias=False)
    gen = seed_everything(cfg.seed)
    with_rec = cfg.baseline == "dsvdd_rec"
    net = IGDNetwork(backbone, with_decoder=with_rec, with_critic=False)
    opt = torch.optim.Adam(net.generator_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    center = encode_all(net.encoder, _epoch_data(images, cfg, gen)).mean(dim=0)

    state = TrainState()
    for epoch in range(cfg.epochs):
        data = _epoch_data(images, cfg, gen)
        before = _flat_params(net)
        net.train()
        sums, batches = {"l_h": 0.0, "l_fg": 0.0, "total": 0.0}, 0
        order = torch.randperm(len(data), generator=gen)
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = data[idx]
            opt.zero_grad(set_to_none=True)
            z = net.encoder(x)
            dist = dsvdd_loss(z, center)
            rec = _recon(x, net.decoder(z), cfg) if with_rec else dist.new_zeros(())
            loss = dist + cfg.lambda2 * rec
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}", {"dist": dist.item()})
            loss.backward()
            opt.step()
            sums["l_h"] += dist.item()
            sums["l_fg"] += rec.item()
            sums["total"] += loss.item()
            batches += 1
        state.loss_history.append({"epoch": epoch + 1, "l_d": 0.0,
                                   **{k: v / max(batches, 1) for k, v in sums.items()}})
        state.displacement.append(torch.linalg.vector_norm(_flat_params(net) - before).item())
        state.epoch = epoch + 1
    net.eval()
    bundle = ModelBundle(net, backbone, cfg, kind=cfg.baseline, center=center, state=state, config_hash=hash_)
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / f"{cfg.model_scope}_{cfg.baseline}.igdw", bundle)
    return bundle


def train_model(train, cfg: TrainConfig, backbone: BackboneConfig | None = None, **kwargs) -> ModelBundle:
    """Dispatch to :func:`run_em` or :func:`train_dsvdd_baseline` by ``cfg.baseline``."""
    if cfg.baseline == "none":
        return run_em(train, cfg, backbone, **kwargs)[0]
    return train_dsvdd_baseline(train, cfg, backbone, **kwargs)


# -- persistence --------------------------------------------------------------

LOSS_COLUMNS = ("epoch", "total", "l_h", "l_d", "l_fg")


def write_loss_csv(path, history) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in LOSS_COLUMNS[1:]])


def save_checkpoint(path, bundle: ModelBundle) -> None:
    net = bundle.network
    tensors = {}
    for name in ("encoder", "decoder", "critic"):
        module = getattr(net, name)
        if module is not None:
            tensors.update({f"{name}.{k}": v for k, v in module.state_dict().items()})
    if bundle.center is not None:
        tensors["dsvdd.center"] = bundle.center
    meta = {
        "kind": bundle.kind,
        "scope": bundle.scope,
        "epoch": bundle.state.epoch if bundle.state else 0,
        "config_hash": bundle.config_hash,
        "train_config": bundle.config.to_dict(),
        "backbone": bundle.backbone.to_dict(),
        "descriptor": bundle.descriptor.to_dict() if bundle.descriptor is not None else None,
        "modules": [n for n in ("encoder", "decoder", "critic") if getattr(net, n) is not None],
    }
    save_weight_archive(path, tensors, bundle.backbone.variant, bundle.backbone.latent_dim, meta)


def load_checkpoint(path) -> ModelBundle:
    header, tensors = load_weight_archive(path)
    meta = header["meta"]
    backbone_d = dict(meta["backbone"])
    backbone_d["pretrained_weights"] = None
    backbone = BackboneConfig(**backbone_d)
    cfg = TrainConfig(**meta["train_config"])
    modules = meta["modules"]
    net = IGDNetwork(backbone, with_decoder="decoder" in modules, with_critic="critic" in modules)
    for name in modules:
        load_state_into(getattr(net, name), tensors, prefix=f"{name}.")
    net.eval()
    desc = GaussianDescriptor.from_dict(meta["descriptor"]) if meta.get("descriptor") else None
    state = TrainState(epoch=meta["epoch"], descriptor=desc)
    return ModelBundle(net, backbone, cfg, kind=meta["kind"], descriptor=desc,
                       center=tensors.get("dsvdd.center"), state=state, config_hash=meta["config_hash"])
