import csv

import numpy as np
import pytest
import torch
import torch.nn as nn

from igd.datasets import synthetic_blobs
from igd.gac import estimate_descriptor, gac_loss
from igd.interpolation import generator_interp_reg, interpolate_latents
from igd.models import BackboneConfig
from igd.msssim import recon_loss
from igd.trainer import (LOSS_COLUMNS, InterpDraw, TrainConfig, TrainingDiverged, encode_all, load_checkpoint,
                         run_em, sample_patches, save_checkpoint, total_generator_loss, train_dsvdd_baseline,
                         write_loss_csv)

TINY = BackboneConfig(latent_dim=8, width=4)


@pytest.fixture(scope="module")
def images():
    return torch.from_numpy(synthetic_blobs(12, 0, 0, seed=1).chw())


def _cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError, match="lambda3"):
        TrainConfig(lambda3=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(model_scope="regional")
    with pytest.raises(ValueError):
        TrainConfig(baseline="svdd")


def test_zero_epochs_gives_initial_model(images):
    bundle, state = run_em(images, _cfg(epochs=0), TINY)
    assert state.loss_history == [] and state.epoch == 0
    assert bundle.descriptor is not None
    fresh = estimate_descriptor(encode_all(bundle.network.encoder, images))
    assert torch.equal(bundle.descriptor.mu, fresh.mu) and bundle.descriptor.sigma == fresh.sigma


def test_empty_training_set():
    with pytest.raises(ValueError, match="empty"):
        run_em(torch.zeros(0, 1, 32, 32), _cfg(), TINY)


def test_same_seed_same_history(images):
    _, a = run_em(images, _cfg(), TINY)
    _, b = run_em(images, _cfg(), TINY)
    assert a.loss_history == b.loss_history
    assert len(a.loss_history) == a.epoch == 2
    _, c = run_em(images, _cfg(seed=1), TINY)
    assert c.loss_history != a.loss_history


def test_history_total_is_weighted_sum(images):
    cfg = _cfg(lambda1=0.7, lambda2=1.3)
    _, state = run_em(images, cfg, TINY)
    for rec in state.loss_history:
        assert rec["total"] == pytest.approx(rec["l_h"] + 0.7 * rec["l_d"] + 1.3 * rec["l_fg"], rel=1e-12)
        assert 0 <= rec["l_h_estep"] <= 1


def test_descriptor_carries_no_gradient(images):
    bundle, state = run_em(images, _cfg(epochs=1), TINY)
    assert not bundle.descriptor.mu.requires_grad
    assert bundle.descriptor.mu.grad_fn is None


def test_zero_lambdas_reduce_to_pure_gac(images):
    cfg = _cfg(lambda1=0, lambda2=0, lambda3=0)
    bundle, state = run_em(images, cfg, TINY)
    assert bundle.network.decoder is None and bundle.network.critic is None
    for rec in state.loss_history:
        assert rec["l_d"] == 0 and rec["l_fg"] == 0
        assert rec["total"] == rec["l_h"]


class _Net(nn.Module):
    """Flatten/unflatten autoencoder with a critic fooled on every input."""

    def __init__(self, shape):
        super().__init__()
        self.encoder = nn.Flatten()
        self.decoder = nn.Unflatten(1, shape)
        self.critic = _ZeroCritic()


class _ZeroCritic(nn.Module):
    def forward(self, x):
        return x.flatten(1).sum(1) * 0.0


def test_total_loss_vanishes_for_perfect_model():
    x = torch.rand(1, 1, 32, 32).repeat(4, 1, 1, 1)
    net = _Net((1, 32, 32))
    desc = estimate_descriptor(net.encoder(x))
    draw = InterpDraw.sample(4, torch.Generator().manual_seed(0))
    loss, parts = total_generator_loss(net, x, desc, TrainConfig(), draw)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)
    loss, _ = total_generator_loss(net, x, desc, TrainConfig(lambda1=0, lambda2=0))
    assert loss.item() == 0.0


def test_total_loss_matches_hand_sum():
    torch.manual_seed(3)
    from igd.models import IGDNetwork

    net = IGDNetwork(BackboneConfig(latent_dim=8, width=4)).double()
    x = torch.rand(6, 1, 32, 32, dtype=torch.float64)
    desc = estimate_descriptor(net.encoder(x) + 0.1)
    draw = InterpDraw.sample(6, torch.Generator().manual_seed(5))
    cfg = TrainConfig(lambda2=0.8, lambda3=0.3)
    loss, parts = total_generator_loss(net, x, desc, cfg, draw)

    with torch.no_grad():
        z = net.encoder(x)
        l_h = gac_loss(z, desc).item()
        l_r = recon_loss(x, net.decoder(z), cfg.msssim()).item()
        x_alpha = net.decoder(interpolate_latents(z, z[draw.perm], draw.alpha.double()))
        reg = generator_interp_reg(net.critic(x_alpha), 0.3).item()
    assert parts["l_h"] == pytest.approx(l_h, rel=1e-12)
    assert parts["l_r"] == pytest.approx(l_r, rel=1e-12)
    assert parts["reg"] == pytest.approx(reg, rel=1e-12)
    assert loss.item() == pytest.approx(l_h + 0.8 * (l_r + reg), rel=1e-12)


def test_missing_descriptor_or_draw_is_an_error():
    from igd.models import IGDNetwork

    net = IGDNetwork(TINY)
    x = torch.rand(2, 1, 32, 32)
    with pytest.raises(ValueError, match="descriptor"):
        total_generator_loss(net, x, None, TrainConfig())
    desc = estimate_descriptor(net.encoder(x))
    with pytest.raises(ValueError, match="InterpDraw"):
        total_generator_loss(net, x, desc, TrainConfig())


def test_non_finite_loss_aborts(images):
    bad = images.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as err:
        run_em(bad, _cfg(), TINY)
    assert isinstance(err.value.snapshot, dict)


def test_dsvdd_center_is_fixed_and_bias_free(images):
    cfg = _cfg(baseline="dsvdd")
    untrained = train_dsvdd_baseline(images, _cfg(baseline="dsvdd", epochs=0), TINY)
    trained = train_dsvdd_baseline(images, cfg, TINY)
    assert torch.equal(untrained.center, trained.center)
    assert not trained.center.requires_grad
    assert all("bias" not in n for n, _ in trained.network.encoder.named_parameters())
    assert trained.network.decoder is None
    assert len(trained.state.loss_history) == 2


def test_dsvdd_rec_has_decoder_and_collapsed_loss_is_zero(images):
    rec = train_dsvdd_baseline(images, _cfg(baseline="dsvdd_rec"), TINY)
    assert rec.network.decoder is not None
    assert all(r["l_fg"] > 0 for r in rec.state.loss_history)
    from igd.trainer import dsvdd_loss

    c = torch.randn(8)
    assert dsvdd_loss(c.repeat(5, 1), c).item() == 0.0
    with pytest.raises(ValueError):
        train_dsvdd_baseline(images, _cfg(), TINY)
    with pytest.raises(ValueError):
        run_em(images, cfg=_cfg(baseline="dsvdd"), backbone=TINY)


def test_local_scope_trains_on_patches(images):
    bundle, state = run_em(images, _cfg(model_scope="local", patch_size=(16, 16), epochs=1), TINY)
    assert bundle.backbone.input_resolution == (16, 16)
    x_hat = bundle.network.decoder(bundle.network.encoder(torch.rand(2, 1, 16, 16)))
    assert x_hat.shape == (2, 1, 16, 16)


def test_sample_patches():
    g = torch.Generator().manual_seed(0)
    p = sample_patches(torch.rand(3, 1, 10, 10), (4, 4), 5, g)
    assert p.shape == (15, 1, 4, 4)
    with pytest.raises(ValueError):
        sample_patches(torch.rand(1, 1, 4, 4), (5, 5), 1)


def test_checkpoint_roundtrip(tmp_path, images):
    bundle, _ = run_em(images, _cfg(epochs=2, checkpoint_every=1), TINY, checkpoint_dir=tmp_path, hash_="abc")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["global.igdw", "global_epoch0001.igdw",
                                                          "global_epoch0002.igdw"]
    back = load_checkpoint(tmp_path / "global.igdw")
    assert back.config_hash == "abc" and back.state.epoch == 2 and back.config == bundle.config
    assert torch.equal(back.descriptor.mu, bundle.descriptor.mu)
    assert torch.equal(back.network.encoder(images), bundle.network.encoder(images))
    svdd = train_dsvdd_baseline(images, _cfg(baseline="dsvdd"), TINY)
    save_checkpoint(tmp_path / "s.igdw", svdd)
    assert torch.equal(load_checkpoint(tmp_path / "s.igdw").center, svdd.center)


def test_loss_csv(tmp_path, images):
    _, state = run_em(images, _cfg(), TINY)
    write_loss_csv(tmp_path / "loss.csv", state.loss_history)
    rows = list(csv.reader(open(tmp_path / "loss.csv", encoding="utf-8")))
    assert tuple(rows[0]) == LOSS_COLUMNS == ("epoch", "total", "l_h", "l_d", "l_fg")
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert float(rows[2][1]) == state.loss_history[1]["total"]


def test_interp_draw_ranges():
    d = InterpDraw.sample(50, torch.Generator().manual_seed(1), alpha_max=0.5)
    assert torch.all(d.perm != torch.arange(50))
    assert d.alpha.min() >= 0 and d.alpha.max() <= 0.5
    assert np.all((d.zeta.numpy() >= 0) & (d.zeta.numpy() <= 1))
