import ast
import csv
import inspect

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

import igd.inference as inf
from igd.datasets import synthetic_blobs
from igd.gac import estimate_descriptor, gac_loss
from igd.models import BackboneConfig
from igd.msssim import recon_loss
from igd.trainer import ModelBundle, TrainConfig, run_em

TINY = BackboneConfig(latent_dim=8, width=4)


@pytest.fixture(scope="module")
def data():
    return synthetic_blobs(8, 2, 2, seed=2)


@pytest.fixture(scope="module")
def models(data):
    imgs = torch.from_numpy(data.chw()[data.labels == 0])
    g, _ = run_em(imgs, TrainConfig(epochs=1, batch_size=4, lr=1e-3), TINY)
    l, _ = run_em(imgs, TrainConfig(epochs=1, batch_size=4, lr=1e-3, model_scope="local"), TINY)
    return g, l


class _Perfect(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.encoder = nn.Flatten()
        self.decoder = nn.Unflatten(1, shape)
        self.critic = None


def _perfect_bundle(x, scope="global"):
    net = _Perfect(tuple(x.shape))
    desc = estimate_descriptor(net.encoder(x[None]))
    cfg = TrainConfig(model_scope=scope, patch_size=tuple(x.shape[-2:]))
    return ModelBundle(net, BackboneConfig(), cfg, descriptor=desc)


def test_perfect_model_scores_zero():
    x = torch.rand(1, 32, 32)
    b = _perfect_bundle(x)
    score, (rec, gac) = inf.global_score(x, b)
    assert score == pytest.approx(0.0, abs=1e-7) and gac == 0.0


def test_perfect_models_give_zero_map():
    x = 0.2 + 0.6 * torch.rand(1, 32, 32)
    g = _perfect_bundle(x)
    l = _perfect_bundle(torch.zeros(1, 16, 16), scope="local")
    heat = inf.localization_map(x, g, l)
    assert heat.shape == (32, 32)
    np.testing.assert_allclose(heat, 0.0, atol=1e-6)


def test_global_score_composes_audited_losses(models, data):
    g, _ = models
    x = torch.from_numpy(data.chw()[9])
    score, (rec, gac) = inf.global_score(x, g)
    assert score == rec + gac
    with torch.no_grad():
        z = g.network.encoder(x[None])
        expect_rec = recon_loss(x[None], g.network.decoder(z), g.msssim).item()
        expect_gac = gac_loss(z, g.descriptor).item()
    assert rec == pytest.approx(expect_rec, rel=1e-5)
    assert gac == pytest.approx(expect_gac, rel=1e-6)


def test_single_patch_grid_equals_global_score_of_local_model(models, data):
    _, l = models
    x = torch.from_numpy(data.chw()[0][:, 8:24, 8:24].copy())
    score, center, _ = inf.local_score(x, l)
    assert center == (8, 8)
    assert score == pytest.approx(inf.global_score(x, l)[0], rel=1e-6)


def test_duplicating_worst_patch_keeps_max(models, data):
    _, l = models
    x = torch.from_numpy(data.chw()[10].copy())
    scores, _, _, centers = inf.local_patch_scores(x, l, stride=(16, 16))
    assert centers == [(8, 8), (8, 24), (24, 8), (24, 24)]
    k = int(torch.argmax(scores))
    r, c = centers[k][0] - 8, centers[k][1] - 8
    best = scores.max().item()
    dup = x.clone()
    target = (16, 16) if (r, c) == (0, 0) else (0, 0)
    dup[:, target[0]:target[0] + 16, target[1]:target[1] + 16] = x[:, r:r + 16, c:c + 16]
    assert inf.local_score(dup, l, stride=(16, 16))[0] == pytest.approx(best, rel=1e-6)


def test_configured_stride_never_exceeds_exhaustive(models, data):
    _, l = models
    for i in (0, 9, 11):
        x = torch.from_numpy(data.chw()[i])
        fine, _, _, fine_centers = inf.local_patch_scores(x, l, stride=(1, 1))
        coarse, _, _, coarse_centers = inf.local_patch_scores(x, l)
        assert len(fine_centers) == 32 * 32
        assert coarse.max() <= fine.max() + 1e-6
        lookup = dict(zip(fine_centers, fine.tolist()))
        for c, v in zip(coarse_centers, coarse.tolist()):
            assert v == pytest.approx(lookup[c], rel=1e-5)


def test_detection_score_breakdown(models, data):
    g, l = models
    x = torch.from_numpy(data.chw())
    batch = inf.detection_scores(x, g, l)
    for i, b in enumerate(batch):
        assert b.s_total == b.s_global + b.s_local
        assert b.s_global == b.recon_term_g + b.gac_term_g
        assert b.s_local == b.recon_term_l + b.gac_term_l
        single = inf.detection_score(x[i], g, l)
        assert single.s_total == pytest.approx(b.s_total, rel=1e-5)
        assert single.argmax_patch_center == b.argmax_patch_center
    again = inf.detection_scores(x, g, l)
    assert [b.s_total for b in again] == [b.s_total for b in batch]
    only_g = inf.detection_scores(x, g, None, use_local=False)
    assert all(b.s_local == 0 and b.s_total == b.s_global for b in only_g)


def test_missing_models_are_errors(models, data):
    g, l = models
    x = torch.from_numpy(data.chw()[0])
    with pytest.raises(ValueError, match="local model is missing"):
        inf.detection_score(x, g, None)
    with pytest.raises(ValueError, match="global model is missing"):
        inf.detection_score(x, None, l)
    untrained = ModelBundle(g.network, g.backbone, g.config, descriptor=None)
    with pytest.raises(ValueError, match="descriptor"):
        inf.global_score(x, untrained)
    with pytest.raises(ValueError, match="exceeds"):
        inf.local_score(torch.rand(1, 8, 8), l)


def test_critic_is_never_called(models, data):
    g, l = models

    class _Trap(nn.Module):
        def forward(self, x):
            raise AssertionError("critic used at inference")

    x = torch.from_numpy(data.chw())
    saved = g.network.critic, l.network.critic
    g.network.critic, l.network.critic = _Trap(), _Trap()
    try:
        inf.detection_scores(x, g, l)
        inf.localization_map(x[0], g, l)
    finally:
        g.network.critic, l.network.critic = saved


def test_inference_source_never_touches_critic():
    tree = ast.parse(inspect.getsource(inf))
    attrs = {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
    assert "critic" not in attrs


def test_localization_map_properties(models, data):
    g, l = models
    x = torch.from_numpy(data.chw()[11])
    heat = inf.localization_map(x, g, l)
    assert heat.shape == (32, 32) and heat.dtype == np.float32
    assert np.isfinite(heat).all() and heat.min() >= 0
    smooth = inf.localization_map(x, g, l, smooth=3)
    assert smooth.shape == heat.shape
    assert smooth.std() <= heat.std()
    assert np.array_equal(heat, inf.localization_map(x, g, l))


def test_heatmap_float_container(tmp_path):
    heat = np.random.default_rng(0).random((5, 7)).astype(np.float32)
    inf.save_heatmap_float(tmp_path / "h.igdh", heat)
    raw = (tmp_path / "h.igdh").read_bytes()
    assert raw[:4] == b"IGDH" and len(raw) == 16 + 4 * 35
    assert np.array_equal(inf.load_heatmap_float(tmp_path / "h.igdh"), heat)
    with pytest.raises(ValueError):
        inf.save_heatmap_float(tmp_path / "x", np.zeros(3))


def test_heatmap_png_is_minmax_scaled(tmp_path):
    heat = np.array([[2.0, 3.0], [4.0, 6.0]])
    inf.save_heatmap_png(tmp_path / "h.png", heat)
    img = np.asarray(Image.open(tmp_path / "h.png"))
    assert img.tolist() == [[0, 64], [128, 255]]
    inf.save_heatmap_png(tmp_path / "flat.png", np.ones((2, 2)))
    assert not np.asarray(Image.open(tmp_path / "flat.png")).any()


def test_scores_csv(tmp_path):
    rows = [inf.ScoreBreakdown(0.5, 0.25, 0.75, 0.4, 0.1, 0.2, 0.05, (3, 4)),
            inf.ScoreBreakdown(0.1, 0.0, 0.1, 0.1, 0.0, 0.0, 0.0, None)]
    inf.write_scores_csv(tmp_path / "s.csv", ["a", "b"], [1, 0], rows)
    out = list(csv.DictReader(open(tmp_path / "s.csv", encoding="utf-8")))
    assert tuple(out[0].keys()) == inf.SCORE_COLUMNS
    assert float(out[0]["s_total"]) == 0.75 and out[0]["argmax_row"] == "3"
    assert out[1]["argmax_col"] == ""
