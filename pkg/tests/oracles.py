"""Slow, straight-from-definition reference implementations used only by tests."""
import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pairwise_auc(scores, labels):
    """P(s_pos > s_neg) + 0.5 P(tie) by enumerating every pos/neg pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p, n in itertools.product(pos, neg):
        wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def _pool2(a):
    h, w = a.shape
    return a.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _window_stats(x, y, win):
    r = win // 2
    if win > 1:
        x = np.pad(x, r, mode="reflect")
        y = np.pad(y, r, mode="reflect")
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cxy = (dx * dy).mean(axis=(-2, -1))
    return mx, my, vx, vy, cxy


def msssim_map_np(x, y, scales, window, weights, pixel_range=4.7579, k1=0.01, k2=0.03, eps=1e-12):
    """Per-pixel MS-SSIM of two single-channel float64 images, term by term."""
    c1 = (k1 * pixel_range) ** 2
    c2 = (k2 * pixel_range) ** 2
    c3 = c2 / 2
    h, w = x.shape
    out = np.ones((h, w))
    xs, ys = np.asarray(x, np.float64), np.asarray(y, np.float64)
    for m in range(scales):
        if m > 0:
            xs, ys = _pool2(xs), _pool2(ys)
        side = min(xs.shape)
        win = min(window, side if side % 2 else side - 1)
        mx, my, vx, vy, cxy = _window_stats(xs, ys, win)
        sx, sy = np.sqrt(vx + eps), np.sqrt(vy + eps)
        lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
        con = (2 * sx * sy + c2) / (vx + vy + c2)
        st = (cxy + c3) / (sx * sy + c3)
        term = (np.maximum(con * st, 0.0) + eps) ** weights[m]
        if m == scales - 1:
            term = term * (np.maximum(lum, 0.0) + eps) ** weights[m]
        f = 2 ** m
        out = out * np.repeat(np.repeat(term, f, axis=0), f, axis=1)
    return np.clip(out, 0.0, 1.0)


def finite_diff_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at float64 array/tensor ``x`` (modified in place, restored)."""
    g = np.zeros(x.numel() if hasattr(x, "numel") else x.size)
    flat = x.view(-1) if hasattr(x, "view") else x.reshape(-1)
    for i in range(len(g)):
        old = float(flat[i])
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
