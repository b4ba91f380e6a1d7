"""Body centers, center heatmaps and the context estimator network.

Maps are numpy arrays indexed ``[row, col]``; points are ``(x, y)`` pixel
coordinates with pixel ``(i, j)`` centered at ``x = j, y = i``.
"""

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from PIL import Image

from .body_model import TORSO_JOINTS

DEFAULT_SIGMA = 6.0
DEFAULT_THRESHOLD = 0.3
DEFAULT_WINDOW = 3


def compute_body_center(positions, visibility, torso=TORSO_JOINTS):
    """Mean of the visible torso joints, else of all visible joints, else None."""
    positions = np.asarray(positions, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    torso_vis = np.zeros_like(visibility)
    torso_vis[list(torso)] = visibility[list(torso)]
    if torso_vis.any():
        return positions[torso_vis].mean(0)
    if visibility.any():
        return positions[visibility].mean(0)
    return None


def _gaussian(center, H, W, sigma):
    gx = np.exp(-((np.arange(W) - center[0]) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((np.arange(H) - center[1]) ** 2) / (2 * sigma ** 2))
    return np.outer(gy, gx)


def render_centermap(centers, H=224, W=224, sigma=DEFAULT_SIGMA):
    """Unnormalized Gaussians (peak 1) at each center, combined by pixelwise max."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros((H, W))
    for c in centers:
        np.maximum(out, _gaussian(c, H, W, sigma), out=out)
    return out


def _strict_peaks(m, window):
    """Boolean mask of pixels strictly above every other pixel in their window.

    Equal values are resolved in row-major order: the earlier pixel wins.
    """
    H, W = m.shape
    r = window // 2
    pad = np.pad(m, r, constant_values=-np.inf)
    keep = np.ones((H, W), dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[r + dy : r + dy + H, r + dx : r + dx + W]
            later = dy > 0 or (dy == 0 and dx > 0)
            keep &= (m > nb) | ((m == nb) & later)
    return keep


def extract_local_centermaps(global_map, threshold=DEFAULT_THRESHOLD, sigma=DEFAULT_SIGMA, window=DEFAULT_WINDOW):
    """Detect centers in a global map and render one local map per detection.

    Returns ``[(center_xy, local_map, peak_value), ...]`` sorted by descending peak.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    m = np.asarray(global_map, dtype=np.float64)
    H, W = m.shape
    peaks = _strict_peaks(m, window) & (m > threshold)
    rows, cols = np.nonzero(peaks)
    vals = m[rows, cols]
    order = np.lexsort((np.arange(len(vals)), -vals))
    out = []
    for k in order:
        c = np.array([float(cols[k]), float(rows[k])])
        out.append((c, render_centermap([c], H, W, sigma), float(vals[k])))
    return out


def make_instance_context(global_map, local_map):
    """Stack to a (2, H, W) array: channel 0 global, channel 1 local."""
    return np.stack([np.asarray(global_map), np.asarray(local_map)])


def render_keypoint_heatmaps(positions, visibility, H=224, W=224, sigma=DEFAULT_SIGMA):
    """One Gaussian channel per keypoint; invisible keypoints give empty channels."""
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((len(positions), H, W))
    for k, (p, v) in enumerate(zip(positions, visibility)):
        if v:
            out[k] = _gaussian(p, H, W, sigma)
    return out


def loss_context(pred, gt):
    if isinstance(pred, torch.Tensor):
        return ((pred - torch.as_tensor(gt, dtype=pred.dtype)) ** 2).mean()
    return float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))


class ContextEstimator(nn.Module):
    """Small encoder-decoder predicting the global center heatmap from an RGB image.

    Six stride-2 convolutions down, nearest-neighbour upsampling with skip
    connections back to input resolution.
    """

    def __init__(self, widths=(16, 24, 32, 48, 64, 64)):
        super().__init__()
        self.down = nn.ModuleList()
        cin = 3
        for w in widths:
            self.down.append(nn.Sequential(nn.Conv2d(cin, w, 3, 2, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)))
            cin = w
        skips = (3,) + tuple(widths[:-1])
        self.up = nn.ModuleList()
        for skip in reversed(skips):
            w = max(skip, 8)
            self.up.append(nn.Sequential(nn.Conv2d(cin + skip, w, 3, 1, 1), nn.ReLU(inplace=True)))
            cin = w
        self.out = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        feats = [x]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        y = feats.pop()
        for layer in self.up:
            skip = feats.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
            y = layer(torch.cat([y, skip], dim=1))
        return torch.sigmoid(self.out(y))


@torch.no_grad()
def estimate_context(model, image):
    """Predict a global center map for one (H, W, 3) image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    was_training = model.training
    model.eval()
    x = torch.from_numpy(image).permute(2, 0, 1)[None]
    out = model(x)[0, 0].double().numpy()
    model.train(was_training)
    return out


def save_centermap_png(m, path):
    q = np.round(np.clip(m, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_centermap_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 65535.0
