"""Procedural matting composites, trimaps and on-disk datasets."""
from __future__ import annotations

import csv
import io
import shutil
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import tifffile
from scipy import ndimage

TRIMAP_KERNEL = 11
FG_THRESHOLD = 0.999
BG_THRESHOLD = 0.001
UNKNOWN_RANGE = (0.02, 0.60)
MIN_SIZE = 32
TEST_SEED_OFFSET = 1_000_000
_ALPHA_LEVELS = 65535


@dataclass
class CompositeSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    fg: np.ndarray
    bg: np.ndarray
    alpha: np.ndarray  # H x W, float32 on the 16-bit grid
    trimap: np.ndarray  # H x W, values {0, 0.5, 1}

    @property
    def unknown(self) -> np.ndarray:
        return unknown_mask(self.trimap)


def unknown_mask(trimap: np.ndarray) -> np.ndarray:
    return (trimap > 0.25) & (trimap < 0.75)


def composite(alpha: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    a = alpha.astype(np.float64)[..., None]
    return (a * fg + (1.0 - a) * bg).astype(np.float32)


def make_trimap(alpha: np.ndarray, kernel: int = TRIMAP_KERNEL) -> np.ndarray:
    """Definite regions are the thresholded alpha eroded by a square element."""
    alpha = np.asarray(alpha)
    if kernel > min(alpha.shape):
        raise ValueError(f"kernel {kernel} larger than image {alpha.shape}")
    element = np.ones((kernel, kernel), dtype=bool)
    # outside the image counts as neither label, so borders are not eroded
    fg = ndimage.binary_erosion(alpha >= FG_THRESHOLD, element, border_value=1)
    bg = ndimage.binary_erosion(alpha <= BG_THRESHOLD, element, border_value=1)
    trimap = np.full(alpha.shape, 0.5, dtype=np.float32)
    trimap[fg] = 1.0
    trimap[bg] = 0.0
    return trimap


def _soft_ellipse(rng, yy, xx, size):
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    ry, rx = rng.uniform(0.08, 0.22, 2) * size
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    r = np.sqrt(u * u + v * v)
    softness = rng.uniform(1.0, 3.0) / min(rx, ry)
    return np.clip((1.0 - r) / softness + 0.5, 0.0, 1.0)


def _stroke(rng, size):
    """A 1-px wide quadratic Bezier curve with partial opacity."""
    layer = np.zeros((size, size))
    p0, p1, p2 = (rng.uniform(0.15, 0.85, (3, 2)) * size)
    t = np.linspace(0.0, 1.0, 8 * size)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    strength = rng.uniform(0.4, 0.95)
    iy = np.clip(pts[:, 0].astype(int), 0, size - 1)
    ix = np.clip(pts[:, 1].astype(int), 0, size - 1)
    layer[iy, ix] = strength
    # graded halo around the core line
    halo = ndimage.gaussian_filter(layer, 0.6) * 0.6
    return np.maximum(layer, np.minimum(halo, strength))


def _background(rng, yy, xx, size):
    base = rng.uniform(0, 1, 3)
    slope = rng.uniform(-0.5, 0.5, (2, 3))
    grad = base + (yy[..., None] / size - 0.5) * slope[0] + (xx[..., None] / size - 0.5) * slope[1]
    noise = ndimage.gaussian_filter(rng.normal(0, 1, (size, size, 3)), (3, 3, 0))
    noise /= np.abs(noise).max() + 1e-12
    return np.clip(grad + 0.15 * noise, 0, 1)


def _foreground(rng, yy, xx, size):
    colors = rng.uniform(0, 1, (2, 3))
    mix = np.clip(xx / size * rng.uniform(0.5, 1.5) + rng.uniform(-0.3, 0.3), 0, 1)[..., None]
    fg = colors[0] * mix + colors[1] * (1 - mix)
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size, 3)), (1.5, 1.5, 0))
    return np.clip(fg + 0.08 * texture, 0, 1)


def _quantize(x):
    return (np.round(np.clip(x, 0, 1) * _ALPHA_LEVELS) / _ALPHA_LEVELS).astype(np.float32)


def _draw(seed: int, size: int) -> CompositeSample:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    alpha = np.zeros((size, size))
    for _ in range(rng.integers(1, 3)):
        alpha = np.maximum(alpha, _soft_ellipse(rng, yy, xx, size))
    for _ in range(rng.integers(1, 4)):
        alpha = np.maximum(alpha, _stroke(rng, size))
    alpha[alpha >= FG_THRESHOLD] = 1.0
    alpha[alpha <= BG_THRESHOLD] = 0.0
    alpha = _quantize(alpha)
    fg = _foreground(rng, yy, xx, size).astype(np.float32)
    bg = _background(rng, yy, xx, size).astype(np.float32)
    return CompositeSample(composite(alpha, fg, bg), fg, bg, alpha, make_trimap(alpha))


def synth_sample(seed: int, size: int = 64) -> CompositeSample:
    """Deterministic composite; redraws until the unknown band is a sane fraction."""
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    for attempt in range(100):
        sample = _draw(np.random.SeedSequence([seed, attempt]).generate_state(1)[0], size)
        frac = sample.unknown.mean()
        if UNKNOWN_RANGE[0] <= frac <= UNKNOWN_RANGE[1]:
            return sample
    raise RuntimeError(f"seed {seed}: no admissible sample in 100 attempts")


# -- persistence ------------------------------------------------------------------

def save_sample(sample: CompositeSample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("image", "fg", "bg"):
        tifffile.imwrite(d / f"{name}.tif", getattr(sample, name).astype(np.float32), photometric="rgb")
    cv2.imwrite(str(d / "alpha.png"), np.round(sample.alpha.astype(np.float64) * _ALPHA_LEVELS).astype(np.uint16))
    cv2.imwrite(str(d / "trimap.png"), np.round(sample.trimap * 255).astype(np.uint8))


def load_sample(directory) -> CompositeSample:
    d = Path(directory)
    image, fg, bg = (tifffile.imread(d / f"{n}.tif").astype(np.float32) for n in ("image", "fg", "bg"))
    alpha = cv2.imread(str(d / "alpha.png"), cv2.IMREAD_UNCHANGED)
    alpha = (alpha.astype(np.float64) / _ALPHA_LEVELS).astype(np.float32)
    raw = cv2.imread(str(d / "trimap.png"), cv2.IMREAD_UNCHANGED)
    trimap = np.where(raw > 191, 1.0, np.where(raw < 64, 0.0, 0.5)).astype(np.float32)
    return CompositeSample(image, fg, bg, alpha, trimap)


class DatasetExistsError(FileExistsError):
    pass


def generate_dataset(root, n_train: int, n_test: int, size: int = 64, seed: int = 0,
                     force: bool = False) -> Path:
    """Write ``<root>/<split>/<id>/`` sample folders and ``manifest.csv``."""
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetExistsError(f"{root} is not empty; pass force to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for split, n, offset in (("train", n_train, 0), ("test", n_test, TEST_SEED_OFFSET)):
        for i in range(n):
            sample_seed = seed * 10_000_000 + offset + i
            sid = f"{i:05d}"
            save_sample(synth_sample(sample_seed, size), root / split / sid)
            rows.append((sid, split, sample_seed, size))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("id", "split", "seed", "size"))
    writer.writerows(rows)
    manifest = root / "manifest.csv"
    manifest.write_text(buf.getvalue())
    return manifest


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def load_split(path, split: str | None = None) -> list[CompositeSample]:
    """Load a split; ``path`` may be the dataset root or a split directory."""
    path = Path(path)
    if split is None and (path / "manifest.csv").exists():
        split = "test"
    d = path / split if split else path
    if not d.is_dir():
        raise FileNotFoundError(f"no dataset split at {d}")
    return [load_sample(p) for p in sorted(d.iterdir()) if p.is_dir()]


def to_tensors(samples: list[CompositeSample]):
    """Stack samples into ``(inputs N x 4 x H x W, alpha N x 1 x H x W, trimap N x 1 x H x W)``."""
    import torch

    image = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    trimap = np.stack([s.trimap for s in samples])[:, None]
    alpha = np.stack([s.alpha for s in samples])[:, None]
    inputs = np.concatenate([image, trimap], axis=1)
    return (torch.from_numpy(np.ascontiguousarray(inputs)), torch.from_numpy(alpha),
            torch.from_numpy(trimap))


def in_memory_dataset(n_train: int, n_test: int, size: int = 64, seed: int = 0):
    """Same samples as :func:`generate_dataset` without touching disk."""
    train = [synth_sample(seed * 10_000_000 + i, size) for i in range(n_train)]
    test = [synth_sample(seed * 10_000_000 + TEST_SEED_OFFSET + i, size) for i in range(n_test)]
    return train, test
