"""Distribution metrics over feature embeddings: Frechet distance and k-NN precision/recall."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .detector import BBox
from .lossbank import FeatureExtractor, seam_energy

EIG_TOLERANCE = 1e-8


@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = "generated"

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.source not in ("real", "generated"):
            raise ValueError(f"source must be 'real' or 'generated', got {self.source!r}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature rows must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def embed(images, fx: FeatureExtractor, source: str = "generated") -> FeatureSet:
    """Globally pooled stage features, one row per image in input order."""
    images = [np.asarray(im.data if isinstance(im, dc.Tensor) else im, dtype=np.float64)
              for im in images]
    if not images:
        raise ValueError("embed needs at least one image")
    shape = images[0].shape
    for i, im in enumerate(images):
        if im.shape != shape:
            raise dc.ShapeError(f"embed: image {i} has shape {im.shape}, expected {shape}")
    return FeatureSet(np.stack([fx.pooled(im) for im in images]), source)


def _sqrt_psd(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    tol = EIG_TOLERANCE * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise ValueError(f"{what} is not positive semi-definite (eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise ValueError("each feature set needs at least 2 rows")
    mu_a, mu_b = a.features.mean(axis=0), b.features.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    # tr sqrt(A B) = sum of sqrt eigenvalues of the symmetric A^1/2 B A^1/2
    vals, vecs = _sqrt_psd(cov_a, "first covariance")
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner, _ = _sqrt_psd(root_a @ cov_b @ root_a, "covariance product")
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(inner).sum()
    return float(max(value, 0.0))


def pairwise_distances(x: np.ndarray, y: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distances from direct differences (no norm expansion)."""
    out = np.empty((x.shape[0], y.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s:s + chunk, None, :] - y[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
    return out


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from every row to its k-th nearest other row."""
    d = pairwise_distances(x, x)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _coverage(support: np.ndarray, probe: np.ndarray, k: int) -> float:
    radii = knn_radii(support, k)
    if not np.any(radii > 0):
        raise ValueError("support set holds only duplicate points")
    d = pairwise_distances(probe, support)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(real: FeatureSet, gen: FeatureSet, k: int = 3) -> tuple[float, float]:
    """Fraction of generated points inside the real k-NN manifold, and vice versa."""
    if real.dim != gen.dim:
        raise ValueError(f"feature dimensions differ: {real.dim} vs {gen.dim}")
    if k < 1 or k >= min(real.n, gen.n):
        raise ValueError(f"k={k} must satisfy 1 <= k < min(n_real, n_gen) = {min(real.n, gen.n)}")
    return (_coverage(real.features, gen.features, k),
            _coverage(gen.features, real.features, k))


def crop_with_margin(img, bbox: BBox, margin: int = 8, size: int = 64) -> np.ndarray:
    """Box grown by ``margin`` on every side (clipped), resized to ``size``."""
    img = np.asarray(img.data if isinstance(img, dc.Tensor) else img)[:3]
    _, h, w = img.shape
    r0, c0 = max(0, bbox.row - margin), max(0, bbox.col - margin)
    r1, c1 = min(h, bbox.bottom + margin), min(w, bbox.right + margin)
    return dc.resize_bilinear(img[:, r0:r1, c0:c1], size, size).data


def mean_seam_energy(composites, bboxes) -> float:
    return float(np.mean([seam_energy(c, b) for c, b in zip(composites, bboxes)]))


def report_csv(rows) -> str:
    """``rows`` of (metric, value, n, seed, config_hash) as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value", "n", "seed", "config_hash"])
    for metric, value, n, seed, h in rows:
        writer.writerow([metric, repr(float(value)), int(n), seed, h])
    return buf.getvalue()
