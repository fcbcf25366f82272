"""Feature-to-pixel layout (DeepInsight-style) and row rendering.

Features are embedded as points in 2-D by similarity across training rows,
the cloud is rotated onto its minimum-area bounding rectangle, the rectangle
is cut into a ``grid_h x grid_w`` lattice and every feature lands in one cell.
A row is rendered by writing each feature's min-max normalised value into its
cell, averaging when several features share one.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .dataio import LeakageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PixelMap:
    grid_h: int
    grid_w: int
    cells: np.ndarray  # (n_features,) flat cell index row * grid_w + col
    embedding: np.ndarray  # (n_features, 2) projected feature coordinates
    rotation: float  # radians applied before discretisation
    feat_min: np.ndarray
    feat_max: np.ndarray
    projector: str
    seed: int
    fit_split: str = "train"

    @property
    def n_features(self) -> int:
        return len(self.cells)

    @property
    def assignment(self) -> list[tuple[int, int]]:
        return [(int(c) // self.grid_w, int(c) % self.grid_w) for c in self.cells]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.cells, minlength=self.grid_h * self.grid_w)

    def to_dict(self) -> dict:
        return {
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "cells": self.cells.tolist(),
            "embedding": self.embedding.tolist(),
            "rotation": self.rotation,
            "feat_min": self.feat_min.tolist(),
            "feat_max": self.feat_max.tolist(),
            "projector": self.projector,
            "seed": self.seed,
            "fit_split": self.fit_split,
        }

    @classmethod
    def from_dict(cls, d) -> "PixelMap":
        return cls(
            grid_h=int(d["grid_h"]),
            grid_w=int(d["grid_w"]),
            cells=np.asarray(d["cells"], dtype=np.int64),
            embedding=np.asarray(d["embedding"], dtype=float).reshape(-1, 2),
            rotation=float(d["rotation"]),
            feat_min=np.asarray(d["feat_min"], dtype=float),
            feat_max=np.asarray(d["feat_max"], dtype=float),
            projector=d["projector"],
            seed=int(d["seed"]),
            fit_split=d["fit_split"],
        )


def _project_pca(points: np.ndarray) -> np.ndarray:
    centred = points - points.mean(axis=0)
    u, s, _ = np.linalg.svd(centred, full_matrices=False)
    coords = u[:, :2] * s[:2]
    # fix the SVD sign ambiguity so refits are reproducible
    signs = np.sign(coords[np.abs(coords).argmax(axis=0), [0, 1]])
    signs[signs == 0] = 1.0
    coords = coords * signs
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def _project_tsne(points: np.ndarray, seed: int) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(points)
    perplexity = float(min(30.0, max(1.0, (n - 1) / 3.0)))
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed, method="exact")
    return tsne.fit_transform(points)


def min_area_rotation(points: np.ndarray) -> float:
    """Angle that rotates ``points`` onto their minimum-area bounding rectangle."""
    if len(points) < 3:
        if len(points) == 2:
            dx, dy = points[1] - points[0]
            return float(-np.arctan2(dy, dx))
        return 0.0
    try:
        hull = ConvexHull(points)
    except QhullError:
        # collinear cloud: align its principal direction with the x axis
        centred = points - points.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        return float(-np.arctan2(vt[0, 1], vt[0, 0]))
    verts = points[hull.vertices]
    edges = np.roll(verts, -1, axis=0) - verts
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    best_area, best_angle = np.inf, 0.0
    for theta in angles:
        rotated = _rotate(verts, -theta)
        area = np.ptp(rotated[:, 0]) * np.ptp(rotated[:, 1])
        if area < best_area * (1.0 - 1e-12):
            best_area, best_angle = area, float(-theta)
    return best_angle


def _rotate(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def assign_cells(points: np.ndarray, grid: tuple[int, int], rotation: float | None = None) -> tuple[np.ndarray, float]:
    """Discretise a 2-D cloud onto a grid after minimum-area-rectangle rotation."""
    grid_h, grid_w = grid
    if rotation is None:
        rotation = min_area_rotation(points)
    rotated = _rotate(points, rotation)
    lo, hi = rotated.min(axis=0), rotated.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    unit = (rotated - lo) / span
    col = np.minimum((unit[:, 0] * grid_w).astype(np.int64), grid_w - 1)
    row = np.minimum(((1.0 - unit[:, 1]) * grid_h).astype(np.int64), grid_h - 1)
    return row * grid_w + col, rotation


def _fallback_cells(n_features: int, grid: tuple[int, int]) -> np.ndarray:
    return np.arange(n_features, dtype=np.int64) % (grid[0] * grid[1])


def fit_pixel_map(
    train: np.ndarray,
    grid: tuple[int, int] = (10, 10),
    seed: int = 0,
    projector: str = "tsne",
    split_name: str = "train",
) -> PixelMap:
    """Fit the feature layout on the (encoded) training matrix."""
    if split_name != "train":
        raise LeakageError(f"pixel map may only be fitted on the train split, not {split_name!r}")
    if projector not in ("tsne", "pca"):
        raise ValueError(f"projector must be 'tsne' or 'pca', got {projector!r}")
    train = np.asarray(train, dtype=float)
    if train.ndim != 2 or train.shape[1] < 2:
        raise ValueError(f"need a 2-D matrix with at least 2 features, got shape {train.shape}")
    n_features = train.shape[1]
    feat_min, feat_max = train.min(axis=0), train.max(axis=0)

    # features are the points, rows the dimensions; z-score each feature so
    # Euclidean proximity tracks correlation
    points = train.T
    std = points.std(axis=1, keepdims=True)
    informative = std[:, 0] > 0
    points = np.where(std > 0, (points - points.mean(axis=1, keepdims=True)) / np.where(std > 0, std, 1.0), 0.0)

    degenerate = informative.sum() < 2 or np.unique(points, axis=0).shape[0] < 2
    embedding = np.zeros((n_features, 2))
    rotation = 0.0
    if not degenerate:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", FutureWarning)
                embedding = _project_pca(points) if projector == "pca" else _project_tsne(points, seed)
            degenerate = not np.all(np.isfinite(embedding)) or np.ptp(embedding, axis=0).max() == 0
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("projection failed (%s)", exc)
            degenerate = True
    if degenerate:
        log.warning("degenerate feature projection; falling back to schema-order grid layout")
        cells = _fallback_cells(n_features, grid)
    else:
        cells, rotation = assign_cells(embedding, grid)
    return PixelMap(
        grid_h=grid[0], grid_w=grid[1], cells=cells, embedding=embedding, rotation=float(rotation),
        feat_min=feat_min, feat_max=feat_max, projector=projector, seed=seed, fit_split=split_name,
    )


def normalise(pm: PixelMap, encoded: np.ndarray) -> np.ndarray:
    span = pm.feat_max - pm.feat_min
    scaled = np.where(span > 0, (encoded - pm.feat_min) / np.where(span > 0, span, 1.0), 0.0)
    return np.clip(scaled, 0.0, 1.0)


def render_batch(pm: PixelMap, encoded: np.ndarray) -> np.ndarray:
    """Render rows as ``(n, grid_h, grid_w)`` float images in [0, 1]."""
    encoded = np.asarray(encoded, dtype=float)
    if encoded.ndim != 2 or encoded.shape[1] != pm.n_features:
        raise ValueError(f"expected rows of {pm.n_features} features, got shape {encoded.shape}")
    values = normalise(pm, encoded)
    n_cells = pm.grid_h * pm.grid_w
    sums = np.zeros((len(encoded), n_cells))
    # column-at-a-time accumulation keeps each row's arithmetic independent of batch size
    for f, cell in enumerate(pm.cells):
        sums[:, cell] += values[:, f]
    counts = pm.counts
    images = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return np.clip(images, 0.0, 1.0).reshape(len(encoded), pm.grid_h, pm.grid_w)


def render(pm: PixelMap, row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    if row.ndim != 1:
        raise ValueError("render expects a single 1-D row")
    return render_batch(pm, row[None, :])[0]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write one grayscale image as binary 8-bit PGM (P5)."""
    pixels = to_uint8(np.asarray(image))
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    body = data[pos + 1: pos + 1 + w * h]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(float) / maxval
