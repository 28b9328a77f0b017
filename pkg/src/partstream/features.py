"""HOG descriptors, the dense patch grid, distances, and KNN image search.

The per-cell descriptor layout: orientation histograms are computed per
cell, block-normalized (L2-hys, clip 0.2), and each cell's final vector is
the average of its normalized copies over every block containing it. A
whole-image feature is the flattened cell grid; a patch feature is the
flattened window of cells under the patch.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels

_CACHE_MAGIC = b"PSFC"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class HogConfig:
    cell_px: int = 8
    block_cells: int = 2
    bins: int = 9
    signed: bool = False
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.cell_px < 1 or self.block_cells < 1:
            raise ValueError("cell_px and block_cells must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class PatchGridConfig:
    patch_px: int = 32
    stride_px: int = 8

    def __post_init__(self):
        if self.stride_px < 1:
            raise ValueError("stride_px must be >= 1")
        if self.patch_px < 1:
            raise ValueError("patch_px must be >= 1")


@dataclass(frozen=True)
class FeatureGrid:
    """Per-position patch descriptors F(x, y) on the dense grid."""

    feats: np.ndarray  # (ny, nx, d)
    patch_px: int
    stride_px: int
    image_px: int

    @property
    def grid_shape(self):
        return self.feats.shape[0], self.feats.shape[1]

    def at(self, x, y):
        ny, nx = self.grid_shape
        if not (0 <= x < nx and 0 <= y < ny):
            raise ValueError(f"position ({x}, {y}) off the {nx}x{ny} patch grid")
        return self.feats[y, x]


def hog_cells(image, cfg):
    """Block-normalized per-cell orientation histograms, (ncy, ncx, bins).

    Gradients are taken on the channel-mean grayscale image. Entries land
    in [0, 1] by construction (L2-hys with clip 0.2).
    """
    pixels = image.pixels if hasattr(image, "pixels") else image
    h, w = pixels.shape[0], pixels.shape[1]
    if h % cfg.cell_px or w % cfg.cell_px:
        raise ValueError(f"image size {h}x{w} not divisible by cell_px={cfg.cell_px}")
    gray = pixels.mean(axis=2) if pixels.ndim == 3 else pixels
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    hist = _kernels.cell_histograms(mag, ang, cfg.cell_px, cfg.bins, cfg.signed)
    return _block_normalize(hist, cfg)


def _block_normalize(hist, cfg):
    ncy, ncx, bins = hist.shape
    b = cfg.block_cells
    if b > ncy or b > ncx:
        raise ValueError(f"block_cells={b} exceeds the {ncx}x{ncy} cell grid")
    eps2 = cfg.epsilon * cfg.epsilon
    out = np.zeros_like(hist)
    counts = np.zeros((ncy, ncx), dtype=np.int64)
    for by in range(ncy - b + 1):
        for bx in range(ncx - b + 1):
            block = hist[by : by + b, bx : bx + b]
            v = block / np.sqrt(np.sum(block * block) + eps2)
            np.clip(v, None, 0.2, out=v)
            v /= np.sqrt(np.sum(v * v) + eps2)
            out[by : by + b, bx : bx + b] += v
            counts[by : by + b, bx : bx + b] += 1
    return out / counts[:, :, None]


def hog(image, cfg=HogConfig()):
    """Whole-image HOG descriptor: the flattened normalized cell grid."""
    return hog_cells(image, cfg).ravel()


def patch_grid(image, hog_cfg=HogConfig(), grid_cfg=PatchGridConfig()):
    """All patch features of one image as a FeatureGrid.

    patch_px and stride_px must be multiples of cell_px so patches align
    with whole cells and shifted images stay comparable position-by-position.
    """
    if grid_cfg.patch_px % hog_cfg.cell_px:
        raise ValueError("patch_px must be a multiple of cell_px")
    if grid_cfg.stride_px % hog_cfg.cell_px:
        raise ValueError("stride_px must be a multiple of cell_px")
    cells = hog_cells(image, hog_cfg)
    pixels = image.pixels if hasattr(image, "pixels") else image
    image_px = pixels.shape[0]
    pc = grid_cfg.patch_px // hog_cfg.cell_px
    sc = grid_cfg.stride_px // hog_cfg.cell_px
    windows = np.lib.stride_tricks.sliding_window_view(cells, (pc, pc), axis=(0, 1))
    windows = windows[::sc, ::sc]
    ny, nx = windows.shape[0], windows.shape[1]
    # window axes: (ny, nx, bins, pc, pc) -> concatenate cells row-major
    feats = windows.transpose(0, 1, 3, 4, 2).reshape(ny, nx, -1)
    return FeatureGrid(
        feats=np.ascontiguousarray(feats),
        patch_px=grid_cfg.patch_px,
        stride_px=grid_cfg.stride_px,
        image_px=image_px,
    )


def patch_feature(grid, pos):
    """Descriptor of the patch at grid position pos = (x, y)."""
    x, y = pos
    return grid.at(x, y)


def euclidean(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def config_hash(*cfgs):
    """Stable short hash of feature configs, used to key cached features."""
    payload = json.dumps([sorted(vars(c).items()) for c in cfgs], default=str)
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


class FeatureCache:
    """Optional on-disk cache of per-image feature blobs.

    Layout per file: magic, version (u16), float count (u32), then
    little-endian float32 data. Files are keyed by source_id + config hash.
    """

    def __init__(self, cache_dir, cfg_hash):
        self.cache_dir = cache_dir
        self.cfg_hash = cfg_hash
        os.makedirs(cache_dir, exist_ok=True)

    def _path(self, source_id):
        return os.path.join(self.cache_dir, f"{source_id:08d}_{self.cfg_hash}.bin")

    def get(self, source_id):
        path = self._path(source_id)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _CACHE_MAGIC:
                raise ValueError(f"bad cache magic in {path}")
            version, count = struct.unpack("<HI", fh.read(6))
            if version != _CACHE_VERSION:
                raise ValueError(f"unsupported cache version {version} in {path}")
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
        return data.astype(np.float64)

    def put(self, source_id, values):
        flat = np.asarray(values, dtype=np.float64).ravel()
        with open(self._path(source_id), "wb") as fh:
            fh.write(_CACHE_MAGIC)
            fh.write(struct.pack("<HI", _CACHE_VERSION, flat.size))
            fh.write(flat.astype("<f4").tobytes())


class FeatureExtractor:
    """Memoizing HOG/patch-grid extractor over a dataset.

    Keeps whole-image descriptors and feature grids keyed by source_id; an
    optional FeatureCache persists the whole-image descriptors across runs.
    """

    def __init__(self, hog_cfg=HogConfig(), grid_cfg=PatchGridConfig(), cache_dir=None):
        self.hog_cfg = hog_cfg
        self.grid_cfg = grid_cfg
        self._whole = {}
        self._grids = {}
        self._disk = None
        if cache_dir is not None:
            self._disk = FeatureCache(cache_dir, config_hash(hog_cfg))

    def whole(self, image):
        key = image.source_id
        if key not in self._whole:
            cached = self._disk.get(key) if self._disk else None
            if cached is None:
                cached = hog(image, self.hog_cfg)
                if self._disk:
                    self._disk.put(key, cached)
            self._whole[key] = cached
        return self._whole[key]

    def grid(self, image):
        key = image.source_id
        if key not in self._grids:
            self._grids[key] = patch_grid(image, self.hog_cfg, self.grid_cfg)
        return self._grids[key]


def knn(seed_id, dataset, k, extractor=None):
    """The k nearest images to the seed by whole-image HOG distance.

    The seed itself is excluded; ties break by ascending source_id; results
    come back in ascending distance order. Requires k < len(dataset).
    """
    if k >= len(dataset):
        raise ValueError(f"k={k} must be < dataset size {len(dataset)}")
    if k == 0:
        return []
    extractor = extractor or FeatureExtractor()
    seed_feat = extractor.whole(dataset.by_id(seed_id))
    entries = []
    for im in dataset:
        if im.source_id == seed_id:
            continue
        entries.append((euclidean(seed_feat, extractor.whole(im)), im.source_id))
    entries.sort()
    return [sid for _, sid in entries[:k]]
