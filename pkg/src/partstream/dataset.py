"""Labeled image sets: synthetic generation, manifest loading, eval splits.

Images carry hierarchical labels (model_id, identity_id); every identity
belongs to exactly one model. All images live on one canonical square frame
so that grid positions are comparable across images.
"""

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .regions import PartRegion

CANONICAL_PX = 128

DEFAULT_MODEL_CUE = PartRegion((0.15, 0.55, 0.85, 0.90))
DEFAULT_IDENTITY_CUE = PartRegion((0.30, 0.15, 0.70, 0.35))


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    model_id: int
    identity_id: int
    source_id: int

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be (H, W, 3), got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel intensities must be finite and in [0, 1]")
        px.setflags(write=False)


class Dataset:
    """Immutable collection of labeled images with a consistent hierarchy."""

    def __init__(self, images):
        images = list(images)
        if not images:
            raise ValueError("dataset is empty")
        seen = set()
        identity_model = {}
        shape = images[0].pixels.shape
        for im in images:
            if im.source_id in seen:
                raise ValueError(f"duplicate source_id {im.source_id}")
            seen.add(im.source_id)
            if im.pixels.shape != shape:
                raise ValueError("all images must share the canonical frame size")
            prev = identity_model.setdefault(im.identity_id, im.model_id)
            if prev != im.model_id:
                raise ValueError(f"inconsistent hierarchy for identity {im.identity_id}")
        self._images = images
        self._by_id = {im.source_id: im for im in images}
        self._identity_model = identity_model
        self._by_identity = {}
        self._by_model = {}
        for im in images:
            self._by_identity.setdefault(im.identity_id, []).append(im.source_id)
            self._by_model.setdefault(im.model_id, []).append(im.source_id)

    def __len__(self):
        return len(self._images)

    def __iter__(self):
        return iter(self._images)

    @property
    def images(self):
        return tuple(self._images)

    @property
    def image_size(self):
        return self._images[0].pixels.shape[0]

    @property
    def identities(self):
        return sorted(self._by_identity)

    @property
    def models(self):
        return sorted(self._by_model)

    @property
    def identity_model(self):
        return dict(self._identity_model)

    def by_id(self, source_id):
        return self._by_id[source_id]

    def images_of_identity(self, identity_id):
        return list(self._by_identity[identity_id])

    def images_of_model(self, model_id):
        return list(self._by_model[model_id])

    def subset(self, source_ids):
        return Dataset([self._by_id[i] for i in source_ids])


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic vehicle-like generator.

    Every model gets a distinct oriented texture planted in
    `model_cue_region`; every identity a distinct block decal in
    `identity_cue_region`. Per-image nuisance is additive Gaussian noise
    plus integer translation jitter of the planted content.
    """

    num_models: int = 4
    identities_per_model: int = 4
    images_per_identity: int = 4
    image_size: int = CANONICAL_PX
    model_cue_region: PartRegion = DEFAULT_MODEL_CUE
    identity_cue_region: PartRegion = DEFAULT_IDENTITY_CUE
    noise_sigma: float = 0.02
    jitter_px: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("num_models", "identities_per_model", "images_per_identity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size too small")
        if self.noise_sigma < 0 or self.jitter_px < 0:
            raise ValueError("noise_sigma and jitter_px must be >= 0")
        if self.model_cue_region.intersects(self.identity_cue_region):
            raise ValueError("model_cue_region and identity_cue_region must not overlap")


@dataclass(frozen=True)
class EvalSplit:
    """Disjoint probe/gallery image ids over a set of identities."""

    probe: tuple
    gallery: tuple
    identities: frozenset
    mode: str  # "retrieval" | "reid"

    def __post_init__(self):
        if set(self.probe) & set(self.gallery):
            raise ValueError("probe and gallery must be disjoint")


def _rect_to_px(region, size):
    x0, y0, x1, y1 = region.rect
    return (
        int(round(x0 * size)),
        int(round(y0 * size)),
        int(round(x1 * size)),
        int(round(y1 * size)),
    )


def _model_texture(h, w, rng):
    theta = rng.uniform(0.0, np.pi)
    wavelength = rng.uniform(6.0, 14.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    wave = np.sin(2.0 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / wavelength + phase)
    return 0.5 + 0.42 * wave


def _identity_decal(h, w, rng, block_px=4):
    by = -(-h // block_px)
    bx = -(-w // block_px)
    blocks = rng.uniform(0.02, 0.98, size=(by, bx))
    return np.kron(blocks, np.ones((block_px, block_px)))[:h, :w]


def _paint(canvas, patch, x0, y0):
    size = canvas.shape[0]
    h, w = patch.shape
    sy0, sx0 = max(0, y0), max(0, x0)
    sy1, sx1 = min(size, y0 + h), min(size, x0 + w)
    if sy1 <= sy0 or sx1 <= sx0:
        return
    sub = patch[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0]
    canvas[sy0:sy1, sx0:sx1, :] = sub[:, :, None]


def generate_synthetic(config):
    """Build a synthetic dataset; deterministic given config.rng_seed."""
    size = config.image_size
    mx0, my0, mx1, my1 = _rect_to_px(config.model_cue_region, size)
    ix0, iy0, ix1, iy1 = _rect_to_px(config.identity_cue_region, size)

    textures = [
        _model_texture(my1 - my0, mx1 - mx0, np.random.default_rng(np.random.SeedSequence([config.rng_seed, 1, m])))
        for m in range(config.num_models)
    ]
    n_ids = config.num_models * config.identities_per_model
    decals = [
        _identity_decal(iy1 - iy0, ix1 - ix0, np.random.default_rng(np.random.SeedSequence([config.rng_seed, 2, s])))
        for s in range(n_ids)
    ]

    images = []
    idx = 0
    for m in range(config.num_models):
        for j in range(config.identities_per_model):
            identity = m * config.identities_per_model + j
            for _ in range(config.images_per_identity):
                rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 3, idx]))
                if config.jitter_px > 0:
                    dx, dy = rng.integers(-config.jitter_px, config.jitter_px + 1, size=2)
                else:
                    dx, dy = 0, 0
                canvas = np.full((size, size, 3), 0.6, dtype=np.float64)
                _paint(canvas, textures[m], mx0 + dx, my0 + dy)
                _paint(canvas, decals[identity], ix0 + dx, iy0 + dy)
                if config.noise_sigma > 0:
                    canvas = canvas + rng.normal(0.0, config.noise_sigma, canvas.shape)
                np.clip(canvas, 0.0, 1.0, out=canvas)
                images.append(LabeledImage(canvas, m, identity, idx))
                idx += 1
    return Dataset(images)


def export_dataset(dataset, out_dir):
    """Write PNGs plus a manifest CSV; returns the manifest path."""
    from PIL import Image

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "model_id", "identity_id"])
        for im in dataset:
            name = f"images/img_{im.source_id:05d}.png"
            arr = np.round(im.pixels * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(out_dir, name))
            writer.writerow([name, im.model_id, im.identity_id])
    return manifest_path


def export_synthetic(config, out_dir):
    """Generate, export, and record planted ground truth; returns (dataset, manifest path)."""
    dataset = generate_synthetic(config)
    manifest_path = export_dataset(dataset, out_dir)
    gt = {
        "model_cue_region": list(config.model_cue_region.rect),
        "identity_cue_region": list(config.identity_cue_region.rect),
        "identity_model": {str(s): m for s, m in dataset.identity_model.items()},
        "config": {
            k: (list(v.rect) if isinstance(v, PartRegion) else v)
            for k, v in asdict(config).items()
        },
    }
    with open(os.path.join(out_dir, "ground_truth.json"), "w") as fh:
        json.dump(gt, fh, indent=2, sort_keys=True)
    return dataset, manifest_path


def _decode_image(path, size):
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[0] != size or arr.shape[1] != size:
        arr = _kernels.bilinear_crop(arr, (0.0, 0.0, 1.0, 1.0), size)
    return np.clip(arr, 0.0, 1.0)


def load_manifest(path, image_size=CANONICAL_PX):
    """Load a `path,model_id,identity_id` CSV manifest into a Dataset.

    Image paths are relative to the manifest's directory; images are resized
    to the canonical frame. Unreadable images are reported and skipped;
    an identity listed under two models is a hard error.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "model_id", "identity_id"} <= set(reader.fieldnames):
            raise ValueError("manifest must have header path,model_id,identity_id")
        rows = list(reader)
    if not rows:
        raise ValueError("empty manifest")

    identity_model = {}
    for row in rows:
        s, m = int(row["identity_id"]), int(row["model_id"])
        prev = identity_model.setdefault(s, m)
        if prev != m:
            raise ValueError(f"inconsistent hierarchy for identity {s}")

    images = []
    for source_id, row in enumerate(rows):
        img_path = os.path.join(base, row["path"])
        try:
            pixels = _decode_image(img_path, image_size)
        except Exception as exc:  # noqa: BLE001 - decoding failures are data issues
            warnings.warn(f"skipping unreadable image {row['path']}: {exc}")
            continue
        images.append(LabeledImage(pixels, int(row["model_id"]), int(row["identity_id"]), source_id))
    if not images:
        raise ValueError("no readable images in manifest")
    return Dataset(images)


def _sample_identity_split(dataset, num_identities, rng_seed):
    """Pick identities and one image per identity; shared by both split modes."""
    eligible = [s for s in dataset.identities if len(dataset.images_of_identity(s)) >= 2]
    excluded = [s for s in dataset.identities if s not in set(eligible)]
    if excluded:
        warnings.warn(f"excluding {len(excluded)} single-image identities from eval split")
    if num_identities > len(eligible):
        raise ValueError(
            f"requested {num_identities} identities but only {len(eligible)} have >= 2 images"
        )
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 11]))
    chosen_idx = rng.choice(len(eligible), size=num_identities, replace=False)
    chosen = [eligible[i] for i in sorted(chosen_idx)]
    singles, rest = [], []
    for s in chosen:
        ids = sorted(dataset.images_of_identity(s))
        pick = ids[rng.integers(len(ids))]
        singles.append(pick)
        rest.extend(i for i in ids if i != pick)
    return tuple(sorted(singles)), tuple(sorted(rest)), frozenset(chosen)


def build_retrieval_split(dataset, num_identities, rng_seed):
    """Probe = one random image per identity; gallery = all their other images."""
    singles, rest, identities = _sample_identity_split(dataset, num_identities, rng_seed)
    return EvalSplit(probe=singles, gallery=rest, identities=identities, mode="retrieval")


def build_reid_split(dataset, num_identities, rng_seed):
    """Probe/gallery exchange of the retrieval split: gallery holds one image
    per identity, probes are everything else."""
    singles, rest, identities = _sample_identity_split(dataset, num_identities, rng_seed)
    return EvalSplit(probe=rest, gallery=singles, identities=identities, mode="reid")
