"""Discriminative part mining.

Patches on the dense grid are scored by the ratio of between-class to
within-class feature distances, in three variants:

- "multiclass": sum of class-mean-to-global-mean distances over the sum of
  member-to-class-mean distances, across all classes in the neighbor set.
- "model": distance from the seed's model-class mean to the nearest other
  model-class mean, over the largest same-model distance to the seed.
- "identity": the same contrast computed over identities within the seed's
  model class.

The top-scoring patches are merged into a minimum bounding rectangle; the
canonical Part_M / Part_I regions are coordinate-wise medians over many
mined seeds and get applied to every image as fixed crops.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .features import FeatureExtractor, knn
from .regions import PartRegion

VARIANTS = ("multiclass", "model", "identity")


@dataclass(frozen=True)
class MiningConfig:
    neighbors_m: int = 50
    top_n: int = 6
    epsilon: float = 1e-6
    seeds_per_class: int = 16
    # scope of the intra-class maximum in the seed-contrast score: the KNN
    # neighbor set only, or every same-class image in the mining pool
    intra_scope: str = "neighbors"

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.intra_scope not in ("neighbors", "pool"):
            raise ValueError("intra_scope must be 'neighbors' or 'pool'")


@dataclass(frozen=True)
class ScoreMap:
    """d(x, y) over the patch grid for one seed image."""

    scores: np.ndarray  # (ny, nx)
    saturated: np.ndarray  # (ny, nx) bool, True where the denominator hit the floor
    variant: str
    seed_id: int
    neighbor_ids: tuple
    patch_px: int
    stride_px: int
    image_px: int

    def __post_init__(self):
        if not np.isfinite(self.scores).all() or (self.scores < 0).any():
            raise ValueError("scores must be finite and nonnegative")


def _class_means(stack, labels):
    classes, inv = np.unique(labels, return_inverse=True)
    onehot = np.zeros((stack.shape[0], classes.size))
    onehot[np.arange(stack.shape[0]), inv] = 1.0
    means = np.einsum("nk,npd->kpd", onehot, stack) / onehot.sum(axis=0)[:, None, None]
    return classes, inv, means


def _floored_ratio(num, den, eps):
    saturated = den < eps
    return num / np.maximum(den, eps), saturated


def multiclass_scores(stack, labels, eps=1e-6):
    """All-class contrast ratio at every position.

    stack: (n, P, d) features of the seed+neighbor images at P positions;
    labels: (n,) class labels. Returns (scores (P,), saturated (P,)).
    """
    stack = np.asarray(stack, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inv, means = _class_means(stack, labels)
    if classes.size < 2:
        raise ValueError("no inter-class contrast")
    gmean = stack.mean(axis=0)
    num = np.linalg.norm(means - gmean[None], axis=2).sum(axis=0)
    den = np.linalg.norm(stack - means[inv], axis=2).sum(axis=0)
    return _floored_ratio(num, den, eps)


def seed_contrast_scores(stack, labels, seed_index, eps=1e-6, extra_intra=None):
    """Seed-centric contrast ratio at every position.

    Numerator: distance from the seed's class mean to the nearest other
    class mean. Denominator: largest distance from the seed to a same-class
    member (optionally extended by `extra_intra`, an (m, P, d) stack of
    additional same-class features). Returns (scores, saturated).
    """
    stack = np.asarray(stack, dtype=np.float64)
    labels = np.asarray(labels)
    c0 = labels[seed_index]
    classes, _, means = _class_means(stack, labels)
    if classes.size < 2:
        raise ValueError("no inter-class contrast")
    same = (labels == c0)
    if same.sum() < 2:
        raise ValueError("insufficient intra-class samples")
    c0_pos = int(np.nonzero(classes == c0)[0][0])
    other = means[np.arange(classes.size) != c0_pos]
    num = np.linalg.norm(other - means[c0_pos][None], axis=2).min(axis=0)
    intra = stack[same]
    if extra_intra is not None and len(extra_intra):
        intra = np.concatenate([intra, np.asarray(extra_intra, dtype=np.float64)], axis=0)
    den = np.linalg.norm(intra - stack[seed_index][None], axis=2).max(axis=0)
    return _floored_ratio(num, den, eps)


def _position_stack(images, extractor, pos=None):
    grids = [extractor.grid(im) for im in images]
    if pos is not None:
        x, y = pos
        return np.stack([g.at(x, y)[None, :] for g in grids]), grids[0]
    ny, nx = grids[0].grid_shape
    d = grids[0].feats.shape[2]
    return np.stack([g.feats.reshape(ny * nx, d) for g in grids]), grids[0]


def score_multiclass(seed_id, neighbor_ids, pos, dataset, extractor, eps=1e-6):
    """All-class contrast at one grid position, classes = model labels."""
    images = [dataset.by_id(i) for i in (seed_id, *neighbor_ids)]
    stack, _ = _position_stack(images, extractor, pos)
    labels = [im.model_id for im in images]
    scores, _ = multiclass_scores(stack, labels, eps)
    return float(scores[0])


def score_model(seed_id, neighbor_ids, pos, dataset, extractor, eps=1e-6):
    """Seed-model contrast at one grid position."""
    images = [dataset.by_id(i) for i in (seed_id, *neighbor_ids)]
    stack, _ = _position_stack(images, extractor, pos)
    labels = [im.model_id for im in images]
    scores, _ = seed_contrast_scores(stack, labels, 0, eps)
    return float(scores[0])


def score_identity(seed_id, neighbor_ids, pos, dataset, extractor, eps=1e-6):
    """Seed-identity contrast at one position; neighbors must share the
    seed's model class."""
    seed = dataset.by_id(seed_id)
    images = [seed] + [dataset.by_id(i) for i in neighbor_ids]
    if any(im.model_id != seed.model_id for im in images):
        raise ValueError("identity scoring requires neighbors from the seed's model class")
    stack, _ = _position_stack(images, extractor, pos)
    labels = [im.identity_id for im in images]
    scores, _ = seed_contrast_scores(stack, labels, 0, eps)
    return float(scores[0])


def score_map(seed_id, dataset, cfg, variant, extractor=None):
    """Score the full patch grid for one seed image."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    extractor = extractor or FeatureExtractor()
    seed = dataset.by_id(seed_id)
    if variant == "identity":
        pool = dataset.subset(dataset.images_of_model(seed.model_id))
    else:
        pool = dataset
    k = min(cfg.neighbors_m, len(pool) - 1)
    if k < 1:
        raise ValueError("not enough images to collect neighbors")
    neighbor_ids = knn(seed_id, pool, k, extractor)
    images = [seed] + [pool.by_id(i) for i in neighbor_ids]
    stack, grid0 = _position_stack(images, extractor)

    if variant == "multiclass":
        labels = [im.model_id for im in images]
        scores, sat = multiclass_scores(stack, labels, cfg.epsilon)
    else:
        key = "model_id" if variant == "model" else "identity_id"
        labels = [getattr(im, key) for im in images]
        extra = None
        if cfg.intra_scope == "pool":
            in_stack = {im.source_id for im in images}
            rest = [
                pool.by_id(i)
                for i in sorted(
                    set(pool.images_of_model(seed.model_id) if variant == "model"
                        else pool.images_of_identity(seed.identity_id))
                    - in_stack
                )
            ]
            if rest:
                extra, _ = _position_stack(rest, extractor)
        scores, sat = seed_contrast_scores(stack, labels, 0, cfg.epsilon, extra_intra=extra)

    ny, nx = grid0.grid_shape
    return ScoreMap(
        scores=scores.reshape(ny, nx),
        saturated=sat.reshape(ny, nx),
        variant=variant,
        seed_id=seed_id,
        neighbor_ids=tuple(neighbor_ids),
        patch_px=grid0.patch_px,
        stride_px=grid0.stride_px,
        image_px=grid0.image_px,
    )


def top_positions(smap, top_n):
    """Best-scoring grid positions, ties broken by ascending (y, x)."""
    ny, nx = smap.scores.shape
    ys, xs = np.divmod(np.arange(ny * nx), nx)
    order = np.lexsort((xs, ys, -smap.scores.ravel()))
    return [(int(xs[i]), int(ys[i])) for i in order[:top_n]]


def bounding_rect(positions, patch_px, stride_px, image_px):
    """Minimum normalized rectangle covering the patches at `positions`."""
    xs = np.array([p[0] for p in positions])
    ys = np.array([p[1] for p in positions])
    x0 = xs.min() * stride_px / image_px
    y0 = ys.min() * stride_px / image_px
    x1 = (xs.max() * stride_px + patch_px) / image_px
    y1 = (ys.max() * stride_px + patch_px) / image_px
    return (float(x0), float(y0), float(x1), float(y1))


def mine_part(seed_id, dataset, cfg, variant, extractor=None):
    """Mine one seed: score the grid, take the top patches, return their MBR."""
    if variant not in ("model", "identity"):
        raise ValueError("mine_part variant must be 'model' or 'identity'")
    extractor = extractor or FeatureExtractor()
    smap = score_map(seed_id, dataset, cfg, variant, extractor)
    pos = top_positions(smap, cfg.top_n)
    rect = bounding_rect(pos, smap.patch_px, smap.stride_px, smap.image_px)
    role = "part_m" if variant == "model" else "part_i"
    return PartRegion(rect=rect, role=role, provenance=(seed_id,))


def canonical_parts(dataset, cfg, extractor=None, rng_seed=0):
    """Mine seeds_per_class random seeds per variant and take the
    coordinate-wise median rectangle; deterministic given rng_seed."""
    extractor = extractor or FeatureExtractor()
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 23]))
    out = {}
    for variant, role in (("model", "part_m"), ("identity", "part_i")):
        all_ids = sorted(im.source_id for im in dataset)
        n_seeds = min(cfg.seeds_per_class, len(all_ids))
        seed_ids = [all_ids[i] for i in rng.choice(len(all_ids), size=n_seeds, replace=False)]
        rects, used = [], []
        for sid in seed_ids:
            try:
                region = mine_part(sid, dataset, cfg, variant, extractor)
            except ValueError as exc:
                warnings.warn(f"seed {sid} skipped for {role}: {exc}")
                continue
            rects.append(region.rect)
            used.append(sid)
        if not rects:
            raise ValueError(f"all seeds failed preconditions for {role}")
        med = np.median(np.asarray(rects), axis=0)
        out[role] = PartRegion(rect=tuple(med), role=role, provenance=tuple(used))
    return out["part_m"], out["part_i"]


def crop_part(image, region, out_px):
    """Bilinear crop-and-resize of a normalized region to out_px x out_px."""
    pixels = image.pixels if hasattr(image, "pixels") else image
    return _kernels.bilinear_crop(pixels, region.rect, out_px)


def save_parts(part_m, part_i, path):
    payload = {
        "part_m": list(part_m.rect),
        "part_i": list(part_i.rect),
        "provenance": {
            "part_m": list(part_m.provenance),
            "part_i": list(part_i.provenance),
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_parts(path):
    with open(path) as fh:
        payload = json.load(fh)
    prov = payload.get("provenance", {})
    part_m = PartRegion(tuple(payload["part_m"]), role="part_m", provenance=tuple(prov.get("part_m", ())))
    part_i = PartRegion(tuple(payload["part_i"]), role="part_i", provenance=tuple(prov.get("part_i", ())))
    return part_m, part_i
