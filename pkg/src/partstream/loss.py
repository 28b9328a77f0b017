"""Triplet loss, batch construction, hard mining, and training schedules."""

import warnings
from dataclasses import dataclass

import numpy as np

DIST_FLOOR = 1e-12  # derivative-only guard against division by zero


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int

    def validate(self, dataset):
        a = dataset.by_id(self.anchor)
        p = dataset.by_id(self.positive)
        n = dataset.by_id(self.negative)
        if self.anchor == self.positive:
            raise ValueError("anchor and positive must be distinct images")
        if a.identity_id != p.identity_id:
            raise ValueError("anchor and positive must share an identity")
        if a.identity_id == n.identity_id:
            raise ValueError("negative must have a different identity")


@dataclass(frozen=True)
class Schedules:
    """Step-decayed learning rate and step-grown margin, both with the same period."""

    base_lr: float = 0.05
    lr_decay: float = 0.9
    margin_base: float = 0.1
    period: int = 10000

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")


def lr_at(n, s):
    """base_lr * decay^floor(n / period)."""
    if n < 0:
        raise ValueError("iteration must be >= 0")
    return s.base_lr * s.lr_decay ** (n // s.period)


def margin_at(n, s):
    """margin_base * ceil(n / period); n=0 clamps to margin_base."""
    if n < 0:
        raise ValueError("iteration must be >= 0")
    if n == 0:
        return s.margin_base
    return s.margin_base * ((n + s.period - 1) // s.period)


def triplet_loss(d_ap, d_an, margin):
    """Sum of hinge terms [d_ap - d_an + margin]_+ over the batch."""
    d_ap = np.asarray(d_ap, dtype=np.float64)
    d_an = np.asarray(d_an, dtype=np.float64)
    if d_ap.shape != d_an.shape or d_ap.size < 1:
        raise ValueError("need equal-length, nonempty distance arrays")
    if (d_ap < 0).any() or (d_an < 0).any():
        raise ValueError("distances must be nonnegative")
    return float(np.maximum(d_ap - d_an + margin, 0.0).sum())


def triplet_loss_grad(emb, triplets, margin, squared=False):
    """Loss and its gradient w.r.t. the embeddings.

    Subgradient 0 is used at the hinge kink and at coincident embeddings;
    otherwise the non-squared distance derivative divides by the distance
    (floored at DIST_FLOOR).
    """
    emb = np.asarray(emb, dtype=np.float64)
    demb = np.zeros_like(emb)
    loss = 0.0
    for a, p, n in triplets:
        ap = emb[a] - emb[p]
        an = emb[a] - emb[n]
        d_ap = float(np.sqrt(ap @ ap))
        d_an = float(np.sqrt(an @ an))
        if squared:
            d_ap, d_an = d_ap * d_ap, d_an * d_an
        hinge = d_ap - d_an + margin
        if hinge <= 0.0:
            continue
        loss += hinge
        if squared:
            demb[a] += 2.0 * (ap - an)
            demb[p] -= 2.0 * ap
            demb[n] += 2.0 * an
        else:
            if d_ap > 0.0:
                u = ap / max(d_ap, DIST_FLOOR)
                demb[a] += u
                demb[p] -= u
            if d_an > 0.0:
                v = an / max(d_an, DIST_FLOOR)
                demb[a] -= v
                demb[n] += v
    return loss, demb


def pairwise_distances(emb, squared=False):
    emb = np.asarray(emb, dtype=np.float64)
    d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=2)
    return d * d if squared else d


def make_batch(dataset, n_triplets, rng):
    """Sample N triplets and serialize them in interleaved order
    (anchor, positive, negative, anchor, ...).

    Anchor identity uniform over identities with >= 2 images, positive
    uniform among the anchor's other images, negative identity uniform over
    the remaining identities.
    """
    identities = dataset.identities
    pairable = [s for s in identities if len(dataset.images_of_identity(s)) >= 2]
    if not pairable:
        raise ValueError("no identity has >= 2 images")
    if len(identities) < 2:
        raise ValueError("need >= 2 identities to sample negatives")
    triplets = []
    order = []
    for _ in range(n_triplets):
        a_ident = pairable[rng.integers(len(pairable))]
        imgs = sorted(dataset.images_of_identity(a_ident))
        ai = int(rng.integers(len(imgs)))
        anchor = imgs[ai]
        rest = imgs[:ai] + imgs[ai + 1 :]
        positive = rest[rng.integers(len(rest))]
        others = [s for s in identities if s != a_ident]
        n_ident = others[rng.integers(len(others))]
        neg_imgs = sorted(dataset.images_of_identity(n_ident))
        negative = neg_imgs[rng.integers(len(neg_imgs))]
        t = Triplet(anchor, positive, negative)
        t.validate(dataset)
        triplets.append(t)
        order.extend((anchor, positive, negative))
    return triplets, order


def batch_hard_mine(embeddings, labels):
    """Hardest-positive / hardest-negative triples per anchor.

    positive = same-label sample at maximum distance, negative =
    different-label sample at minimum distance; ties go to the lowest
    index. Anchors whose label has no second sample are skipped.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    dist = pairwise_distances(emb)
    triples = []
    skipped = 0
    for a in range(emb.shape[0]):
        same = labels == labels[a]
        same[a] = False
        diff = labels != labels[a]
        if not same.any() or not diff.any():
            skipped += 1
            continue
        p = int(np.argmax(np.where(same, dist[a], -np.inf)))
        n = int(np.argmin(np.where(diff, dist[a], np.inf)))
        triples.append((a, p, n))
    if skipped:
        warnings.warn(f"batch_hard_mine skipped {skipped} anchors without a positive/negative")
    return triples
