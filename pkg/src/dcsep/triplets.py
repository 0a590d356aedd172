"""Anchor / positive / negative construction.

The positive is a random augmentation of the anchor.  The negative is the
first randomly drawn dataset image whose latent code lies farther from the
anchor's code than every augmentation of the anchor does::

    |z_a - z_n| > max_i |z_a - z_p^i|        (unsquared Euclidean norms)

The search is capped at ``max_tries`` draws; when nothing qualifies, the
farthest candidate seen is used and counted as a fallback.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import NegativeNotFound


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ranges for each random transform; ``None`` or 0 disables a transform."""

    rotation: float = 15.0
    scale: tuple = (0.9, 1.1)
    flip_prob: float = 0.5
    erase: tuple = (0.1, 0.25)
    brightness: float = 0.2
    contrast: tuple = (0.8, 1.2)
    augment_count: int = 10

    def __post_init__(self):
        if self.augment_count < 1:
            raise ValueError("augment_count must be >= 1")
        for name in ("scale", "erase", "contrast"):
            value = getattr(self, name)
            if value is not None:
                lo, hi = value
                if lo > hi:
                    raise ValueError(f"{name} range is inverted: {value}")
                object.__setattr__(self, name, (float(lo), float(hi)))
        if self.erase is not None and not 0 <= self.erase[0] <= self.erase[1] <= 1:
            raise ValueError("erase fractions must lie in [0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.rotation < 0 or self.brightness < 0:
            raise ValueError("rotation and brightness ranges must be non-negative")

    @classmethod
    def identity(cls, augment_count=10):
        return cls(rotation=0.0, scale=None, flip_prob=0.0, erase=None,
                   brightness=0.0, contrast=None, augment_count=augment_count)

    @classmethod
    def for_digits(cls, **overrides):
        """Defaults with horizontal flips off, since flips change digit identity."""
        return replace(cls(flip_prob=0.0), **overrides)

    def to_dict(self):
        return {"rotation": self.rotation,
                "scale": None if self.scale is None else list(self.scale),
                "flip_prob": self.flip_prob,
                "erase": None if self.erase is None else list(self.erase),
                "brightness": self.brightness,
                "contrast": None if self.contrast is None else list(self.contrast),
                "augment_count": self.augment_count}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("scale", "erase", "contrast"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _affine(image, angle_deg, zoom, fill):
    c, h, w = image.shape
    theta = np.deg2rad(angle_deg)
    # output -> input mapping: rotate by -theta and shrink by zoom about the centre
    cos, sin = np.cos(theta), np.sin(theta)
    matrix = np.array([[cos, sin], [-sin, cos]]) / zoom
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    out = np.empty_like(image)
    fills = np.broadcast_to(np.asarray(fill, dtype=float).reshape(-1), (c,))
    for ch in range(c):
        out[ch] = ndimage.affine_transform(image[ch], matrix, offset=offset, order=1,
                                           mode="constant", cval=float(fills[ch]))
    return out


def augment(image, policy, rng, fill=0.0):
    """Apply every enabled transform of ``policy`` to one C x H x W image.

    Order: rotation+scale, horizontal flip, brightness, contrast, erase.
    Pixels exposed by the geometric transform and the erased rectangle take
    ``fill`` (the dataset's normalized value of a black pixel).
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected C x H x W image, got shape {image.shape}")
    out = image.copy()
    c, h, w = out.shape

    angle = rng.uniform(-policy.rotation, policy.rotation) if policy.rotation > 0 else 0.0
    zoom = 1.0
    if policy.scale is not None and policy.scale != (1.0, 1.0):
        zoom = rng.uniform(*policy.scale)
    if angle != 0.0 or zoom != 1.0:
        out = _affine(out, angle, zoom, fill)

    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = out[:, :, ::-1].copy()

    if policy.brightness > 0:
        out = out + rng.uniform(-policy.brightness, policy.brightness)

    if policy.contrast is not None and policy.contrast != (1.0, 1.0):
        factor = rng.uniform(*policy.contrast)
        m = out.mean(axis=(1, 2), keepdims=True)
        out = (out - m) * factor + m

    if policy.erase is not None and policy.erase[1] > 0:
        frac = rng.uniform(*policy.erase)
        eh, ew = int(np.floor(frac * h)), int(np.floor(frac * w))
        if eh > 0 and ew > 0:
            top = rng.integers(0, h - eh + 1)
            left = rng.integers(0, w - ew + 1)
            fills = np.broadcast_to(np.asarray(fill, dtype=out.dtype).reshape(-1, 1, 1),
                                    (c, 1, 1))
            out[:, top:top + eh, left:left + ew] = fills
    return out.astype(image.dtype, copy=False)


def flip(image):
    """Deterministic horizontal flip."""
    return np.asarray(image)[..., ::-1].copy()


def make_positive(anchor, policy, rng, fill=0.0):
    """Return ``(positive, augments)``: ``augment_count`` augmentations and a
    uniformly chosen one of them."""
    augments = np.stack([augment(anchor, policy, rng, fill)
                         for _ in range(policy.augment_count)])
    choice = rng.integers(len(augments))
    return augments[choice], augments


def _images_of(dataset):
    return dataset.images if hasattr(dataset, "images") else np.asarray(dataset)


def _draw(rng, n, exclude, size):
    # uniform over range(n) without ``exclude``
    if exclude is None or exclude < 0:
        return rng.integers(0, n, size=size)
    picks = rng.integers(0, n - 1, size=size)
    return picks + (picks >= exclude)


@dataclass
class Selection:
    negative_index: int
    fallback: bool
    radius: float
    distance: float
    tries: int


def select_negatives(anchors, augment_sets, images, encoder, rng, max_tries=64,
                     anchor_indices=None, chunk=4):
    """Negative selection for several anchors at once.

    Candidate draws happen in rounds of ``chunk`` per unresolved anchor and
    are tested in draw order, so each anchor's outcome is the first
    qualifying draw exactly as a one-at-a-time loop would find.
    """
    if max_tries < 1:
        raise ValueError("max_tries must be >= 1")
    anchors = np.asarray(anchors)
    n_anchor = len(anchors)
    n = len(images)
    if anchor_indices is None:
        anchor_indices = [None] * n_anchor
    if n < 2 and any(i is not None for i in anchor_indices):
        raise ValueError("dataset needs at least two images")

    z_a = np.asarray(encoder(anchors), dtype=np.float64)
    n_aug = augment_sets.shape[1]
    z_p = np.asarray(encoder(augment_sets.reshape((-1,) + anchors.shape[1:])),
                     dtype=np.float64).reshape(n_anchor, n_aug, -1)
    radius = np.sqrt(((z_p - z_a[:, None, :]) ** 2).sum(-1)).max(axis=1)

    results = [None] * n_anchor
    tries = np.zeros(n_anchor, dtype=int)
    best = np.full(n_anchor, -1)
    best_d = np.full(n_anchor, -np.inf)
    pending = list(range(n_anchor))
    while pending:
        draws = []
        for a in pending:
            m = min(chunk, max_tries - tries[a])
            draws.append(_draw(rng, n, anchor_indices[a], m))
        flat = np.concatenate(draws)
        z_c = np.asarray(encoder(images[flat]), dtype=np.float64)
        pos = 0
        still = []
        for a, cand in zip(pending, draws):
            zc = z_c[pos:pos + len(cand)]
            pos += len(cand)
            dist = np.sqrt(((zc - z_a[a]) ** 2).sum(-1))
            for idx, d in zip(cand, dist):
                tries[a] += 1
                if d > best_d[a]:
                    best[a], best_d[a] = idx, d
                if d > radius[a]:
                    results[a] = Selection(int(idx), False, float(radius[a]),
                                           float(d), int(tries[a]))
                    break
            if results[a] is None:
                if tries[a] >= max_tries:
                    results[a] = Selection(int(best[a]), True, float(radius[a]),
                                           float(best_d[a]), int(tries[a]))
                else:
                    still.append(a)
        pending = still
    return results


def select_negative(anchor, augment_set, dataset, encoder, rng, max_tries=64,
                    anchor_index=None):
    """Index of a dataset image farther from the anchor than all its augments.

    Raises
    ------
    NegativeNotFound
        When ``max_tries`` draws all fail; ``best_index`` holds the farthest
        candidate.
    """
    sel = select_negatives(np.asarray(anchor)[None], np.asarray(augment_set)[None],
                           _images_of(dataset), encoder, rng, max_tries,
                           [anchor_index])[0]
    if sel.fallback:
        raise NegativeNotFound(sel.negative_index, sel.tries)
    return sel.negative_index


@dataclass
class Triplet:
    anchor_index: int
    positive: np.ndarray
    negative_index: int
    fallback: bool = False
    augments: np.ndarray = field(default=None, repr=False)


@dataclass
class TripletBatch:
    triplets: list
    fallbacks: int
    selections: list

    def __len__(self):
        return len(self.triplets)

    @property
    def anchor_indices(self):
        return np.array([t.anchor_index for t in self.triplets])

    @property
    def positives(self):
        return np.stack([t.positive for t in self.triplets])

    @property
    def negative_indices(self):
        return np.array([t.negative_index for t in self.triplets])


def make_triplet_batch(indices, dataset, policy, encoder, rng, max_tries=64,
                       keep_augments=False, fill=None):
    """One triplet per anchor index; fallbacks are counted, not raised."""
    images = _images_of(dataset)
    if fill is None:
        fill = dataset.fill_value() if hasattr(dataset, "fill_value") else 0.0
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= len(images)):
        raise IndexError("anchor index outside dataset")
    positives, aug_sets = [], []
    for i in indices:
        pos, augs = make_positive(images[i], policy, rng, fill)
        positives.append(pos)
        aug_sets.append(augs)
    aug_sets = np.stack(aug_sets)
    selections = select_negatives(images[indices], aug_sets, images, encoder, rng,
                                  max_tries, [int(i) for i in indices])
    triplets = [Triplet(int(i), positives[k], s.negative_index, s.fallback,
                        aug_sets[k] if keep_augments else None)
                for k, (i, s) in enumerate(zip(indices, selections))]
    return TripletBatch(triplets, sum(s.fallback for s in selections), selections)
