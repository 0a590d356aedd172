import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcsep.data import normalize, synthetic_blobs
from dcsep.errors import NegativeNotFound
from dcsep.triplets import (AugmentationPolicy, augment, flip, make_positive,
                            make_triplet_batch, select_negative)


def flat(images):
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def erase_only(frac):
    return AugmentationPolicy(rotation=0.0, scale=None, flip_prob=0.0, erase=(frac, frac),
                              brightness=0.0, contrast=None)


def test_identity_policy_is_identity(rng):
    img = rng.normal(size=(1, 6, 6)).astype(np.float32)
    assert np.array_equal(augment(img, AugmentationPolicy.identity(), rng), img)


def test_forced_flip_twice_restores(rng):
    img = rng.normal(size=(2, 4, 5))
    policy = AugmentationPolicy(rotation=0.0, scale=None, flip_prob=1.0, erase=None,
                                brightness=0.0, contrast=None)
    once = augment(img, policy, rng)
    assert np.array_equal(once, img[:, :, ::-1])
    assert np.array_equal(augment(once, policy, rng), img)
    assert np.array_equal(flip(flip(img)), img)


@pytest.mark.parametrize("frac,h,w", [(0.25, 8, 8), (0.3, 10, 7), (0.5, 5, 9)])
def test_erase_sets_floor_area_to_fill(frac, h, w):
    img = np.full((1, h, w), 5.0)
    out = augment(img, erase_only(frac), np.random.default_rng(0), fill=-1.0)
    assert np.sum(out != img) == int(np.floor(frac * h)) * int(np.floor(frac * w))
    assert set(out[out != img].tolist()) == {-1.0}


def test_digit_policy_disables_flip():
    assert AugmentationPolicy.for_digits().flip_prob == 0.0
    assert AugmentationPolicy().flip_prob == 0.5


def test_policy_round_trips_through_dict():
    p = AugmentationPolicy(rotation=5.0, erase=None, augment_count=3)
    assert AugmentationPolicy.from_dict(p.to_dict()) == p


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(augment_count=0)
    with pytest.raises(ValueError):
        AugmentationPolicy(scale=(1.2, 0.8))


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(3, 12), st.integers(3, 12))
def test_augment_keeps_shape_and_finiteness(seed, c, h, w):
    r = np.random.default_rng(seed)
    img = r.normal(size=(c, h, w)).astype(np.float32)
    out = augment(img, AugmentationPolicy(), r, fill=-0.4)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert np.isfinite(out).all()


def test_make_positive_returns_full_augment_set(rng):
    img = rng.normal(size=(1, 8, 8))
    pos, augs = make_positive(img, AugmentationPolicy(augment_count=10), rng)
    assert augs.shape == (10, 1, 8, 8)
    assert any(np.array_equal(pos, a) for a in augs)


def test_make_positive_identity_and_determinism(rng):
    img = rng.normal(size=(1, 8, 8))
    pos, _ = make_positive(img, AugmentationPolicy.identity(), rng)
    assert np.array_equal(pos, img)
    a = make_positive(img, AugmentationPolicy(), np.random.default_rng(3))
    b = make_positive(img, AugmentationPolicy(), np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_far_image_selected():
    images = np.stack([np.zeros((1, 4, 4)), np.full((1, 4, 4), 10.0)])
    anchor = images[0]
    augs = anchor[None] + np.random.default_rng(0).normal(0, 0.01, size=(10, 1, 4, 4))
    idx = select_negative(anchor, augs, images, flat, np.random.default_rng(1), anchor_index=0)
    assert idx == 1


def test_copies_of_anchor_exhaust_tries():
    images = np.zeros((5, 1, 4, 4))
    augs = images[:3] + 0.1
    with pytest.raises(NegativeNotFound) as info:
        select_negative(images[0], augs, images, flat, np.random.default_rng(0),
                        max_tries=7, anchor_index=0)
    assert info.value.tries == 7
    assert info.value.best_index in range(1, 5)


def test_accepted_negatives_satisfy_the_predicate():
    # random images, random linear encoders: re-check every accepted index
    rng = np.random.default_rng(0)
    violations = accepted = 0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        images = rng.normal(size=(n, 1, 3, 3))
        w = rng.normal(size=(9, int(rng.integers(1, 5))))

        def encoder(x, w=w):
            return flat(x) @ w

        a = int(rng.integers(n))
        augs = images[a][None] + rng.normal(0, rng.uniform(0.01, 1.0), size=(4, 1, 3, 3))
        try:
            idx = select_negative(images[a], augs, images, encoder, rng, max_tries=8,
                                  anchor_index=a)
        except NegativeNotFound:
            continue
        accepted += 1
        za = encoder(images[a][None])[0]
        radius = max(np.linalg.norm(encoder(augs) - za, axis=1))
        if not (np.linalg.norm(encoder(images[idx][None])[0] - za) > radius and idx != a):
            violations += 1
    assert accepted > 100
    assert violations == 0


def blob_batch(seed=0, indices=range(8), policy=None):
    ds = normalize(synthetic_blobs(3, 20, 8, seed=0))
    policy = policy or AugmentationPolicy.for_digits()
    return ds, make_triplet_batch(np.asarray(indices), ds, policy, flat,
                                  np.random.default_rng(seed))


def test_batch_of_eight():
    ds, batch = blob_batch()
    assert len(batch) == 8
    for t in batch.triplets:
        assert t.negative_index != t.anchor_index
        assert t.positive.shape == ds.images[0].shape
    assert batch.fallbacks == 0


def test_triplet_batch_replays_bit_exact():
    _, a = blob_batch(seed=4)
    _, b = blob_batch(seed=4)
    assert np.array_equal(a.negative_indices, b.negative_indices)
    assert a.positives.tobytes() == b.positives.tobytes()


def test_anchor_index_out_of_range():
    with pytest.raises(IndexError):
        blob_batch(indices=[0, 60])
