import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dcsep import DeepClusteringEstimator
from dcsep.data import synthetic_blobs


def small(**kw):
    params = dict(n_clusters=3, channels=(4, 8), latent_dim=4, batch_size=16,
                  pretrain_epochs=2, joint_epochs=1)
    params.update(kw)
    return DeepClusteringEstimator(**params)


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(3, 20, 8, seed=1)


@pytest.fixture(scope="module")
def fitted(blobs):
    return small().fit(blobs.images)


def test_params_round_trip_and_clone():
    est = small(alpha=0.5)
    assert est.get_params()["alpha"] == 0.5
    est.set_params(margin=0.3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "params_")


def test_fit_attributes(fitted, blobs):
    assert fitted.cluster_centers_.shape == (3, 4)
    assert fitted.labels_.shape == (60,)
    assert fitted.n_features_in_ == 64
    assert len(fitted.history_) == 1


def test_transform_predict_proba_score(fitted, blobs):
    z = fitted.transform(blobs.images)
    q = fitted.predict_proba(blobs.images)
    assert z.shape == (60, 4)
    np.testing.assert_allclose(q.sum(1), 1.0, atol=1e-6)
    assert np.array_equal(fitted.predict(blobs.images), q.argmax(1))
    assert np.array_equal(fitted.predict(blobs.images), fitted.labels_)
    assert 0.0 <= fitted.score(blobs.images, blobs.labels) <= 1.0


def test_input_layouts_agree(fitted, blobs):
    four = fitted.predict(blobs.images)
    three = fitted.predict(blobs.images[:, 0])
    assert np.array_equal(four, three)
    flat = small(image_shape=(1, 8, 8))
    flat.__dict__.update({k: v for k, v in fitted.__dict__.items() if k.endswith("_")})
    assert np.array_equal(flat.predict(blobs.images.reshape(60, -1)), four)


def test_same_seed_same_labels(blobs):
    a = small(random_state=3).fit_predict(blobs.images)
    b = small(random_state=3).fit_predict(blobs.images)
    assert np.array_equal(a, b)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((2, 1, 8, 8)))


def test_validation_errors(fitted):
    with pytest.raises(ValueError, match="image_shape"):
        small().fit(np.zeros((4, 64)))
    with pytest.raises(ValueError):
        small().fit(np.full((4, 1, 8, 8), np.nan))
    with pytest.raises(ValueError, match="shape"):
        fitted.predict(np.zeros((2, 1, 9, 9)))
    with pytest.raises(ValueError):
        small().fit(np.zeros((1, 1, 8, 8)))
