import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from igd import IGD, DeepSVDD, check_images
from igd.datasets import synthetic_blobs

FAST = dict(epochs=1, batch_size=4, lr=1e-3, latent_dim=8, width=4)


@pytest.fixture(scope="module")
def data():
    s = synthetic_blobs(10, 3, 3, seed=4)
    return s.images[s.labels == 0], s.images[s.labels == 1]


def test_check_images_shapes_and_errors():
    assert check_images(np.zeros((2, 16, 16))).shape == (2, 1, 16, 16)
    assert check_images(np.zeros((2, 16, 16, 3))).shape == (2, 3, 16, 16)
    for bad, msg in [(np.zeros((16, 16)), "expected"), (np.zeros((1, 16, 16, 5)), "expected"),
                     (np.zeros((0, 16, 16)), "at least one"), (np.full((1, 16, 16), 2.0), r"\[0, 1\]"),
                     (np.full((1, 16, 16), np.nan), "NaN"), (np.array([["a"]]), "numeric")]:
        with pytest.raises(ValueError, match=msg):
            check_images(bad)
    with pytest.raises(ValueError, match="3-channel"):
        check_images(np.zeros((1, 16, 16)), n_channels=3)
    with pytest.raises(ValueError, match="fitted on"):
        check_images(np.zeros((1, 16, 16)), n_channels=1, resolution=(32, 32))


def test_igd_outlier_api(data):
    normal, anomalous = data
    model = IGD(**FAST, contamination=0.1).fit(normal)
    X = np.concatenate([normal, anomalous])
    raw = model.anomaly_score(X)
    assert raw.shape == (len(X),)
    np.testing.assert_array_equal(model.score_samples(X), -raw)
    np.testing.assert_allclose(model.decision_function(X), -raw - model.offset_)
    pred = model.predict(X)
    assert set(np.unique(pred)) <= {-1, 1}
    assert (model.predict(normal) == -1).mean() <= 0.2
    assert model.transform(X).shape == (len(X), 8)
    assert model.localize(anomalous[:2]).shape == (2, 32, 32)
    assert model.n_channels_ == 1 and model.resolution_ == (32, 32)


def test_igd_is_reproducible_and_clonable(data):
    normal, _ = data
    a = IGD(**FAST).fit(normal).anomaly_score(normal)
    b = clone(IGD(**FAST)).fit(normal).anomaly_score(normal)
    np.testing.assert_array_equal(a, b)
    assert IGD(**FAST).get_params()["latent_dim"] == 8


def test_igd_with_local_model(data):
    normal, anomalous = data
    model = IGD(**FAST, use_local=True, local_stride=(8, 8)).fit(normal)
    assert model.local_model_ is not None
    assert np.isfinite(model.anomaly_score(anomalous)).all()


def test_dsvdd_estimators(data):
    normal, anomalous = data
    plain = DeepSVDD(**FAST).fit(normal)
    assert plain.center_.shape == (8,)
    assert (plain.anomaly_score(anomalous) >= 0).all()
    rec = DeepSVDD(**FAST, reconstruction=True).fit(normal)
    assert rec.global_model_.network.decoder is not None


def test_errors(data):
    normal, _ = data
    with pytest.raises(NotFittedError):
        IGD(**FAST).predict(normal)
    with pytest.raises(ValueError, match="contamination"):
        IGD(**FAST, contamination=0.6).fit(normal)
    model = IGD(**FAST).fit(normal)
    with pytest.raises(ValueError, match="fitted on"):
        model.predict(np.zeros((1, 16, 16)))
