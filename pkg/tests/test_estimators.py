import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from penletters.dataset import synth_generate
from penletters.estimators import CNNLSTMClassifier, FourierResampler, PenPreprocessor, SignedLogScaler
from penletters.preprocessing import PreprocConfig, fourier_resample, preprocess, signed_log


@pytest.fixture(scope="module")
def raw():
    samples, _ = synth_generate(1, 1, length=60, seed=5)
    return samples


def test_signed_log_scaler_round_trip():
    x = np.random.default_rng(0).normal(scale=20, size=(4, 3, 5))
    scaler = SignedLogScaler().fit(x)
    np.testing.assert_allclose(scaler.transform(x), signed_log(x))
    np.testing.assert_allclose(scaler.inverse_transform(scaler.transform(x)), x, atol=1e-12)


def test_fourier_resampler_array_and_ragged():
    x = np.random.default_rng(1).normal(size=(2, 3, 40))
    res = FourierResampler(16).fit(x)
    np.testing.assert_allclose(res.transform(x), fourier_resample(x, 16))
    ragged = res.transform([np.ones((3, 10)), np.ones((3, 25))])
    assert ragged.shape == (2, 3, 16)
    with pytest.raises(ValueError):
        FourierResampler(1).fit(x)


def test_unfitted_transformers_raise(raw):
    with pytest.raises(NotFittedError):
        SignedLogScaler().transform(np.ones((2, 2)))
    with pytest.raises(NotFittedError):
        PenPreprocessor().transform(raw)


def test_preprocessor_matches_function(raw):
    X = PenPreprocessor(target_length=64).fit_transform(raw)
    assert X.shape == (52, 12, 64)
    np.testing.assert_array_equal(X[3], preprocess(raw[3], PreprocConfig(target_length=64)).data)


def test_get_params_and_clone():
    clf = CNNLSTMClassifier(epochs=7, lr=0.01)
    params = clf.get_params()
    assert params["epochs"] == 7 and params["lr"] == 0.01 and params["weight_decay"] == 1e-3
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    assert clf.set_params(batch_size=8).batch_size == 8


def test_classifier_input_validation():
    clf = CNNLSTMClassifier(epochs=1)
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((1, 12, 256)))
    with pytest.raises(ValueError):
        clf.fit(np.zeros((2, 256)), ["a", "b"])
    with pytest.raises(ValueError):
        clf.fit(np.zeros((2, 12, 256)), ["a"])
    with pytest.raises(ValueError):
        clf.fit(np.zeros((2, 12, 256)), [0, 52])
    with pytest.raises(ValueError):
        clf.fit(np.full((2, 12, 256), np.nan), ["a", "b"])


def test_pipeline_fit_predict(raw):
    y = [s.label for s in raw]
    pipe = make_pipeline(PenPreprocessor(), CNNLSTMClassifier(epochs=2, lr=1e-3, batch_size=26))
    pipe.fit(raw, y)
    clf = pipe[-1]
    assert clf.classes_[0] == "a" and len(clf.classes_) == 52
    pred = pipe.predict(raw)
    assert pred.shape == (52,) and set(pred) <= set(clf.classes_)
    proba = pipe.predict_proba(raw)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert 0.0 <= pipe.score(raw, y) <= 1.0
    assert len(clf.metrics_) == 2
    with pytest.raises(ValueError):
        clf.predict(np.zeros((1, 3, 256)))


def test_integer_labels_and_evaluate(raw):
    X = PenPreprocessor(target_length=256).fit_transform(raw)
    y = np.arange(52)
    clf = CNNLSTMClassifier(epochs=1, batch_size=52).fit(X, y)
    assert clf.classes_.dtype.kind == "i"
    res = clf.evaluate(X, y)
    assert res.accuracy == clf.metrics_[-1].train_acc
    assert res.confusion.total == 52
