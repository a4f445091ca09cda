import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score

from ferpair.datamodel import PairKey, synthesize_dataset
from ferpair.estimators import MultiHeadClassifier, PairwiseDictionaryClassifier, check_labels, to_dataset
from ferpair.exceptions import ConfigError, DataError
from ferpair.heads import PairwiseHeadDict, init_multi_head

from conftest import two_class_config


@pytest.fixture(scope="module")
def blobs():
    data = synthesize_dataset(two_class_config(300, dim=6, gap=4.0, seed=3))
    return data.features, data.expression, data.valence, data.arousal


def test_get_params_and_clone():
    est = MultiHeadClassifier(epochs=3, expression_loss="aam", m=0.2)
    params = est.get_params()
    assert params["epochs"] == 3 and params["m"] == 0.2 and params["learning_rate"] == 0.01
    cl = clone(est)
    assert cl.get_params() == params and cl is not est
    pw = PairwiseDictionaryClassifier(pairs=["fear-contempt"])
    assert clone(pw).get_params()["pairs"] == ["fear-contempt"]
    assert pw.get_params()["learning_rate"] == 1e-4 and pw.get_params()["epochs"] == 30


def test_multi_head_fit_predict(blobs):
    X, y, v, a = blobs
    est = MultiHeadClassifier(epochs=25, random_state=1).fit(X, y, valence=v, arousal=a, eval_set=(X, y))
    assert est.score(X, y) >= 0.99
    assert est.predict_proba(X).shape == (len(X), 8)
    np.testing.assert_allclose(est.predict_proba(X).sum(axis=1), 1.0)
    va = est.predict_valence_arousal(X)
    assert va.shape == (len(X), 2) and np.all(np.abs(va) < 1)
    assert len(est.history_) == 25 and est.config_.loss_weights == (1.0, 1.0, 1.0, 0.0)
    assert set(np.unique(est.predict_pair(X, (0, 1)))) <= {0, 1}


def test_multi_head_zero_weights_without_targets(blobs):
    X, y, _, _ = blobs
    est = MultiHeadClassifier(epochs=1).fit(X, y)
    assert est.config_.loss_weights == (1.0, 0.0, 0.0, 0.0)


def test_cross_val_score_runs(blobs):
    X, y, _, _ = blobs
    scores = cross_val_score(MultiHeadClassifier(epochs=25), X, y, cv=3)
    assert np.all(scores >= 0.95)


def test_input_validation(blobs):
    X, y, _, _ = blobs
    with pytest.raises(DataError):
        check_labels([0.5])
    with pytest.raises(DataError):
        check_labels([9])
    with pytest.raises(ValueError):
        MultiHeadClassifier().fit(X[:, :2], y[:5])
    est = MultiHeadClassifier(epochs=1).fit(X, y)
    with pytest.raises(DataError):
        est.predict(X[:, :3])
    with pytest.raises(DataError):
        to_dataset(X, y, valence=np.zeros(3))


def test_from_head_wraps_checkpoint(blobs):
    X, _, _, _ = blobs
    head = init_multi_head(6, seed=2)
    est = MultiHeadClassifier.from_head(head)
    np.testing.assert_array_equal(est.decision_function(X), head.expression.forward(X))


def test_pairwise_dictionary_classifier(blobs):
    X, y, _, _ = blobs
    pw = PairwiseDictionaryClassifier(pairs=[(0, 1)], learning_rate=0.01, epochs=10).fit(X, y)
    assert pw.dict_.keys() == [PairKey(0, 1)]
    assert np.mean(pw.predict_pair(X, "0-1") == y) >= 0.99
    assert np.mean(pw.predict(X) == y) >= 0.99


def test_pairwise_stacked_and_skips(blobs):
    X, y, _, _ = blobs
    general = MultiHeadClassifier(epochs=2).fit(X, y)
    pw = PairwiseDictionaryClassifier(mode="stacked", general=general, pairs=["0-1", "2-3"], epochs=1).fit(X, y)
    assert pw.dict_.mode == "stacked" and pw.skipped_ == [PairKey(2, 3)]
    with pytest.raises(ConfigError):
        PairwiseDictionaryClassifier(mode="stacked").fit(X, y)
    with pytest.raises(ConfigError):
        PairwiseDictionaryClassifier(mode="stacked", general="nope").fit(X, y)


def test_pairwise_predict_votes_tie_to_lower():
    est = PairwiseDictionaryClassifier.from_dict(PairwiseHeadDict("detached", 2))
    assert est.predict(np.zeros((3, 2))).tolist() == [0, 0, 0]
