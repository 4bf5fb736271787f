import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from instrument_embedding.data import ToyCorpusSpec, generate_toy_corpus
from instrument_embedding.estimator import InstrumentEmbedder, check_waveforms
from instrument_embedding.training import TrainConfig

TINY = dict(epochs=2, batch_size=4, segments_per_epoch=8, block_counts=(1, 1), base_width=4,
            num_clusters=4, embedding_dim=16, conv_stride=16, frontend_init="midi40")


@pytest.fixture(scope="module")
def corpus():
    spec = ToyCorpusSpec(n_train_instruments=3, n_unseen_instruments=2, n_families=2,
                         notes_per_train_instrument=5, notes_per_unseen_instrument=5,
                         note_seconds=1.0, seed=2)
    samples = list(generate_toy_corpus(spec))
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test


def test_check_waveforms():
    assert len(check_waveforms(np.zeros((3, 500)))) == 3
    assert len(check_waveforms([np.zeros(400), np.zeros(600)])) == 2
    with pytest.raises(ValueError):
        check_waveforms(np.zeros(500))
    with pytest.raises(ValueError):
        check_waveforms([])
    with pytest.raises(ValueError):
        check_waveforms([np.zeros(10)], min_len=100)
    with pytest.raises(ValueError):
        check_waveforms([np.array([0.0, np.nan])])
    with pytest.raises(ValueError):
        check_waveforms([np.zeros((2, 2))])


def test_params_roundtrip():
    est = InstrumentEmbedder(**TINY, random_state=1000)
    cfg = est.to_config()
    assert isinstance(cfg, TrainConfig) and cfg.seeds == (1000,) and cfg.base_width == 4
    back = InstrumentEmbedder.from_config(cfg)
    assert back.get_params() == est.get_params()
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 16000)))


def test_fit_transform_predict(corpus):
    train, test = corpus
    X = [s.wave for s in train]
    y = [s.instrument for s in train]
    fam = [s.family for s in train]
    est = InstrumentEmbedder(**TINY).fit(X, y, family=fam)
    emb = est.transform([s.wave for s in test])
    assert emb.shape == (len(test), 16) and np.all(np.isfinite(emb))
    pred = est.predict(X)
    assert set(pred) <= set(est.classes_)
    with pytest.raises(ValueError):
        InstrumentEmbedder(**TINY).fit(X, y)  # family labels missing
    with pytest.raises(ValueError):
        est.fit(X, y[:-1], family=fam)
    clone_est = InstrumentEmbedder(**TINY).fit(X, y, family=fam)
    assert np.array_equal(clone_est.transform(X[:2]), est.transform(X[:2]))


def test_no_family_head_fit(corpus):
    train, _ = corpus
    est = InstrumentEmbedder(**{**TINY, "family_head": False, "epochs": 1})
    est.fit([s.wave for s in train], [s.instrument for s in train])
    assert est.transform([train[0].wave]).shape == (1, 16)


def test_finetune_and_from_checkpoint(corpus):
    train, test = corpus
    est = InstrumentEmbedder(**TINY).fit([s.wave for s in train], [s.instrument for s in train],
                                         family=[s.family for s in train])
    restored = InstrumentEmbedder.from_checkpoint(est.checkpoint_)
    assert np.array_equal(restored.transform([test[0].wave]), est.transform([test[0].wave]))
    est.finetune([s.wave for s in test], [s.instrument for s in test],
                 family=[s.family for s in test], epochs=1)
    assert set(est.classes_) == {s.instrument for s in test}
