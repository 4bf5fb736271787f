import dataclasses
import json

import numpy as np
import pytest
import torch

from instrument_embedding.data import ToyCorpusSpec, generate_toy_corpus
from instrument_embedding.training import (DEFAULT_SEEDS, CheckpointError,
                                           InstrumentEmbeddingNet, ModelCheckpoint, TrainConfig, TrainingError, effective_warmup,
                                           extract_embeddings, finetune, format_config_text,
                                           lr_at, parse_config_text, seed_for_run, train)

TINY_CFG = TrainConfig(name="tiny", epochs=3, batch_size=4, segments_per_epoch=8,
                       block_counts=(1, 1), base_width=4, num_clusters=4, embedding_dim=16,
                       conv_stride=16, frontend_init="midi40", peak_lr=3e-3)


@pytest.fixture(scope="module")
def tiny_corpus():
    spec = ToyCorpusSpec(n_train_instruments=3, n_unseen_instruments=2, n_families=2,
                         notes_per_train_instrument=6, notes_per_unseen_instrument=6, seed=1,
                         note_seconds=1.5)
    return list(generate_toy_corpus(spec))


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_corpus):
    return train(TINY_CFG, tiny_corpus, seed=100)


def test_seeds():
    assert [seed_for_run(k) for k in (1, 2, 3)] == list(DEFAULT_SEEDS) == [100, 1000, 10000]
    assert TrainConfig().seeds == (100, 1000, 10000)
    with pytest.raises(ValueError):
        seed_for_run(0)


def test_lr_schedule():
    assert lr_at(0, 1e-3, 100, 0.5) == 0
    assert lr_at(50, 1e-3, 100, 0.5) == pytest.approx(5e-4)
    assert lr_at(200, 1e-3, 100, 0.5) == pytest.approx(5e-4)
    eps = 1e-9
    assert lr_at(100, 1e-3, 100, 0.5) == pytest.approx(lr_at(100 + eps, 1e-3, 100, 0.5))
    with pytest.raises(ValueError):
        lr_at(-1, 1e-3, 100, 0.5)
    assert effective_warmup(TrainConfig(), 400) == 100
    assert effective_warmup(TrainConfig(), 10 ** 6) == 8000


def test_ablation_rows_cover_tables():
    seen = {}
    for aug, fam, asm in [(1, 1, 1), (0, 1, 1), (1, 0, 1), (1, 1, 0)]:
        rows = TrainConfig(augment=bool(aug), family_head=bool(fam), a_softmax=bool(asm)).ablation_rows()
        t2 = [r for r in rows if r.startswith("ablation:")]
        assert len(t2) == 1
        seen[t2[0]] = (aug, fam, asm)
    assert len(seen) == 4
    t3 = set()
    for init in ("mel80", "mel122", "cqt122"):
        for upd in (True, False):
            rows = [r for r in TrainConfig(frontend_init=init, frontend_update=upd).ablation_rows()
                    if r.startswith("frontend:")]
            assert len(rows) == 1
            t3.add(rows[0])
    assert len(t3) == 6


def test_config_text_roundtrip():
    cfg = dataclasses.replace(TINY_CFG, augment=False, seeds=(7, 8))
    back = parse_config_text(format_config_text(cfg))
    assert back == cfg
    text = "# comment\nepochs = 5\nfamily_head = no\nblock_counts = 2, 2\nsegments_per_epoch = none\n"
    c = parse_config_text(text)
    assert c.epochs == 5 and not c.family_head and c.block_counts == (2, 2)
    with pytest.raises(ValueError):
        parse_config_text("bogus = 1")
    with pytest.raises(ValueError):
        parse_config_text("augment = maybe")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_train_log_and_shapes(tiny_ckpt):
    log = tiny_ckpt.log
    assert log["seed"] == 100 and len(log["epochs"]) == 3
    assert log["ablation_rows"] == []  # midi40 is not a table configuration
    assert all(np.isfinite(e["loss"]) for e in log["epochs"])
    assert {"lr", "lambda"} <= set(log["epochs"][0])
    assert tiny_ckpt.global_step == 6
    assert tiny_ckpt.instrument_classes == sorted(tiny_ckpt.instrument_classes)
    assert len(tiny_ckpt.instrument_classes) == 3 and len(tiny_ckpt.family_classes) == 2


def test_training_is_deterministic(tiny_corpus, tiny_ckpt):
    again = train(TINY_CFG, tiny_corpus, seed=100)
    assert again.content_hash() == tiny_ckpt.content_hash()
    other = train(TINY_CFG, tiny_corpus, seed=1000)
    assert other.content_hash() != tiny_ckpt.content_hash()


def test_checkpoint_roundtrip(tmp_path, tiny_corpus, tiny_ckpt):
    path = tiny_ckpt.save(tmp_path / "runs" / "tiny" / "seed1" / "model.ckpt")
    sidecar = json.loads((path.parent / "model.classes.json").read_text())
    assert sidecar["instrument"] == tiny_ckpt.instrument_classes
    loaded = ModelCheckpoint.load(path)
    assert loaded.content_hash() == tiny_ckpt.content_hash()
    assert loaded.config == TINY_CFG
    waves = [s.wave for s in tiny_corpus[:3]]
    a = extract_embeddings(tiny_ckpt.build_model(), waves)
    b = extract_embeddings(loaded.build_model(), waves)
    assert np.array_equal(a, b)
    assert a.shape == (3, 16)


def test_corrupt_checkpoint(tmp_path, tiny_ckpt):
    raw = tiny_ckpt.to_bytes()
    for bad in (b"NOTACKPT" + raw[8:], raw[:30], raw[:-10]):
        with pytest.raises(CheckpointError):
            ModelCheckpoint.from_bytes(bad)
    with pytest.raises(CheckpointError):
        ModelCheckpoint.load(tmp_path / "missing.ckpt")


def test_plain_softmax_ablation(tiny_corpus):
    cfg = dataclasses.replace(TINY_CFG, a_softmax=False, family_head=False, epochs=1)
    ck = train(cfg, tiny_corpus, seed=100)
    assert not ck.log["config"]["a_softmax"]
    assert not any(k.startswith("heads.family") for k in ck.tensors)
    assert "heads.instrument.linear.weight" in ck.tensors


def test_fixed_frontend_stays_fixed(tiny_corpus):
    cfg = dataclasses.replace(TINY_CFG, frontend_update=False, epochs=1)
    ck = train(cfg, tiny_corpus, seed=100)
    fresh = ModelCheckpoint.from_model(InstrumentEmbeddingNet(cfg, 3, 2), cfg, [], [], 0, 0)
    for k in ("frontend.low_hz", "frontend.band_hz"):
        assert np.array_equal(ck.tensors[k], fresh.tensors[k])


def test_finetune_reinitialises_heads(tiny_corpus, tiny_ckpt):
    cfg0 = dataclasses.replace(TINY_CFG, epochs=0)
    ft0 = finetune(tiny_ckpt, tiny_corpus, cfg0, seed=5)
    assert ft0.tensor_hash("heads") != tiny_ckpt.tensor_hash("heads")
    assert ft0.tensor_hash("", exclude="heads") == tiny_ckpt.tensor_hash("", exclude="heads")
    unseen = [dataclasses.replace(s, split="train") for s in tiny_corpus if s.split == "test"]
    ft = finetune(tiny_ckpt, unseen, dataclasses.replace(TINY_CFG, epochs=1))
    assert ft.tensors["heads.instrument.weight"].shape == (2, 16)
    assert ft.tensors["heads.family.linear.weight"].shape[1] == 16
    assert ft.log["finetuned_from"] == tiny_ckpt.content_hash()
    assert ft.global_step == tiny_ckpt.global_step + 2


def test_family_head_shape_four():
    net = InstrumentEmbeddingNet(TrainConfig(), 10, 4)
    assert tuple(net.heads.family.linear.weight.shape) == (4, 512)


def test_train_rejects_single_class(tiny_corpus):
    one = [s for s in tiny_corpus if s.instrument == tiny_corpus[0].instrument]
    with pytest.raises(TrainingError):
        train(TINY_CFG, one)


def test_nonfinite_loss_aborts(tiny_corpus):
    cfg = dataclasses.replace(TINY_CFG, peak_lr=float("nan"), epochs=1)
    with pytest.raises(TrainingError, match="step"):
        train(cfg, tiny_corpus, seed=100)
