"""scikit-learn compatible wrapper around the embedding network."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AudioSample
from .training import (InstrumentEmbeddingNet, ModelCheckpoint, TrainConfig, _seed_everything,
                       extract_embeddings, fit_network, finetune)


def check_waveforms(X, min_len: int = 1) -> list:
    """Validate a batch of mono waveforms (2-D array or list of 1-D arrays)."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        waves = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        raise ValueError("expected a batch of waveforms, got a single 1-D array; "
                         "wrap it in a list")
    else:
        waves = list(X)
    if not waves:
        raise ValueError("empty batch of waveforms")
    out = []
    for i, w in enumerate(waves):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"waveform {i} is not one-dimensional (shape {w.shape})")
        if w.size < min_len:
            raise ValueError(f"waveform {i} has {w.size} samples, need at least {min_len}")
        if not np.all(np.isfinite(w)):
            raise ValueError(f"waveform {i} contains non-finite samples")
        out.append(w)
    return out


_CONFIG_FIELDS = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("name", "seeds")]


class InstrumentEmbedder(TransformerMixin, BaseEstimator):
    """Learns fixed-length instrument embeddings from raw 16 kHz waveforms.

    ``fit(X, y, family=...)`` trains the network to classify instruments
    ``y`` (and their families when the family head is enabled);
    ``transform(X)`` returns one embedding row per waveform.
    Hyper-parameters mirror :class:`TrainConfig`.
    """

    def __init__(self, frontend_init="cqt122", frontend_update=True, augment=True,
                 family_head=True, a_softmax=True, epochs=30, batch_size=32, peak_lr=1e-3,
                 warmup_steps=8000, decay_rate=0.5, base_width=16, block_counts=(3, 4, 6, 3),
                 num_clusters=32, embedding_dim=512, conv_stride=1, feature_norm="channel",
                 segments_per_epoch=None, margin=2, family_weight=1.0, lambda_base=1000.0,
                 lambda_gamma=0.1, lambda_min=5.0, kernel_len=251, frame_len=400, hop=160,
                 grad_clip=5.0, adam_betas=(0.9, 0.999), adam_eps=1e-8, random_state=100):
        self.frontend_init = frontend_init
        self.frontend_update = frontend_update
        self.augment = augment
        self.family_head = family_head
        self.a_softmax = a_softmax
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.decay_rate = decay_rate
        self.base_width = base_width
        self.block_counts = block_counts
        self.num_clusters = num_clusters
        self.embedding_dim = embedding_dim
        self.conv_stride = conv_stride
        self.feature_norm = feature_norm
        self.segments_per_epoch = segments_per_epoch
        self.margin = margin
        self.family_weight = family_weight
        self.lambda_base = lambda_base
        self.lambda_gamma = lambda_gamma
        self.lambda_min = lambda_min
        self.kernel_len = kernel_len
        self.frame_len = frame_len
        self.hop = hop
        self.grad_clip = grad_clip
        self.adam_betas = adam_betas
        self.adam_eps = adam_eps
        self.random_state = random_state

    def to_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_FIELDS},
                           seeds=(self.random_state,))

    @classmethod
    def from_config(cls, cfg: TrainConfig, random_state: int | None = None) -> "InstrumentEmbedder":
        seed = cfg.seeds[0] if random_state is None else random_state
        return cls(**{k: getattr(cfg, k) for k in _CONFIG_FIELDS}, random_state=seed)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "InstrumentEmbedder":
        est = cls.from_config(ckpt.config, ckpt.seed)
        est._set_fitted(ckpt.build_model(), ckpt)
        return est

    def _set_fitted(self, model, ckpt):
        self.model_ = model
        self.checkpoint_ = ckpt
        self.classes_ = np.array(ckpt.instrument_classes)
        self.family_classes_ = np.array(ckpt.family_classes)
        self.training_log_ = ckpt.log

    def _samples(self, X, y, family):
        waves = check_waveforms(X, self.kernel_len)
        y = np.asarray(y)
        if y.shape[0] != len(waves):
            raise ValueError(f"{len(waves)} waveforms but {y.shape[0]} labels")
        if family is None:
            if self.family_head:
                raise ValueError("family labels are required when family_head=True")
            family = np.full(len(waves), "_")
        family = np.asarray(family)
        return [AudioSample(w, str(i), str(f)) for w, i, f in zip(waves, y, family)]

    def fit(self, X, y, family=None):
        samples = self._samples(X, y, family)
        cfg = self.to_config()
        instruments = sorted({s.instrument for s in samples})
        families = sorted({s.family for s in samples})
        if len(instruments) < 2:
            raise ValueError("need at least two instrument classes")
        _seed_everything(self.random_state)
        model = InstrumentEmbeddingNet(cfg, len(instruments), len(families))
        log = fit_network(model, samples, cfg, self.random_state, instruments, families)
        ckpt = ModelCheckpoint.from_model(model, cfg, instruments, families,
                                          log["global_step"], self.random_state, log)
        self._set_fitted(model, ckpt)
        return self

    def finetune(self, X, y, family=None, epochs=None):
        """Re-initialise both heads for the new classes and train everything."""
        check_is_fitted(self, "model_")
        samples = self._samples(X, y, family)
        cfg = self.to_config()
        if epochs is not None:
            cfg = dataclasses.replace(cfg, epochs=epochs)
        ckpt = finetune(self.checkpoint_, samples, cfg, self.random_state)
        self._set_fitted(ckpt.build_model(), ckpt)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        waves = check_waveforms(X, max(self.kernel_len, self.frame_len))
        return extract_embeddings(self.model_, waves)

    def predict(self, X):
        """Closed-set instrument prediction (argmax of the instrument head)."""
        emb = torch.from_numpy(self.transform(X)).float()
        with torch.no_grad():
            logits = self.model_.heads.instrument.logits(emb)
        return self.classes_[logits.argmax(1).numpy()]
