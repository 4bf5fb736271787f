"""Training loop, learning-rate schedule, checkpoints and fine-tuning."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import AudioSample, Manifest, SegmentSampler
from .encoder import EmbeddingExtractor, EncoderConfig
from .frontend import SincFrontend, init_filterbank
from .objective import DualHead, lambda_schedule, multitask_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"IEMBCKPT"
CHECKPOINT_VERSION = 1
DEFAULT_SEEDS = (100, 1000, 10000)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def seed_for_run(k: int) -> int:
    """Seed of the k-th run (k = 1, 2, 3): 10 ** (k + 1)."""
    if k < 1:
        raise ValueError("run index starts at 1")
    return 10 ** (k + 1)


@dataclass
class TrainConfig:
    name: str = "base"
    epochs: int = 30
    peak_lr: float = 1e-3
    warmup_steps: int = 8000
    decay_rate: float = 0.5
    batch_size: int = 32
    seeds: tuple = DEFAULT_SEEDS
    # ablation flags
    augment: bool = True
    family_head: bool = True
    a_softmax: bool = True
    frontend_init: str = "cqt122"
    frontend_update: bool = True
    # objective
    margin: int = 2
    family_weight: float = 1.0
    lambda_base: float = 1000.0
    lambda_gamma: float = 0.1
    lambda_min: float = 5.0
    # architecture
    block_counts: tuple = (3, 4, 6, 3)
    base_width: int = 16
    num_clusters: int = 32
    embedding_dim: int = 512
    kernel_len: int = 251
    frame_len: int = 400
    hop: int = 160
    conv_stride: int = 1
    feature_norm: str = "channel"
    # optimisation
    segments_per_epoch: int | None = None
    grad_clip: float = 5.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.block_counts = tuple(int(b) for b in self.block_counts)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.block_counts, self.base_width, self.num_clusters,
                             self.embedding_dim)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def ablation_rows(self) -> list:
        """Names of the ablation-table rows this configuration reproduces."""
        rows = []
        base_front = self.frontend_init == "cqt122" and self.frontend_update
        flags = (self.augment, self.family_head, self.a_softmax)
        if base_front:
            base_rows = {(True, True, True): "Base",
                      (False, True, True): "Base w/o data augmentation",
                      (True, False, True): "Base w/o instrument family",
                      (True, True, False): "Base w/o A-softmax"}
            if flags in base_rows:
                rows.append(f"ablation: {base_rows[flags]}")
        if flags == (True, True, True):
            kind = "CQT" if self.frontend_init.startswith("cqt") else "Mel"
            if self.frontend_init in ("mel80", "mel122", "cqt122"):
                update = "updated" if self.frontend_update else "fixed"
                rows.append(f"frontend: {kind} {self.frontend_init[3:]} {update}")
        return rows


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines ('#' comments) into a :class:`TrainConfig`.

    Tuples are comma separated; ``none`` clears optional values.
    """
    defaults = TrainConfig()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        current = getattr(defaults, key)
        if val.lower() == "none":
            values[key] = None
        elif isinstance(current, bool):
            if val.lower() not in _BOOL_WORDS:
                raise ValueError(f"line {lineno}: {key} expects a boolean")
            values[key] = _BOOL_WORDS[val.lower()]
        elif isinstance(current, tuple):
            values[key] = tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                                for v in (p.strip() for p in val.split(",")) if v)
        elif isinstance(current, float):
            values[key] = float(val)
        elif isinstance(current, int) or key == "segments_per_epoch":
            values[key] = int(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def format_config_text(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def effective_warmup(cfg: TrainConfig, total_steps: int) -> int:
    return max(1, int(min(cfg.warmup_steps, total_steps / 4)))


def lr_at(step: int, peak_lr: float, warmup: int, decay_rate: float) -> float:
    """Linear warm-up to ``peak_lr`` then exponential decay per warm-up interval."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= warmup:
        return peak_lr * step / warmup
    return peak_lr * decay_rate ** ((step - warmup) / warmup)


# --------------------------------------------------------------------------
# Network


class InstrumentEmbeddingNet(nn.Module):
    """Sinc front-end -> residual encoder -> LDE -> projection, plus output heads."""

    def __init__(self, cfg: TrainConfig, num_instruments: int, num_families: int):
        super().__init__()
        params = init_filterbank(cfg.frontend_init, kernel_len=cfg.kernel_len)
        self.frontend = SincFrontend(params, cfg.frame_len, cfg.hop, cfg.conv_stride,
                                     trainable=cfg.frontend_update, normalize=cfg.feature_norm)
        self.extractor = EmbeddingExtractor(cfg.encoder_config())
        self.heads = DualHead(cfg.embedding_dim, num_instruments, max(num_families, 1),
                              cfg.a_softmax, cfg.family_head, cfg.margin)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        return self.extractor(self.frontend(wave))

    def replace_heads(self, cfg: TrainConfig, num_instruments: int, num_families: int) -> None:
        self.heads = DualHead(cfg.embedding_dim, num_instruments, max(num_families, 1),
                              cfg.a_softmax, cfg.family_head, cfg.margin)


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class ModelCheckpoint:
    tensors: dict
    config: TrainConfig
    instrument_classes: list
    family_classes: list
    global_step: int = 0
    seed: int = 0
    log: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_model(cls, model: nn.Module, cfg, instruments, families, step, seed, log=None):
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(tensors, cfg, list(instruments), list(families), step, seed, log or {})

    def header(self) -> dict:
        return {"config": self.config.to_dict(),
                "class_maps": {"instrument": self.instrument_classes,
                               "family": self.family_classes},
                "global_step": self.global_step, "seed": self.seed}

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            dt = arr.dtype.newbyteorder("<")
            data = arr.astype(dt, copy=False).tobytes()
            entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = json.dumps({**self.header(), "tensors": entries}, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        buf.write(header)
        for b in blobs:
            buf.write(b)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, hlen = struct.unpack("<IQ", raw[8:20])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            header = json.loads(raw[20:20 + hlen])
            base = 20 + hlen
            tensors = {}
            for e in header["tensors"]:
                start = base + e["offset"]
                chunk = raw[start:start + e["nbytes"]]
                if len(chunk) != e["nbytes"]:
                    raise CheckpointError(f"truncated tensor {e['name']}")
                tensors[e["name"]] = np.frombuffer(chunk, dtype=e["dtype"]).reshape(
                    e["shape"]).copy()
            maps = header["class_maps"]
            return cls(tensors, TrainConfig.from_dict(header["config"]), maps["instrument"],
                       maps["family"], header["global_step"], header["seed"])
        except (struct.error, KeyError, ValueError, TypeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from exc

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def tensor_hash(self, prefix: str = "", exclude: str | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            if not name.startswith(prefix) or (exclude and name.startswith(exclude)):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        sidecar = path.with_name(path.stem + ".classes.json")
        sidecar.write_text(json.dumps({"instrument": self.instrument_classes,
                                       "family": self.family_classes}, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(str(exc)) from exc
        return cls.from_bytes(raw)

    def build_model(self) -> InstrumentEmbeddingNet:
        model = InstrumentEmbeddingNet(self.config, len(self.instrument_classes),
                                       len(self.family_classes))
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state)
        model.eval()
        return model


# --------------------------------------------------------------------------
# Training loop


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _class_index(values, classes) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[v] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"label {exc.args[0]!r} not in class map") from None


def fit_network(model: InstrumentEmbeddingNet, samples: list, cfg: TrainConfig, seed: int,
                instrument_classes: list, family_classes: list) -> dict:
    """Optimise ``model`` in place on ``samples``; returns the training log."""
    rng = np.random.default_rng(seed)
    sampler = SegmentSampler(samples, augment=cfg.augment)
    instr_idx = _class_index([s.instrument for s in samples], instrument_classes)
    fam_idx = _class_index([s.family for s in samples], family_classes)

    per_epoch = cfg.segments_per_epoch or len(samples)
    steps_per_epoch = max(1, per_epoch // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = effective_warmup(cfg, total_steps)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps)

    log = {"config": cfg.to_dict(), "seed": seed, "ablation_rows": cfg.ablation_rows(),
           "warmup_steps": warmup, "total_steps": total_steps, "epochs": []}
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = np.concatenate([rng.permutation(len(samples))
                                for _ in range(-(-steps_per_epoch * cfg.batch_size
                                                 // len(samples)))])
        sums, skipped = np.zeros(3), 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            duration = int(rng.integers(48000, 80001))
            batch = np.stack([sampler.draw(int(i), duration, rng) for i in idx])
            step += 1
            lr = lr_at(step, cfg.peak_lr, warmup, cfg.decay_rate)
            lam = lambda_schedule(step, cfg.lambda_base, cfg.lambda_gamma, cfg.lambda_min)
            for g in opt.param_groups:
                g["lr"] = lr
            emb = model(torch.from_numpy(batch).float())
            try:
                losses = multitask_loss(emb, torch.from_numpy(instr_idx[idx]),
                                        torch.from_numpy(fam_idx[idx]), model.heads, lam,
                                        cfg.family_weight)
            except FloatingPointError as exc:
                logger.warning("step %d: %s; batch skipped", step, exc)
                skipped += 1
                continue
            if not torch.isfinite(losses.total):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch + 1})")
            opt.zero_grad()
            losses.total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            model.heads.after_step()
            sums += [losses.total.item(), losses.instr_loss.item(), losses.family_loss.item()]
        mean = sums / max(1, steps_per_epoch - skipped)
        log["epochs"].append({"epoch": epoch + 1, "step": step, "loss": mean[0],
                              "instr_loss": mean[1], "family_loss": mean[2],
                              "lr": lr, "lambda": lam, "skipped_batches": skipped})
        logger.info("epoch %d step %d loss %.4f lr %.2e lambda %.1f",
                    epoch + 1, step, mean[0], lr, lam)
    model.eval()
    log["global_step"] = step
    return log


def _as_samples(data) -> list:
    if isinstance(data, Manifest):
        return data.split("train").load_samples()
    return [s for s in data if s.split == "train"]


def train(cfg: TrainConfig, data, seed: int | None = None) -> ModelCheckpoint:
    """Train from scratch on the train split of ``data`` (manifest or samples)."""
    seed = cfg.seeds[0] if seed is None else seed
    samples = _as_samples(data)
    instruments = sorted({s.instrument for s in samples})
    families = sorted({s.family for s in samples})
    if len(instruments) < 2 or len(families) < 2:
        raise TrainingError("training needs at least two instruments and two families")
    _seed_everything(seed)
    model = InstrumentEmbeddingNet(cfg, len(instruments), len(families))
    log = fit_network(model, samples, cfg, seed, instruments, families)
    return ModelCheckpoint.from_model(model, cfg, instruments, families,
                                      log["global_step"], seed, log)


def finetune(base: ModelCheckpoint, data, cfg: TrainConfig | None = None,
             seed: int | None = None) -> ModelCheckpoint:
    """Warm-start every trunk parameter from ``base`` and train with fresh heads."""
    cfg = cfg or base.config
    seed = base.seed if seed is None else seed
    samples = _as_samples(data)
    instruments = sorted({s.instrument for s in samples})
    families = sorted({s.family for s in samples})
    model = base.build_model()
    _seed_everything(seed)
    model.replace_heads(cfg, len(instruments), len(families))
    for p in model.parameters():
        p.requires_grad_(True)
    log = fit_network(model, samples, cfg, seed, instruments, families)
    log["finetuned_from"] = base.content_hash()
    return ModelCheckpoint.from_model(model, cfg, instruments, families,
                                      base.global_step + log["global_step"], seed, log)


@torch.no_grad()
def extract_embeddings(model: InstrumentEmbeddingNet, waves, batch_size: int = 16) -> np.ndarray:
    """Embed each waveform (any length >= analysis window); rows follow input order."""
    model.eval()
    waves = [np.asarray(w, dtype=np.float32) for w in waves]
    out = [None] * len(waves)
    by_len: dict = {}
    for i, w in enumerate(waves):
        by_len.setdefault(w.size, []).append(i)
    dtype = next(model.parameters()).dtype
    for idx in by_len.values():
        for b in range(0, len(idx), batch_size):
            chunk = idx[b:b + batch_size]
            x = torch.from_numpy(np.stack([waves[i] for i in chunk])).to(dtype)
            emb = model(x).double().numpy()
            for i, e in zip(chunk, emb):
                out[i] = e
    return np.stack(out) if out else np.zeros((0, model.extractor.cfg.embedding_dim))
