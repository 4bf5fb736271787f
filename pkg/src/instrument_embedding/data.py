"""Audio ingestion, augmentation, segment sampling and the toy corpus."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SCHEMA_VERSION = 1
LABEL_FIELDS = ("instrument", "family", "pitch", "velocity", "source", "style")
SPLITS = ("train", "valid", "test")

FAMILIES = ("bright", "decaying", "noisy_attack", "vibrato")
SOURCES = ("acoustic", "electronic", "synthetic")
STYLES = ("plain", "vibrato", "tremolo", "staccato")


class DataError(ValueError):
    pass


@dataclass
class AudioSample:
    wave: np.ndarray
    instrument: str
    family: str
    pitch: int | None = None
    velocity: int | None = None
    source: str | None = None
    style: str | None = None
    split: str = "train"
    sample_id: str = ""
    augmented: bool = False

    def labels(self) -> dict:
        return {k: getattr(self, k) for k in LABEL_FIELDS}


# --------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestRecord:
    path: str
    sample_id: str
    instrument: str
    family: str
    split: str
    pitch: int | None = None
    velocity: int | None = None
    source: str | None = None
    style: str | None = None

    def to_json(self) -> str:
        d = {"schema_version": SCHEMA_VERSION, **asdict(self)}
        return json.dumps(d, sort_keys=True)


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: str = "."
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.path)
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def instruments(self) -> list:
        return sorted({r.instrument for r in self.records})

    def families(self) -> list:
        return sorted({r.family for r in self.records})

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else Path(self.root) / p

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json().encode())
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                version = d.pop("schema_version", None)
                if version != SCHEMA_VERSION:
                    raise DataError(f"{path}:{lineno}: unsupported schema_version {version}")
                records.append(ManifestRecord(**d))
        manifest = cls(records, str(path.parent))
        if check_files:
            missing = [r.path for r in manifest.records if not manifest.resolve(r).exists()]
            if missing:
                raise DataError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")
        return manifest

    def load_samples(self) -> list:
        out = []
        for r in self.records:
            wave = load_wave(self.resolve(r))
            out.append(AudioSample(wave, r.instrument, r.family, r.pitch, r.velocity,
                                   r.source, r.style, r.split, r.sample_id))
        return out


def load_wave(path, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Read a WAV file as mono float64 in [-1, 1] at ``target_sr``."""
    sr, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sr != target_sr:
        g = np.gcd(sr, target_sr)
        data = resample_poly(data, target_sr // g, sr // g)
    if not np.all(np.isfinite(data)):
        raise DataError(f"non-finite samples in {path}")
    return data


def write_wave(path, wave: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(wave, -1.0, 1.0) * 32767).astype("<i2")
    wavfile.write(str(path), sr, pcm)


# --------------------------------------------------------------------------
# Augmentation


def trim_silence(wave: np.ndarray, threshold_db: float = -60.0, sr: int = SAMPLE_RATE,
                 frame_ms: float = 25.0) -> np.ndarray:
    """Strip leading and trailing frames whose RMS is below ``threshold_db`` dBFS.

    A fully silent input yields an empty array.
    """
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0:
        raise DataError("cannot trim an empty waveform")
    flen = int(round(sr * frame_ms / 1000))
    n_frames = -(-wave.size // flen)
    padded = np.zeros(n_frames * flen)
    padded[:wave.size] = wave
    rms = np.sqrt(np.mean(padded.reshape(n_frames, flen) ** 2, axis=1))
    loud = np.flatnonzero(rms >= 10.0 ** (threshold_db / 20.0))
    if loud.size == 0:
        return wave[:0]
    return wave[loud[0] * flen:min((loud[-1] + 1) * flen, wave.size)]


def concat_same_instrument(samples: list, rng: np.random.Generator,
                           threshold_db: float = -60.0) -> AudioSample:
    """Trim every note and join them in random order."""
    if len(samples) < 2:
        raise DataError("need at least two samples to concatenate")
    instruments = {s.instrument for s in samples}
    if len(instruments) != 1:
        raise DataError(f"cannot concatenate across instruments {sorted(instruments)}")
    order = rng.permutation(len(samples))
    pieces = [trim_silence(samples[i].wave, threshold_db) for i in order]
    pieces = [p for p in pieces if p.size]
    if not pieces:
        raise DataError("all samples are silent")
    first = samples[order[0]]

    def shared(name):
        vals = {getattr(s, name) for s in samples}
        return vals.pop() if len(vals) == 1 else None

    return AudioSample(np.concatenate(pieces), first.instrument, first.family,
                       shared("pitch"), shared("velocity"), shared("source"), shared("style"),
                       first.split, "+".join(samples[i].sample_id for i in order), True)


def draw_training_segment(wave: np.ndarray, rng: np.random.Generator,
                          duration: int | None = None, sr: int = SAMPLE_RATE,
                          min_seconds: float = 3.0, max_seconds: float = 5.0) -> np.ndarray:
    """Random crop of ``duration`` samples (drawn in [3 s, 5 s] when omitted).

    Sources shorter than the crop are zero-padded at the end.
    """
    if duration is None:
        duration = int(rng.integers(int(min_seconds * sr), int(max_seconds * sr) + 1))
    if wave.size <= duration:
        out = np.zeros(duration)
        out[:wave.size] = wave
        return out
    offset = int(rng.integers(0, wave.size - duration + 1))
    return wave[offset:offset + duration].copy()


class SegmentSampler:
    """Draws training segments from individual notes and, when augmenting,
    from same-instrument concatenations of trimmed notes with equal probability.
    """

    def __init__(self, samples: list, augment: bool = True, sr: int = SAMPLE_RATE,
                 max_seconds: float = 5.0):
        self.samples = list(samples)
        self.augment = augment
        self.sr = sr
        self.max_len = int(max_seconds * sr)
        self.by_instrument: dict = {}
        for i, s in enumerate(self.samples):
            self.by_instrument.setdefault(s.instrument, []).append(i)
        self._trimmed: dict = {}

    def _trim(self, i):
        if i not in self._trimmed:
            self._trimmed[i] = trim_silence(self.samples[i].wave)
        return self._trimmed[i]

    def concatenated(self, index: int, rng: np.random.Generator) -> np.ndarray:
        """Trimmed note ``index`` joined with random trimmed notes of the same
        instrument until at least 5 s of audio is available."""
        pool = self.by_instrument[self.samples[index].instrument]
        chosen = [index]
        total = self._trim(index).size
        while len(chosen) < 2 or total < self.max_len:
            j = pool[int(rng.integers(len(pool)))]
            chosen.append(j)
            total += self._trim(j).size
            if len(chosen) > 64:
                break
        order = rng.permutation(len(chosen))
        pieces = [self._trim(chosen[k]) for k in order]
        pieces = [p for p in pieces if p.size]
        return np.concatenate(pieces) if pieces else self.samples[index].wave

    def draw(self, index: int, duration: int, rng: np.random.Generator) -> np.ndarray:
        use_concat = self.augment and rng.random() < 0.5
        source = self.concatenated(index, rng) if use_concat else self.samples[index].wave
        return draw_training_segment(source, rng, duration, self.sr)


# --------------------------------------------------------------------------
# Toy corpus


@dataclass
class ToyCorpusSpec:
    n_train_instruments: int = 16
    n_unseen_instruments: int = 6
    n_families: int = 4
    notes_per_train_instrument: int = 100
    notes_per_unseen_instrument: int = 60
    seed: int = 0
    note_seconds: float = 4.0
    n_valid_instruments: int = 0
    notes_per_valid_instrument: int = 30


@dataclass
class _Instrument:
    name: str
    family: str
    source: str
    split: str
    harmonic_amps: np.ndarray
    formant_hz: float
    formant_gain: float
    pitch_lo: int
    pitch_hi: int
    inharmonicity: float


_FAMILY_ROLLOFF = {"bright": 0.6, "decaying": 1.4, "noisy_attack": 1.0, "vibrato": 1.1}


def _make_instrument(name, family, split, rng) -> _Instrument:
    n_harm = 24
    h = np.arange(1, n_harm + 1)
    amps = h ** -_FAMILY_ROLLOFF[family] * rng.lognormal(0.0, 0.7, n_harm)
    # odd/even balance is a strong per-instrument timbre cue
    amps[1::2] *= rng.uniform(0.1, 1.0)
    # centres 40..76 with a +-15 semitone range cover MIDI 25..91 (5.5 octaves)
    center = int(rng.integers(40, 77))
    source = SOURCES[int(rng.integers(len(SOURCES)))]
    return _Instrument(name, family, source, split, amps / amps.max(),
                       float(np.exp(rng.uniform(np.log(300), np.log(3500)))),
                       float(rng.uniform(1.0, 6.0)), center - 15, center + 15,
                       float(rng.uniform(0.0, 3e-4)) if source == "acoustic" else 0.0)


def _render_note(inst: _Instrument, pitch: int, velocity: int, style: str,
                 rng: np.random.Generator, n_samples: int, sr: int) -> np.ndarray:
    t = np.arange(n_samples) / sr
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)
    sustain = rng.uniform(0.2, 0.4) if style == "staccato" else rng.uniform(0.8, 2.5)
    onset = rng.uniform(0.0, 0.1)

    cents = np.zeros(n_samples)
    if inst.family == "vibrato":
        cents += 25.0 * np.sin(2 * np.pi * 5.0 * t)
    if style == "vibrato":
        cents += 40.0 * np.sin(2 * np.pi * 6.5 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * 2.0 ** (cents / 1200.0)) / sr

    h = np.arange(1, inst.harmonic_amps.size + 1)
    freqs = f0 * h * np.sqrt(1.0 + inst.inharmonicity * h ** 2)
    keep = freqs < 0.45 * sr
    formant = 1.0 + inst.formant_gain * np.exp(
        -0.5 * (np.log(freqs[keep] / inst.formant_hz) / 0.35) ** 2)
    tilt = h[keep] ** (-0.4 * (5 - velocity) / 4.0)
    amps = inst.harmonic_amps[keep] * formant * tilt
    ratios = freqs[keep] / f0
    x = np.zeros(n_samples)
    for a, r in zip(amps, ratios):
        x += a * np.sin(r * phase + rng.uniform(0, 2 * np.pi))

    rel = t - onset
    attack = {"bright": 0.02, "decaying": 0.005, "noisy_attack": 0.03, "vibrato": 0.06}[inst.family]
    env = np.clip(rel / attack, 0.0, 1.0)
    if inst.family == "decaying":
        env *= np.exp(-np.clip(rel, 0, None) / 0.5)
    release = np.clip(1.0 - (rel - sustain) / 0.1, 0.0, 1.0)
    env *= release
    if style == "tremolo":
        env *= 1.0 - 0.35 * (1 + np.sin(2 * np.pi * 7.0 * t)) / 2
    x *= env

    if inst.family == "noisy_attack":
        burst = rng.standard_normal(n_samples) * np.exp(-np.clip(rel, 0, None) / 0.04)
        burst[rel < 0] = 0.0
        x += 0.6 * np.abs(x).max() * burst / 3.0
    if inst.source == "acoustic":
        x += 0.003 * np.abs(x).max() * rng.standard_normal(n_samples) * (env > 0)
    elif inst.source == "synthetic":
        x = np.tanh(2.5 * x / (np.abs(x).max() + 1e-12))

    gain = 0.15 + 0.17 * velocity
    return gain * 0.9 * x / (np.abs(x).max() + 1e-12)


def toy_instruments(spec: ToyCorpusSpec) -> list:
    if spec.n_train_instruments + spec.n_unseen_instruments < 1:
        raise DataError("toy corpus needs at least one instrument")
    if not 1 <= spec.n_families <= len(FAMILIES):
        raise DataError(f"n_families must be in 1..{len(FAMILIES)}")
    plan = ([("train", i) for i in range(spec.n_train_instruments)]
            + [("valid", i) for i in range(spec.n_valid_instruments)]
            + [("test", i) for i in range(spec.n_unseen_instruments)])
    seeds = np.random.SeedSequence(spec.seed).spawn(len(plan))
    out = []
    for (split, i), ss in zip(plan, seeds):
        rng = np.random.default_rng(ss)
        prefix = {"train": "seen", "valid": "valid", "test": "unseen"}[split]
        family = FAMILIES[i % spec.n_families]
        out.append((_make_instrument(f"{prefix}_{i:03d}", family, split, rng), ss))
    return out


def generate_toy_corpus(spec: ToyCorpusSpec, sr: int = SAMPLE_RATE):
    """Yield ``AudioSample`` notes for every toy instrument, deterministically."""
    n_samples = int(round(spec.note_seconds * sr))
    n_notes = {"train": spec.notes_per_train_instrument,
               "valid": spec.notes_per_valid_instrument,
               "test": spec.notes_per_unseen_instrument}
    for inst, ss in toy_instruments(spec):
        rng = np.random.default_rng(ss.spawn(1)[0])
        for j in range(n_notes[inst.split]):
            pitch = int(rng.integers(inst.pitch_lo, inst.pitch_hi + 1))
            velocity = int(rng.integers(1, 6))
            style = STYLES[int(rng.integers(len(STYLES)))]
            wave = _render_note(inst, pitch, velocity, style, rng, n_samples, sr)
            yield AudioSample(wave, inst.name, inst.family, pitch, velocity, inst.source,
                              style, inst.split, f"{inst.name}-{j:04d}")


def synth_toy_corpus(out_dir, spec: ToyCorpusSpec) -> Manifest:
    """Write the toy corpus as 16-bit WAVs plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for s in generate_toy_corpus(spec):
        rel = f"audio/{s.sample_id}.wav"
        write_wave(out_dir / rel, s.wave)
        records.append(ManifestRecord(rel, s.sample_id, s.instrument, s.family, s.split,
                                      s.pitch, s.velocity, s.source, s.style))
    manifest = Manifest(records, str(out_dir))
    manifest.save(out_dir / "manifest.jsonl")
    logger.info("wrote %d notes to %s", len(records), out_dir)
    return manifest


def quantize_pitch(midi: int) -> int:
    return int(midi) // 12
