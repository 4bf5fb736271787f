"""Learnable sinc band-pass filterbank operating on raw waveforms.

Each channel is a windowed FIR band-pass filter parameterised only by its
lower cutoff and bandwidth (both in Hz).  Cutoffs can be initialised on a
Mel grid or on the MIDI note grid and are refined by back-propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_LOW_HZ = 5.0
MIN_BAND_HZ = 5.0
LOG_FLOOR = 1e-6

SAMPLE_RATE = 16000
KERNEL_LEN = 251
FRAME_LEN = 400
HOP = 160


class FilterbankError(ValueError):
    """Invalid filterbank parameters."""


@dataclass
class FilterbankParams:
    """Raw per-channel filter parameters (Hz).

    The raw values may drift anywhere during training; the cutoffs actually
    used are obtained through :meth:`effective_cutoffs`.
    """

    low_freq: np.ndarray
    band: np.ndarray
    kernel_len: int = KERNEL_LEN
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.low_freq = np.asarray(self.low_freq, dtype=np.float64).reshape(-1)
        self.band = np.asarray(self.band, dtype=np.float64).reshape(-1)
        if self.low_freq.shape != self.band.shape:
            raise FilterbankError("low_freq and band must have the same length")
        if self.kernel_len % 2 != 1:
            raise FilterbankError(f"kernel_len must be odd, got {self.kernel_len}")

    @property
    def num_channels(self) -> int:
        return self.low_freq.size

    def effective_cutoffs(self) -> tuple[np.ndarray, np.ndarray]:
        return effective_cutoffs(self.low_freq, self.band, self.sample_rate)


def effective_cutoffs(low_freq, band, sample_rate):
    """Map raw (low, band) to (f1, f2) honouring the 5 Hz minima and Nyquist."""
    nyquist = sample_rate / 2.0
    f1 = np.clip(np.abs(low_freq), MIN_LOW_HZ, nyquist - MIN_BAND_HZ)
    width = np.maximum(np.abs(band), MIN_BAND_HZ)
    f2 = np.minimum(f1 + width, nyquist)
    return f1, f2


def _torch_cutoffs(low_freq: torch.Tensor, band: torch.Tensor, sample_rate: float):
    nyquist = sample_rate / 2.0
    f1 = torch.clamp(low_freq.abs(), MIN_LOW_HZ, nyquist - MIN_BAND_HZ)
    width = torch.clamp(band.abs(), min=MIN_BAND_HZ)
    f2 = torch.clamp(f1 + width, max=nyquist)
    return f1, f2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def midi_to_hz(note):
    return 440.0 * 2.0 ** ((np.asarray(note, dtype=np.float64) - 69.0) / 12.0)


def sinc_kernel(f1: float, f2: float, kernel_len: int = KERNEL_LEN,
                sample_rate: int = SAMPLE_RATE, window: bool = True) -> np.ndarray:
    """Time-domain band-pass kernel between ``f1`` and ``f2`` Hz.

    Difference of two ideal low-pass responses,
    ``2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n)`` with frequencies normalised
    by the sample rate and ``sinc(x) = sin(x) / x``.  With ``window`` the
    kernel is tapered by a Hamming window.
    """
    if kernel_len % 2 != 1 or kernel_len < 1:
        raise FilterbankError(f"kernel_len must be a positive odd integer, got {kernel_len}")
    if not 0 < f1 < f2 <= sample_rate / 2:
        raise FilterbankError(
            f"cutoffs must satisfy 0 < f1 < f2 <= {sample_rate / 2}, got ({f1}, {f2})")
    half = kernel_len // 2
    n = np.arange(1, half + 1, dtype=np.float64)
    lo, hi = f1 / sample_rate, f2 / sample_rate
    side = (np.sin(2 * np.pi * hi * n) - np.sin(2 * np.pi * lo * n)) / (np.pi * n)
    center = 2.0 * (hi - lo)
    if window:
        # taper one side and mirror it so the kernel stays exactly symmetric
        w = np.hamming(kernel_len)
        side, center = side * w[half + 1:], center * w[half]
    return np.concatenate([side[::-1], [center], side])


def midi_init(num_filters: int = 122, sample_rate: int = SAMPLE_RATE,
              kernel_len: int = KERNEL_LEN) -> FilterbankParams:
    """One filter per MIDI note; filter ``k`` spans notes ``k - 1`` to ``k + 1``."""
    if num_filters < 1:
        raise FilterbankError("num_filters must be >= 1")
    nyquist = sample_rate / 2.0
    k = np.arange(num_filters)
    f1 = midi_to_hz(k - 1)
    f2 = np.minimum(midi_to_hz(k + 1), nyquist)
    # Top notes sit above Nyquist: pin them to the highest admissible band.
    low = np.minimum(f1, nyquist - MIN_BAND_HZ)
    band = np.maximum(f2 - low, MIN_BAND_HZ)
    return FilterbankParams(low, band, kernel_len, sample_rate)


def mel_init(num_filters: int = 80, sample_rate: int = SAMPLE_RATE, f_min: float = 0.0,
             kernel_len: int = KERNEL_LEN) -> FilterbankParams:
    """Overlapping bands on ``num_filters + 2`` Mel-equispaced points."""
    if num_filters < 1:
        raise FilterbankError("num_filters must be >= 1")
    nyquist = sample_rate / 2.0
    if not 0 <= f_min < nyquist:
        raise FilterbankError(f"f_min must lie in [0, {nyquist}), got {f_min}")
    points = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(nyquist), num_filters + 2))
    points[-1] = nyquist
    return FilterbankParams(points[:-2], points[2:] - points[:-2], kernel_len, sample_rate)


def init_filterbank(name: str, sample_rate: int = SAMPLE_RATE,
                    kernel_len: int = KERNEL_LEN) -> FilterbankParams:
    """Build the named initialisation: ``mel80``, ``mel122`` or ``cqt122``."""
    name = name.lower()
    if name.startswith("mel"):
        return mel_init(int(name[3:]), sample_rate, kernel_len=kernel_len)
    if name.startswith("cqt") or name.startswith("midi"):
        digits = name.lstrip("cqtmidi")
        return midi_init(int(digits), sample_rate, kernel_len=kernel_len)
    raise FilterbankError(f"unknown filterbank initialisation {name!r}")


@dataclass
class FeatureMap:
    values: np.ndarray  # (channels, frames)
    hop: int = HOP
    frame_len: int = FRAME_LEN

    @property
    def num_frames(self) -> int:
        return self.values.shape[-1]


def num_frames(wave_len: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    return (wave_len - frame_len) // hop + 1


class SincFrontend(nn.Module):
    """Sinc filterbank followed by rectification, max-pooling, log and
    per-channel mean/variance normalisation over time.

    ``conv_stride`` > 1 evaluates the filter outputs on a decimated grid
    before max-pooling; this is the cheap approximation used at desk scale.
    ``frame_len`` and ``hop`` must then be multiples of it.
    """

    def __init__(self, params: FilterbankParams, frame_len: int = FRAME_LEN, hop: int = HOP,
                 conv_stride: int = 1, trainable: bool = True, normalize: str = "channel"):
        super().__init__()
        if normalize not in ("channel", "utterance", "none"):
            raise FilterbankError(f"unknown normalisation {normalize!r}")
        self.normalize = normalize
        if frame_len % conv_stride or hop % conv_stride:
            raise FilterbankError("frame_len and hop must be multiples of conv_stride")
        self.kernel_len = params.kernel_len
        self.sample_rate = params.sample_rate
        self.frame_len = frame_len
        self.hop = hop
        self.conv_stride = conv_stride
        self.low_hz = nn.Parameter(torch.as_tensor(params.low_freq, dtype=torch.float32).clone())
        self.band_hz = nn.Parameter(torch.as_tensor(params.band, dtype=torch.float32).clone())
        half = self.kernel_len // 2
        # kept in float64 and cast on use, so 64-bit models see exact taps
        self.register_buffer("n_pos", torch.arange(1, half + 1, dtype=torch.float64),
                             persistent=False)
        self.register_buffer("window", torch.from_numpy(np.hamming(self.kernel_len)),
                             persistent=False)
        self.set_trainable(trainable)

    @property
    def num_channels(self) -> int:
        return self.low_hz.numel()

    def set_trainable(self, trainable: bool) -> None:
        self.low_hz.requires_grad_(trainable)
        self.band_hz.requires_grad_(trainable)

    def cutoffs(self) -> tuple[torch.Tensor, torch.Tensor]:
        return _torch_cutoffs(self.low_hz, self.band_hz, self.sample_rate)

    def kernels(self) -> torch.Tensor:
        f1, f2 = self.cutoffs()
        lo = (f1 / self.sample_rate)[:, None]
        hi = (f2 / self.sample_rate)[:, None]
        n = self.n_pos.to(lo.dtype)
        side = (torch.sin(2 * math.pi * hi * n) - torch.sin(2 * math.pi * lo * n)) / (math.pi * n)
        center = 2.0 * (hi - lo)
        half = self.kernel_len // 2
        w = self.window.to(side.dtype)
        side = side * w[half + 1:]
        return torch.cat([side.flip(-1), center * w[half], side], dim=-1)

    def filter(self, wave: torch.Tensor) -> torch.Tensor:
        """Band-pass outputs, shape (batch, channels, ceil(N / conv_stride))."""
        k = self.kernels().unsqueeze(1)
        return F.conv1d(wave.unsqueeze(1), k, stride=self.conv_stride,
                        padding=self.kernel_len // 2)

    def envelope(self, wave: torch.Tensor) -> torch.Tensor:
        """Frame-wise max of the rectified filter output, before compression."""
        if wave.shape[-1] < max(self.kernel_len, self.frame_len):
            raise ValueError(
                f"waveform of {wave.shape[-1]} samples is shorter than the analysis window")
        y = self.filter(wave).abs()
        s = self.conv_stride
        pooled = F.max_pool1d(y, self.frame_len // s, self.hop // s)
        return pooled[..., :num_frames(wave.shape[-1], self.frame_len, self.hop)]

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        x = torch.log(self.envelope(wave) + LOG_FLOOR)
        if self.normalize == "none":
            return x
        dims = -1 if self.normalize == "channel" else (-2, -1)
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + 1e-8)

    def to_params(self) -> FilterbankParams:
        return FilterbankParams(self.low_hz.detach().double().cpu().numpy(),
                                self.band_hz.detach().double().cpu().numpy(),
                                self.kernel_len, self.sample_rate)


def apply_frontend(wave, params: FilterbankParams, fixed: bool = False,
                   frame_len: int = FRAME_LEN, hop: int = HOP) -> FeatureMap:
    """Run a single waveform through a freshly built front-end (float64)."""
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    if wave.size < params.kernel_len:
        raise ValueError(f"waveform shorter than kernel ({wave.size} < {params.kernel_len})")
    front = SincFrontend(params, frame_len, hop, trainable=not fixed).double()
    with torch.no_grad():
        values = front(torch.from_numpy(wave)[None])[0].numpy()
    return FeatureMap(values, hop, frame_len)


def filter_table(params: FilterbankParams) -> list[tuple[int, float, float]]:
    f1, f2 = params.effective_cutoffs()
    return [(i, float(a), float(b)) for i, (a, b) in enumerate(zip(f1, f2))]
