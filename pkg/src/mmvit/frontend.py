"""Audio and image front-ends producing the ``C x H x W`` arrays the model reads.

Audio becomes a ``T x 128`` log-mel filterbank (25 ms Hamming window, 10 ms
hop) laid out with time on the H axis; images become normalised ``3 x H x W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import functional as F
from .formats import FormatError, decode_ppm, load_wav as _load_wav_file, read_ntc
from .tensor import Tensor

SAMPLE_RATE = 16000
WINDOW_MS = 25
SHIFT_MS = 10
N_MELS = 128
LOG_FLOOR = 1e-10
TARGET_FRAMES = 1024

IMAGE_SIZE = 224
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


class InputError(ValueError):
    """Input signal unusable by the front-end (e.g. shorter than one window)."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")


@dataclass
class Spectrogram:
    """``frames`` is ``[T, n_mels]`` log-mel energies."""

    frames: np.ndarray
    frame_shift_ms: int = SHIFT_MS
    window_ms: int = WINDOW_MS

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def as_model_input(self) -> np.ndarray:
        return self.frames[None].astype(np.float32)


@dataclass
class ImageInput:
    pixels: np.ndarray  # [3, H, W]
    normalized: bool = False


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft_size(window: int) -> int:
    return 1 << (window - 1).bit_length()


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = 512, sample_rate: int = SAMPLE_RATE) -> tuple:
    """Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist.

    Returns:
        ``(weights [n_mels, n_fft // 2 + 1], centre frequencies in Hz)``.
        Triangles are linear in mel, so adjacent filters sum to one between
        the first and last centre.
    """
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, centre, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_mel - left) / (centre - left)
    falling = (right - bin_mel) / (right - centre)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights, mel_to_hz(edges[1:-1])


def num_frames(length: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = sample_rate * WINDOW_MS // 1000
    hop = sample_rate * SHIFT_MS // 1000
    if length < win:
        return 0
    return (length - win) // hop + 1


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return samples
    duration = len(samples) / src_rate
    n = max(1, int(round(duration * dst_rate)))
    t_dst = np.arange(n) / dst_rate
    t_src = np.arange(len(samples)) / src_rate
    return np.interp(t_dst, t_src, samples)


def logmel_fbank(wave: Waveform, n_mels: int = N_MELS) -> Spectrogram:
    """Log-mel filterbank of ``wave`` at the canonical 16 kHz rate."""
    samples = resample_linear(wave.samples, wave.sample_rate_hz, SAMPLE_RATE)
    win = SAMPLE_RATE * WINDOW_MS // 1000
    hop = SAMPLE_RATE * SHIFT_MS // 1000
    if len(samples) < win:
        raise InputError(f"waveform has {len(samples)} samples, shorter than one {WINDOW_MS} ms window ({win})")
    n_fft = fft_size(win)
    frames = sliding_window_view(samples, win)[::hop] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    weights, _ = mel_filterbank(n_mels, n_fft, SAMPLE_RATE)
    return Spectrogram(np.log(power @ weights.T + LOG_FLOOR))


def fit_length(spec: Spectrogram, target: int = TARGET_FRAMES) -> Spectrogram:
    """Zero-pad at the end or centre-crop to exactly ``target`` frames."""
    if target <= 0:
        raise ValueError("target frame count must be positive")
    frames = spec.frames
    t = frames.shape[0]
    if t < target:
        pad = np.zeros((target - t,) + frames.shape[1:], dtype=frames.dtype)
        frames = np.concatenate([frames, pad], axis=0)
    elif t > target:
        start = (t - target) // 2
        frames = frames[start:start + target]
    return Spectrogram(frames.copy(), spec.frame_shift_ms, spec.window_ms)


def load_wav(path: Union[str, Path]) -> Waveform:
    samples, rate = _load_wav_file(path)
    return Waveform(samples, rate)


def resize_bilinear(pixels: np.ndarray, size: tuple) -> np.ndarray:
    return F.interp_bilinear_2d(Tensor(np.asarray(pixels, dtype=np.float64)), size).data


def normalize_image(pixels: np.ndarray, mean=IMAGE_MEAN, std=IMAGE_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return (pixels - mean) / std


def load_image(path: Union[str, Path], size: int = IMAGE_SIZE) -> ImageInput:
    """Decode a P6 PPM (or an NTC ``[3, H, W]`` tensor in [0, 1]), resize and normalise."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] == b"P6":
        pixels = decode_ppm(blob, str(path))
    elif blob[:4] == b"NTC1":
        pixels = read_ntc(path).astype(np.float64)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise FormatError(f"{path}: NTC image must be [3, H, W], got {pixels.shape} (extents at offset 8)")
    else:
        raise FormatError(f"{path}: unsupported image container (offset 0); expected P6 PPM or NTC1")
    if pixels.shape[1:] != (size, size):
        pixels = resize_bilinear(pixels, (size, size))
    return ImageInput(normalize_image(pixels), normalized=True)
