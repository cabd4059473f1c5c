"""Log-mel frontend: waveform -> per-frame features, and approximate inversion.

The hop is chosen so the default config emits exactly 25 frames per second of
16 kHz audio (16000 / 640). Features are magnitude mel with a natural log and
an additive floor; no pre-emphasis and no mean/variance normalization is
applied anywhere in the pipeline.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .hashing import content_hash

FEATURE_MAGIC = b"TFF1"


@dataclass
class Waveform:
    """Single-channel audio. Samples are amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window_length: int = 1024
    hop_length: int = 640
    mel_bins: int = 80
    fft_size: int = 1024
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (0 < self.hop_length <= self.window_length <= self.fft_size):
            raise ValueError(
                "need 0 < hop_length <= window_length <= fft_size, got "
                f"hop={self.hop_length} window={self.window_length} fft={self.fft_size}"
            )
        if self.sample_rate <= 0 or self.mel_bins < 1 or self.log_floor <= 0:
            raise ValueError("invalid frontend config")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def config_hash(self) -> str:
        return content_hash(
            "frontend",
            self.sample_rate,
            self.window_length,
            self.hop_length,
            self.mel_bins,
            self.fft_size,
            self.log_floor,
        )


@dataclass
class FrameFeatureSequence:
    """F x D matrix of log-mel values at a fixed frame rate."""

    frames: np.ndarray
    frame_rate: float
    config_hash: str = ""

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames))
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("features contain non-finite values")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def frame_count(num_samples: int, cfg: FrontendConfig) -> int:
    """Number of analysis frames for an input of ``num_samples`` samples.

    Frames advance by whole hops: 10.0 s of 16 kHz audio under the defaults
    yields exactly 248 frames, pinning the 25 Hz token-rate contract.
    """
    if num_samples < cfg.window_length:
        return 0
    return (num_samples - cfg.window_length) // cfg.hop_length


def hann_window(length: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis/synthesis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filters, shape (mel_bins, fft_size // 2 + 1)."""
    n_freq = cfg.fft_size // 2 + 1
    fft_freqs = np.arange(n_freq) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.mel_bins + 2))
    bank = np.zeros((cfg.mel_bins, n_freq))
    for j in range(cfg.mel_bins):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        bank[j] = np.maximum(0.0, np.minimum(up, down))
    return bank


def _frame_signal(samples: np.ndarray, cfg: FrontendConfig, n_frames: int = None) -> np.ndarray:
    if n_frames is None:
        n_frames = frame_count(len(samples), cfg)
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    return samples[idx]


def stft_magnitude(samples: np.ndarray, cfg: FrontendConfig, n_frames: int = None) -> np.ndarray:
    """Magnitude STFT, shape (frames, fft_size // 2 + 1)."""
    frames = _frame_signal(samples, cfg, n_frames) * hann_window(cfg.window_length)
    return np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))


def extract_features(wave: Waveform, cfg: FrontendConfig) -> FrameFeatureSequence:
    """Convert a waveform into an F x mel_bins matrix of log-mel features."""
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"sample rate mismatch: wave has {wave.sample_rate}, config expects {cfg.sample_rate}"
        )
    if len(wave.samples) < cfg.window_length:
        raise ValueError(
            f"waveform has {len(wave.samples)} samples, need at least one window "
            f"({cfg.window_length})"
        )
    mag = stft_magnitude(wave.samples, cfg)
    mel = mag @ mel_filterbank(cfg).T
    feats = np.log(mel + cfg.log_floor)
    return FrameFeatureSequence(feats, cfg.frame_rate, cfg.config_hash)


def features_to_magnitude(features: FrameFeatureSequence, cfg: FrontendConfig) -> np.ndarray:
    """Linear-magnitude target the inversion aims for: undo the log, then the
    mel matrix by least squares (the lossy step of the round trip)."""
    if features.dim != cfg.mel_bins:
        raise ValueError(f"feature dim {features.dim} != mel_bins {cfg.mel_bins}")
    mel = np.maximum(np.exp(np.asarray(features.frames, dtype=np.float64)) - cfg.log_floor, 0.0)
    return np.maximum(mel @ np.linalg.pinv(mel_filterbank(cfg)).T, 0.0)


def _istft(spectrum: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Weighted overlap-add inverse of the (complex) STFT."""
    n_frames = spectrum.shape[0]
    window = hann_window(cfg.window_length)
    frames = np.fft.irfft(spectrum, n=cfg.fft_size, axis=1)[:, : cfg.window_length]
    out_len = (n_frames - 1) * cfg.hop_length + cfg.window_length
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(n_frames):
        start = i * cfg.hop_length
        out[start : start + cfg.window_length] += frames[i] * window
        norm[start : start + cfg.window_length] += window**2
    # samples under a weak window sum are edge samples; dividing there would
    # amplify frame inconsistencies by orders of magnitude, so drop them
    covered = norm > 0.05
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out


def invert_features(
    features: FrameFeatureSequence, cfg: FrontendConfig, iterations: int = 32
) -> Waveform:
    """Reconstruct audio from log-mel features.

    The mel matrix is undone with a pseudo-inverse, then the phase is recovered
    by iterating magnitude projections (Griffin-Lim). ``iterations=0`` gives
    the zero-phase reconstruction.
    """
    if features.dim != cfg.mel_bins:
        raise ValueError(f"feature dim {features.dim} != mel_bins {cfg.mel_bins}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    target_mag = features_to_magnitude(features, cfg)
    n_frames = target_mag.shape[0]

    # zero phase about the window center: a pure delay, so frame energy lands
    # mid-window instead of under the zero edge of the Hann taper
    freqs = np.arange(cfg.fft_size // 2 + 1)
    phase = np.exp(-2j * np.pi * freqs * (cfg.window_length // 2) / cfg.fft_size)
    samples = _istft(target_mag * phase, cfg)
    for _ in range(iterations):
        spec = np.fft.rfft(
            _frame_signal(samples, cfg, n_frames) * hann_window(cfg.window_length),
            n=cfg.fft_size, axis=1,
        )
        phase = np.exp(1j * np.angle(spec))
        samples = _istft(target_mag * phase, cfg)

    peak = np.max(np.abs(samples)) if len(samples) else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples, cfg.sample_rate)


def read_wav(path) -> Waveform:
    """Read a mono PCM WAV file (16-bit integer or 32-bit float)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"expected single-channel audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype} (want int16 or float32)")
    return Waveform(samples, int(rate))


def write_wav(path, wave: Waveform, fmt: str = "float32") -> None:
    if fmt == "float32":
        wavfile.write(path, wave.sample_rate, wave.samples.astype(np.float32))
    elif fmt == "int16":
        clipped = np.clip(wave.samples, -1.0, 1.0)
        wavfile.write(path, wave.sample_rate, np.round(clipped * 32767.0).astype(np.int16))
    else:
        raise ValueError(f"unsupported format {fmt!r}")


def save_features(path, features: FrameFeatureSequence) -> None:
    """Write the TFF1 container: magic, u32 F, u32 D, f64 frame_rate, f32 data.

    The producing config hash rides in a footer after the payload so readers
    of the bare format still see a complete file.
    """
    data = np.ascontiguousarray(features.frames, dtype="<f4")
    hash_bytes = features.config_hash.encode("ascii")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IId", features.num_frames, features.dim, features.frame_rate))
        f.write(data.tobytes())
        f.write(struct.pack("<I", len(hash_bytes)))
        f.write(hash_bytes)


def load_features(path) -> FrameFeatureSequence:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {FEATURE_MAGIC!r}")
    n_frames, dim, frame_rate = struct.unpack_from("<IId", blob, 4)
    offset = 4 + struct.calcsize("<IId")
    count = n_frames * dim
    end = offset + 4 * count
    if end > len(blob):
        raise ValueError("feature file truncated")
    frames = np.frombuffer(blob[offset:end], dtype="<f4").reshape(n_frames, dim)
    config_hash = ""
    if len(blob) >= end + 4:
        (hash_len,) = struct.unpack_from("<I", blob, end)
        config_hash = blob[end + 4 : end + 4 + hash_len].decode("ascii")
    return FrameFeatureSequence(frames.astype(np.float64), frame_rate, config_hash)
