"""Control-feature extraction, scaling and quantization.

Four per-string contours condition the synthesizer: fundamental frequency
(MIDI-spaced, unit-scaled between 35 Hz and 1200 Hz), A-weighted loudness
(unit-scaled between -80 dB and 0 dB), periodicity (normalized-autocorrelation
peak in [0, 1]) and spectral centroid (fraction of Nyquist). All contours run
at 128 frames per second against 48 kHz audio, with analysis frames centered
on sample t*375.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 48000
FRAME_RATE = 128
HOP = SAMPLE_RATE // FRAME_RATE  # 375 samples
ANALYSIS_WINDOW = 2048

N_STRINGS = 6
N_PITCH_BINS = 305
N_VEL_BINS = 64
K_BINS = 64

F0_MIN_HZ = 35.0
F0_MAX_HZ = 1200.0

LOUDNESS_FLOOR_DB = -80.0

# MIDI numbers of the scaling endpoints; the unit F0 scale is affine in
# MIDI space between these two anchors.
_MIDI_LO = 69.0 + 12.0 * np.log2(F0_MIN_HZ / 440.0)
_MIDI_HI = 69.0 + 12.0 * np.log2(F0_MAX_HZ / 440.0)
_MIDI_SPAN = _MIDI_HI - _MIDI_LO


def hz_to_midi(freq_hz):
    return 69.0 + 12.0 * np.log2(np.asarray(freq_hz, dtype=np.float64) / 440.0)


def midi_to_hz(midi):
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69.0) / 12.0)


def scale_f0(freq_hz):
    """Map frequency in [35, 1200) Hz to [0, 1) with MIDI spacing.

    Raises ValueError for frequencies outside the supported range.
    """
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < F0_MIN_HZ) or np.any(f >= F0_MAX_HZ):
        raise ValueError(
            f"frequency outside [{F0_MIN_HZ:g} Hz, {F0_MAX_HZ:g} Hz): {freq_hz!r}"
        )
    out = (hz_to_midi(f) - _MIDI_LO) / _MIDI_SPAN
    return float(out) if np.isscalar(freq_hz) else out


def scale_f0_midi(pitch_midi):
    """Same map as :func:`scale_f0`, taking continuous MIDI numbers."""
    m = np.asarray(pitch_midi, dtype=np.float64)
    out = (m - _MIDI_LO) / _MIDI_SPAN
    if np.any(out < 0.0) or np.any(out >= 1.0):
        raise ValueError(f"MIDI pitch outside the scaled F0 range: {pitch_midi!r}")
    return float(out) if np.isscalar(pitch_midi) else out


def unscale_f0(unit):
    """Inverse of :func:`scale_f0`: unit value in [0, 1) back to Hz."""
    m = np.asarray(unit, dtype=np.float64) * _MIDI_SPAN + _MIDI_LO
    out = midi_to_hz(m)
    return float(out) if np.isscalar(unit) else out


def scale_loudness(db):
    """Map dB in [-80, 0] (clipped) to [0, 1]."""
    d = np.clip(np.asarray(db, dtype=np.float64), LOUDNESS_FLOOR_DB, 0.0)
    out = (d - LOUDNESS_FLOOR_DB) / -LOUDNESS_FLOOR_DB
    return float(out) if np.isscalar(db) else out


def scale_centroid(centroid_hz, sample_rate=SAMPLE_RATE):
    """Divide a spectral centroid in Hz by the Nyquist frequency."""
    out = np.asarray(centroid_hz, dtype=np.float64) / (sample_rate / 2.0)
    return float(out) if np.isscalar(centroid_hz) else out


def quantize(value, n_bins):
    """Uniform quantization of unit values: min(floor(v*n), n-1).

    Values may reach (or slightly exceed) 1.0; they clamp into the top bin.
    Negative values raise ValueError.
    """
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < 0.0):
        raise ValueError(f"cannot quantize negative value: {value!r}")
    bins = np.minimum(np.floor(v * n_bins).astype(np.int64), n_bins - 1)
    return int(bins) if np.isscalar(value) else bins


def dequantize(bin_index, n_bins):
    """Bin index back to the unit-scale bin center (b + 0.5) / n."""
    b = np.asarray(bin_index, dtype=np.int64)
    if np.any(b < 0) or np.any(b >= n_bins):
        raise ValueError(f"bin index out of range [0, {n_bins}): {bin_index!r}")
    out = (b.astype(np.float64) + 0.5) / n_bins
    return float(out) if np.isscalar(bin_index) else out


def a_weighting_power(freq_hz):
    """A-weighting curve as linear power gains for the given frequencies."""
    f2 = np.asarray(freq_hz, dtype=np.float64) ** 2
    # IEC 61672 analog response, normalized to 0 dB at 1 kHz.
    num = (12194.0**2) * f2**2
    den = (
        (f2 + 20.6**2)
        * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2))
        * (f2 + 12194.0**2)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r_a = np.where(den > 0.0, num / den, 0.0)
    gain_db = 20.0 * np.log10(np.maximum(r_a, 1e-30)) + 2.0
    return 10.0 ** (gain_db / 10.0)


def n_frames_for(n_samples, hop=HOP):
    return max(int(round(n_samples / hop)), 1)


def _frames(samples, n_frames, window=ANALYSIS_WINDOW, hop=HOP):
    """(T, window) view of frames centered on sample t*hop, zero-padded at edges."""
    x = np.asarray(samples, dtype=np.float64)
    half = window // 2
    needed = (n_frames - 1) * hop + window
    pad_right = max(needed - half - len(x), 0)
    padded = np.pad(x, (half, pad_right))
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    return view[::hop][:n_frames]


def extract_loudness(samples, sample_rate=SAMPLE_RATE):
    """Per-frame unit-scaled dB(A) loudness at 128 Hz frame rate.

    A-weighting is applied per frequency bin to the power spectrum before
    summation. 0 dB is anchored to a full-scale sinusoid (mean square 0.5),
    the floor is -80 dB.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    n_frames = n_frames_for(len(samples))
    frames = _frames(samples, n_frames)
    window = np.hanning(ANALYSIS_WINDOW)
    spec = np.fft.rfft(frames * window, axis=-1)
    power = np.abs(spec) ** 2

    freqs = np.fft.rfftfreq(ANALYSIS_WINDOW, d=1.0 / sample_rate)
    weights = a_weighting_power(freqs)
    # One-sided doubling (DC and Nyquist bins counted once); Parseval
    # normalization turns the weighted bin sum into a mean-square value.
    sided = np.full(len(freqs), 2.0)
    sided[0] = 1.0
    sided[-1] = 1.0
    norm = ANALYSIS_WINDOW * np.sum(window**2)
    mean_square = power @ (weights * sided) / norm

    ratio = np.maximum(mean_square / 0.5, 10.0 ** (LOUDNESS_FLOOR_DB / 10.0))
    db = 10.0 * np.log10(ratio)
    return scale_loudness(db)


def extract_centroid(samples, sample_rate=SAMPLE_RATE, silence_threshold=1e-8):
    """Per-frame magnitude-spectrum centroid as a fraction of Nyquist.

    Frames whose total magnitude falls below ``silence_threshold`` map to 0.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    n_frames = n_frames_for(len(samples))
    frames = _frames(samples, n_frames)
    window = np.hanning(ANALYSIS_WINDOW)
    mag = np.abs(np.fft.rfft(frames * window, axis=-1))
    freqs = np.fft.rfftfreq(ANALYSIS_WINDOW, d=1.0 / sample_rate)
    total = mag.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        centroid_hz = np.where(total > silence_threshold, mag @ freqs / total, 0.0)
    return scale_centroid(centroid_hz, sample_rate)


def estimate_f0_periodicity(samples, sample_rate=SAMPLE_RATE):
    """Per-frame F0 (unit scale) and periodicity from normalized autocorrelation.

    McLeod-style estimator: the normalized square-difference function
    n(tau) = 2*r(tau) / (m(tau)) is evaluated per 2048-sample frame over lags
    covering [35 Hz, 1200 Hz]; the first local maximum within 90% of the
    global peak is refined by parabolic interpolation. Periodicity is the
    (clamped) peak value; low-periodicity frames keep their raw F0 estimate.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    lag_min = int(np.floor(sample_rate / F0_MAX_HZ))  # 40
    lag_max = int(np.floor(sample_rate / F0_MIN_HZ))  # 1371
    w = ANALYSIS_WINDOW

    n_frames = n_frames_for(len(samples))
    frames = _frames(samples, n_frames)

    # Batch autocorrelation via FFT; r[t, tau] = sum_j x[j] * x[j+tau].
    n_fft = 2 * w
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=n_fft, axis=-1)[:, : lag_max + 2]

    # m[t, tau] = sum_j (x[j]^2 + x[j+tau]^2) over the overlapping region.
    energy = np.concatenate(
        [np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=-1)], axis=-1
    )
    taus = np.arange(lag_max + 2)
    m = energy[:, w - taus] + energy[:, [w]] - energy[:, taus]

    nsdf = 2.0 * acf / (m + 1e-12)

    f0_hz = np.full(n_frames, F0_MIN_HZ)
    periodicity = np.zeros(n_frames)
    for t in range(n_frames):
        row = nsdf[t]
        seg = row[lag_min : lag_max + 1]
        peak = float(seg.max())
        if peak <= 1e-6:
            continue
        local = np.flatnonzero(
            (seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:]) & (seg[1:-1] >= 0.9 * peak)
        )
        tau = int(local[0]) + 1 + lag_min if len(local) else int(seg.argmax()) + lag_min

        # Parabolic refinement around the chosen lag.
        y0, y1, y2 = row[tau - 1], row[tau], row[tau + 1]
        denom = y0 - 2.0 * y1 + y2
        delta = 0.5 * (y0 - y2) / denom if abs(denom) > 1e-12 else 0.0
        delta = float(np.clip(delta, -0.5, 0.5))
        tau_ref = min(max(tau + delta, lag_min), lag_max)
        f0_hz[t] = sample_rate / tau_ref
        periodicity[t] = float(np.clip(y1 - 0.25 * (y0 - y2) * delta, 0.0, 1.0))

    f0_hz = np.clip(f0_hz, F0_MIN_HZ, np.nextafter(F0_MAX_HZ, 0.0))
    return scale_f0(f0_hz), periodicity


@dataclass
class ControlFeatures:
    """Per-string control contours, all shaped (n_strings, n_frames)."""

    f0: np.ndarray
    l: np.ndarray
    p: np.ndarray
    c: np.ndarray
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.l = np.asarray(self.l, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if not (self.f0.shape == self.l.shape == self.p.shape == self.c.shape):
            raise ValueError("control feature tensors must share one shape")
        for name in ("f0", "l", "p", "c"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in control feature '{name}'")

    @property
    def n_strings(self):
        return self.f0.shape[0]

    @property
    def n_frames(self):
        return self.f0.shape[1]

    def slice_frames(self, start, stop):
        return ControlFeatures(
            f0=self.f0[:, start:stop],
            l=self.l[:, start:stop],
            p=self.p[:, start:stop],
            c=self.c[:, start:stop],
            frame_rate=self.frame_rate,
        )

    def save(self, path):
        np.savez(
            path,
            f0=self.f0,
            l=self.l,
            p=self.p,
            c=self.c,
            meta=json.dumps(
                {"frame_rate": self.frame_rate, "shape": list(self.f0.shape)}
            ),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            return cls(
                f0=data["f0"],
                l=data["l"],
                p=data["p"],
                c=data["c"],
                frame_rate=int(meta["frame_rate"]),
            )


@dataclass
class QuantizedControlFeatures:
    """One-hot encoded control features: F0 over 305 bins, L/P/C over K=64."""

    F0: np.ndarray
    L: np.ndarray
    P: np.ndarray
    C: np.ndarray


def extract_control_features(string_audio, sample_rate=SAMPLE_RATE):
    """Extract all four contours from per-string audio shaped (n_strings, n_samples)."""
    string_audio = np.asarray(string_audio, dtype=np.float64)
    if string_audio.ndim != 2:
        raise ValueError("expected per-string audio shaped (n_strings, n_samples)")
    f0_rows, l_rows, p_rows, c_rows = [], [], [], []
    for channel in string_audio:
        f0, p = estimate_f0_periodicity(channel, sample_rate)
        f0_rows.append(f0)
        p_rows.append(p)
        l_rows.append(extract_loudness(channel, sample_rate))
        c_rows.append(extract_centroid(channel, sample_rate))
    return ControlFeatures(
        f0=np.stack(f0_rows),
        l=np.stack(l_rows),
        p=np.stack(p_rows),
        c=np.stack(c_rows),
    )


def _one_hot(bins, n_bins):
    out = np.zeros(bins.shape + (n_bins,), dtype=np.float64)
    np.put_along_axis(out, bins[..., None], 1.0, axis=-1)
    return out


def quantize_features(features: ControlFeatures) -> QuantizedControlFeatures:
    """Quantize and one-hot encode a ControlFeatures tensor set."""
    return QuantizedControlFeatures(
        F0=_one_hot(quantize(features.f0, N_PITCH_BINS), N_PITCH_BINS),
        L=_one_hot(quantize(features.l, K_BINS), K_BINS),
        P=_one_hot(quantize(features.p, K_BINS), K_BINS),
        C=_one_hot(quantize(features.c, K_BINS), K_BINS),
    )
