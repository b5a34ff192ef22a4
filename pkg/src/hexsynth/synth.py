"""Differentiable six-voice harmonic + filtered-noise + reverb synthesizer.

All signal math is torch so spectral losses backpropagate into the synthesis
parameters (harmonic distribution H, global amplitude a, noise-band
amplitudes N) and the per-string reverb impulse responses. Control signals
run at 128 Hz and are upsampled to 48 kHz with linear interpolation between
frame centers (frame t sits on sample t*375).

Shape conventions (no batch dimension; voices are the leading axis):
    f0_unit: (T,) or (6, T)    unit-scale fundamental per frame
    H:       (T, 128)          harmonic distribution (pre-normalization)
    a:       (T,)              global harmonic amplitude
    N:       (T, 128)          noise band amplitudes
    audio:   (n_samples,)      n_samples = T * 375
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .features import _MIDI_LO, _MIDI_SPAN, HOP, SAMPLE_RATE

N_HARMONICS = 128
N_NOISE_BANDS = 128
REVERB_SECONDS = 0.25
REVERB_LENGTH = round(REVERB_SECONDS * SAMPLE_RATE)  # 12000

WINDOW_SECONDS = 8.0
HOP_SECONDS = 4.0
CROSSFADE_SECONDS = 0.1


def exp_sigmoid(x, exponent=10.0, max_value=2.0, threshold=1e-7):
    """Output nonlinearity for amplitude-like parameters:
    max_value * sigmoid(x)**log(exponent) + threshold."""
    return max_value * torch.sigmoid(x) ** math.log(exponent) + threshold


def unscale_f0_torch(unit):
    """Unit-scale F0 back to Hz (torch; differentiable)."""
    midi = unit * _MIDI_SPAN + _MIDI_LO
    return 440.0 * torch.exp2((midi - 69.0) / 12.0)


def upsample_controls(frame_signal, hop=HOP):
    """Linear interpolation from frame rate to sample rate.

    (T,) -> (T*hop,) or (T, d) -> (T*hop, d); frame t lands exactly on sample
    t*hop and the tail past the last frame center holds its value.
    """
    x = frame_signal
    n_frames = x.shape[0]
    if n_frames == 1:
        reps = (hop,) + (1,) * (x.dim() - 1)
        return x.repeat(*reps)
    w = torch.arange(hop, dtype=x.dtype, device=x.device) / hop
    x0, x1 = x[:-1], x[1:]
    if x.dim() == 1:
        segments = x0[:, None] * (1 - w) + x1[:, None] * w
        tail = x[-1].expand(hop)
    else:
        segments = x0[:, None, :] * (1 - w)[:, None] + x1[:, None, :] * w[:, None]
        tail = x[-1].expand(hop, *x.shape[1:])
    return torch.cat([segments.reshape(-1, *x.shape[1:]), tail], dim=0)


def _downsample_grad(grad_up, n_frames, hop):
    """Adjoint of :func:`upsample_controls` for (n_samples, d) gradients."""
    if n_frames == 1:
        return grad_up.sum(dim=0, keepdim=True)
    w = torch.arange(hop, dtype=grad_up.dtype, device=grad_up.device) / hop
    head = grad_up[: (n_frames - 1) * hop].reshape(n_frames - 1, hop, -1)
    grad_frames = grad_up.new_zeros((n_frames, grad_up.shape[-1]))
    grad_frames[:-1] += (head * (1 - w)[:, None]).sum(dim=1)
    grad_frames[1:] += (head * w[:, None]).sum(dim=1)
    grad_frames[-1] += grad_up[(n_frames - 1) * hop :].sum(dim=0)
    return grad_frames


class _OscillatorBank(torch.autograd.Function):
    """Chunk of the harmonic sum with recompute-in-backward.

    Materializing the (n_samples, n_harmonics) sinusoid tensor inside the
    autograd graph is prohibitively slow and memory-hungry, so the forward
    stores only the frame-rate amplitudes and phase and rebuilds the
    sinusoids when gradients are needed.
    """

    @staticmethod
    def forward(ctx, phase, ks, amp_frames, hop):
        with torch.no_grad():
            amp = upsample_controls(amp_frames, hop)
            out = (torch.sin(phase[:, None] * ks) * amp).sum(dim=-1)
        ctx.save_for_backward(phase, ks, amp_frames)
        ctx.hop = hop
        return out

    @staticmethod
    def backward(ctx, grad_out):
        phase, ks, amp_frames = ctx.saved_tensors
        grad_phase = grad_amp = None
        with torch.no_grad():
            angles = phase[:, None] * ks
            if ctx.needs_input_grad[2]:
                grad_amp = _downsample_grad(
                    grad_out[:, None] * torch.sin(angles), amp_frames.shape[0], ctx.hop
                )
            if ctx.needs_input_grad[0]:
                amp = upsample_controls(amp_frames, ctx.hop)
                grad_phase = (grad_out[:, None] * amp * torch.cos(angles) * ks).sum(-1)
        return grad_phase, None, grad_amp, None


def harmonic_synth(f0_unit, H, a, sample_rate=SAMPLE_RATE, hop=HOP, chunk_size=8):
    """Additive oscillator bank with cumulative phase.

    Harmonics at or above Nyquist are zeroed, the distribution is
    renormalized to sum 1 per frame, scaled by the global amplitude, then
    upsampled. Phase of harmonic k at sample t is
    2*pi * k * sum_{tau<=t} f0(tau) / sample_rate.

    The harmonic sum runs in small chunks (recomputed in backward) to bound
    peak memory and keep allocations cache-friendly.
    """
    n_harmonics = H.shape[-1]
    f0_hz = unscale_f0_torch(f0_unit)
    ks = torch.arange(1, n_harmonics + 1, dtype=H.dtype, device=H.device)

    mask = (f0_hz[:, None] * ks) < (sample_rate / 2)
    H_masked = H * mask.to(H.dtype)
    H_norm = H_masked / (H_masked.sum(dim=-1, keepdim=True) + 1e-12)
    amp_frames = H_norm * a[:, None]

    f0_up = upsample_controls(f0_hz, hop)
    phase = 2.0 * math.pi * torch.cumsum(f0_up, dim=0) / sample_rate

    out = torch.zeros_like(f0_up)
    for start in range(0, n_harmonics, chunk_size):
        stop = min(start + chunk_size, n_harmonics)
        out = out + _OscillatorBank.apply(
            phase, ks[start:stop], amp_frames[:, start:stop], hop
        )
    return out


def _band_interp_weights(n_bands, n_bins, nyquist, dtype):
    """Linear-interpolation matrix mapping band amplitudes to rfft bin gains.

    Bands are uniform over [0, nyquist] with centers at (b + 0.5)/n_bands;
    bin j sits at j/(n_bins - 1) of Nyquist. Edge bins clamp to the outermost
    band value.
    """
    centers = (np.arange(n_bands) + 0.5) / n_bands * nyquist
    bins = np.linspace(0.0, nyquist, n_bins)
    weights = np.zeros((n_bins, n_bands))
    for j, f in enumerate(bins):
        if f <= centers[0]:
            weights[j, 0] = 1.0
        elif f >= centers[-1]:
            weights[j, -1] = 1.0
        else:
            i = np.searchsorted(centers, f) - 1
            t = (f - centers[i]) / (centers[i + 1] - centers[i])
            weights[j, i] = 1.0 - t
            weights[j, i + 1] = t
    return torch.as_tensor(weights, dtype=dtype)


def noise_synth(N_bands, n_samples, sample_rate=SAMPLE_RATE, hop=HOP, generator=None):
    """Time-varying filtered noise.

    Per frame, a zero-phase FIR filter is built from the 128-band amplitude
    envelope (interpolated over FFT bins, irfft, centered and Hann-tapered),
    applied to Hann-windowed uniform noise frames, and overlap-added at a
    375-sample hop. The noise source is uniform in [-1, 1) and seeded through
    ``generator`` for reproducible renders.
    """
    n_frames, n_bands = N_bands.shape
    dtype, device = N_bands.dtype, N_bands.device
    frame_len = 2 * hop
    ir_len = 2 * n_bands

    # Zero-phase kernel per frame: real spectrum -> symmetric impulse,
    # rolled to the center and tapered.
    interp = _band_interp_weights(n_bands, ir_len // 2 + 1, sample_rate / 2, dtype)
    magnitude = N_bands @ interp.T.to(device)
    kernel = torch.fft.irfft(magnitude.to(torch.complex128 if dtype == torch.float64 else torch.complex64), n=ir_len, dim=-1)
    kernel = torch.roll(kernel, ir_len // 2, dims=-1)
    kernel = kernel * torch.hann_window(ir_len, periodic=True, dtype=dtype, device=device)

    noise_len = (n_frames - 1) * hop + frame_len
    noise = torch.rand(noise_len, generator=generator, dtype=dtype, device=device) * 2 - 1
    frames = noise.unfold(0, frame_len, hop)[:n_frames]
    frames = frames * torch.hann_window(frame_len, periodic=True, dtype=dtype, device=device)

    # FFT convolution of each frame with its kernel.
    conv_len = frame_len + ir_len - 1
    n_fft = 1 << (conv_len - 1).bit_length()
    spec = torch.fft.rfft(frames, n=n_fft) * torch.fft.rfft(kernel, n=n_fft)
    filtered = torch.fft.irfft(spec, n=n_fft)[:, :conv_len]

    # Overlap-add, then undo the ir_len/2 group delay of the centered kernel.
    total = (n_frames - 1) * hop + conv_len
    stitched = F.fold(
        filtered.T.unsqueeze(0),
        output_size=(total, 1),
        kernel_size=(conv_len, 1),
        stride=(hop, 1),
    ).reshape(total)
    delay = ir_len // 2
    out = stitched[delay : delay + n_samples]
    if out.shape[0] < n_samples:
        out = F.pad(out, (0, n_samples - out.shape[0]))
    return out


def fft_convolve(x, h):
    """Full linear convolution of 1-D tensors via rfft."""
    conv_len = x.shape[-1] + h.shape[-1] - 1
    n_fft = 1 << (conv_len - 1).bit_length()
    spec = torch.fft.rfft(x, n=n_fft) * torch.fft.rfft(h, n=n_fft)
    return torch.fft.irfft(spec, n=n_fft)[..., :conv_len]


def reverb_apply(dry, ir):
    """dry + (dry * ir), truncated to the dry length."""
    wet = fft_convolve(dry, ir)[..., : dry.shape[-1]]
    return dry + wet


class ReverbBank(torch.nn.Module):
    """Per-string trainable impulse responses (6, 12000); 0.25 s at 48 kHz."""

    def __init__(self, n_strings=6, length=REVERB_LENGTH, seed=0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        init = (torch.rand(n_strings, length, generator=gen, dtype=dtype) * 2 - 1) * 1e-4
        self.ir = torch.nn.Parameter(init)

    def forward(self, dry):
        """dry: (n_strings, n_samples) -> reverberated, same shape."""
        return reverb_apply(dry, self.ir)


def mix_voices(per_string):
    """Sum per-string channels (sequence of (n,) tensors, equal lengths)."""
    lengths = {int(v.shape[-1]) for v in per_string}
    if len(lengths) != 1:
        raise ValueError(f"voice lengths differ: {sorted(lengths)}")
    return torch.stack(tuple(per_string)).sum(dim=0)


@dataclass
class SynthesisParams:
    """Post-nonlinearity synthesis parameters for all six voices."""

    H: torch.Tensor  # (6, T, n_harmonics)
    a: torch.Tensor  # (6, T)
    N: torch.Tensor  # (6, T, n_noise_bands)

    def __post_init__(self):
        if self.H.dim() != 3 or self.N.dim() != 3 or self.a.dim() != 2:
            raise ValueError("expected H (S,T,K), a (S,T), N (S,T,B)")
        if not (self.H.shape[:2] == self.a.shape == self.N.shape[:2]):
            raise ValueError(
                f"inconsistent parameter shapes: H {tuple(self.H.shape)}, "
                f"a {tuple(self.a.shape)}, N {tuple(self.N.shape)}"
            )

    @property
    def n_strings(self):
        return self.H.shape[0]

    @property
    def n_frames(self):
        return self.H.shape[1]


def synthesize(params: SynthesisParams, f0_unit, reverb: ReverbBank | None = None,
               noise_seed=0, sample_rate=SAMPLE_RATE, hop=HOP):
    """Render all six voices and their mixture.

    Per string: reverb_apply(harmonic_synth + noise_synth). Returns
    (mixture (n,), per_string (6, n)). Noise is drawn from one generator
    seeded with ``noise_seed``, advancing per string.
    """
    if f0_unit.shape != params.a.shape:
        raise ValueError(
            f"f0 shape {tuple(f0_unit.shape)} != amplitude shape {tuple(params.a.shape)}"
        )
    n_samples = params.n_frames * hop
    gen = torch.Generator().manual_seed(noise_seed)
    dry = []
    for i in range(params.n_strings):
        harm = harmonic_synth(f0_unit[i], params.H[i], params.a[i], sample_rate, hop)
        noise = noise_synth(params.N[i], n_samples, sample_rate, hop, generator=gen)
        dry.append(harm + noise)
    voices = torch.stack(dry)
    if reverb is not None:
        voices = reverb(voices)
    return mix_voices(list(voices)), voices


def render_windowed(total_frames, window_fn, base_seed=0, frame_rate=128, hop=HOP):
    """Long-form rendering: 8 s windows, 4 s hop, 100 ms linear crossfade.

    ``window_fn(frame_offset, n_frames, noise_seed) -> (n_frames * hop,)``
    numpy array synthesizes one conditioning window (padding conditioning
    past the recording end with silence). Window i uses noise seed
    ``base_seed + i``. The crossfade into window i starts 2 s into the 4 s
    overlap, i.e. at local time 6.0 s of window i-1; output length is exactly
    ``total_frames * hop`` samples.
    """
    win_frames = int(WINDOW_SECONDS * frame_rate)
    hop_frames = int(HOP_SECONDS * frame_rate)
    fade_len = int(CROSSFADE_SECONDS * frame_rate * hop)
    total_samples = total_frames * hop

    if total_frames <= win_frames:
        out = np.asarray(window_fn(0, total_frames, base_seed), dtype=np.float64)
        return out[:total_samples]

    offsets = [0]
    while offsets[-1] + win_frames < total_frames:
        offsets.append(offsets[-1] + hop_frames)

    win_samples = win_frames * hop
    out = np.zeros(offsets[-1] * hop + win_samples)
    out[:win_samples] = np.asarray(window_fn(0, win_frames, base_seed), dtype=np.float64)
    fade_in = np.linspace(0.0, 1.0, fade_len)
    # Crossfade anchor: halfway into the (win - hop) overlap = 2 s, so local
    # time 6.0 s of the earlier window and 2.0 s of the later one.
    takeover = (win_frames - hop_frames) // 2 * hop

    for i, offset in enumerate(offsets[1:], start=1):
        window = np.asarray(window_fn(offset, win_frames, base_seed + i), dtype=np.float64)
        start = offset * hop
        t = start + takeover
        out[t : t + fade_len] *= 1.0 - fade_in
        out[t : t + fade_len] += fade_in * window[takeover : takeover + fade_len]
        out[t + fade_len : start + win_samples] = window[takeover + fade_len :]
    return out[:total_samples]
