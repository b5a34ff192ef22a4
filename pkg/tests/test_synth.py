import numpy as np
import pytest
import torch

from hexsynth import synth
from hexsynth.features import _MIDI_LO, _MIDI_SPAN, hz_to_midi, scale_f0
from hexsynth.synth import (
    ReverbBank,
    SynthesisParams,
    exp_sigmoid,
    fft_convolve,
    harmonic_synth,
    mix_voices,
    noise_synth,
    render_windowed,
    reverb_apply,
    synthesize,
    upsample_controls,
)

torch.set_num_threads(1)
DT = torch.float64


def unit_f0(freq_hz):
    # Extends past [0, 1) on purpose for anti-alias tests.
    return float((hz_to_midi(freq_hz) - _MIDI_LO) / _MIDI_SPAN)


def spectrum_db(x):
    mag = np.abs(np.fft.rfft(np.asarray(x)))
    mag = np.maximum(mag, 1e-12)
    return 20 * np.log10(mag / mag.max())


class TestUpsample:
    def test_constant(self):
        x = torch.full((10,), 0.7, dtype=DT)
        up = upsample_controls(x)
        assert up.shape == (3750,)
        assert torch.allclose(up, torch.full_like(up, 0.7))

    def test_ramp_monotone(self):
        x = torch.linspace(0, 1, 8, dtype=DT)
        up = upsample_controls(x)
        assert torch.all(up.diff() >= 0)

    def test_two_frame_midpoint(self):
        up = upsample_controls(torch.tensor([0.0, 1.0], dtype=DT))
        assert up[187].item() == pytest.approx(0.5, abs=1 / 375)

    def test_frame_centers_exact(self):
        x = torch.rand(6, dtype=DT)
        up = upsample_controls(x)
        for t in range(6):
            assert up[t * 375].item() == x[t].item()

    def test_multichannel(self):
        x = torch.rand(4, 3, dtype=DT)
        up = upsample_controls(x)
        assert up.shape == (1500, 3)
        assert torch.allclose(up[2 * 375], x[2])


class TestHarmonicSynth:
    def test_zero_amplitude_is_silence(self):
        T = 64
        f0 = torch.full((T,), scale_f0(440.0), dtype=DT)
        H = torch.rand(T, 128, dtype=DT)
        a = torch.zeros(T, dtype=DT)
        y = harmonic_synth(f0, H, a)
        assert torch.all(y == 0.0)

    def test_fundamental_only_peak_at_440(self):
        T = 128  # 1 s
        f0 = torch.full((T,), scale_f0(440.0), dtype=DT)
        H = torch.zeros(T, 128, dtype=DT)
        H[:, 0] = 1.0
        a = torch.full((T,), 0.5, dtype=DT)
        y = harmonic_synth(f0, H, a)
        db = spectrum_db(y.numpy())
        freqs = np.fft.rfftfreq(len(y), 1 / 48000)
        assert freqs[db.argmax()] == pytest.approx(440.0, abs=1.0)
        outside = np.abs(freqs - 440.0) > 5.0
        assert db[outside].max() <= -40.0

    def test_anti_alias_mask_keeps_only_fundamental(self):
        T = 64
        f0 = torch.full((T,), unit_f0(13000.0), dtype=DT)
        H = torch.full((T, 128), 1.0 / 128, dtype=DT)
        a = torch.full((T,), 0.5, dtype=DT)
        y = harmonic_synth(f0, H, a)
        db = spectrum_db(y.numpy())
        freqs = np.fft.rfftfreq(len(y), 1 / 48000)
        assert freqs[db.argmax()] == pytest.approx(13000.0, abs=2.0)
        outside = np.abs(freqs - 13000.0) > 50.0
        assert db[outside].max() <= -40.0

    def test_bounded_by_peak_amplitude(self):
        torch.manual_seed(0)
        T = 32
        f0 = torch.rand(T, dtype=DT) * 0.8
        H = torch.rand(T, 128, dtype=DT)
        a = torch.rand(T, dtype=DT)
        y = harmonic_synth(f0, H, a)
        assert y.abs().max() <= a.max() + 1e-9

    def test_mask_normalization_below_187hz(self):
        # All 128 harmonics stay under Nyquist below 187.5 Hz, so the
        # distribution itself must be untouched apart from normalization.
        T = 16
        f0 = torch.full((T,), scale_f0(180.0), dtype=DT)
        H = torch.rand(T, 128, dtype=DT)
        f0_hz = synth.unscale_f0_torch(f0)
        ks = torch.arange(1, 129, dtype=DT)
        assert torch.all(f0_hz[:, None] * ks < 24000)
        Hn = H / H.sum(-1, keepdim=True)
        assert torch.allclose(Hn.sum(-1), torch.ones(T, dtype=DT))

    def test_chunk_size_invariance(self):
        torch.manual_seed(1)
        T = 24
        f0 = torch.rand(T, dtype=DT) * 0.7
        H = torch.rand(T, 128, dtype=DT)
        a = torch.rand(T, dtype=DT)
        y8 = harmonic_synth(f0, H, a, chunk_size=8)
        y128 = harmonic_synth(f0, H, a, chunk_size=128)
        assert torch.allclose(y8, y128, atol=1e-10)


class TestNoiseSynth:
    def test_zero_bands_silence(self):
        N = torch.zeros(32, 128, dtype=DT)
        y = noise_synth(N, 32 * 375, generator=torch.Generator().manual_seed(0))
        assert torch.all(y == 0.0)

    def test_flat_bands_broadband(self):
        T = 256
        N = torch.ones(T, 128, dtype=DT)
        y = noise_synth(N, T * 375, generator=torch.Generator().manual_seed(0))
        x = y.numpy()[375:-375]  # skip overlap-add edge taper
        spec = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(len(x), 1 / 48000)
        band_edges = np.linspace(0, 24000, 129)
        powers = [
            spec[(freqs >= lo) & (freqs < hi)].mean()
            for lo, hi in zip(band_edges[:-1], band_edges[1:])
        ]
        db = 10 * np.log10(np.asarray(powers) / np.mean(powers))
        assert np.all(np.abs(db) < 3.0)

    def test_top_band_highpass(self):
        T = 128
        N = torch.zeros(T, 128, dtype=DT)
        N[:, -1] = 1.0
        y = noise_synth(N, T * 375, generator=torch.Generator().manual_seed(1))
        spec = np.abs(np.fft.rfft(y.numpy())) ** 2
        freqs = np.fft.rfftfreq(len(y), 1 / 48000)
        low = spec[freqs < 12000].sum()
        high = spec[freqs > 18000].sum()
        assert 10 * np.log10(low / high) <= -30.0

    def test_seed_reproducibility(self):
        N = torch.rand(16, 128, dtype=DT)
        y1 = noise_synth(N, 6000, generator=torch.Generator().manual_seed(7))
        y2 = noise_synth(N, 6000, generator=torch.Generator().manual_seed(7))
        assert torch.equal(y1, y2)


class TestReverb:
    def test_zero_ir_identity(self):
        dry = torch.rand(4000, dtype=DT)
        out = reverb_apply(dry, torch.zeros(12000, dtype=DT))
        assert torch.allclose(out, dry, atol=1e-12)

    def test_unit_impulse_doubles(self):
        dry = torch.rand(4000, dtype=DT)
        ir = torch.zeros(12000, dtype=DT)
        ir[0] = 1.0
        out = reverb_apply(dry, ir)
        assert torch.allclose(out, 2 * dry, atol=1e-9)

    def test_impulse_at_lag_375(self):
        dry = torch.rand(4000, dtype=DT)
        ir = torch.zeros(12000, dtype=DT)
        ir[375] = 1.0
        out = reverb_apply(dry, ir)
        expected = dry.clone()
        expected[375:] += dry[:-375]
        assert torch.allclose(out, expected, atol=1e-9)

    def test_fft_matches_direct_convolution(self):
        torch.manual_seed(2)
        x = torch.rand(512, dtype=DT)
        h = torch.rand(128, dtype=DT)
        fast = fft_convolve(x, h)
        direct = torch.as_tensor(np.convolve(x.numpy(), h.numpy()))
        rel = (fast - direct).abs().max() / direct.abs().max()
        assert rel < 1e-6

    def test_bank_shape_and_init_scale(self):
        bank = ReverbBank(seed=3)
        assert bank.ir.shape == (6, 12000)
        assert bank.ir.abs().max() <= 1e-4


class TestMixVoices:
    def test_five_silent_plus_one(self):
        voice = torch.rand(100, dtype=DT)
        voices = [torch.zeros(100, dtype=DT) for _ in range(5)] + [voice]
        assert torch.equal(mix_voices(voices), voice)

    def test_cancellation(self):
        voice = torch.rand(100, dtype=DT)
        assert torch.all(mix_voices([voice, -voice]) == 0.0)

    def test_permutation_invariance(self):
        torch.manual_seed(3)
        voices = [torch.rand(50, dtype=DT) for _ in range(6)]
        a = mix_voices(voices)
        b = mix_voices(voices[::-1])
        assert torch.allclose(a, b, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mix_voices([torch.zeros(10), torch.zeros(11)])


def random_params(T, seed=0, dtype=DT):
    gen = torch.Generator().manual_seed(seed)
    H = torch.rand(6, T, 128, generator=gen, dtype=dtype)
    a = torch.rand(6, T, generator=gen, dtype=dtype) * 0.2
    N = torch.rand(6, T, 128, generator=gen, dtype=dtype) * 0.01
    f0 = torch.rand(6, T, generator=gen, dtype=dtype) * 0.6 + 0.1
    return SynthesisParams(H=H, a=a, N=N), f0


class TestSynthesize:
    def test_all_zero_params_silence(self):
        T = 16
        params = SynthesisParams(
            H=torch.zeros(6, T, 128, dtype=DT),
            a=torch.zeros(6, T, dtype=DT),
            N=torch.zeros(6, T, 128, dtype=DT),
        )
        f0 = torch.full((6, T), 0.5, dtype=DT)
        mix, per = synthesize(params, f0, reverb=None, noise_seed=0)
        assert torch.all(mix == 0.0) and torch.all(per == 0.0)

    def test_single_active_string(self):
        T = 16
        params, f0 = random_params(T, seed=4)
        params.a[1:] = 0.0
        params.N[1:] = 0.0
        mix, per = synthesize(params, f0, reverb=None, noise_seed=0)
        assert torch.allclose(mix, per[0], atol=1e-12)

    def test_mixture_is_sum_of_channels(self):
        params, f0 = random_params(12, seed=5)
        reverb = ReverbBank(seed=5)
        mix, per = synthesize(params, f0, reverb, noise_seed=2)
        assert torch.allclose(mix, per.sum(dim=0), atol=1e-10)

    def test_shape_mismatch(self):
        params, _ = random_params(12, seed=6)
        with pytest.raises(ValueError):
            synthesize(params, torch.zeros(6, 13, dtype=DT))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            SynthesisParams(
                H=torch.zeros(6, 4, 128), a=torch.zeros(6, 5), N=torch.zeros(6, 4, 128)
            )


class TestRenderWindowed:
    @staticmethod
    def constant_fn(value):
        def fn(offset, n_frames, seed):
            return np.full(n_frames * 375, value)
        return fn

    def test_constant_windows_constant_output(self):
        out = render_windowed(1536, self.constant_fn(0.25))
        assert out.shape == (1536 * 375,)
        assert np.allclose(out, 0.25)

    def test_eight_seconds_single_window_bit_exact(self):
        calls = []
        def fn(offset, n_frames, seed):
            calls.append((offset, n_frames, seed))
            rng = np.random.default_rng(seed)
            return rng.standard_normal(n_frames * 375)
        out = render_windowed(1024, fn, base_seed=9)
        assert calls == [(0, 1024, 9)]
        direct = np.random.default_rng(9).standard_normal(1024 * 375)
        assert np.array_equal(out, direct)

    def test_twelve_seconds_two_windows_one_crossfade(self):
        calls = []
        def fn(offset, n_frames, seed):
            calls.append(offset)
            return np.full(n_frames * 375, float(len(calls)))
        out = render_windowed(1536, fn)
        assert calls == [0, 512]
        assert out.shape == (576000,)
        # before the crossfade (absolute 6.0 s) -> window 1, after -> window 2.
        assert np.all(out[:288000] == 1.0)
        assert np.all(out[288000 + 4800:] == 2.0)
        fade = out[288000 : 288000 + 4800]
        assert np.all(np.diff(fade) >= 0)
        assert fade[0] == pytest.approx(1.0, abs=1e-3)
        assert fade[-1] == 2.0

    def test_short_recording_single_uncrossfaded_window(self):
        out = render_windowed(512, self.constant_fn(1.0))
        assert out.shape == (512 * 375,)
        assert np.all(out == 1.0)

    def test_non_multiple_duration_trims_to_length(self):
        total = 1600  # 12.5 s: windows at 0, 512, 1024 (padded past the end)
        def fn(offset, n_frames, seed):
            return np.full(n_frames * 375, 1.0)
        out = render_windowed(total, fn)
        assert out.shape == (total * 375,)

    def test_repeated_calls_bit_identical(self):
        T = 1536
        params, f0 = random_params(T, seed=7)
        def fn(offset, n_frames, seed):
            p = SynthesisParams(
                H=params.H[:, offset : offset + n_frames],
                a=params.a[:, offset : offset + n_frames],
                N=params.N[:, offset : offset + n_frames],
            )
            mix, _ = synthesize(p, f0[:, offset : offset + n_frames], noise_seed=seed)
            return mix.numpy()
        first = render_windowed(T, fn, base_seed=11)
        second = render_windowed(T, fn, base_seed=11)
        assert np.array_equal(first, second)


class TestExpSigmoid:
    def test_floor_and_ceiling(self):
        x = torch.tensor([-100.0, 0.0, 100.0], dtype=DT)
        y = exp_sigmoid(x)
        assert y[0].item() == pytest.approx(1e-7, rel=1e-3)
        assert y[2].item() == pytest.approx(2.0, rel=1e-6)
        assert torch.all(y > 0)

    def test_monotone(self):
        x = torch.linspace(-10, 10, 101, dtype=DT)
        assert torch.all(exp_sigmoid(x).diff() > 0)


class TestGradients:
    def test_synthesis_gradients_match_finite_differences(self):
        # Module-scale spot check; the full acceptance suite covers MSSL.
        T = 8
        gen = torch.Generator().manual_seed(13)
        H = torch.rand(T, 128, generator=gen, dtype=DT, requires_grad=True)
        a = torch.rand(T, generator=gen, dtype=DT, requires_grad=True)
        f0 = torch.full((T,), scale_f0(200.0), dtype=DT)
        target = torch.rand(T * 375, generator=gen, dtype=DT)

        def loss_fn(Ht, at):
            y = harmonic_synth(f0, Ht, at)
            return ((y - target) ** 2).mean()

        loss = loss_fn(H, a)
        loss.backward()
        rng = np.random.default_rng(0)
        step = 1e-3
        for tensor, grad in ((H, H.grad), (a, a.grad)):
            flat = tensor.detach().reshape(-1)
            gflat = grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=5, replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = loss_fn(H.detach(), a.detach()).item()
                flat[idx] = orig - step
                down = loss_fn(H.detach(), a.detach()).item()
                flat[idx] = orig
                fd = (up - down) / (2 * step)
                analytic = gflat[idx].item()
                assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-9)
