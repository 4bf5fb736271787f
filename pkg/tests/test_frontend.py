import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from instrument_embedding.frontend import (FilterbankError, FilterbankParams, SincFrontend,
                                           apply_frontend, effective_cutoffs, filter_table,
                                           hz_to_mel, init_filterbank, mel_init, mel_to_hz,
                                           midi_init, num_frames, sinc_kernel)

SR = 16000


def test_center_tap_before_window():
    g = sinc_kernel(1000, 2000, 251, SR, window=False)
    assert g[125] == pytest.approx(0.125, abs=1e-15)


def test_kernel_matches_sinc_formula():
    # direct transcription with numpy's normalised sinc: sinc_np(x) = sin(pi x)/(pi x)
    f1, f2, L = 300.0, 1700.0, 101
    n = np.arange(L) - L // 2
    ref = 2 * f2 / SR * np.sinc(2 * f2 / SR * n) - 2 * f1 / SR * np.sinc(2 * f1 / SR * n)
    np.testing.assert_allclose(sinc_kernel(f1, f2, L, SR, window=False), ref, atol=1e-15)
    np.testing.assert_allclose(sinc_kernel(f1, f2, L, SR), ref * np.hamming(L), atol=1e-15)


def test_kernel_passband_fft():
    g = sinc_kernel(1000, 2000, 251, SR)
    spec = np.abs(np.fft.rfft(g, 16000))  # 1 Hz bins
    assert spec[1500] >= 10 * spec[4000]


@pytest.mark.parametrize("f1,f2,L", [(1000, 1000, 251), (2000, 1000, 251), (100, 200, 250),
                                     (0, 100, 251), (100, 9000, 251)])
def test_kernel_rejects_bad_args(f1, f2, L):
    with pytest.raises(FilterbankError):
        sinc_kernel(f1, f2, L, SR)


@settings(max_examples=50, deadline=None)
@given(st.floats(5, 7000), st.floats(5, 1000), st.sampled_from([31, 101, 251]))
def test_kernel_even_symmetric(f1, bw, L):
    g = sinc_kernel(f1, min(f1 + bw, 8000), L, SR)
    assert np.array_equal(g, g[::-1])


def test_torch_kernels_symmetric_and_match_numpy():
    params = midi_init(122)
    front = SincFrontend(params).double()
    k = front.kernels().detach().numpy()
    assert np.array_equal(k, k[:, ::-1])
    f1, f2 = (t.detach().numpy() for t in front.cutoffs())
    for c in (0, 40, 69, 121):
        np.testing.assert_allclose(k[c], sinc_kernel(f1[c], f2[c], 251, SR), atol=1e-12)


def test_midi_init_values():
    f1, f2 = midi_init(122).effective_cutoffs()
    assert f1[69] == pytest.approx(415.305, abs=1e-2)
    assert f2[69] == pytest.approx(466.164, abs=1e-2)
    assert f1[0] == pytest.approx(7.72, abs=1e-2)
    assert f2[121] == 8000.0
    # interior channels share the MIDI grid
    np.testing.assert_allclose(f2[30:118], f1[32:120], rtol=1e-12)


def test_mel_init_properties():
    assert mel_to_hz(2595.0) == pytest.approx(6300.0)
    assert hz_to_mel(mel_to_hz(1234.5)) == pytest.approx(1234.5)
    p = mel_init(80, SR, 0.0)
    f1, f2 = p.effective_cutoffs()
    assert p.num_channels == 80
    assert f2[-1] == 8000.0
    assert np.all(np.diff(f1) > 0) and np.all(np.diff(f2) > 0)
    raw_f2 = p.low_freq + p.band
    np.testing.assert_allclose(raw_f2[:-2], p.low_freq[2:], rtol=1e-12)
    with pytest.raises(FilterbankError):
        mel_init(80, SR, f_min=8000.0)


def test_init_filterbank_names():
    assert init_filterbank("mel80").num_channels == 80
    assert init_filterbank("mel122").num_channels == 122
    assert init_filterbank("cqt122").num_channels == 122
    with pytest.raises(FilterbankError):
        init_filterbank("bark40")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2e4, 2e4), min_size=1, max_size=8),
       st.lists(st.floats(-2e4, 2e4), min_size=1, max_size=8))
def test_effective_cutoffs_bounds(low, band):
    n = min(len(low), len(band))
    f1, f2 = effective_cutoffs(np.array(low[:n]), np.array(band[:n]), SR)
    assert np.all(f1 >= 5) and np.all(f2 <= SR / 2) and np.all(f2 > f1)
    t1, t2 = SincFrontend(FilterbankParams(low[:n], band[:n], 31)).double().cutoffs()
    np.testing.assert_allclose(t1.detach().numpy(), f1, rtol=1e-6)
    np.testing.assert_allclose(t2.detach().numpy(), f2, rtol=1e-6)


def test_params_validation():
    with pytest.raises(FilterbankError):
        FilterbankParams([1, 2], [1], 251)
    with pytest.raises(FilterbankError):
        FilterbankParams([1], [1], 250)


def test_frame_count_and_shape():
    assert num_frames(64000) == 398
    fm = apply_frontend(np.random.default_rng(0).standard_normal(64000), midi_init(122))
    assert fm.values.shape == (122, 398)
    assert fm.num_frames == 398
    assert np.all(np.isfinite(fm.values))


def test_zero_wave_gives_constant_frames():
    fm = apply_frontend(np.zeros(8000), midi_init(122))
    assert np.all(np.isfinite(fm.values))
    np.testing.assert_allclose(fm.values, fm.values[:, :1].repeat(fm.num_frames, 1))
    np.testing.assert_allclose(fm.values, 0.0)


def test_pure_tone_selects_channel_69():
    t = np.arange(SR) / SR
    front = SincFrontend(midi_init(122)).double()
    with torch.no_grad():
        env = front.envelope(torch.from_numpy(np.sin(2 * np.pi * 440 * t))[None])[0]
    energy = torch.log(env + 1e-6).mean(-1).numpy()
    assert int(np.argmax(energy)) == 69


def test_short_wave_rejected():
    with pytest.raises(ValueError):
        apply_frontend(np.zeros(100), midi_init(122))


def test_fixed_frontend_has_no_trainable_cutoffs():
    front = SincFrontend(midi_init(8), trainable=False)
    assert not any(p.requires_grad for p in front.parameters())
    front.set_trainable(True)
    assert all(p.requires_grad for p in front.parameters())


def test_strided_envelope_close_to_full_rate():
    rng = np.random.default_rng(1)
    wave = torch.from_numpy(rng.standard_normal(16000))[None]
    full = SincFrontend(init_filterbank("mel80")).double()
    fast = SincFrontend(init_filterbank("mel80"), conv_stride=8).double()
    with torch.no_grad():
        a, b = full(wave), fast(wave)
    assert a.shape == b.shape
    assert torch.corrcoef(torch.stack([a.flatten(), b.flatten()]))[0, 1] > 0.8


def test_stride_must_divide_hop():
    with pytest.raises(FilterbankError):
        SincFrontend(midi_init(8), frame_len=400, hop=160, conv_stride=7)


def test_normalisation_modes():
    wave = torch.from_numpy(np.random.default_rng(2).standard_normal(8000))[None]
    for mode in ("channel", "utterance", "none"):
        out = SincFrontend(midi_init(16), normalize=mode).double()(wave)
        if mode == "channel":
            np.testing.assert_allclose(out.mean(-1).detach().numpy(), 0, atol=1e-9)
        elif mode == "utterance":
            assert abs(out.mean().item()) < 1e-9
    with pytest.raises(FilterbankError):
        SincFrontend(midi_init(4), normalize="batch")


def test_filter_table_rows():
    rows = filter_table(midi_init(122))
    assert len(rows) == 122
    c, a, b = rows[69]
    assert c == 69 and a == pytest.approx(415.305, abs=1e-2) and b == pytest.approx(466.164, abs=1e-2)


def _fd_check(fn, param, eps=1e-3, n_coords=6, seed=0):
    loss = fn()
    grad, = torch.autograd.grad(loss, param)
    rng = np.random.default_rng(seed)
    flat = param.data.view(-1)
    worst = 0.0
    for i in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        num = (up - down) / (2 * eps)
        ana = grad.view(-1)[i].item()
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def test_cutoff_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    for trial in range(5):
        low = rng.uniform(100, 3000, 4)
        band = rng.uniform(50, 800, 4)
        front = SincFrontend(FilterbankParams(low, band, 31), frame_len=40, hop=20).double()
        wave = torch.from_numpy(rng.standard_normal(400))[None]
        proj = torch.from_numpy(rng.standard_normal((4, 1)))

        def loss():
            return (front.filter(wave) ** 2 * proj).mean()

        assert _fd_check(loss, front.low_hz, seed=trial) < 1e-4
        assert _fd_check(loss, front.band_hz, seed=trial) < 1e-4
