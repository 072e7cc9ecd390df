import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import get_window

from timevq.tfr import (Spectrogram, StftConfig, band_split, istft, length_match, pad_band, stft)

CFG = StftConfig()


def numpy_stft(x, n_fft=8, hop=2):
    """Independent reference: reflect-pad, periodic Hann frames, rfft."""
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    win = get_window("hann", n_fft, fftbins=True)
    n_frames = 1 + (len(xp) - n_fft) // hop
    frames = np.stack([xp[i * hop:i * hop + n_fft] * win for i in range(n_frames)], axis=1)
    return np.fft.rfft(frames, axis=0)


def test_defaults():
    assert (CFG.n_fft, CFG.hop, CFG.lf_bins, CFG.freq_bins) == (8, 2, 1, 5)


@pytest.mark.parametrize("kw", [dict(n_fft=1), dict(hop=0), dict(hop=9), dict(lf_bins=0), dict(lf_bins=5),
                                dict(window="hamming")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        StftConfig(**kw)


def test_shape_l64():
    u = stft(np.random.randn(64))
    assert u.shape == (2, 5, 33)
    assert CFG.n_frames(64) == 33


@pytest.mark.parametrize("length", [8, 17, 64, 100])
def test_matches_numpy_reference(length):
    x = np.random.default_rng(length).standard_normal(length)
    ref = numpy_stft(x)
    u = stft(x).data.numpy()
    assert u.shape[1:] == ref.shape
    np.testing.assert_allclose(u[0], ref.real, atol=1e-10)
    np.testing.assert_allclose(u[1], ref.imag, atol=1e-10)


def test_zero_series():
    u = stft(np.zeros(32))
    assert torch.count_nonzero(u.data) == 0
    assert torch.count_nonzero(istft(Spectrogram(torch.zeros(2, 5, 17, dtype=torch.float64), 32))) == 0


def test_constant_series_is_dc_with_boxcar():
    u = stft(np.full(40, 3.0), StftConfig(window="boxcar")).data
    mag = (u[0] ** 2 + u[1] ** 2).sqrt()
    assert mag[1:].max() < 1e-6 * mag[0].max()


def test_constant_series_hann_leakage():
    # the periodic Hann DFT is (n/2, -n/4, 0, ...): DC leaks into row 1 at half amplitude only
    u = stft(np.full(40, 3.0)).data
    mag = (u[0] ** 2 + u[1] ** 2).sqrt()
    torch.testing.assert_close(mag[0], torch.full_like(mag[0], 3.0 * 4))
    torch.testing.assert_close(mag[1], torch.full_like(mag[1], 3.0 * 2))
    assert mag[2:].max() < 1e-12


def test_too_short():
    with pytest.raises(ValueError):
        stft(np.zeros(7))


def test_round_trip_length_100():
    x = np.random.randn(100)
    x_rec = istft(stft(x)).numpy()
    assert x_rec.shape == (100,)
    assert np.abs(x_rec - x).max() < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(16, 512), st.integers(0, 2**32 - 1), st.sampled_from([np.float32, np.float64]),
       st.sampled_from(["hann", "boxcar"]))
def test_round_trip_and_additivity(length, seed, dtype, window):
    cfg = StftConfig(window=window)
    x = np.random.default_rng(seed).standard_normal(length).astype(dtype)
    u = stft(x, cfg)
    assert np.abs(istft(u, cfg).numpy() - x).max() < 1e-5
    pair = band_split(u, cfg)
    total = istft(pair.u_lf, cfg) + istft(pair.u_hf, cfg)
    assert (total - istft(u, cfg)).abs().max() < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 128), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(length, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(length), rng.standard_normal(length)
    lhs = stft(a * x + b * y).data
    rhs = a * stft(x).data + b * stft(y).data
    scale = max(1.0, rhs.abs().max().item())
    assert (lhs - rhs).abs().max().item() <= 1e-6 * scale


def test_band_split_rows():
    u = stft(np.random.randn(64))
    pair = band_split(u)
    assert torch.count_nonzero(pair.u_lf.data[:, 1:]) == 0
    assert torch.count_nonzero(pair.u_hf.data[:, :1]) == 0
    torch.testing.assert_close(pair.u_lf.data[:, :1], u.data[:, :1], rtol=0, atol=0)


def test_partition_of_ones_exact():
    u = Spectrogram(torch.ones(2, 5, 9), 16)
    pair = band_split(u)
    assert torch.equal(pair.u_lf.data + pair.u_hf.data, u.data)


def test_top_row_boundary():
    cfg = StftConfig(lf_bins=4)
    pair = band_split(Spectrogram(torch.ones(2, 5, 9), 16), cfg)
    assert torch.count_nonzero(pair.u_hf.data[:, :4]) == 0
    assert torch.all(pair.u_hf.data[:, 4] == 1)


def test_band_split_idempotent():
    pair = band_split(stft(np.random.randn(50)))
    again = band_split(pair.u_lf)
    assert torch.equal(again.u_lf.data, pair.u_lf.data)
    assert torch.count_nonzero(again.u_hf.data) == 0


def test_pad_band_bad_name():
    with pytest.raises(ValueError):
        pad_band(torch.ones(2, 5, 3), CFG, "mid")


def test_length_match_examples():
    np.testing.assert_allclose(length_match(np.array([0.0, 1.0]), 3), [0, 0.5, 1])
    np.testing.assert_allclose(length_match(np.array([0.0, 2, 4, 6]), 7), np.arange(7.0))
    y = np.random.randn(11)
    np.testing.assert_array_equal(length_match(y, 11), y)
    with pytest.raises(ValueError):
        length_match(np.array([1.0]), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 120), st.integers(0, 2**32 - 1))
def test_length_match_on_uniform_grid(n_in, n_out, seed):
    # oracle: np.interp on a grid whose end points coincide
    y = np.random.default_rng(seed).standard_normal(n_in)
    expect = np.interp(np.linspace(0, 1, n_out), np.linspace(0, 1, n_in), y)
    np.testing.assert_allclose(length_match(y, n_out), expect, atol=1e-12)


def test_length_match_batched_tensor():
    y = torch.randn(3, 2, 5, 10)
    out = length_match(y, 13)
    assert out.shape == (3, 2, 5, 13)
    torch.testing.assert_close(out[..., 0], y[..., 0])
    torch.testing.assert_close(out[..., -1], y[..., -1])
