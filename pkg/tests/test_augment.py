import numpy as np
import pytest

from areaser.audio import Waveform, stft_power
from areaser.augment import VtlpConfig, draw_alphas, unwarp_frequency, vtlp_spectrogram, warp_frequency
from areaser.errors import ConfigurationError

NYQ = 8000.0


def test_warp_formula_examples():
    assert warp_frequency(1000.0, 1.1, 4800, NYQ) == pytest.approx(1100.0)
    grid = np.linspace(0, NYQ, 1000)
    np.testing.assert_array_equal(warp_frequency(grid, 1.0, 4800, NYQ), grid)
    for a in (0.9, 1.0, 1.1):
        assert warp_frequency(NYQ, a, 4800, NYQ) == pytest.approx(NYQ)
        assert warp_frequency(0.0, a, 4800, NYQ) == 0.0


def test_warp_above_knee_by_hand():
    # alpha 0.9: knee at 4800 Hz, image 4320 Hz; 6400 Hz is halfway to nyquist
    assert warp_frequency(6400.0, 0.9, 4800, NYQ) == pytest.approx(4320 + (NYQ - 4320) / 2)


@pytest.mark.parametrize("alpha", [0.8, 0.9, 0.97, 1.0, 1.03, 1.1, 1.25])
def test_warp_strictly_monotone_and_continuous(alpha):
    grid = np.linspace(0, NYQ, 1000)
    g = warp_frequency(grid, alpha, 4800, NYQ)
    assert np.all(np.diff(g) > 0)
    knee = 4800 * min(alpha, 1) / alpha
    lo, hi = warp_frequency([knee - 1e-6, knee + 1e-6], alpha, 4800, NYQ)
    assert hi - lo < 1e-4
    np.testing.assert_allclose(unwarp_frequency(g, alpha, 4800, NYQ), grid, atol=1e-9)


def test_alpha_validation():
    with pytest.raises(ConfigurationError):
        warp_frequency(100.0, 0.0, 4800, NYQ)
    with pytest.raises(ConfigurationError):
        VtlpConfig(alpha_min=1.2, alpha_max=1.1)
    with pytest.raises(ConfigurationError):
        VtlpConfig(boundary_hz=9000).validate_rate(16000)


def test_alpha_one_is_exact_copy(rng):
    p = rng.random((7, 257)).astype(np.float32)
    out = vtlp_spectrogram(p, 1.0, VtlpConfig(), 16000)
    assert out.tobytes() == p.tobytes() and out is not p


def test_tone_moves_to_warped_bin():
    n_fft, sr = 1024, 16000
    t = np.arange(sr // 2) / sr
    p = stft_power(Waveform(np.sin(2 * np.pi * 1000 * t), sr), n_fft, 160)
    warped = vtlp_spectrogram(p, 1.05, VtlpConfig(), sr)
    target = int(round(1050 / (sr / n_fft)))
    assert np.all(warped[5:-5].argmax(axis=1) == target)


def test_energy_preserved_and_shape(rng):
    p = rng.random((5, 513))
    for a in (0.9, 1.1):
        out = vtlp_spectrogram(p, a, VtlpConfig(), 16000)
        assert out.shape == p.shape
        np.testing.assert_allclose(out.sum(axis=1), p.sum(axis=1), rtol=0.02)


def test_round_trip_below_boundary():
    freqs = np.linspace(0, NYQ, 513)
    p = np.tile(1.0 + np.exp(-((freqs - 1500) / 600) ** 2), (3, 1))
    back = vtlp_spectrogram(vtlp_spectrogram(p, 1.08, VtlpConfig(), 16000), 1 / 1.08, VtlpConfig(), 16000)
    below = freqs < 4000
    np.testing.assert_allclose(back[:, below], p[:, below], rtol=0.05)


def test_draw_alphas_seeded():
    cfg = VtlpConfig()
    a = draw_alphas(10, cfg, 3)
    assert a.shape == (10, 7)
    assert np.all((a >= 0.9) & (a <= 1.1))
    np.testing.assert_array_equal(a, draw_alphas(10, cfg, 3))
    assert not np.array_equal(a, draw_alphas(10, cfg, 4))
    assert draw_alphas(10, VtlpConfig(replicas=0), 3).shape == (10, 0)
