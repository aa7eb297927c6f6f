import numpy as np
import pytest
from numpy.testing import assert_allclose

from mpdiff.features import (
    MelConfig, fit_standardizer, hz_to_mel, load_waveform, mel_centers, mel_encode, mel_filterbank,
    mel_to_hz, save_wav,
)


def test_frame_rate():
    assert MelConfig().frame_rate == 62.5


def test_zero_signal_at_floor():
    cfg = MelConfig()
    assert_allclose(mel_encode(np.zeros(16000), cfg), np.log(cfg.log_floor))


def test_one_second_frame_count():
    assert mel_encode(np.zeros(16000)).shape == (80, 63)


def test_sine_peak_at_nearest_center():
    cfg = MelConfig()
    t = np.arange(16000) / 16000
    mel = mel_encode(np.sin(2 * np.pi * 440 * t), cfg)
    # oracle from the mel formula alone
    edges = 700 * (10 ** (np.linspace(0, 2595 * np.log10(1 + 8000 / 700), 82) / 2595) - 1)
    expected = int(np.argmin(np.abs(edges[1:-1] - 440)))
    peaks = np.argmax(mel, axis=0)
    assert np.all(peaks == expected)


def test_mel_scale_round_trip():
    f = np.linspace(0, 8000, 50)
    assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


@pytest.mark.parametrize("n_mels", [16, 80])
def test_filterbank_rows_positive(n_mels):
    fb = mel_filterbank(MelConfig(n_mels=n_mels))
    assert fb.shape == (n_mels, 513)
    assert np.all(fb.sum(axis=1) > 0)
    assert len(mel_centers(MelConfig(n_mels=n_mels))) == n_mels


def test_too_short():
    with pytest.raises(ValueError, match="at least"):
        mel_encode(np.zeros(1000))


def test_waveform_io(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, 4000))
    save_wav(tmp_path / "a.wav", x)
    assert_allclose(load_waveform(tmp_path / "a.wav"), x, atol=1 / 32767)
    x.astype("<f4").tofile(tmp_path / "a.raw")
    assert_allclose(load_waveform(tmp_path / "a.raw"), x.astype(np.float32))


class TestStandardizer:
    def test_already_standard(self):
        x = np.random.default_rng(0).normal(0, np.sqrt(0.5), (20, 4, 100))
        st = fit_standardizer(x)
        assert st.shift == pytest.approx(0, abs=0.02)
        assert st.scale == pytest.approx(1, abs=0.02)

    def test_shifted(self):
        x = np.random.default_rng(1).normal(3, np.sqrt(2), (20, 4, 100))
        z = fit_standardizer(x).transform(x)
        assert abs(z.mean()) < 1e-3
        assert z.var() == pytest.approx(0.5, abs=1e-3)

    def test_round_trip(self):
        x = np.random.default_rng(2).normal(3, 2, (20, 4, 100))
        st = fit_standardizer(x)
        assert_allclose(st.inverse(st.transform(x)), x, rtol=1e-5)

    def test_list_input(self):
        rng = np.random.default_rng(3)
        tracks = [rng.normal(size=(4, 300)) for _ in range(4)]
        a = fit_standardizer(tracks)
        b = fit_standardizer(np.stack(tracks))
        assert a.shift == pytest.approx(b.shift) and a.scale == pytest.approx(b.scale)

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="frames"):
            fit_standardizer(np.ones((2, 4, 100)))

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="variance"):
            fit_standardizer(np.ones((20, 4, 100)))
