import numpy as np
import pytest

from qsep import dsp


def test_frame_count_and_bins():
    s = dsp.stft(np.zeros(66150), 1024, 256)
    assert s.shape == (513, 259)
    assert dsp.to_network(s.bins, 256).shape == (512, 256)


def test_short_signal_rejected():
    with pytest.raises(ValueError):
        dsp.stft(np.zeros(100), 1024)


def test_round_trip_interior_snr():
    x = np.random.default_rng(0).standard_normal(8000)
    y = dsp.istft(dsp.stft(x, 256, 64), len(x))
    assert dsp.snr_db(x[256:-256], y[256:-256]) > 100


def test_round_trip_is_exact_to_the_edges():
    # centered frames cover the edges too, so the whole signal comes back
    x = np.random.default_rng(1).standard_normal(4096)
    y = dsp.istft(dsp.stft(x, 256, 64), len(x))
    assert np.max(np.abs(x - y)) < 1e-12


def test_cola_sum_is_constant_in_the_interior():
    total = dsp.cola_sum(1024, 256, 40)
    interior = total[1024:-1024]
    # periodic Hann squared at 75% overlap sums to 3/2
    assert np.max(np.abs(interior - 1.5)) < 1e-12


def test_hann_is_periodic():
    w = dsp.hann(8)
    assert w[0] == 0.0 and w[4] == 1.0
    assert np.allclose(w[1:4], w[7:4:-1])


def test_network_layout_round_trip():
    bins = np.random.default_rng(2).standard_normal((129, 65))
    net = dsp.to_network(bins, 64)
    back = dsp.from_network(net, bins.shape)
    assert np.array_equal(back[:128, :64], bins[:128, :64])
    assert not np.any(back[128]) and not np.any(back[:, 64])


def test_reconstruct_with_own_phase_recovers_signal_band():
    x = np.random.default_rng(3).standard_normal(4096)
    s = dsp.stft(x, 256, 64)
    mag, phase = dsp.mag_phase(s)
    y = dsp.reconstruct(dsp.to_network(mag, 64), phase, 256, 64, len(x))
    # only the Nyquist bin and the last (edge) frame are dropped
    assert dsp.snr_db(x[:3800], y[:3800]) > 20
    with pytest.raises(ValueError):
        dsp.reconstruct(mag, phase, 256, 64, len(x))


def test_recombine_inverts_mag_phase():
    z = np.random.default_rng(4).standard_normal((5, 3)) + 1j * np.random.default_rng(5).standard_normal((5, 3))
    assert np.allclose(dsp.recombine(*dsp.mag_phase(z)), z)


def test_waveform_validation():
    with pytest.raises(ValueError):
        dsp.Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        dsp.Waveform(np.array([np.nan]))
    assert dsp.Waveform(np.zeros(22050)).duration == 1.0


def test_wav_float_round_trip_is_exact(tmp_path):
    x = np.random.default_rng(6).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    dsp.write_wav(tmp_path / "a.wav", dsp.Waveform(x, 8000))
    back = dsp.read_wav(tmp_path / "a.wav", expected_rate=8000)
    assert np.array_equal(back.samples, x) and back.sample_rate == 8000


def test_wav_pcm16_and_rate_mismatch(tmp_path):
    x = np.array([0.0, 0.5, -0.5, 1.5])
    dsp.write_wav(tmp_path / "p.wav", dsp.Waveform(x, 8000), pcm16=True)
    back = dsp.read_wav(tmp_path / "p.wav")
    assert back.samples.tolist() == [0.0, 0.5, -0.5, 32767 / 32768]
    with pytest.raises(dsp.WavError):
        dsp.read_wav(tmp_path / "p.wav", expected_rate=22050)
    with pytest.raises(dsp.WavError):
        dsp.read_wav(tmp_path / "missing.wav")
