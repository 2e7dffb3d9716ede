"""Mel front end, power contours, frame normalisation and file formats."""

import math

import numpy as np
import pytest
from scipy.io import wavfile

from voxlevel.dsp import (
    LOG_FLOOR,
    POWER_FLOOR,
    AudioClip,
    AudioError,
    MelConfig,
    MelSpectrogram,
    frame_normalize,
    load_mel_config,
    load_mel_matrix,
    mel_filterbank,
    mel_spectrogram,
    power_contour,
    read_wav,
    resample,
    save_mel_matrix,
    write_wav,
)

SR = 24000


def tone(freq=440.0, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


class TestMelSpectrogram:
    def test_silence_is_floor(self):
        mel = mel_spectrogram(AudioClip(np.zeros(SR), SR))
        assert np.all(mel.values == LOG_FLOOR)

    def test_one_second_is_80_frames(self):
        mel = mel_spectrogram(tone())
        assert mel.values.shape == (80, 80)
        assert mel.hop_s == 0.0125

    @pytest.mark.parametrize("n", [1200, 1201, 4799, 24000, 24001])
    def test_frame_count_is_ceil(self, n):
        clip = AudioClip(np.ones(n) * 0.1, SR)
        assert mel_spectrogram(clip).n_frames == math.ceil(n / 300)
        assert power_contour(clip).size == math.ceil(n / 300)

    def test_too_short_names_minimum(self):
        with pytest.raises(AudioError, match="0.05 s"):
            mel_spectrogram(AudioClip(np.ones(1000), SR))

    def test_sine_ridge(self):
        """440 Hz sits in two overlapping triangles; every other bin is >10x weaker."""
        cfg = MelConfig()
        fb = mel_filterbank(cfg)
        freqs = np.arange(fb.shape[1]) * SR / cfg.n_fft
        k440 = np.argmin(np.abs(freqs - 440.0))
        containing = np.flatnonzero(fb[:, k440] > 0)
        assert containing.size == 2
        m = np.exp(mel_spectrogram(tone()).values[40])
        peak = int(np.argmax(m))
        assert peak in containing
        others = np.delete(m, containing)
        assert m[peak] > 10 * others.max()
        # and it is the filter with the larger response at 440 Hz
        assert fb[peak, k440] == fb[containing, k440].max()

    def test_values_at_or_above_floor(self):
        rng = np.random.default_rng(0)
        clip = AudioClip(rng.standard_normal(SR) * 1e-4, SR)
        assert mel_spectrogram(clip).values.min() >= LOG_FLOOR

    def test_deterministic(self):
        a, b = mel_spectrogram(tone()), mel_spectrogram(tone())
        np.testing.assert_array_equal(a.values, b.values)

    def test_resamples_other_rates(self):
        mel = mel_spectrogram(tone(sr=16000))
        assert mel.n_frames == 80


class TestPowerContour:
    def test_square_wave_power(self):
        a = 0.3
        x = a * np.sign(np.sin(2 * np.pi * 100 * np.arange(SR) / SR + 0.1))
        p = power_contour(AudioClip(x, SR))
        np.testing.assert_allclose(p[4:-4], a * a, rtol=1e-3)

    def test_silence_floor(self):
        p = power_contour(AudioClip(np.zeros(SR), SR))
        assert np.all(p == POWER_FLOOR)

    @pytest.mark.parametrize("mode", ["plain", "a_weighted"])
    def test_homogeneity(self, mode):
        clip = tone(amp=0.1)
        g = 3.7
        np.testing.assert_allclose(power_contour(clip.scaled(g), mode=mode),
                                   g * g * power_contour(clip, mode=mode), rtol=1e-12)

    def test_a_weighting_near_unity_at_1khz(self):
        clip = tone(1000.0, amp=0.5)
        plain = power_contour(clip, mode="plain")[10:-10]
        aw = power_contour(clip, mode="a_weighted")[10:-10]
        np.testing.assert_allclose(aw / plain, 1.0, atol=0.03)

    def test_a_weighting_attenuates_low_tone(self):
        clip = tone(100.0, amp=0.5)
        ratio = power_contour(clip, mode="a_weighted")[40] / power_contour(clip, mode="plain")[40]
        # A(100 Hz) is about -19 dB
        assert -21 < 10 * np.log10(ratio) < -17

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown power mode"):
            power_contour(tone(), mode="sones")

    def test_frames_match_mel(self):
        clip = AudioClip(np.random.default_rng(1).standard_normal(12345) * 0.1, SR)
        assert power_contour(clip).size == mel_spectrogram(clip).n_frames


class TestFrameNormalize:
    def test_mean_subtraction(self):
        np.testing.assert_array_equal(frame_normalize(np.array([[1.0, 2.0, 3.0]])), [[-1.0, 0.0, 1.0]])

    def test_additive_gain_exact(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((50, 80)) * 3
        for c in (-37.1, 0.5, 1e3):
            np.testing.assert_array_equal(frame_normalize(x + c), frame_normalize(x))

    def test_per_frame_constants(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((20, 80))
        c = rng.uniform(-10, 10, (20, 1))
        np.testing.assert_array_equal(frame_normalize(x + c), frame_normalize(x))

    def test_fixed_point(self):
        x = frame_normalize(np.random.default_rng(4).standard_normal((10, 80)))
        np.testing.assert_array_equal(frame_normalize(x), x)

    def test_zero_mean(self):
        x = frame_normalize(np.random.default_rng(5).standard_normal((10, 80)))
        np.testing.assert_allclose(x.mean(axis=1), 0.0, atol=1e-6)

    def test_spectrogram_type_preserved(self):
        out = frame_normalize(MelSpectrogram(np.ones((3, 4)), 0.0125))
        assert isinstance(out, MelSpectrogram)
        np.testing.assert_array_equal(out.values, 0.0)

    def test_gain_erasure_on_audio(self):
        clip = AudioClip(np.random.default_rng(8).standard_normal(SR) * 0.2, SR)
        quiet = mel_spectrogram(clip.scaled(0.05)).values
        assert quiet.min() > LOG_FLOOR
        a = frame_normalize(mel_spectrogram(clip).values)
        np.testing.assert_allclose(frame_normalize(quiet), a, atol=1e-9)


class TestWav:
    @pytest.mark.parametrize("dtype,scale", [(np.int16, 32767), (np.int32, 2**31 - 1), (np.float32, 1.0)])
    def test_formats(self, tmp_path, dtype, scale):
        x = 0.5 * np.sin(np.linspace(0, 20, 2000))
        wavfile.write(tmp_path / "a.wav", SR, (x * scale).astype(dtype))
        clip = read_wav(tmp_path / "a.wav")
        assert clip.sample_rate == SR
        np.testing.assert_allclose(clip.samples, x, atol=1e-4)

    def test_24_bit(self, tmp_path):
        x = np.array([0.5, -0.25, 0.0, 0.999])
        ints = np.round(x * 2**23).astype(np.int64)
        raw = b"".join(int(v).to_bytes(3, "little", signed=True) for v in ints)
        header = (b"RIFF" + (36 + len(raw)).to_bytes(4, "little") + b"WAVEfmt "
                  + (16).to_bytes(4, "little") + (1).to_bytes(2, "little") + (1).to_bytes(2, "little")
                  + SR.to_bytes(4, "little") + (SR * 3).to_bytes(4, "little") + (3).to_bytes(2, "little")
                  + (24).to_bytes(2, "little") + b"data" + len(raw).to_bytes(4, "little"))
        (tmp_path / "b.wav").write_bytes(header + raw)
        np.testing.assert_allclose(read_wav(tmp_path / "b.wav").samples, x, atol=2**-23)

    def test_stereo_downmix(self, tmp_path):
        data = np.stack([np.full(100, 0.5), np.full(100, -0.1)], axis=1).astype(np.float32)
        wavfile.write(tmp_path / "s.wav", SR, data)
        np.testing.assert_allclose(read_wav(tmp_path / "s.wav").samples, 0.2, atol=1e-7)

    def test_round_trip_float64(self, tmp_path):
        clip = AudioClip(np.random.default_rng(6).standard_normal(500) * 0.1, SR)
        write_wav(tmp_path / "r.wav", clip)
        np.testing.assert_array_equal(read_wav(tmp_path / "r.wav").samples, clip.samples)

    def test_garbage_rejected(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00not a wave file at all")
        with pytest.raises(AudioError):
            read_wav(tmp_path / "bad.wav")

    def test_empty_clip_rejected(self):
        with pytest.raises(AudioError):
            AudioClip(np.zeros(0), SR)

    def test_resample_length(self):
        out = resample(AudioClip(np.ones(16000), 16000), 24000)
        assert out.samples.size == 24000


class TestConfigAndMelFiles:
    def test_config_file(self, tmp_path):
        (tmp_path / "mel.cfg").write_text("# analysis\nsample_rate = 16000\nn_mels = 40  # fewer\n"
                                          "hop_s = 0.01\nwindow_s = 0.04\npower_mode = a_weighted\n")
        cfg = load_mel_config(tmp_path / "mel.cfg")
        assert (cfg.sample_rate, cfg.n_mels, cfg.hop_s, cfg.window_s, cfg.power_mode) == (16000, 40, 0.01, 0.04, "a_weighted")
        assert cfg.hop == 160

    def test_fingerprint_tracks_layout(self):
        assert MelConfig().fingerprint() == MelConfig(power_mode="a_weighted").fingerprint()
        assert MelConfig().fingerprint() != MelConfig(n_mels=40).fingerprint()

    def test_bad_power_mode(self):
        with pytest.raises(ValueError):
            MelConfig(power_mode="phon")

    @pytest.mark.parametrize("suffix", [".csv", ".mel"])
    def test_mel_matrix_round_trip(self, tmp_path, suffix):
        mel = MelSpectrogram(np.random.default_rng(7).standard_normal((9, 5)), 0.0125)
        save_mel_matrix(tmp_path / f"m{suffix}", mel)
        back = load_mel_matrix(tmp_path / f"m{suffix}")
        np.testing.assert_array_equal(back.values, mel.values)
        assert back.hop_s == mel.hop_s

    def test_truncated_mel_matrix(self, tmp_path):
        save_mel_matrix(tmp_path / "m.mel", MelSpectrogram(np.ones((4, 3)), 0.0125))
        raw = (tmp_path / "m.mel").read_bytes()
        (tmp_path / "m.mel").write_bytes(raw[:-8])
        with pytest.raises(AudioError):
            load_mel_matrix(tmp_path / "m.mel")
