import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmvit.formats import FormatError, decode_wav, encode_ppm, encode_wav, read_ntc, write_ntc, write_wav
from mmvit.frontend import (
    LOG_FLOOR,
    InputError,
    Spectrogram,
    Waveform,
    fit_length,
    load_image,
    load_wav,
    logmel_fbank,
    mel_filterbank,
    num_frames,
)


class TestLogMel:
    def test_ten_seconds_gives_998_frames(self):
        spec = logmel_fbank(Waveform(np.zeros(160000)))
        assert spec.frames.shape == (998, 128)

    def test_silence_is_log_floor(self):
        spec = logmel_fbank(Waveform(np.zeros(16000)))
        assert np.all(spec.frames == np.log(LOG_FLOOR))

    def test_tone_argmax_matches_nearest_centre(self):
        t = np.arange(32000) / 16000
        spec = logmel_fbank(Waveform(0.5 * np.sin(2 * np.pi * 1000.0 * t)))
        peaks = spec.frames.argmax(axis=1)
        _, centres = mel_filterbank()
        assert np.all(peaks == peaks[0])
        assert peaks[0] == int(np.argmin(np.abs(centres - 1000.0)))

    def test_too_short(self):
        with pytest.raises(InputError):
            logmel_fbank(Waveform(np.zeros(399)))

    def test_deterministic(self):
        x = np.random.default_rng(0).uniform(-1, 1, 8000)
        np.testing.assert_array_equal(logmel_fbank(Waveform(x)).frames, logmel_fbank(Waveform(x.copy())).frames)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(400, 6000))
    def test_frame_count_formula(self, length):
        spec = logmel_fbank(Waveform(np.full(length, 0.1)))
        assert spec.num_frames == (length - 400) // 160 + 1 == num_frames(length)

    def test_resamples_other_rates(self):
        spec = logmel_fbank(Waveform(np.zeros(8000), sample_rate_hz=8000))
        assert spec.num_frames == num_frames(16000)


class TestFilterbank:
    def test_partition_of_unity(self):
        weights, centres = mel_filterbank()
        totals = weights.sum(axis=0)
        assert np.all(totals <= 1.0 + 1e-12)
        freqs = np.arange(257) * 16000 / 512
        inside = (freqs >= centres[0]) & (freqs <= centres[-1])
        assert np.all(totals[inside] > 0)
        np.testing.assert_allclose(totals[inside], 1.0, atol=1e-9)

    def test_shape(self):
        weights, centres = mel_filterbank()
        assert weights.shape == (128, 257)
        assert np.all(np.diff(centres) > 0)


class TestFitLength:
    def test_pads_at_end(self):
        frames = np.ones((998, 128))
        out = fit_length(Spectrogram(frames), 1024).frames
        assert out.shape == (1024, 128)
        assert np.all(out[998:] == 0) and np.all(out[:998] == 1)

    def test_identity(self):
        frames = np.random.default_rng(0).standard_normal((20, 4))
        np.testing.assert_array_equal(fit_length(Spectrogram(frames), 20).frames, frames)

    def test_centre_crop(self):
        frames = np.arange(1100)[:, None] * np.ones((1, 2))
        out = fit_length(Spectrogram(frames), 1024).frames
        assert out[0, 0] == 38 and out[-1, 0] == 1061


class TestWav:
    def test_scaling_endpoints(self):
        pcm = struct.pack("<3h", -32768, 0, 16384)
        fmt = struct.pack("<HHIIHH", 1, 1, 16000, 32000, 2, 16)
        body = b"WAVEfmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
        samples, rate = decode_wav(b"RIFF" + struct.pack("<I", len(body)) + body)
        assert rate == 16000
        np.testing.assert_array_equal(samples, [-1.0, 0.0, 0.5])

    def test_stereo_opposites_cancel(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.5, 0.5, 400)
        write_wav(tmp_path / "s.wav", np.stack([x, -x], axis=1), 16000)
        wave = load_wav(tmp_path / "s.wav")
        np.testing.assert_array_equal(wave.samples, np.zeros(400))

    def test_truncated_reports_offset(self):
        blob = encode_wav(np.zeros(100), 16000)
        with pytest.raises(FormatError, match="offset"):
            decode_wav(blob[:-10])

    def test_unsupported_format(self):
        blob = bytearray(encode_wav(np.zeros(10), 16000))
        blob[34:36] = struct.pack("<H", 24)  # bits per sample
        with pytest.raises(FormatError, match="PCM16"):
            decode_wav(bytes(blob))

    def test_not_riff(self):
        with pytest.raises(FormatError, match="offset 0"):
            decode_wav(b"RIFX" + b"\0" * 40)


class TestImages:
    def test_identity_resize_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, (3, 224, 224)) / 255.0
        (tmp_path / "a.ppm").write_bytes(encode_ppm(pixels))
        img = load_image(tmp_path / "a.ppm")
        mean = np.array([0.485, 0.456, 0.406])[:, None, None]
        std = np.array([0.229, 0.224, 0.225])[:, None, None]
        np.testing.assert_allclose(img.pixels * std + mean, pixels, atol=1e-12)

    def test_resized_to_224(self, tmp_path):
        write_ntc(tmp_path / "b.ntc", np.full((3, 10, 20), 0.5))
        img = load_image(tmp_path / "b.ntc")
        assert img.pixels.shape == (3, 224, 224)
        np.testing.assert_allclose(img.pixels[0], (0.5 - 0.485) / 0.229, rtol=1e-6)

    def test_truncated_ppm(self, tmp_path):
        blob = encode_ppm(np.zeros((3, 4, 4)))
        (tmp_path / "c.ppm").write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="offset"):
            load_image(tmp_path / "c.ppm")


class TestNtc:
    def test_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        write_ntc(tmp_path / "x.ntc", x)
        np.testing.assert_array_equal(read_ntc(tmp_path / "x.ntc"), x)

    def test_truncated(self, tmp_path):
        write_ntc(tmp_path / "x.ntc", np.zeros((4, 4)))
        blob = (tmp_path / "x.ntc").read_bytes()
        (tmp_path / "x.ntc").write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="offset 16"):
            read_ntc(tmp_path / "x.ntc")
