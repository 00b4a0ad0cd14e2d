import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codec_resynth.corpus import (
    CorpusSpec,
    Waveform,
    WavFormatError,
    crop_random,
    generate_corpus,
    read_manifest,
    read_wav,
    synth_utterance,
    write_wav,
)


def _wav_bytes(samples, rate=8000, channels=1, bits=16, tag=1, truncate=0):
    pcm = struct.pack(f"<{len(samples)}h", *samples)
    block = channels * bits // 8
    fmt = struct.pack("<IHHIIHH", 16, tag, channels, rate, rate * block, block, bits)
    data_size = len(pcm)
    body = b"WAVE" + b"fmt " + fmt + b"data" + struct.pack("<I", data_size) + pcm[: len(pcm) - truncate]
    return b"RIFF" + struct.pack("<I", len(body)) + body


class TestSynth:
    def test_silence_when_no_source(self):
        spec = CorpusSpec(num_utterances=2, num_harmonics=0, noise_level=0.0)
        w = synth_utterance(spec, 1)
        assert np.all(w.samples == 0.0)

    def test_deterministic(self):
        spec = CorpusSpec(num_utterances=4, seed=123)
        a = synth_utterance(spec, 3)
        b = synth_utterance(spec, 3)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_independent_of_generation_order(self):
        spec = CorpusSpec(num_utterances=4, seed=5)
        later_first = [synth_utterance(spec, i).samples for i in (3, 1)]
        assert np.array_equal(later_first[1], synth_utterance(spec, 1).samples)

    def test_peak_normalized(self):
        w = synth_utterance(CorpusSpec(num_utterances=1), 0)
        assert np.max(np.abs(w.samples)) == pytest.approx(0.9, abs=1e-12)

    def test_duration_bounds(self):
        spec = CorpusSpec(num_utterances=10, duration_s_min=1.0, duration_s_max=1.5)
        for i in range(10):
            assert 1.0 - 1e-3 <= synth_utterance(spec, i).duration_s <= 1.5 + 1e-3

    def test_single_harmonic_spectrum_peaks_at_f0(self):
        spec = CorpusSpec(num_utterances=1, num_harmonics=1, noise_level=0.0,
                          f0_hz_min=200.0, f0_hz_max=200.0, duration_s_min=1.0, duration_s_max=1.0)
        x = synth_utterance(spec, 0).samples[:2000]
        n = x.size
        # direct DFT, no FFT library involved
        k = np.arange(n // 2 + 1)
        basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
        mag = np.abs(basis @ x)
        bin_hz = 8000 / n
        assert int(np.argmax(mag)) == int(round(200.0 / bin_hz))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            synth_utterance(CorpusSpec(num_utterances=2), 2)

    @pytest.mark.parametrize("bad", [
        dict(duration_s_min=2.0, duration_s_max=1.0),
        dict(f0_hz_min=300.0, f0_hz_max=200.0),
        dict(num_harmonics=20, f0_hz_max=250.0),
        dict(noise_level=-1.0),
    ])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            synth_utterance(CorpusSpec(num_utterances=1, **bad), 0)


class TestWav:
    def test_hand_built_file(self, tmp_path):
        p = tmp_path / "three.wav"
        p.write_bytes(_wav_bytes([0, 16384, -16384]))
        w = read_wav(p)
        assert w.sample_rate_hz == 8000
        assert w.samples.tolist() == [0.0, 0.5, -0.5]

    def test_stereo_rejected(self, tmp_path):
        p = tmp_path / "stereo.wav"
        p.write_bytes(_wav_bytes([0, 1, 2, 3], channels=2))
        with pytest.raises(WavFormatError, match="mono"):
            read_wav(p)

    def test_non_pcm_rejected(self, tmp_path):
        p = tmp_path / "float.wav"
        p.write_bytes(_wav_bytes([0, 1], tag=3))
        with pytest.raises(WavFormatError):
            read_wav(p)

    def test_8bit_rejected(self, tmp_path):
        p = tmp_path / "eight.wav"
        p.write_bytes(_wav_bytes([0, 1], bits=8))
        with pytest.raises(WavFormatError):
            read_wav(p)

    def test_truncated_data(self, tmp_path):
        p = tmp_path / "short.wav"
        p.write_bytes(_wav_bytes([1, 2, 3, 4], truncate=3))
        with pytest.raises(WavFormatError, match="truncated"):
            read_wav(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "nope.wav")

    @pytest.mark.parametrize("value,stored", [(1.5, 32767), (0.0, 0), (-2.0, -32768),
                                              (0.5 / 32768, 1), (-0.5 / 32768, -1)])
    def test_clamp_and_rounding(self, tmp_path, value, stored):
        p = tmp_path / "one.wav"
        write_wav(Waveform([value], 8000), p)
        assert struct.unpack("<h", p.read_bytes()[44:46])[0] == stored

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0 - 2**-15, allow_nan=False), min_size=1, max_size=300))
    def test_round_trip_error_bound(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "x.wav"
        write_wav(Waveform(values, 16000), p)
        back = read_wav(p)
        assert back.sample_rate_hz == 16000
        assert np.max(np.abs(back.samples - np.asarray(values))) <= 2**-15

    def test_reread_reproduces_data_chunk(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=500).tolist()
        src = tmp_path / "src.wav"
        src.write_bytes(_wav_bytes(ints))
        dst = tmp_path / "dst.wav"
        write_wav(read_wav(src), dst)
        assert dst.read_bytes()[44:] == src.read_bytes()[44:]


class TestCrop:
    def test_full_length_identity(self):
        w = Waveform([0.1, 0.2, 0.3], 8000)
        c = crop_random(w, 3, np.random.default_rng(0))
        assert np.array_equal(c.samples, w.samples)

    def test_uniform_offsets(self):
        w = Waveform([0.0, 1.0, 2.0], 8000)
        rng = np.random.default_rng(42)
        n = 10_000
        counts = np.bincount([int(crop_random(w, 1, rng).samples[0]) for _ in range(n)], minlength=3)
        p = 1 / 3
        sd = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sd)

    def test_zero_length_rejected(self):
        with pytest.raises(ValueError):
            crop_random(Waveform([0.0, 1.0], 8000), 0, np.random.default_rng(0))

    def test_too_long_rejected(self):
        with pytest.raises(ValueError):
            crop_random(Waveform([0.0, 1.0], 8000), 3, np.random.default_rng(0))


def test_generate_corpus_manifest(tmp_path):
    spec = CorpusSpec(num_utterances=3, duration_s_min=1.0, duration_s_max=1.2)
    records = generate_corpus(spec, tmp_path)
    assert read_manifest(tmp_path) == records
    for r in records:
        raw = (tmp_path / r["path"]).read_bytes()
        (data_size,) = struct.unpack("<I", raw[40:44])
        (rate,) = struct.unpack("<I", raw[24:28])
        assert data_size / 2 / rate == pytest.approx(r["duration_s"])
        assert 1.0 - 1e-3 <= r["duration_s"] <= 1.2 + 1e-3
    line = (tmp_path / "manifest.jsonl").read_text().splitlines()[0]
    assert set(json.loads(line)) == {"index", "duration_s", "f0_hz", "path"}
