import numpy as np
import pytest
from pydub import AudioSegment

from audio_io import load_wav, save_wav
from dsp_frontend import AudioBuffer


def test_save_then_load_quantises_to_pcm16(tmp_path):
    samples = np.linspace(-0.5, 0.5, 1600)
    path = save_wav(AudioBuffer(samples), tmp_path / "ramp.wav")
    loaded = load_wav(path, start_time=12.5)
    assert loaded.sample_rate == 16000
    assert loaded.start_time == 12.5
    assert len(loaded) == 1600
    np.testing.assert_allclose(loaded.samples, samples, atol=1 / 32768)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


def test_truncated_file(tmp_path):
    path = tmp_path / "short.wav"
    path.write_bytes(b"RIFF\x00\x00")
    with pytest.raises(ValueError):
        load_wav(path)


def test_rejects_other_rates_and_stereo(tmp_path):
    pcm = np.zeros(800, dtype="<i2").tobytes()
    AudioSegment(data=pcm, sample_width=2, frame_rate=8000, channels=1).export(str(tmp_path / "8k.wav"),
                                                                                 format="wav").close()
    with pytest.raises(ValueError, match="sample rate"):
        load_wav(tmp_path / "8k.wav")

    AudioSegment(data=pcm, sample_width=2, frame_rate=16000, channels=2).export(str(tmp_path / "st.wav"),
                                                                                  format="wav").close()
    with pytest.raises(ValueError, match="mono"):
        load_wav(tmp_path / "st.wav")


def test_clipping_on_save(tmp_path):
    path = save_wav(AudioBuffer(np.array([2.0, -2.0, 0.0])), tmp_path / "clip.wav")
    loaded = load_wav(path)
    np.testing.assert_allclose(loaded.samples, [32767 / 32768, -1.0, 0.0])
