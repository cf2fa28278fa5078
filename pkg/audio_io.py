"""WAV file handling for the keyword spotter (PCM 16-bit, mono, 16 kHz) via pydub."""
import logging
import os
from pathlib import Path

import numpy as np
from pydub import AudioSegment

import config
from dsp_frontend import AudioBuffer

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0
WAV_HEADER_BYTES = 44


def load_wav(path, start_time: float = 0.0) -> AudioBuffer:
    """
    Read a WAV file into an AudioBuffer.

    Args:
        path: Path to a RIFF/PCM16 mono 16 kHz file
        start_time: Absolute time of the first sample, for telemetry alignment

    Returns:
        AudioBuffer with samples scaled to [-1, 1)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Audio file not found: {path}")

    file_size = os.path.getsize(path)
    if file_size < WAV_HEADER_BYTES:
        raise ValueError(f"Audio file seems too small to be a WAV file: {file_size} bytes")

    try:
        segment = AudioSegment.from_wav(str(path))
    except Exception as e:
        raise ValueError(f"Could not parse WAV file {path}: {e}") from e

    if segment.channels != 1:
        raise ValueError(f"Expected mono audio, got {segment.channels} channels in {path}")
    if segment.sample_width != 2:
        raise ValueError(f"Expected 16-bit PCM, got {8 * segment.sample_width}-bit samples in {path}")
    if segment.frame_rate != config.SAMPLE_RATE:
        raise ValueError(
            f"Unsupported sample rate {segment.frame_rate} Hz in {path}; resample to {config.SAMPLE_RATE} Hz first"
        )

    samples = np.frombuffer(segment.raw_data, dtype="<i2").astype(np.float64) / PCM16_SCALE
    logger.debug(f"Loaded {path}: {len(samples)} samples ({len(samples) / config.SAMPLE_RATE:.2f} s)")
    return AudioBuffer(samples, segment.frame_rate, start_time)


def to_segment(audio: AudioBuffer) -> AudioSegment:
    """Quantise an AudioBuffer to a PCM16 AudioSegment (clipped to full scale)."""
    pcm = np.clip(np.round(audio.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    return AudioSegment(data=pcm.tobytes(), sample_width=2, frame_rate=audio.sample_rate, channels=1)


def save_wav(audio: AudioBuffer, path) -> Path:
    """Write an AudioBuffer as PCM16 mono WAV; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = to_segment(audio).export(str(path), format="wav")
    handle.close()  # pydub leaves the file object open
    logger.debug(f"Wrote {path} ({audio.duration:.2f} s)")
    return path
