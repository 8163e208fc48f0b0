"""Audio clips and WAV file loading.

Only WAV containers are accepted (PCM 16-bit or IEEE 32-bit float).
Anything else is rejected with an error that names the offending format,
so callers know what to transcode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InputError

_MAGIC_FORMATS = {
    b"ID3": "mp3",
    b"\xff\xfb": "mp3",
    b"\xff\xf3": "mp3",
    b"fLaC": "flac",
    b"OggS": "ogg",
    b"\x1aE\xdf\xa3": "webm/matroska",
}


@dataclass
class AudioClip:
    """A mono audio signal with its sample rate and an opaque track id."""

    samples: np.ndarray
    sample_rate: int
    track_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise InputError(f"audio clip {self.track_id!r} has no samples")
        if int(self.sample_rate) <= 0:
            raise InputError(
                f"audio clip {self.track_id!r} has non-positive sample rate "
                f"{self.sample_rate}"
            )
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _sniff_format(header: bytes, path: Path) -> str:
    for magic, name in _MAGIC_FORMATS.items():
        if header.startswith(magic):
            return name
    if header[4:8] == b"ftyp":
        return "mp4/m4a"
    suffix = path.suffix.lstrip(".").lower()
    return suffix or "unknown"


def load_wav(path: str | Path, track_id: str | None = None) -> AudioClip:
    """Load a WAV file as a mono float clip in [-1, 1].

    PCM 16-bit is rescaled by 1/32768; IEEE float32 is taken as-is.
    Multi-channel audio is downmixed by averaging channels.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"audio file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(12)
    if header[:4] != b"RIFF" or header[8:12] != b"WAVE":
        fmt = _sniff_format(header, path)
        raise InputError(
            f"{path.name}: not a WAV file (detected format: {fmt}); "
            "only WAV with PCM 16-bit or 32-bit float samples is supported"
        )
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise InputError(f"{path.name}: unreadable WAV file ({exc})") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InputError(
            f"{path.name}: unsupported WAV sample encoding {data.dtype}; "
            "only PCM 16-bit and 32-bit float are supported"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate),
                     track_id=track_id if track_id is not None else path.stem)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write a mono float64 signal as a 32-bit float WAV (test/demo helper)."""
    wavfile.write(str(path), int(sample_rate),
                  np.asarray(samples, dtype=np.float32))
