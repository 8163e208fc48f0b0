"""Audio encoder contract: layer-stacked embeddings.

An encoder turns a clip into a (num_layers, num_frames, feature_dim) array —
one feature vector per frame for every stacked layer. The reference
configuration stacks 25 layers of 1024 features. Two implementations live
here: a deterministic toy encoder for desk-scale tests and a thin binding
for pretrained hidden-state models.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .audio import AudioClip
from .errors import ConfigError, NumericError, ResampleRequiredError

REFERENCE_NUM_LAYERS = 25
REFERENCE_FEATURE_DIM = 1024


@dataclass(frozen=True)
class EncoderSpec:
    """Shape contract of an encoder's stacked output."""

    num_layers: int
    feature_dim: int
    frame_rate: float = 75.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not self.frame_rate > 0:
            raise ConfigError(f"frame_rate must be > 0, got {self.frame_rate}")


REFERENCE_SPEC = EncoderSpec(REFERENCE_NUM_LAYERS, REFERENCE_FEATURE_DIM)


@dataclass
class LayerStackedEmbedding:
    """Stacked per-layer features: values has shape (num_layers, T, feature_dim)."""

    values: np.ndarray
    spec: EncoderSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ConfigError(
                f"embedding must be 3-D (layers, frames, features), got shape {v.shape}"
            )
        if v.shape[0] != self.spec.num_layers or v.shape[2] != self.spec.feature_dim:
            raise ConfigError(
                f"embedding shape {v.shape} does not match spec "
                f"({self.spec.num_layers}, T, {self.spec.feature_dim})"
            )
        if v.shape[1] < 1:
            raise ConfigError("embedding must contain at least one frame")
        if not np.all(np.isfinite(v)):
            raise NumericError("embedding contains non-finite values")
        self.values = v

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@runtime_checkable
class EncoderHandle(Protocol):
    """What the pipeline needs from any encoder implementation.

    `sample_rate` is the rate the encoder accepts, or None for any rate.
    `embed` returns the raw (num_layers, T, feature_dim) array for a clip;
    implementations must be deterministic and must not mutate state.
    """

    spec: EncoderSpec
    sample_rate: int | None

    def embed(self, clip: AudioClip) -> np.ndarray: ...


def extract_features(clip: AudioClip, encoder: EncoderHandle) -> LayerStackedEmbedding:
    """Run a frozen encoder on a clip and validate the stacked output.

    Pure in (clip, encoder identity): repeated calls are bit-identical.
    """
    if encoder.sample_rate is not None and clip.sample_rate != encoder.sample_rate:
        raise ResampleRequiredError(
            f"clip {clip.track_id!r} is sampled at {clip.sample_rate} Hz but the "
            f"encoder requires {encoder.sample_rate} Hz; resample the audio first"
        )
    values = encoder.embed(clip)
    return LayerStackedEmbedding(values=values, spec=encoder.spec)


class ToyEncoder:
    """Deterministic stand-in encoder: windowed audio through a fixed linear map.

    Audio is cut into non-overlapping windows of round(sample_rate/frame_rate)
    samples (last window zero-padded), and each layer applies its own seeded
    linear map to the window. No bias term, so the map is linear: zero audio
    gives a zero embedding and scaling the clip scales the embedding.
    """

    def __init__(self, spec: EncoderSpec, seed: int, sample_rate: int | None = None):
        self.spec = spec
        self.seed = int(seed)
        self.sample_rate = sample_rate
        self._weights: dict[int, np.ndarray] = {}

    def _weight_for_window(self, window: int) -> np.ndarray:
        w = self._weights.get(window)
        if w is None:
            rng = np.random.default_rng([self.seed, window])
            w = rng.standard_normal(
                (self.spec.num_layers, self.spec.feature_dim, window)
            ) / np.sqrt(window)
            w.setflags(write=False)
            self._weights[window] = w
        return w

    def window_length(self, sample_rate: int) -> int:
        return max(1, int(round(sample_rate / self.spec.frame_rate)))

    def num_frames(self, n_samples: int, sample_rate: int) -> int:
        win = self.window_length(sample_rate)
        return max(1, -(-n_samples // win))

    def embed(self, clip: AudioClip) -> np.ndarray:
        win = self.window_length(clip.sample_rate)
        n_frames = self.num_frames(clip.samples.size, clip.sample_rate)
        padded = np.zeros(n_frames * win, dtype=np.float64)
        padded[: clip.samples.size] = clip.samples
        frames = padded.reshape(n_frames, win)
        weight = self._weight_for_window(win)
        # (L, D, W) x (T, W) -> (L, T, D)
        return np.einsum("ldw,tw->ltd", weight, frames)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Materialized weights, for freeze-invariance snapshots."""
        return {f"window{w}.weight": arr for w, arr in sorted(self._weights.items())}


def toy_encoder(spec: EncoderSpec, seed: int,
                sample_rate: int | None = None) -> ToyEncoder:
    """Build a seeded toy encoder; same (spec, seed) reproduces the same maps."""
    return ToyEncoder(spec, seed, sample_rate)


class PretrainedEncoderBinding:
    """Binding for a pretrained hidden-state audio model (optional plug-in).

    Wraps any model whose call returns stacked hidden states: `model(samples)`
    must yield an iterable of per-layer (T, feature_dim) arrays, hidden layers
    first and the output layer last. Use `from_transformers` to adapt a
    HuggingFace-style model; tests exercise the stacking logic with a stub.
    """

    def __init__(self, spec: EncoderSpec, model, sample_rate: int | None):
        self.spec = spec
        self.sample_rate = sample_rate
        self._model = model

    def embed(self, clip: AudioClip) -> np.ndarray:
        layers = [np.asarray(layer, dtype=np.float64) for layer in self._model(clip.samples)]
        if len(layers) != self.spec.num_layers:
            raise ConfigError(
                f"model produced {len(layers)} layers, spec expects {self.spec.num_layers}"
            )
        return np.stack(layers, axis=0)

    @classmethod
    def from_transformers(cls, model_name: str, spec: EncoderSpec = REFERENCE_SPEC,
                          sample_rate: int = 24000) -> "PretrainedEncoderBinding":
        try:
            import torch  # noqa: F401
            from transformers import AutoModel
        except ImportError as exc:
            raise ConfigError(
                "the pretrained encoder binding needs torch and transformers "
                "installed; the toy encoder covers all desk-scale use"
            ) from exc

        import torch

        hf_model = AutoModel.from_pretrained(model_name, trust_remote_code=True)
        hf_model.eval()

        def run(samples: np.ndarray):
            with torch.no_grad():
                out = hf_model(
                    input_values=torch.as_tensor(samples, dtype=torch.float32)[None, :],
                    output_hidden_states=True,
                )
            return [h[0].numpy() for h in out.hidden_states]

        return cls(spec=spec, model=run, sample_rate=sample_rate)


_SAFE_ID = re.compile(r"[^A-Za-z0-9._-]")


def _cache_filename(track_id: str) -> str:
    safe = _SAFE_ID.sub("_", track_id)
    if safe != track_id or not safe:
        digest = hashlib.sha1(track_id.encode("utf-8")).hexdigest()[:10]
        safe = f"{safe or 'track'}-{digest}"
    return safe + ".npy"


class EmbeddingCache:
    """One .npy file per track id (numpy format: shape header + row-major data).

    The container is the stable numpy .npy v1 format, documented in the README.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, track_id: str) -> Path:
        return self.directory / _cache_filename(track_id)

    def __contains__(self, track_id: str) -> bool:
        return self.path_for(track_id).is_file()

    def put(self, track_id: str, emb: LayerStackedEmbedding) -> Path:
        path = self.path_for(track_id)
        np.save(path, emb.values)
        return path

    def get(self, track_id: str, spec: EncoderSpec) -> LayerStackedEmbedding:
        path = self.path_for(track_id)
        if not path.is_file():
            raise ConfigError(f"no cached embedding for track {track_id!r} in {self.directory}")
        values = np.load(path)
        return LayerStackedEmbedding(values=values, spec=spec)
