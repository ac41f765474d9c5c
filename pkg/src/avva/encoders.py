"""Frozen feature providers and the on-disk feature cache.

Providers stand in for pretrained encoders: they turn a clip into a
(frames x dims) float32 matrix and are never touched by the optimizer. The
deterministic synthetic provider draws every clip's features from a shared
latent world so that paired audio/video sequences agree; the import provider
reads features somebody else computed, in the same cache file format.

Cache file layout (one file per clip/modality/provider):
    magic   4 bytes  b"AVVF"
    version uint32   little-endian
    hlen    uint32   little-endian, length of the JSON header
    header  JSON     {"clip_id", "modality", "provider_id", "frames", "dims"}
    data    frames*dims float32, little-endian, row-major
"""

import json
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import atomic_write_bytes, child_rng, stable_u64

logger = logging.getLogger(__name__)

MODALITIES = ("audio", "video")

CACHE_MAGIC = b"AVVF"
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Frozen-encoder output for one clip in one modality."""

    clip_id: str
    modality: str
    features: np.ndarray  # (frames, dims), float32
    provider_id: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be a (frames >= 1, dims) matrix, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"clip {self.clip_id!r}: non-finite feature values")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]


class FeatureProvider(ABC):
    """Deterministic clip -> FeatureSequence map with no trainable state."""

    provider_id: str = "unknown"
    modality: str = "audio"
    frozen: bool = True

    @abstractmethod
    def encode(self, clip) -> FeatureSequence: ...

    @abstractmethod
    def dim(self) -> int: ...

    def trainable_parameters(self) -> dict:
        """Providers are frozen: nothing here ever reaches the optimizer."""
        return {}


@dataclass(frozen=True)
class LatentWorld:
    """Seeded generator state behind the synthetic providers.

    Every clip id maps to one latent vector; each modality projects that
    vector through its own fixed matrix and repeats it across frames, plus
    per-frame noise. Clip ids listed in ``misaligned_ids`` get an unrelated
    latent on the video side, producing deliberately incoherent pairs.
    """

    seed: int
    latent_dim: int = 16
    audio_dim: int = 64
    video_dim: int = 48
    audio_frames: int = 6
    video_frames: int = 4
    noise_scale: float = 0.0
    misaligned_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        for name in ("latent_dim", "audio_dim", "video_dim", "audio_frames", "video_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def modality_dim(self, modality: str) -> int:
        return self.audio_dim if modality == "audio" else self.video_dim

    def modality_frames(self, modality: str) -> int:
        return self.audio_frames if modality == "audio" else self.video_frames

    def projection(self, modality: str) -> np.ndarray:
        """Fixed (dims x latent_dim) projection for one modality."""
        rng = child_rng(self.seed, "projection", modality)
        dim = self.modality_dim(modality)
        return rng.standard_normal((dim, self.latent_dim)) / np.sqrt(self.latent_dim)

    def latent(self, clip_id: str, modality: str) -> np.ndarray:
        """The clip's latent vector; shared across modalities unless the
        clip is marked misaligned, in which case video gets its own."""
        if modality == "video" and clip_id in self.misaligned_ids:
            rng = child_rng(self.seed, "latent-misaligned", stable_u64(clip_id))
        else:
            rng = child_rng(self.seed, "latent", stable_u64(clip_id))
        return rng.standard_normal(self.latent_dim)

    def provider_id(self, modality: str) -> str:
        return f"synthetic:{modality}:seed={self.seed}"


def synthetic_encode(clip, world: LatentWorld, modality: str) -> FeatureSequence:
    """Encode one clip: projected latent broadcast over frames plus noise."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    base = world.projection(modality) @ world.latent(clip.clip_id, modality)
    frames = world.modality_frames(modality)
    noise_rng = child_rng(world.seed, "noise", modality, stable_u64(clip.clip_id))
    noise = noise_rng.standard_normal((frames, base.shape[0])) * world.noise_scale
    features = (base[None, :] + noise).astype(np.float32)
    return FeatureSequence(
        clip_id=clip.clip_id,
        modality=modality,
        features=features,
        provider_id=world.provider_id(modality),
    )


class SyntheticProvider(FeatureProvider):
    """FeatureProvider face of a LatentWorld for one modality."""

    def __init__(self, world: LatentWorld, modality: str):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        self.world = world
        self.modality = modality
        self.provider_id = world.provider_id(modality)

    def encode(self, clip) -> FeatureSequence:
        return synthetic_encode(clip, self.world, self.modality)

    def dim(self) -> int:
        return self.world.modality_dim(self.modality)


def layer_concat_adapter(per_layer_states, clip_id: str, modality: str,
                         provider_id: str = "layer-concat") -> FeatureSequence:
    """Stack encoder layer outputs: drop the first layer, concatenate the
    rest along the feature axis. L layers of (T x d) become (T x d*(L-1))."""
    layers = [np.asarray(m) for m in per_layer_states]
    if len(layers) < 2:
        raise ValueError("need at least 2 layer outputs (the first is discarded)")
    shape = layers[0].shape
    if any(m.shape != shape for m in layers) or len(shape) != 2:
        raise ValueError(f"all layer outputs must share one (T, d) shape, got {[m.shape for m in layers]}")
    stacked = np.concatenate(layers[1:], axis=1).astype(np.float32)
    return FeatureSequence(clip_id=clip_id, modality=modality, features=stacked,
                           provider_id=provider_id)


class FeatureCache:
    """Disk cache keyed by (clip_id, modality, provider_id).

    Stored values round-trip bit-exactly at float32. Corrupt entries are
    reported once and treated as absent.
    """

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, clip_id: str, modality: str, provider_id: str) -> Path:
        key = f"{clip_id}\x00{modality}\x00{provider_id}"
        return self.root / f"{stable_u64(key):016x}.feat"

    def put(self, seq: FeatureSequence) -> Path:
        feats = np.ascontiguousarray(seq.features, dtype="<f4")
        header = json.dumps(
            {
                "clip_id": seq.clip_id,
                "modality": seq.modality,
                "provider_id": seq.provider_id,
                "frames": int(feats.shape[0]),
                "dims": int(feats.shape[1]),
            },
            sort_keys=True,
        ).encode("utf-8")
        blob = CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(header)) + header + feats.tobytes()
        path = self._path(seq.clip_id, seq.modality, seq.provider_id)
        atomic_write_bytes(path, blob)
        return path

    def get(self, clip_id: str, modality: str, provider_id: str):
        path = self._path(clip_id, modality, provider_id)
        if not path.exists():
            return None
        try:
            blob = path.read_bytes()
            if blob[:4] != CACHE_MAGIC:
                raise ValueError("bad magic")
            version, hlen = struct.unpack("<II", blob[4:12])
            if version != CACHE_VERSION:
                raise ValueError(f"unsupported cache version {version}")
            header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
            if (header["clip_id"], header["modality"], header["provider_id"]) != (
                clip_id,
                modality,
                provider_id,
            ):
                raise ValueError("header key mismatch")
            frames, dims = int(header["frames"]), int(header["dims"])
            data = blob[12 + hlen :]
            expected = frames * dims * 4
            if len(data) != expected:
                raise ValueError(f"payload length {len(data)} != expected {expected}")
            feats = np.frombuffer(data, dtype="<f4").reshape(frames, dims).copy()
            return FeatureSequence(clip_id=clip_id, modality=modality,
                                   features=feats, provider_id=provider_id)
        except (ValueError, KeyError, json.JSONDecodeError, struct.error) as exc:
            logger.warning("corrupt feature cache entry %s (%s); treating as absent", path, exc)
            return None


class ImportProvider(FeatureProvider):
    """Reads externally computed features from a FeatureCache directory."""

    def __init__(self, cache: FeatureCache, modality: str, provider_id: str):
        self.cache = cache
        self.modality = modality
        self.provider_id = provider_id
        self._dim = None

    def encode(self, clip) -> FeatureSequence:
        seq = self.cache.get(clip.clip_id, self.modality, self.provider_id)
        if seq is None:
            raise FileNotFoundError(
                f"no cached {self.modality} features for clip {clip.clip_id!r}"
                f" under provider {self.provider_id!r}"
            )
        self._dim = seq.dims
        return seq

    def dim(self) -> int:
        if self._dim is None:
            raise RuntimeError("dim unknown until a sequence has been read")
        return self._dim


class CachedProvider(FeatureProvider):
    """Wraps a provider with read-through caching."""

    def __init__(self, inner: FeatureProvider, cache: FeatureCache):
        self.inner = inner
        self.cache = cache
        self.modality = inner.modality
        self.provider_id = inner.provider_id

    def encode(self, clip) -> FeatureSequence:
        hit = self.cache.get(clip.clip_id, self.modality, self.provider_id)
        if hit is not None:
            return hit
        seq = self.inner.encode(clip)
        self.cache.put(seq)
        return seq

    def dim(self) -> int:
        return self.inner.dim()


@dataclass(frozen=True)
class ProviderPair:
    """The audio and video providers used together for one experiment."""

    audio: FeatureProvider
    video: FeatureProvider

    def encode_pair(self, clip):
        return self.audio.encode(clip), self.video.encode(clip)


def synthetic_providers(world: LatentWorld) -> ProviderPair:
    return ProviderPair(
        audio=SyntheticProvider(world, "audio"),
        video=SyntheticProvider(world, "video"),
    )
