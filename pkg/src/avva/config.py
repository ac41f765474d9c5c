"""Run configuration: one JSON file with a section per pipeline stage.

Loading is strict (unknown keys are all collected and rejected together) and
echoing is total: every tunable, defaulted or not, appears in the echoed
config. Secrets never pass through here; backends read credentials from
environment variables.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .util import atomic_write_text


class ConfigError(ValueError):
    """Invalid run config; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class IngestSection:
    clip_length: float = 3.0
    max_clips: int = 20
    split: str = "train"


@dataclass
class HttpSection:
    endpoint: str | None = None
    caption_endpoint: str | None = None
    model: str = "default"
    audio_caption_model: str = "audio-captioner"
    video_caption_model: str = "video-captioner"
    timeout_s: float = 30.0


@dataclass
class MreSection:
    backend: str = "mock"
    threshold: float = 7.6
    max_attempts: int = 3
    backoff_s: float = 0.0
    workers: int = 1
    http: HttpSection = field(default_factory=HttpSection)


@dataclass
class EncodersSection:
    provider: str = "synthetic"
    latent_dim: int = 16
    audio_dim: int = 64
    video_dim: int = 48
    audio_frames: int = 6
    video_frames: int = 4
    noise_scale: float = 0.1
    cache_dir: str | None = None
    import_audio_id: str = "import:audio"
    import_video_id: str = "import:video"


@dataclass
class ModelSection:
    hidden_dim: int = 1024
    output_dim: int = 768
    heads: int = 8
    dropout: float = 0.2
    temperature: float = 0.07


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    val_fraction: float = 0.1


@dataclass
class EvalSection:
    n_subset: int = 100
    repetitions: int = 100
    ks: list = field(default_factory=lambda: [1, 3, 10])
    shifts: list = field(default_factory=lambda: [-9.0, -6.0, -3.0, 0.0, 3.0, 6.0, 9.0])
    shift_samples: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    ingest: IngestSection = field(default_factory=IngestSection)
    mre: MreSection = field(default_factory=MreSection)
    encoders: EncodersSection = field(default_factory=EncodersSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)


def _build(cls, data, path, problems):
    """Construct a dataclass from a dict, recording every unknown key."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{path}{key}: unknown key")
            continue
        ftype = known[key].type
        nested = _SECTION_TYPES.get((cls, key))
        if nested is not None:
            if not isinstance(value, dict):
                problems.append(f"{path}{key}: expected an object")
                continue
            kwargs[key] = _build(nested, value, f"{path}{key}.", problems)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{path.rstrip('.') or 'config'}: {exc}")
        return cls()


_SECTION_TYPES = {
    (RunConfig, "ingest"): IngestSection,
    (RunConfig, "mre"): MreSection,
    (RunConfig, "encoders"): EncodersSection,
    (RunConfig, "model"): ModelSection,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "eval"): EvalSection,
    (MreSection, "http"): HttpSection,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a JSON object"])
    problems = []
    cfg = _build(RunConfig, data, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON: {exc}"]) from exc
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_echo_text(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def write_config_echo(path, cfg: RunConfig) -> None:
    atomic_write_text(path, config_echo_text(cfg))


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:10]
