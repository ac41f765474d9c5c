"""Clip corpus construction: fixed-length segmentation and manifest files.

A manifest is line-delimited JSON: a header record carrying the clip length
and the seed it was built with, followed by one record per clip.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .util import atomic_write_text, child_rng

SPLITS = ("train", "val", "test")

MANIFEST_FORMAT = "avva-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Raised when a manifest file is malformed; message names the line."""


@dataclass(frozen=True)
class MediaRef:
    """A source media file known only by id, locator and duration."""

    media_id: str
    uri: str
    duration: float
    dataset_tag: str = ""

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"media {self.media_id!r}: duration must be > 0")


@dataclass(frozen=True)
class ClipSegment:
    """A fixed-length window of one media file."""

    clip_id: str
    media_id: str
    start: float
    end: float
    split: str = "train"

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"clip {self.clip_id!r}: end must exceed start")
        if self.start < 0:
            raise ValueError(f"clip {self.clip_id!r}: start must be >= 0")
        if self.split not in SPLITS:
            raise ValueError(f"clip {self.clip_id!r}: unknown split {self.split!r}")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class CorpusManifest:
    entries: list[ClipSegment] = field(default_factory=list)
    clip_length: float = 3.0
    created_with_seed: int = 0


def make_clip_id(media_id: str, start: float) -> str:
    """Canonical clip id: media id plus start offset in milliseconds."""
    return f"{media_id}:{int(round(start * 1000)):09d}"


def segment_media(media, clip_length=3.0, max_clips=20, seed=0, split="train"):
    """Tile a media file into consecutive non-overlapping clips.

    Windows of exactly ``clip_length`` are laid out from t=0; a trailing
    partial window is dropped. When more than ``max_clips`` windows fit,
    exactly ``max_clips`` are sampled without replacement using a generator
    derived from (seed, media_id). The result is sorted by start time and is
    deterministic for a fixed seed.
    """
    if clip_length <= 0:
        raise ValueError(f"clip_length must be > 0, got {clip_length}")
    if max_clips < 1:
        raise ValueError(f"max_clips must be >= 1, got {max_clips}")
    if media.duration <= 0:
        raise ValueError(f"media {media.media_id!r}: duration must be > 0")

    starts = []
    i = 0
    while (i + 1) * clip_length <= media.duration:
        starts.append(i * clip_length)
        i += 1
    if len(starts) > max_clips:
        rng = child_rng(seed, "segment", media.media_id)
        picked = rng.choice(len(starts), size=max_clips, replace=False)
        starts = [starts[j] for j in sorted(picked)]

    return [
        ClipSegment(
            clip_id=make_clip_id(media.media_id, s),
            media_id=media.media_id,
            start=s,
            end=s + clip_length,
            split=split,
        )
        for s in starts
    ]


def segment_corpus(media_list, clip_length=3.0, max_clips=20, seed=0, split="train"):
    """Segment every media file and collect the clips into one manifest."""
    entries = []
    for media in media_list:
        entries.extend(
            segment_media(media, clip_length=clip_length, max_clips=max_clips, seed=seed, split=split)
        )
    return CorpusManifest(entries=entries, clip_length=clip_length, created_with_seed=seed)


def write_manifest(manifest: CorpusManifest, destination) -> None:
    header = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "clip_length": manifest.clip_length,
        "seed": manifest.created_with_seed,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for clip in manifest.entries:
        lines.append(
            json.dumps(
                {
                    "clip_id": clip.clip_id,
                    "media_id": clip.media_id,
                    "start": clip.start,
                    "end": clip.end,
                    "split": clip.split,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(destination, "\n".join(lines) + "\n")


def read_manifest(source) -> CorpusManifest:
    """Parse a manifest file, validating record invariants.

    Raises ManifestError naming the offending line on any malformed record.
    """
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    if not raw_lines:
        raise ManifestError("line 1: empty file, expected manifest header")

    def fail(lineno, msg):
        raise ManifestError(f"line {lineno}: {msg}")

    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"invalid JSON header: {exc.msg}")
    if not isinstance(header, dict) or header.get("format") != MANIFEST_FORMAT:
        fail(1, "missing manifest header")
    if header.get("version") != MANIFEST_VERSION:
        fail(1, f"unsupported manifest version {header.get('version')!r}")

    entries = []
    seen_ids = set()
    spans = {}
    for lineno, line in enumerate(raw_lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(lineno, f"invalid JSON record: {exc.msg}")
        missing = {"clip_id", "media_id", "start", "end", "split"} - set(rec)
        if missing:
            fail(lineno, f"missing fields: {sorted(missing)}")
        try:
            clip = ClipSegment(
                clip_id=rec["clip_id"],
                media_id=rec["media_id"],
                start=float(rec["start"]),
                end=float(rec["end"]),
                split=rec["split"],
            )
        except (TypeError, ValueError) as exc:
            fail(lineno, str(exc))
        if clip.clip_id in seen_ids:
            fail(lineno, f"duplicate clip_id {clip.clip_id!r}")
        seen_ids.add(clip.clip_id)
        for other_start, other_end in spans.get(clip.media_id, ()):
            if clip.start < other_end and other_start < clip.end:
                fail(lineno, f"clip {clip.clip_id!r} overlaps another clip of {clip.media_id!r}")
        spans.setdefault(clip.media_id, []).append((clip.start, clip.end))
        entries.append(clip)

    return CorpusManifest(
        entries=entries,
        clip_length=float(header["clip_length"]),
        created_with_seed=int(header["seed"]),
    )


def read_media_list(source) -> list:
    """Read a line-delimited JSON list of media references."""
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"media list not found: {path}")
    refs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                refs.append(
                    MediaRef(
                        media_id=rec["media_id"],
                        uri=rec.get("uri", ""),
                        duration=float(rec["duration"]),
                        dataset_tag=rec.get("dataset_tag", ""),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: bad media record: {exc}") from exc
    ids = [m.media_id for m in refs]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate media_id in media list")
    return refs

