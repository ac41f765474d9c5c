"""Multimodal reasoning engine: caption clips, judge alignment, curate.

Each clip gets an audio and a video description from a caption backend; a
text-LLM judge then scores how well the two descriptions agree on five
aspects, each in [0, 10]. The equal-weight mean of the five is the clip's
aggregate alignment score, and curation keeps clips whose aggregate clears a
threshold.
"""

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from math import ceil
from pathlib import Path

from .backends import BackendError
from .ingest import ClipSegment
from .util import atomic_write_text

logger = logging.getLogger(__name__)

AGGREGATE_TOLERANCE = 1e-9


class TemplateError(ValueError):
    """Scoring template is missing a required placeholder or metric name."""


class ScoreParseError(ValueError):
    """Judge response missing metrics; carries the metric names not found."""

    def __init__(self, missing):
        self.missing = tuple(missing)
        names = ", ".join(m.name for m in self.missing)
        super().__init__(f"could not parse scores for: {names}")


class MetricName(Enum):
    """The five alignment aspects, in canonical order."""

    TEMPORAL_ALIGNMENT = "Temporal Alignment"
    SPATIAL_COHERENCE = "Spatial Coherence"
    CONTEXTUAL_RELEVANCE = "Contextual Relevance"
    PHYSICAL_CAUSALITY = "Physical Causality"
    SOUND_SOURCE_VISIBILITY = "Sound Source Visibility"


METRICS = tuple(MetricName)


@dataclass(frozen=True)
class CaptionPair:
    clip_id: str
    audio_caption: str
    video_caption: str
    backend_ids: tuple[str, str] = ("unknown", "unknown")

    def __post_init__(self):
        if not self.audio_caption.strip() or not self.video_caption.strip():
            raise ValueError(f"clip {self.clip_id!r}: captions must be non-empty")


@dataclass(frozen=True)
class AlignmentScores:
    """Five per-metric scores plus their equal-weight mean."""

    per_metric: dict
    aggregate: float

    def __post_init__(self):
        missing = [m for m in METRICS if m not in self.per_metric]
        if missing:
            raise ValueError(f"missing metrics: {[m.name for m in missing]}")
        for metric, value in self.per_metric.items():
            if not 0.0 <= value <= 10.0:
                raise ValueError(f"{metric.name} score {value} outside [0, 10]")
        mean = sum(self.per_metric[m] for m in METRICS) / len(METRICS)
        if abs(mean - self.aggregate) > AGGREGATE_TOLERANCE:
            raise ValueError(f"aggregate {self.aggregate} != mean of metrics {mean}")

    @classmethod
    def from_metrics(cls, per_metric) -> "AlignmentScores":
        values = {m: float(per_metric[m]) for m in METRICS}
        aggregate = sum(values[m] for m in METRICS) / len(METRICS)
        return cls(per_metric=values, aggregate=aggregate)

    @classmethod
    def from_values(cls, values) -> "AlignmentScores":
        if len(values) != len(METRICS):
            raise ValueError(f"expected {len(METRICS)} scores, got {len(values)}")
        return cls.from_metrics(dict(zip(METRICS, values)))


@dataclass(frozen=True)
class ScoredClip:
    """A clip with its captions and alignment scores, pre-threshold."""

    segment: ClipSegment
    captions: CaptionPair
    scores: AlignmentScores


@dataclass(frozen=True)
class CurationRecord:
    """A scored clip with its accept/reject outcome under a threshold."""

    segment: ClipSegment
    captions: CaptionPair
    scores: AlignmentScores
    accepted: bool
    threshold_used: float

    def __post_init__(self):
        if self.accepted != (self.scores.aggregate >= self.threshold_used):
            raise ValueError(
                f"clip {self.segment.clip_id!r}: accepted flag inconsistent with threshold"
            )


@dataclass(frozen=True)
class RetentionStats:
    total: int
    retained: int
    fraction: float
    retained_hours: float
    threshold: float


DEFAULT_SCORING_TEMPLATE = """\
You are rating how well an audio description and a video description could
describe the same moment of the same scene.

Audio description:
{audio_caption}

Video description:
{video_caption}

Rate each aspect from 0 (no match) to 10 (perfect match):
- Temporal Alignment: events in the audio happen at the same moments as the
  matching events in the video (a drum hit heard exactly when the stick lands).
- Spatial Coherence: where sounds come from agrees with where their sources
  sit or move in the frame (an engine heard sweeping rightwards as the car
  crosses the shot).
- Contextual Relevance: the overall subject and setting of the audio fit the
  video (crowd noise over a packed stadium).
- Physical Causality: each described sound could plausibly be produced by an
  object, action, or event the video describes (a splash as the diver enters
  the water).
- Sound Source Visibility: how much of what is heard comes from sources that
  are on screen, keeping in mind that visible things can be silent and audible
  things can be out of frame.

Answer with exactly five lines, one per aspect, in this form and nothing else:
Temporal Alignment: <number>
Spatial Coherence: <number>
Contextual Relevance: <number>
Physical Causality: <number>
Sound Source Visibility: <number>
"""

STRICT_FORMAT_REMINDER = (
    "\n\nYour previous answer could not be parsed. Reply with ONLY the five"
    " `Aspect: number` lines, one per aspect, and no other text."
)

_PLACEHOLDERS = ("{audio_caption}", "{video_caption}")


def render_scores_response(values) -> str:
    """Canonical five-line `Metric: value` layout (what the judge is asked
    to emit, and what the mock judge emits)."""
    if len(values) != len(METRICS):
        raise ValueError(f"expected {len(METRICS)} scores, got {len(values)}")
    return "\n".join(f"{m.value}: {v}" for m, v in zip(METRICS, values))


def build_scoring_prompt(pair: CaptionPair, template: str = DEFAULT_SCORING_TEMPLATE) -> str:
    """Substitute both captions into the template.

    The template must contain both caption placeholders and all five metric
    names; substitution is plain string replacement so captions may contain
    any characters.
    """
    problems = [p for p in _PLACEHOLDERS if p not in template]
    problems += [m.value for m in METRICS if m.value not in template]
    if problems:
        raise TemplateError(f"template missing: {problems}")
    return template.replace("{audio_caption}", pair.audio_caption).replace(
        "{video_caption}", pair.video_caption
    )


def _metric_pattern(metric: MetricName) -> re.Pattern:
    words = [re.escape(w) for w in metric.value.split()]
    return re.compile(r"[\s_\-]*".join(words), re.IGNORECASE)


_METRIC_PATTERNS = {m: _metric_pattern(m) for m in METRICS}
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)")


def parse_scores(response: str) -> AlignmentScores:
    """Extract the five metric scores from free-form judge output.

    Metric names are matched case-insensitively and in any order; the first
    numeric value after each name is taken and clamped to [0, 10]. Raises
    ScoreParseError naming every metric that could not be found.
    """
    found = {}
    missing = []
    for metric in METRICS:
        name_match = _METRIC_PATTERNS[metric].search(response)
        number_match = _NUMBER.search(response, name_match.end()) if name_match else None
        if number_match is None:
            missing.append(metric)
        else:
            found[metric] = min(10.0, max(0.0, float(number_match.group())))
    if missing:
        raise ScoreParseError(missing)
    return AlignmentScores.from_metrics(found)


def _retry(fn, max_attempts: int, what: str, backoff_s: float = 0.0, sleep=time.sleep):
    """Retry with exponential backoff (backoff_s, 2*backoff_s, ...)."""
    last = None
    for attempt in range(1, max_attempts + 1):
        try:
            return fn(), attempt
        except BackendError as exc:
            last = exc
            logger.warning("%s failed (attempt %d/%d): %s", what, attempt, max_attempts, exc)
            if backoff_s > 0.0 and attempt < max_attempts:
                sleep(backoff_s * 2 ** (attempt - 1))
    raise BackendError(f"{what} failed after {max_attempts} attempts: {last}") from last


def caption_clip(clip: ClipSegment, backend, max_attempts: int = 3,
                 backoff_s: float = 0.0) -> CaptionPair:
    """Caption one clip in both modalities, retrying each backend call.

    Empty captions count as backend failures. Raises BackendError once the
    attempt budget is exhausted.
    """

    def call(fn, what):
        def attempt():
            text = fn(clip)
            if not text or not text.strip():
                raise BackendError(f"{what} returned an empty caption for {clip.clip_id!r}")
            return text

        return _retry(attempt, max_attempts, f"{what}({clip.clip_id})", backoff_s)[0]

    audio = call(backend.describe_audio, "describe_audio")
    video = call(backend.describe_video, "describe_video")
    return CaptionPair(
        clip_id=clip.clip_id,
        audio_caption=audio,
        video_caption=video,
        backend_ids=tuple(backend.backend_ids),
    )


def score_alignment(pair: CaptionPair, backend, template: str = DEFAULT_SCORING_TEMPLATE,
                    max_attempts: int = 3, backoff_s: float = 0.0) -> AlignmentScores:
    """Prompt the judge and parse its scores.

    On a parse failure the judge is reprompted once with a stricter format
    reminder; a second parse failure propagates.
    """
    prompt = build_scoring_prompt(pair, template)
    response, _ = _retry(lambda: backend.complete(prompt), max_attempts,
                         f"score({pair.clip_id})", backoff_s)
    try:
        return parse_scores(response)
    except ScoreParseError as first_error:
        logger.warning("reprompting %s after parse failure: %s", pair.clip_id, first_error)
        retry_response, _ = _retry(
            lambda: backend.complete(prompt + STRICT_FORMAT_REMINDER),
            max_attempts,
            f"score-reprompt({pair.clip_id})",
            backoff_s,
        )
        return parse_scores(retry_response)


@dataclass
class CurationOutcome:
    """Everything the caption -> score -> curate pipeline produced."""

    records: list  # every scored clip, flagged accepted/rejected
    accepted: list  # the accepted subset, in clip_id order
    stats: RetentionStats
    excluded: dict  # clip_id -> reason, for clips that never got scores


def score_clips(clips, caption_backend, scoring_backend,
                template: str = DEFAULT_SCORING_TEMPLATE, max_attempts: int = 3,
                workers: int = 1, backoff_s: float = 0.0):
    """Caption and score a batch of clips with bounded parallelism.

    Clips whose backends keep failing are excluded with a logged reason.
    Output order is clip_id order regardless of scheduling.
    Returns (scored: list[ScoredClip], excluded: dict[clip_id, reason]).
    """

    def process(clip):
        captions = caption_clip(clip, caption_backend, max_attempts=max_attempts,
                                backoff_s=backoff_s)
        scores = score_alignment(captions, scoring_backend, template,
                                 max_attempts=max_attempts, backoff_s=backoff_s)
        return ScoredClip(segment=clip, captions=captions, scores=scores)

    scored = []
    excluded = {}

    def handle(clip, result, error):
        if error is not None:
            logger.warning("excluding clip %s: %s", clip.clip_id, error)
            excluded[clip.clip_id] = str(error)
        else:
            scored.append(result)

    if workers <= 1:
        for clip in clips:
            try:
                handle(clip, process(clip), None)
            except (BackendError, ScoreParseError) as exc:
                handle(clip, None, exc)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(clip, pool.submit(process, clip)) for clip in clips]
            for clip, future in futures:
                try:
                    handle(clip, future.result(), None)
                except (BackendError, ScoreParseError) as exc:
                    handle(clip, None, exc)

    scored.sort(key=lambda s: s.segment.clip_id)
    return scored, excluded


def flag_records(scored, threshold: float) -> list:
    """Apply a threshold to scored clips, preserving input order."""
    if not 0.0 <= threshold <= 10.0:
        raise ValueError(f"threshold must be in [0, 10], got {threshold}")
    return [
        CurationRecord(
            segment=s.segment,
            captions=s.captions,
            scores=s.scores,
            accepted=s.scores.aggregate >= threshold,
            threshold_used=threshold,
        )
        for s in scored
    ]


def curate(scored, threshold: float):
    """Keep clips whose aggregate clears the threshold (ties retained).

    Returns (accepted records, retention stats); input order is preserved.
    """
    records = flag_records(scored, threshold)
    accepted = [r for r in records if r.accepted]
    retained_hours = sum(r.segment.length for r in accepted) / 3600.0
    stats = RetentionStats(
        total=len(records),
        retained=len(accepted),
        fraction=len(accepted) / len(records) if records else 0.0,
        retained_hours=retained_hours,
        threshold=threshold,
    )
    return accepted, stats


def threshold_for_retention(scored, target_fraction: float) -> float:
    """Largest threshold retaining at least the target fraction of clips.

    With ties retained (aggregate >= threshold), this is the m-th largest
    aggregate where m = ceil(target * n); the arithmetic is exact in the
    float value of target.
    """
    if not scored:
        raise ValueError("cannot derive a threshold from an empty record list")
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError(f"target_fraction must be in (0, 1], got {target_fraction}")
    aggregates = sorted((s.scores.aggregate for s in scored), reverse=True)
    n = len(aggregates)
    m = ceil(Fraction(target_fraction) * n)
    m = min(max(m, 1), n)
    return aggregates[m - 1]


def run_curation(clips, caption_backend, scoring_backend, threshold: float,
                 template: str = DEFAULT_SCORING_TEMPLATE, max_attempts: int = 3,
                 workers: int = 1, backoff_s: float = 0.0) -> CurationOutcome:
    """Full caption -> score -> curate pipeline over a clip list."""
    scored, excluded = score_clips(
        clips, caption_backend, scoring_backend,
        template=template, max_attempts=max_attempts, workers=workers, backoff_s=backoff_s,
    )
    records = flag_records(scored, threshold)
    accepted, stats = curate(scored, threshold)
    return CurationOutcome(records=records, accepted=accepted, stats=stats, excluded=excluded)


def _segment_to_json(segment: ClipSegment) -> dict:
    return {
        "media_id": segment.media_id,
        "start": segment.start,
        "end": segment.end,
        "split": segment.split,
    }


def _segment_from_json(clip_id: str, data: dict) -> ClipSegment:
    return ClipSegment(
        clip_id=clip_id,
        media_id=data["media_id"],
        start=float(data["start"]),
        end=float(data["end"]),
        split=data["split"],
    )


def write_captions(captioned, destination) -> None:
    """Write (segment, captions) pairs as line-delimited JSON."""
    lines = []
    for segment, captions in captioned:
        lines.append(
            json.dumps(
                {
                    "clip_id": segment.clip_id,
                    "segment": _segment_to_json(segment),
                    "audio_caption": captions.audio_caption,
                    "video_caption": captions.video_caption,
                    "backend_ids": list(captions.backend_ids),
                },
                sort_keys=True,
            )
        )
    atomic_write_text(destination, "\n".join(lines) + ("\n" if lines else ""))


def read_captions(source) -> list:
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"captions file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                segment = _segment_from_json(rec["clip_id"], rec["segment"])
                captions = CaptionPair(
                    clip_id=rec["clip_id"],
                    audio_caption=rec["audio_caption"],
                    video_caption=rec["video_caption"],
                    backend_ids=tuple(rec.get("backend_ids", ("unknown", "unknown"))),
                )
                out.append((segment, captions))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: bad caption record: {exc}") from exc
    return out


def write_scored_clips(scored, destination) -> None:
    """Write scored (pre-threshold) clips as line-delimited JSON."""
    lines = []
    for s in scored:
        lines.append(
            json.dumps(
                {
                    "clip_id": s.segment.clip_id,
                    "segment": _segment_to_json(s.segment),
                    "audio_caption": s.captions.audio_caption,
                    "video_caption": s.captions.video_caption,
                    "backend_ids": list(s.captions.backend_ids),
                    "scores": {m.value: s.scores.per_metric[m] for m in METRICS},
                    "aggregate": s.scores.aggregate,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(destination, "\n".join(lines) + ("\n" if lines else ""))


def read_scored_clips(source) -> list:
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"scored-clips file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    ScoredClip(
                        segment=_segment_from_json(rec["clip_id"], rec["segment"]),
                        captions=CaptionPair(
                            clip_id=rec["clip_id"],
                            audio_caption=rec["audio_caption"],
                            video_caption=rec["video_caption"],
                            backend_ids=tuple(rec.get("backend_ids", ("unknown", "unknown"))),
                        ),
                        scores=AlignmentScores.from_metrics(
                            {m: float(rec["scores"][m.value]) for m in METRICS}
                        ),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: bad scored record: {exc}") from exc
    return out


def write_records(records, destination) -> None:
    """Write curation records as line-delimited JSON."""
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {
                    "clip_id": r.segment.clip_id,
                    "segment": {
                        "media_id": r.segment.media_id,
                        "start": r.segment.start,
                        "end": r.segment.end,
                        "split": r.segment.split,
                    },
                    "audio_caption": r.captions.audio_caption,
                    "video_caption": r.captions.video_caption,
                    "backend_ids": list(r.captions.backend_ids),
                    "scores": {m.value: r.scores.per_metric[m] for m in METRICS},
                    "aggregate": r.scores.aggregate,
                    "accepted": r.accepted,
                    "threshold": r.threshold_used,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(destination, "\n".join(lines) + ("\n" if lines else ""))


def read_records(source) -> list:
    """Read curation records, validating invariants; names bad lines."""
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"records file not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                segment = ClipSegment(
                    clip_id=rec["clip_id"],
                    media_id=rec["segment"]["media_id"],
                    start=float(rec["segment"]["start"]),
                    end=float(rec["segment"]["end"]),
                    split=rec["segment"]["split"],
                )
                captions = CaptionPair(
                    clip_id=rec["clip_id"],
                    audio_caption=rec["audio_caption"],
                    video_caption=rec["video_caption"],
                    backend_ids=tuple(rec.get("backend_ids", ("unknown", "unknown"))),
                )
                scores = AlignmentScores.from_metrics(
                    {m: float(rec["scores"][m.value]) for m in METRICS}
                )
                records.append(
                    CurationRecord(
                        segment=segment,
                        captions=captions,
                        scores=scores,
                        accepted=bool(rec["accepted"]),
                        threshold_used=float(rec["threshold"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: bad curation record: {exc}") from exc
    return records
