"""Evaluation protocols: repeated-subset retrieval, threshold sweeps, and
temporal-shift similarity curves.

Retrieval follows a repeat-and-average scheme: every repetition samples a
fresh subset of N distinct pairs, ranks the opposite modality by cosine
similarity for each query, and scores top-k hit rates; the report carries
mean and population standard deviation over the repetitions.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .mre import curate
from .util import atomic_write_text, child_rng

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 10)


class Direction(Enum):
    A2V = "A->V"
    V2A = "V->A"


class ShiftPanel(Enum):
    AUDIO_VS_SHIFTED_AUDIO = "audio_vs_shifted_audio"
    VIDEO_VS_SHIFTED_VIDEO = "video_vs_shifted_video"
    VIDEO_VS_SHIFTED_AUDIO = "video_vs_shifted_audio"
    AUDIO_VS_SHIFTED_VIDEO = "audio_vs_shifted_video"


@dataclass
class RetrievalReport:
    direction: Direction
    per_k: dict  # k -> (mean accuracy %, std %)
    n_subset: int
    repetitions: int
    seed: int
    per_rep: dict = field(default_factory=dict)  # k -> list of per-repetition %

    def mean(self, k: int) -> float:
        return self.per_k[k][0]

    def std(self, k: int) -> float:
        return self.per_k[k][1]

    def format_cell(self, k: int) -> str:
        mean, std = self.per_k[k]
        return f"{mean:.2f}^{{±{std:.2f}}}"


@dataclass
class SweepPoint:
    threshold: float
    retained_hours: float
    retained_count: int
    reports: dict  # Direction -> RetrievalReport


@dataclass
class ShiftCurve:
    panel: ShiftPanel
    shifts: list
    mean_similarity: list
    sample_count: int
    skipped: int = 0

    def at(self, shift: float) -> float:
        return self.mean_similarity[self.shifts.index(shift)]


def _stack_embeddings(pairs):
    a = np.stack([np.asarray(p.audio_embedding, dtype=np.float64) for p in pairs])
    v = np.stack([np.asarray(p.video_embedding, dtype=np.float64) for p in pairs])
    for mat, what in ((a, "audio"), (v, "video")):
        norms = np.linalg.norm(mat, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"{what} embeddings must be unit-norm before retrieval")
    return a, v


def topk_retrieval(pairs, direction: Direction, ks=DEFAULT_KS, n_subset: int = 100,
                   repetitions: int = 100, seed: int = 0) -> RetrievalReport:
    """Repeated-subset top-k retrieval accuracy.

    Every repetition samples n_subset distinct pairs; each query ranks the
    candidates of the other modality by cosine similarity (descending, ties
    broken by candidate index) and scores a hit when its own counterpart
    ranks within k. Reports mean and population std over repetitions, in
    percent.
    """
    if len(pairs) < n_subset:
        raise ValueError(f"need at least {n_subset} pairs, got {len(pairs)}")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1 or ks[-1] > n_subset:
        raise ValueError(f"ks must lie in [1, {n_subset}]")
    a_all, v_all = _stack_embeddings(pairs)

    per_rep = {k: [] for k in ks}
    for rep in range(repetitions):
        rng = child_rng(seed, "retrieval-subset", rep)
        idx = rng.choice(len(pairs), size=n_subset, replace=False)
        a, v = a_all[idx], v_all[idx]
        sim = a @ v.T if direction == Direction.A2V else v @ a.T
        ranks = kernels.true_match_ranks(sim)
        for k in ks:
            per_rep[k].append(100.0 * float(np.mean(ranks <= k)))

    per_k = {
        k: (float(np.mean(vals)), float(np.std(vals)))  # population std
        for k, vals in per_rep.items()
    }
    return RetrievalReport(direction=direction, per_k=per_k, n_subset=n_subset,
                           repetitions=repetitions, seed=seed, per_rep=per_rep)


def retrieval_reports(pairs, ks=DEFAULT_KS, n_subset: int = 100, repetitions: int = 100,
                      seed: int = 0) -> dict:
    """Both directions over the same subsets seed."""
    return {
        d: topk_retrieval(pairs, d, ks=ks, n_subset=n_subset, repetitions=repetitions, seed=seed)
        for d in Direction
    }


def curation_sweep(thresholds, scored, train_and_eval) -> list:
    """Curate at each threshold, retrain from scratch, evaluate.

    ``train_and_eval(accepted_records)`` must hold initial params and seeds
    fixed so points differ only in their training corpus. Thresholds whose
    curated set is empty are skipped with a warning.
    """
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    points = []
    for threshold in thresholds:
        accepted, stats = curate(scored, threshold)
        if not accepted:
            logger.warning("threshold %.3f retains nothing; skipping point", threshold)
            continue
        reports = train_and_eval(accepted)
        points.append(
            SweepPoint(threshold=threshold, retained_hours=stats.retained_hours,
                       retained_count=stats.retained, reports=reports)
        )
    return points


def improvement_table(curated: dict, baseline: dict) -> dict:
    """(direction, k) -> percentage-point mean-accuracy delta."""
    if set(curated) != set(baseline):
        raise ValueError("reports cover different directions")
    deltas = {}
    for direction in curated:
        cur, base = curated[direction], baseline[direction]
        if set(cur.per_k) != set(base.per_k):
            raise ValueError(f"{direction}: reports cover different k values")
        for k in cur.per_k:
            deltas[(direction, k)] = cur.mean(k) - base.mean(k)
    return deltas


def temporal_shift_analysis(clips, embed_fn, shifts, n_samples: int = 200,
                            seed: int = 0) -> list:
    """Similarity of embeddings as one side is displaced in time.

    For each anchor clip and shift s, the partner is the clip of the same
    media starting s seconds later. Anchors are sampled (seeded) from clips
    that have partners for every requested shift; drawn clips lacking a
    partner are skipped and counted. Produces all four comparison panels.
    Shift 0 is always included.
    """
    shifts = sorted(set(float(s) for s in shifts) | {0.0})
    index = {(c.media_id, round(c.start * 1000)): c for c in clips}

    def partner(clip, shift):
        return index.get((clip.media_id, round((clip.start + shift) * 1000)))

    drawn_order = child_rng(seed, "shift-anchors").permutation(len(clips))
    anchors = []
    skipped = 0
    for i in drawn_order:
        if len(anchors) == n_samples:
            break
        clip = clips[i]
        if all(partner(clip, s) is not None for s in shifts):
            anchors.append(clip)
        else:
            skipped += 1
    if not anchors:
        raise ValueError("no clip supports every requested shift")
    if len(anchors) < n_samples:
        logger.warning("only %d/%d anchors support all shifts (%d skipped)",
                       len(anchors), n_samples, skipped)

    embeddings = {}

    def embed(clip):
        if clip.clip_id not in embeddings:
            pair = embed_fn(clip)
            embeddings[clip.clip_id] = (
                np.asarray(pair.audio_embedding, dtype=np.float64),
                np.asarray(pair.video_embedding, dtype=np.float64),
            )
        return embeddings[clip.clip_id]

    sums = {panel: np.zeros(len(shifts)) for panel in ShiftPanel}
    for anchor in anchors:
        a_anchor, v_anchor = embed(anchor)
        for j, s in enumerate(shifts):
            a_shift, v_shift = embed(partner(anchor, s))
            sums[ShiftPanel.AUDIO_VS_SHIFTED_AUDIO][j] += a_anchor @ a_shift
            sums[ShiftPanel.VIDEO_VS_SHIFTED_VIDEO][j] += v_anchor @ v_shift
            sums[ShiftPanel.VIDEO_VS_SHIFTED_AUDIO][j] += v_anchor @ a_shift
            sums[ShiftPanel.AUDIO_VS_SHIFTED_VIDEO][j] += a_anchor @ v_shift

    count = len(anchors)
    return [
        ShiftCurve(
            panel=panel,
            shifts=shifts,
            mean_similarity=[float(np.clip(total / count, -1.0, 1.0)) for total in sums[panel]],
            sample_count=count,
            skipped=skipped,
        )
        for panel in ShiftPanel
    ]


def make_embed_fn(params, provider_pair, model_config):
    """clip -> EmbeddingPair through the trained head, dropout off."""
    from .model import embed_pair

    def fn(clip):
        fa, fv = provider_pair.encode_pair(clip)
        return embed_pair(fa, fv, params, model_config, training=False)

    return fn


def embed_manifest_pairs(clips, params, provider_pair, model_config) -> list:
    embed = make_embed_fn(params, provider_pair, model_config)
    return [embed(c) for c in clips]


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def reports_to_csv(reports: dict) -> str:
    """Rows of (direction, k, mean, std, N, K, seed)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["direction", "k", "mean", "std", "N", "K", "seed"])
    for direction in Direction:
        if direction not in reports:
            continue
        report = reports[direction]
        for k in sorted(report.per_k):
            mean, std = report.per_k[k]
            writer.writerow([direction.value, k, repr(mean), repr(std),
                             report.n_subset, report.repetitions, report.seed])
    return buf.getvalue()


def reports_from_csv(text: str) -> dict:
    reports = {}
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["direction", "k", "mean", "std", "N", "K", "seed"]:
        raise ValueError("not a retrieval report CSV")
    for row in rows[1:]:
        direction = Direction(row[0])
        k = int(row[1])
        spec = reports.setdefault(
            direction,
            RetrievalReport(direction=direction, per_k={}, n_subset=int(row[4]),
                            repetitions=int(row[5]), seed=int(row[6])),
        )
        spec.per_k[k] = (float(row[2]), float(row[3]))
    return reports


def shift_curves_to_csv(curves) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["panel", "shift_s", "mean_cosine", "samples", "skipped"])
    for curve in curves:
        for s, val in zip(curve.shifts, curve.mean_similarity):
            writer.writerow([curve.panel.value, repr(float(s)), repr(val),
                             curve.sample_count, curve.skipped])
    return buf.getvalue()


def shift_curves_from_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["panel", "shift_s", "mean_cosine", "samples", "skipped"]:
        raise ValueError("not a shift-curve CSV")
    by_panel = {}
    for row in rows[1:]:
        panel = ShiftPanel(row[0])
        curve = by_panel.setdefault(
            panel, ShiftCurve(panel=panel, shifts=[], mean_similarity=[],
                              sample_count=int(row[3]), skipped=int(row[4]))
        )
        curve.shifts.append(float(row[1]))
        curve.mean_similarity.append(float(row[2]))
    return [by_panel[p] for p in ShiftPanel if p in by_panel]


def sweep_to_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "retained_hours", "retained_count",
                     "direction", "k", "mean", "std"])
    for point in points:
        for direction in Direction:
            if direction not in point.reports:
                continue
            report = point.reports[direction]
            for k in sorted(report.per_k):
                mean, std = report.per_k[k]
                writer.writerow([repr(point.threshold), repr(point.retained_hours),
                                 point.retained_count, direction.value, k,
                                 repr(mean), repr(std)])
    return buf.getvalue()


def write_report_csv(path, reports: dict) -> None:
    atomic_write_text(path, reports_to_csv(reports))


def read_report_csv(path) -> dict:
    return reports_from_csv(open(path, encoding="utf-8").read())
