"""Single entry point wiring the pipeline stages.

Subcommands: segment, caption, score, curate, encode, train, eval, shift,
report. Stages are connected by explicit artifact paths; every stage echoes
the fully-defaulted config it ran with next to its outputs. Exit codes:
0 success, 2 config error, 3 missing upstream artifact, 4 backend failure,
5 numeric failure.
"""

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, ingest, mre, train as train_mod
from .backends import (
    BackendError,
    HttpCaptionBackend,
    HttpScoringBackend,
    MockCaptionBackend,
    MockScoringBackend,
)
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    load_config,
    write_config_echo,
)
from .encoders import (
    CachedProvider,
    FeatureCache,
    ImportProvider,
    LatentWorld,
    ProviderPair,
    SyntheticProvider,
)
from .model import (
    CheckpointError,
    NumericError,
    default_config,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .util import atomic_write_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_BACKEND = 4
EXIT_NUMERIC = 5


class UpstreamError(FileNotFoundError):
    """An input artifact is missing; message names the stage producing it."""


def _require(path, producer: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UpstreamError(f"{path} not found; produce it with `avva {producer}`")
    return path


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "provider", None):
        cfg = replace(cfg, encoders=replace(cfg.encoders, provider=args.provider))
    return cfg


def _stage_dir(cfg: RunConfig, stage: str, out) -> Path:
    """Explicit --out wins; otherwise an auto-named run directory."""
    if out:
        path = Path(out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(cfg.out) / f"{stage}-{config_hash(cfg)}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo(cfg: RunConfig, target: Path, as_sidecar: bool = False) -> None:
    if as_sidecar:
        write_config_echo(target.with_name(target.name + ".config.json"), cfg)
    else:
        write_config_echo(target / "config_echo.json", cfg)


def _caption_backend(cfg: RunConfig, name: str):
    if name == "mock":
        return MockCaptionBackend()
    if name == "http":
        http = cfg.mre.http
        # env var wins so endpoints never need to live in echoed config files
        endpoint = (os.environ.get("AVVA_CAPTION_ENDPOINT")
                    or http.caption_endpoint or http.endpoint)
        if not endpoint:
            raise ConfigError(["mre.http.caption_endpoint: required for the http backend"
                               " (or set AVVA_CAPTION_ENDPOINT)"])
        return HttpCaptionBackend(endpoint, audio_model=http.audio_caption_model,
                                  video_model=http.video_caption_model,
                                  timeout_s=http.timeout_s)
    raise ConfigError([f"mre.backend: unknown backend {name!r}"])


def _scoring_backend(cfg: RunConfig, name: str):
    if name == "mock":
        return MockScoringBackend()
    if name == "http":
        http = cfg.mre.http
        endpoint = os.environ.get("AVVA_SCORING_ENDPOINT") or http.endpoint
        if not endpoint:
            raise ConfigError(["mre.http.endpoint: required for the http backend"
                               " (or set AVVA_SCORING_ENDPOINT)"])
        return HttpScoringBackend(endpoint, model=http.model, timeout_s=http.timeout_s)
    raise ConfigError([f"mre.backend: unknown backend {name!r}"])


def _world(cfg: RunConfig) -> LatentWorld:
    enc = cfg.encoders
    return LatentWorld(
        seed=cfg.seed,
        latent_dim=enc.latent_dim,
        audio_dim=enc.audio_dim,
        video_dim=enc.video_dim,
        audio_frames=enc.audio_frames,
        video_frames=enc.video_frames,
        noise_scale=enc.noise_scale,
    )


def _providers(cfg: RunConfig, prime_clip=None) -> ProviderPair:
    enc = cfg.encoders
    if enc.provider == "synthetic":
        world = _world(cfg)
        pair = ProviderPair(SyntheticProvider(world, "audio"), SyntheticProvider(world, "video"))
        if enc.cache_dir:
            cache = FeatureCache(enc.cache_dir)
            pair = ProviderPair(CachedProvider(pair.audio, cache), CachedProvider(pair.video, cache))
        return pair
    if enc.provider == "import":
        if not enc.cache_dir:
            raise ConfigError(["encoders.cache_dir: required for the import provider"])
        cache = FeatureCache(_require(enc.cache_dir, "encode"))
        pair = ProviderPair(
            ImportProvider(cache, "audio", enc.import_audio_id),
            ImportProvider(cache, "video", enc.import_video_id),
        )
        if prime_clip is not None:
            pair.encode_pair(prime_clip)  # resolves feature dims or fails early
        return pair
    raise ConfigError([f"encoders.provider: unknown provider {enc.provider!r}"])


def _load_clips(path) -> list:
    """Accept either a clip manifest or a curated-records file.

    Curated records contribute only their accepted clips.
    """
    path = _require(path, "segment (or curate)")
    try:
        return ingest.read_manifest(path).entries
    except ingest.ManifestError:
        records = mre.read_records(path)
        return [r.segment for r in records if r.accepted]


def _model_config(cfg: RunConfig, audio_dim: int, video_dim: int):
    m = cfg.model
    return default_config(
        audio_dim=audio_dim,
        video_dim=video_dim,
        hidden_dim=m.hidden_dim,
        output_dim=m.output_dim,
        heads=m.heads,
        dropout=m.dropout,
        temperature=m.temperature,
    )


def _resolve_checkpoint(ref) -> Path:
    """A checkpoint file, a train run directory, or its `best` pointer file."""
    path = Path(ref)
    if path.is_dir():
        best = path / "best"
        if not best.exists():
            raise UpstreamError(f"{path} has no `best` pointer; produce it with `avva train`")
        path = best
    if path.name == "best" and path.exists():
        target = (path.parent / json.loads(path.read_text())["checkpoint"]).resolve()
        return _require(target, "train")
    return _require(path, "train")


def _parse_shifts(text: str) -> list:
    """Either `a..b:step` or a comma-separated list of seconds."""
    if ".." in text:
        span, _, step = text.partition(":")
        lo, _, hi = span.partition("..")
        lo, hi, step = float(lo), float(hi), float(step or 3.0)
        if step <= 0 or hi < lo:
            raise ConfigError([f"--shifts: bad range {text!r}"])
        out = []
        x = lo
        while x <= hi + 1e-9:
            out.append(round(x, 6))
            x += step
        return out
    return [float(tok) for tok in text.split(",") if tok.strip()]


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------


def cmd_segment(args) -> int:
    cfg = _load_cfg(args)
    clip_length = args.clip_len if args.clip_len is not None else cfg.ingest.clip_length
    max_clips = args.max_clips if args.max_clips is not None else cfg.ingest.max_clips
    split = args.split or cfg.ingest.split
    media = ingest.read_media_list(_require(args.infile, "segment (needs a media list)"))
    manifest = ingest.segment_corpus(media, clip_length=clip_length, max_clips=max_clips,
                                     seed=cfg.seed, split=split)
    out = Path(args.out)
    ingest.write_manifest(manifest, out)
    _echo(cfg, out, as_sidecar=True)
    print(f"wrote {len(manifest.entries)} clips from {len(media)} media to {out}")
    return EXIT_OK


def cmd_caption(args) -> int:
    cfg = _load_cfg(args)
    backend_name = args.backend or cfg.mre.backend
    clips = ingest.read_manifest(_require(args.manifest, "segment")).entries
    backend = _caption_backend(cfg, backend_name)
    captioned = []
    excluded = {}
    for clip in clips:
        try:
            captioned.append((clip, mre.caption_clip(clip, backend, max_attempts=cfg.mre.max_attempts,
                                                       backoff_s=cfg.mre.backoff_s)))
        except BackendError as exc:
            logger.warning("excluding clip %s: %s", clip.clip_id, exc)
            excluded[clip.clip_id] = str(exc)
    out = Path(args.out)
    mre.write_captions(captioned, out)
    _echo(cfg, out, as_sidecar=True)
    print(f"captioned {len(captioned)}/{len(clips)} clips -> {out}"
          + (f" ({len(excluded)} excluded)" if excluded else ""))
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _load_cfg(args)
    backend_name = args.backend or cfg.mre.backend
    captioned = mre.read_captions(_require(args.captions, "caption"))
    backend = _scoring_backend(cfg, backend_name)
    scored = []
    excluded = {}
    for segment, captions in captioned:
        try:
            scores = mre.score_alignment(captions, backend, max_attempts=cfg.mre.max_attempts,
                                         backoff_s=cfg.mre.backoff_s)
            scored.append(mre.ScoredClip(segment=segment, captions=captions, scores=scores))
        except (BackendError, mre.ScoreParseError) as exc:
            logger.warning("excluding clip %s: %s", segment.clip_id, exc)
            excluded[segment.clip_id] = str(exc)
    out = Path(args.out)
    mre.write_scored_clips(scored, out)
    _echo(cfg, out, as_sidecar=True)
    print(f"scored {len(scored)}/{len(captioned)} clips -> {out}"
          + (f" ({len(excluded)} excluded)" if excluded else ""))
    return EXIT_OK


def cmd_curate(args) -> int:
    cfg = _load_cfg(args)
    threshold = args.threshold if args.threshold is not None else cfg.mre.threshold
    if args.scored:
        scored = mre.read_scored_clips(_require(args.scored, "score"))
        records = mre.flag_records(scored, threshold)
        accepted, stats = mre.curate(scored, threshold)
    else:
        clips = ingest.read_manifest(_require(args.manifest, "segment")).entries
        backend_name = args.backend or cfg.mre.backend
        outcome = mre.run_curation(
            clips,
            _caption_backend(cfg, backend_name),
            _scoring_backend(cfg, backend_name),
            threshold,
            max_attempts=cfg.mre.max_attempts,
            workers=cfg.mre.workers,
            backoff_s=cfg.mre.backoff_s,
        )
        records, accepted, stats = outcome.records, outcome.accepted, outcome.stats
    out = Path(args.out)
    mre.write_records(records, out)
    stats_blob = {
        "total": stats.total,
        "retained": stats.retained,
        "fraction": stats.fraction,
        "retained_hours": stats.retained_hours,
        "threshold": stats.threshold,
    }
    atomic_write_text(out.with_name(out.name + ".stats.json"),
                      json.dumps(stats_blob, indent=2, sort_keys=True) + "\n")
    _echo(cfg, out, as_sidecar=True)
    print(
        f"curated {stats.retained}/{stats.total} clips at threshold {threshold}"
        f" ({100 * stats.fraction:.1f}% retained, {stats.retained_hours:.3f} h) -> {out}"
    )
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _load_cfg(args)
    clips = _load_clips(args.manifest)
    cache = FeatureCache(args.cache or cfg.encoders.cache_dir or "features")
    world = _world(cfg)
    pair = ProviderPair(SyntheticProvider(world, "audio"), SyntheticProvider(world, "video"))
    for clip in clips:
        fa, fv = pair.encode_pair(clip)
        cache.put(fa)
        cache.put(fv)
    _echo(cfg, Path(str(cache.root)), as_sidecar=False)
    print(f"encoded {len(clips)} clips into {cache.root}"
          f" (providers {pair.audio.provider_id}, {pair.video.provider_id})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    clips = _load_clips(args.manifest)
    if not clips:
        raise UpstreamError(f"{args.manifest} contains no usable clips; rerun `avva curate`")
    run_dir = _stage_dir(cfg, "train", args.out)
    providers = _providers(cfg, prime_clip=clips[0])
    train_cfg = train_mod.TrainConfig(
        learning_rate=cfg.train.learning_rate,
        weight_decay=cfg.train.weight_decay,
        batch_size=cfg.train.batch_size,
        epochs=args.epochs if args.epochs is not None else cfg.train.epochs,
        val_fraction=cfg.train.val_fraction,
        seed=cfg.seed,
        temperature=cfg.model.temperature,
    )
    train_clips, val_clips = train_mod.split_train_val(clips, train_cfg.val_fraction, cfg.seed)
    model_cfg = _model_config(cfg, providers.audio.dim(), providers.video.dim())
    params = init_params(model_cfg, seed=cfg.seed)
    _echo(cfg, run_dir)
    params, history = train_mod.train(params, providers, train_clips, val_clips,
                                      train_cfg, model_cfg, run_dir=run_dir)
    best_epoch = train_mod.select_best(history)
    best = {
        "epoch": best_epoch,
        "checkpoint": f"checkpoints/epoch_{best_epoch:03d}.ckpt",
        "val_loss": history.epochs[best_epoch].val_loss,
    }
    atomic_write_text(run_dir / "best", json.dumps(best, sort_keys=True) + "\n")
    save_checkpoint(run_dir / "final.ckpt", params, model_cfg,
                    extra={"epoch": len(history.epochs) - 1})
    print(f"trained {len(history.epochs)} epochs on {len(train_clips)}+{len(val_clips)} clips;"
          f" best epoch {best_epoch} (val {best['val_loss']:.4f}) -> {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    clips = _load_clips(args.manifest)
    ckpt = _resolve_checkpoint(args.checkpoint)
    params, model_cfg, _ = load_checkpoint(ckpt)
    providers = _providers(cfg, prime_clip=clips[0] if clips else None)
    pairs = evaluation.embed_manifest_pairs(clips, params, providers, model_cfg)
    reports = evaluation.retrieval_reports(
        pairs,
        ks=tuple(cfg.eval.ks),
        n_subset=args.n_subset if args.n_subset is not None else cfg.eval.n_subset,
        repetitions=args.repetitions if args.repetitions is not None else cfg.eval.repetitions,
        seed=cfg.seed,
    )
    out_dir = _stage_dir(cfg, "eval", args.out)
    evaluation.write_report_csv(out_dir / "retrieval.csv", reports)
    _echo(cfg, out_dir)
    for direction, report in reports.items():
        cells = "  ".join(f"top-{k}: {report.format_cell(k)}" for k in sorted(report.per_k))
        print(f"{direction.value}  {cells}")
    print(f"wrote {out_dir / 'retrieval.csv'}")
    return EXIT_OK


def cmd_shift(args) -> int:
    cfg = _load_cfg(args)
    clips = _load_clips(args.manifest)
    ckpt = _resolve_checkpoint(args.checkpoint)
    params, model_cfg, _ = load_checkpoint(ckpt)
    providers = _providers(cfg, prime_clip=clips[0] if clips else None)
    shifts = _parse_shifts(args.shifts) if args.shifts else cfg.eval.shifts
    samples = args.samples if args.samples is not None else cfg.eval.shift_samples
    embed_fn = evaluation.make_embed_fn(params, providers, model_cfg)
    curves = evaluation.temporal_shift_analysis(clips, embed_fn, shifts,
                                                n_samples=samples, seed=cfg.seed)
    out_dir = _stage_dir(cfg, "shift", args.out)
    atomic_write_text(out_dir / "shift_curves.csv", evaluation.shift_curves_to_csv(curves))
    _echo(cfg, out_dir)
    for curve in curves:
        peak = curve.shifts[int(np.argmax(curve.mean_similarity))]
        print(f"{curve.panel.value}: peak at {peak:+.0f}s over {curve.sample_count} samples")
    print(f"wrote {out_dir / 'shift_curves.csv'}")
    return EXIT_OK


def _format_report(run_dir: Path) -> str:
    lines = []
    retrieval = run_dir / "retrieval.csv"
    lines.append("retrieval accuracy (%, mean^{±std} over repeated subsets)")
    if retrieval.exists():
        reports = evaluation.reports_from_csv(retrieval.read_text(encoding="utf-8"))
        some = next(iter(reports.values()))
        lines.append(f"  N={some.n_subset} K={some.repetitions} seed={some.seed}")
        ks = sorted(some.per_k)
        header = "  direction  " + "  ".join(f"top-{k:<2}          " for k in ks)
        lines.append(header.rstrip())
        for direction in evaluation.Direction:
            if direction not in reports:
                lines.append(f"  {direction.value:<9}  " + "  ".join("missing" for _ in ks))
                continue
            rep = reports[direction]
            cells = "  ".join(f"{rep.format_cell(k):<15}" for k in ks)
            lines.append(f"  {direction.value:<9}  {cells}".rstrip())
    else:
        lines.append("  missing (run `avva eval`)")
    lines.append("")

    shift_csv = run_dir / "shift_curves.csv"
    lines.append("temporal shift similarity (mean cosine)")
    if shift_csv.exists():
        curves = evaluation.shift_curves_from_csv(shift_csv.read_text(encoding="utf-8"))
        if curves:
            shifts = curves[0].shifts
            lines.append("  panel                    " + "  ".join(f"{s:+7.1f}s" for s in shifts))
            for curve in curves:
                vals = "  ".join(f"{v:8.4f}" for v in curve.mean_similarity)
                lines.append(f"  {curve.panel.value:<23}  {vals}")
            lines.append(f"  samples: {curves[0].sample_count} (skipped {curves[0].skipped})")
    else:
        lines.append("  missing (run `avva shift`)")
    lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise UpstreamError(f"{run_dir} is not a run directory; produce one with `avva eval`")
    text = _format_report(run_dir)
    atomic_write_text(run_dir / "report.txt", text)
    print(text, end="")
    if args.plot:
        from . import plots

        written = plots.render_run_plots(run_dir)
        for path in written:
            print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _SubParser(argparse.ArgumentParser):
    """Treats values like `-9..9:3` as arguments, not option names."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._negative_number_matcher = re.compile(r"^-\d")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avva",
        description="audio-video alignment pipeline: curate, train, evaluate",
    )
    parser.add_argument("--config", help="run config JSON", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    # global flags are accepted on either side of the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_SubParser)

    p = sub.add_parser("segment", help="tile media into fixed-length clips", parents=[common])
    p.add_argument("--in", dest="infile", required=True, help="media list (JSONL)")
    p.add_argument("--clip-len", type=float, default=None)
    p.add_argument("--max-clips", type=int, default=None)
    p.add_argument("--split", choices=ingest.SPLITS, default=None)
    p.add_argument("--out", required=True, help="manifest path")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("caption", help="describe clips with the caption backend", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=("mock", "http"), default=None)
    p.add_argument("--out", required=True, help="captions path (JSONL)")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("score", help="judge caption alignment", parents=[common])
    p.add_argument("--captions", required=True)
    p.add_argument("--backend", choices=("mock", "http"), default=None)
    p.add_argument("--out", required=True, help="scored clips path (JSONL)")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("curate", help="apply the alignment threshold", parents=[common])
    p.add_argument("--manifest", default=None, help="run caption+score+curate from a manifest")
    p.add_argument("--scored", default=None, help="threshold an existing scored file")
    p.add_argument("--backend", choices=("mock", "http"), default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True, help="curation records path (JSONL)")
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("encode", help="precompute features into a cache directory", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", default=None, help="cache directory")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="train the alignment head", parents=[common])
    p.add_argument("--manifest", required=True, help="manifest or curated records")
    p.add_argument("--provider", choices=("synthetic", "import"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="repeated-subset retrieval accuracy", parents=[common])
    p.add_argument("--checkpoint", required=True, help="checkpoint file or train run dir")
    p.add_argument("--manifest", required=True)
    p.add_argument("--N", dest="n_subset", type=int, default=None)
    p.add_argument("--K", dest="repetitions", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("shift", help="temporal-shift similarity curves", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--shifts", default=None, help="e.g. -9..9:3 or -3,0,3")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_shift)

    p = sub.add_parser("report", help="consolidated tables for a run directory", parents=[common])
    p.add_argument("--run", required=True)
    p.add_argument("--plot", action="store_true", help="also render PNG plots")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UpstreamError as exc:
        print(f"missing upstream artifact: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (NumericError, CheckpointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
