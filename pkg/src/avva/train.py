"""Optimization loop: decoupled-weight-decay Adam over the alignment head.

Feature providers stay frozen; the optimizer sees exactly the model's
parameter blocks. Everything (shuffling, dropout, init) is derived from the
config seed, so a (seed, config, corpus) triple fully determines the run.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import NumericError, is_decayed, loss_and_grad, save_checkpoint
from .util import atomic_write_text, child_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    temperature: float = 0.07
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time_s: float
    checkpoint: str | None = None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)

    def val_losses(self) -> list:
        return [e.val_loss for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "wall_time_s", "checkpoint"])
        for e in self.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss),
                             f"{e.wall_time_s:.3f}", e.checkpoint or ""])
        return buf.getvalue()


class AdamW:
    """Adam with decoupled weight decay; decay hits linear weights only."""

    def __init__(self, params: dict, learning_rate: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.wd = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.block_names = sorted(params)
        self.m = {n: np.zeros_like(params[n]) for n in self.block_names}
        self.v = {n: np.zeros_like(params[n]) for n in self.block_names}

    def census(self) -> dict:
        """Name -> element count of every block the optimizer updates."""
        return {n: self.m[n].size for n in self.block_names}

    def step(self, params: dict, grads: dict) -> None:
        if sorted(grads) != self.block_names:
            raise ValueError("gradient blocks do not match the optimizer census")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in self.block_names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd > 0.0 and is_decayed(name):
                update = update + self.wd * params[name]
            params[name] -= self.lr * update


def split_train_val(manifest, val_fraction: float, seed: int):
    """Media-level train/val split: no media id spans both sides.

    Target |val| is val_fraction of the clip count; whole media are moved
    into val until the target is met. Deterministic per seed.
    """
    entries = list(getattr(manifest, "entries", manifest))
    if not entries:
        raise ValueError("manifest is empty")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    media_ids = list(dict.fromkeys(c.media_id for c in entries))
    order = child_rng(seed, "train-val-split").permutation(len(media_ids))
    target = max(1, round(val_fraction * len(entries)))
    clips_by_media = {}
    for clip in entries:
        clips_by_media.setdefault(clip.media_id, []).append(clip)

    val_media = set()
    val_count = 0
    for i in order:
        if val_count >= target:
            break
        media = media_ids[i]
        val_media.add(media)
        val_count += len(clips_by_media[media])

    train = [c for c in entries if c.media_id not in val_media]
    val = [c for c in entries if c.media_id in val_media]
    if not train or not val:
        raise ValueError(
            f"manifest too small for a media-level split: {len(media_ids)} media,"
            f" {len(entries)} clips, val_fraction {val_fraction}"
        )
    return train, val


def load_feature_pairs(clips, provider_pair) -> dict:
    """clip_id -> (audio features, video features), encoded once."""
    return {c.clip_id: provider_pair.encode_pair(c) for c in clips}


def _batches(indices, batch_size):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo : lo + batch_size]


def _epoch_loss(clips, features, params, model_config, batch_size):
    """Dropout-free loss over fixed-order batches, clip-count weighted."""
    total = 0.0
    for batch in _batches(list(range(len(clips))), batch_size):
        pairs = [features[clips[i].clip_id] for i in batch]
        loss, _ = loss_and_grad(pairs, params, model_config, training=False)
        total += loss * len(batch)
    return total / len(clips)


def train(params: dict, provider_pair, train_clips, val_clips, config: TrainConfig,
          model_config, run_dir=None):
    """Run the optimization loop; returns (params, TrainHistory).

    Per-epoch checkpoints are written when run_dir is given. The provider
    contributes no trainable parameters; the optimizer census is checked
    against exactly the model blocks.
    """
    if not train_clips or not val_clips:
        raise ValueError("train and val sets must both be non-empty")
    provider_params = {}
    for prov in (provider_pair.audio, provider_pair.video):
        provider_params.update(prov.trainable_parameters())
    if provider_params:
        raise ValueError(f"feature providers must be frozen, got blocks {sorted(provider_params)}")

    model_config = replace(
        model_config, loss=replace(model_config.loss, temperature=config.temperature)
    )

    features = load_feature_pairs(list(train_clips) + list(val_clips), provider_pair)
    optimizer = AdamW(params, config.learning_rate, config.weight_decay,
                      beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    history = TrainHistory()
    for epoch in range(config.epochs):
        started = time.monotonic()
        order = child_rng(config.seed, "shuffle", epoch).permutation(len(train_clips))
        epoch_total = 0.0
        for step, batch in enumerate(_batches(list(order), config.batch_size)):
            pairs = [features[train_clips[i].clip_id] for i in batch]
            rng = child_rng(config.seed, "dropout", epoch, step)
            try:
                loss, grads = loss_and_grad(pairs, params, model_config, training=True, rng=rng)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            optimizer.step(params, grads)
            epoch_total += loss * len(batch)
        train_loss = epoch_total / len(train_clips)
        val_loss = _epoch_loss(val_clips, features, params, model_config, config.batch_size)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NumericError(f"epoch {epoch}: non-finite loss (train={train_loss}, val={val_loss})")

        checkpoint_ref = None
        if run_dir is not None:
            path = ckpt_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(path, params, model_config,
                            extra={"epoch": epoch, "val_loss": val_loss})
            checkpoint_ref = str(path)
        history.epochs.append(
            EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                       wall_time_s=time.monotonic() - started, checkpoint=checkpoint_ref)
        )
        logger.info("epoch %d: train %.4f val %.4f", epoch, train_loss, val_loss)

    if run_dir is not None:
        atomic_write_text(Path(run_dir) / "history.csv", history.to_csv())
    return params, history


def select_best(history: TrainHistory) -> int:
    """Epoch index with the minimum validation loss; earliest wins ties."""
    losses = history.val_losses()
    if not losses:
        raise ValueError("history is empty")
    return int(np.argmin(losses))
