"""The trainable alignment head and its loss.

Per modality: a two-layer MLP aligner (input -> hidden -> shared width) with
layer normalization, ReLU and dropout between the layers. The two aligned
sequences then exchange information through bidirectional cross-modal
attention (each direction has its own projections and a residual connection),
are mean-pooled over frames, and L2-normalized into a joint embedding space
where a symmetric temperature-scaled contrastive loss is applied.

Forward and backward passes are written directly against numpy arrays in
float64; parameters live in a flat name -> array dict so the optimizer,
checkpoints and gradient checks all see the same blocks. Backward formulas
are verified against central finite differences in the test suite.
"""

import json
import struct
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import kernels
from .util import atomic_write_bytes, child_rng

LAYERNORM_EPS = 1e-5
NORM_TOLERANCE = 1e-6

CHECKPOINT_MAGIC = b"AVVACKPT"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A loss or gradient came out non-finite."""


class CheckpointError(ValueError):
    """Checkpoint file malformed or inconsistent with the model config."""


@dataclass(frozen=True)
class AlignerConfig:
    input_dim: int
    hidden_dim: int = 1024
    output_dim: int = 768
    dropout: float = 0.2

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("aligner dims must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class CrossModalConfig:
    heads: int = 8
    model_dim: int = 768

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    symmetric: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    audio_aligner: AlignerConfig
    video_aligner: AlignerConfig
    cross_modal: CrossModalConfig = field(default_factory=CrossModalConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("audio_aligner", "video_aligner"):
            if getattr(self, name).output_dim != self.cross_modal.model_dim:
                raise ValueError(f"{name}.output_dim must equal cross_modal.model_dim")

    def to_dict(self) -> dict:
        return {
            "audio_aligner": vars(self.audio_aligner),
            "video_aligner": vars(self.video_aligner),
            "cross_modal": vars(self.cross_modal),
            "loss": vars(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            audio_aligner=AlignerConfig(**d["audio_aligner"]),
            video_aligner=AlignerConfig(**d["video_aligner"]),
            cross_modal=CrossModalConfig(**d["cross_modal"]),
            loss=LossConfig(**d["loss"]),
        )


def default_config(audio_dim: int, video_dim: int, hidden_dim: int = 1024,
                   output_dim: int = 768, heads: int = 8, dropout: float = 0.2,
                   temperature: float = 0.07) -> ModelConfig:
    return ModelConfig(
        audio_aligner=AlignerConfig(audio_dim, hidden_dim, output_dim, dropout),
        video_aligner=AlignerConfig(video_dim, hidden_dim, output_dim, dropout),
        cross_modal=CrossModalConfig(heads=heads, model_dim=output_dim),
        loss=LossConfig(temperature=temperature),
    )


@dataclass(frozen=True)
class EmbeddingPair:
    clip_id: str
    audio_embedding: np.ndarray
    video_embedding: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        if self.normalized:
            for name, vec in (("audio", self.audio_embedding), ("video", self.video_embedding)):
                norm = float(np.linalg.norm(vec))
                if abs(norm - 1.0) > NORM_TOLERANCE:
                    raise ValueError(f"{name} embedding norm {norm} != 1")


ALIGNER_SUFFIXES = ("w1", "b1", "ln_gain", "ln_bias", "w2", "b2")
ATTENTION_SUFFIXES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
ATTENTION_PREFIXES = ("attn_audio2video", "attn_video2audio")


def param_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every trainable block."""
    shapes = {}
    for prefix, acfg in (("audio_aligner", config.audio_aligner), ("video_aligner", config.video_aligner)):
        d, h, m = acfg.input_dim, acfg.hidden_dim, acfg.output_dim
        shapes[f"{prefix}.w1"] = (d, h)
        shapes[f"{prefix}.b1"] = (h,)
        shapes[f"{prefix}.ln_gain"] = (h,)
        shapes[f"{prefix}.ln_bias"] = (h,)
        shapes[f"{prefix}.w2"] = (h, m)
        shapes[f"{prefix}.b2"] = (m,)
    m = config.cross_modal.model_dim
    for prefix in ATTENTION_PREFIXES:
        for suffix in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{suffix}"] = (m, m)
        for suffix in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{suffix}"] = (m,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Fan-in-scaled uniform weights, zero biases, unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        elif name.endswith(("b1", "b2", "bq", "bk", "bv", "bo", "ln_bias")):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            bound = 1.0 / sqrt(fan_in)
            params[name] = child_rng(seed, "init", name).uniform(-bound, bound, size=shape)
    return params


def is_decayed(name: str) -> bool:
    """Weight decay applies to linear weights only, not biases or norms."""
    return name.rsplit(".", 1)[-1] in ("w1", "w2", "wq", "wk", "wv", "wo")


# ---------------------------------------------------------------------------
# primitive forward/backward pieces (arrays carry a leading batch axis)
# ---------------------------------------------------------------------------


def _layernorm_fwd(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv, gain)


def _layernorm_bwd(dy, cache):
    xhat, inv, gain = cache
    sum_axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=sum_axes)
    dbias = dy.sum(axis=sum_axes)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _aligner_fwd(x, params, prefix, config, training, rng):
    """x: (B, T, input_dim) -> (B, T, output_dim) plus backward cache."""
    if x.shape[-1] != config.input_dim:
        raise ValueError(
            f"{prefix}: feature dim {x.shape[-1]} != configured input_dim {config.input_dim}"
        )
    h1 = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    ln, ln_cache = _layernorm_fwd(h1, params[f"{prefix}.ln_gain"], params[f"{prefix}.ln_bias"])
    act = np.maximum(ln, 0.0)
    if training and config.dropout > 0.0:
        if rng is None:
            raise ValueError("training forward pass needs a dropout generator")
        keep = 1.0 - config.dropout
        mask = (rng.random(act.shape) < keep) / keep
        dropped = act * mask
    else:
        mask = None
        dropped = act
    out = dropped @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    cache = (x, ln_cache, ln, mask, dropped)
    return out, cache


def _aligner_bwd(dout, cache, params, prefix, grads):
    x, ln_cache, ln, mask, dropped = cache
    sum_axes = tuple(range(dout.ndim - 1))
    grads[f"{prefix}.w2"] += np.tensordot(dropped, dout, axes=(sum_axes, sum_axes))
    grads[f"{prefix}.b2"] += dout.sum(axis=sum_axes)
    ddropped = dout @ params[f"{prefix}.w2"].T
    dact = ddropped * mask if mask is not None else ddropped
    dln = dact * (ln > 0.0)
    dh1, dgain, dbias = _layernorm_bwd(dln, ln_cache)
    grads[f"{prefix}.ln_gain"] += dgain
    grads[f"{prefix}.ln_bias"] += dbias
    grads[f"{prefix}.w1"] += np.tensordot(x, dh1, axes=(sum_axes, sum_axes))
    grads[f"{prefix}.b1"] += dh1.sum(axis=sum_axes)
    return dh1 @ params[f"{prefix}.w1"].T


def _mha_fwd(q_in, kv_in, params, prefix, heads):
    """One attention direction with residual: q_in + attn(q_in -> kv_in)."""
    q = q_in @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = kv_in @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = kv_in @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    ctx, weights = kernels.attend_batch(q, k, v, heads)
    out = ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    res = q_in + out
    cache = (q_in, kv_in, q, k, v, ctx, weights)
    return res, cache


def _mha_bwd(dres, cache, params, prefix, heads, grads):
    """Returns (grad wrt q_in, grad wrt kv_in); dres includes the residual."""
    q_in, kv_in, q, k, v, ctx, weights = cache
    b, tq, dim = q.shape
    tk = k.shape[1]
    dh = dim // heads
    scale = 1.0 / sqrt(dh)

    grads[f"{prefix}.wo"] += np.tensordot(ctx, dres, axes=((0, 1), (0, 1)))
    grads[f"{prefix}.bo"] += dres.sum(axis=(0, 1))
    dctx = dres @ params[f"{prefix}.wo"].T

    qh = q.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(b, tk, heads, dh).transpose(0, 2, 1, 3)
    dctx_h = dctx.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)

    dweights = np.einsum("bhqd,bhkd->bhqk", dctx_h, vh)
    dvh = np.einsum("bhqk,bhqd->bhkd", weights, dctx_h)
    dscores = kernels.softmax_rows_grad(
        weights.reshape(-1, tk), dweights.reshape(-1, tk)
    ).reshape(b, heads, tq, tk)
    dqh = np.einsum("bhqk,bhkd->bhqd", dscores, kh) * scale
    dkh = np.einsum("bhqk,bhqd->bhkd", dscores, qh) * scale

    dq = dqh.transpose(0, 2, 1, 3).reshape(b, tq, dim)
    dk = dkh.transpose(0, 2, 1, 3).reshape(b, tk, dim)
    dv = dvh.transpose(0, 2, 1, 3).reshape(b, tk, dim)

    grads[f"{prefix}.wq"] += np.tensordot(q_in, dq, axes=((0, 1), (0, 1)))
    grads[f"{prefix}.bq"] += dq.sum(axis=(0, 1))
    grads[f"{prefix}.wk"] += np.tensordot(kv_in, dk, axes=((0, 1), (0, 1)))
    grads[f"{prefix}.bk"] += dk.sum(axis=(0, 1))
    grads[f"{prefix}.wv"] += np.tensordot(kv_in, dv, axes=((0, 1), (0, 1)))
    grads[f"{prefix}.bv"] += dv.sum(axis=(0, 1))

    dq_in = dres + dq @ params[f"{prefix}.wq"].T
    dkv_in = dk @ params[f"{prefix}.wk"].T + dv @ params[f"{prefix}.wv"].T
    return dq_in, dkv_in


def _embed_batch(xa, xv, params, config, training, rng):
    """(B, Ta, Da), (B, Tv, Dv) -> normalized (B, M) embeddings + cache."""
    a1, cache_a = _aligner_fwd(xa, params, "audio_aligner", config.audio_aligner, training, rng)
    v1, cache_v = _aligner_fwd(xv, params, "video_aligner", config.video_aligner, training, rng)
    heads = config.cross_modal.heads
    a2, cache_av = _mha_fwd(a1, v1, params, "attn_audio2video", heads)
    v2, cache_va = _mha_fwd(v1, a1, params, "attn_video2audio", heads)
    ap = a2.mean(axis=1)
    vp = v2.mean(axis=1)
    a_norm = np.linalg.norm(ap, axis=1, keepdims=True)
    v_norm = np.linalg.norm(vp, axis=1, keepdims=True)
    if np.any(a_norm < 1e-12) or np.any(v_norm < 1e-12):
        raise NumericError("pooled embedding collapsed to zero; cannot normalize")
    an = ap / a_norm
    vn = vp / v_norm
    cache = (cache_a, cache_v, cache_av, cache_va, a2.shape[1], v2.shape[1], an, vn, a_norm, v_norm)
    return an, vn, cache


def _embed_batch_bwd(dan, dvn, cache, params, config, grads):
    cache_a, cache_v, cache_av, cache_va, ta, tv, an, vn, a_norm, v_norm = cache
    heads = config.cross_modal.heads
    dap = (dan - (dan * an).sum(axis=1, keepdims=True) * an) / a_norm
    dvp = (dvn - (dvn * vn).sum(axis=1, keepdims=True) * vn) / v_norm
    da2 = np.repeat(dap[:, None, :], ta, axis=1) / ta
    dv2 = np.repeat(dvp[:, None, :], tv, axis=1) / tv
    da1_q, dv1_kv = _mha_bwd(da2, cache_av, params, "attn_audio2video", heads, grads)
    dv1_q, da1_kv = _mha_bwd(dv2, cache_va, params, "attn_video2audio", heads, grads)
    da1 = da1_q + da1_kv
    dv1 = dv1_q + dv1_kv
    _aligner_bwd(da1, cache_a, params, "audio_aligner", grads)
    _aligner_bwd(dv1, cache_v, params, "video_aligner", grads)


# ---------------------------------------------------------------------------
# public per-sequence operations
# ---------------------------------------------------------------------------


def _as_seq_array(features):
    """Accept a FeatureSequence or a raw (T, D) array; return float64 array."""
    mat = getattr(features, "features", features)
    return np.asarray(mat, dtype=np.float64)


def aligner_forward(features, params, config: AlignerConfig, training: bool = False,
                    rng=None, modality: str | None = None) -> np.ndarray:
    """Map one (T, input_dim) feature sequence to (T, output_dim).

    The parameter prefix is taken from the FeatureSequence modality unless
    given explicitly. Dropout is active only when training.
    """
    x = _as_seq_array(features)
    modality = modality or getattr(features, "modality", None)
    if modality not in ("audio", "video"):
        raise ValueError("modality must be 'audio' or 'video'")
    out, _ = _aligner_fwd(x[None], params, f"{modality}_aligner", config, training, rng)
    return out[0]


def cross_modal_attend(audio_seq, video_seq, params, config: CrossModalConfig,
                       return_weights: bool = False):
    """Bidirectional attention between two aligned sequences.

    Audio rows query the video sequence and vice versa; each direction has
    its own projections and adds its input back as a residual.
    """
    a = np.asarray(audio_seq, dtype=np.float64)
    v = np.asarray(video_seq, dtype=np.float64)
    if a.ndim != 2 or v.ndim != 2 or a.shape[0] < 1 or v.shape[0] < 1:
        raise ValueError("sequences must be non-empty (T, model_dim) matrices")
    if a.shape[1] != config.model_dim or v.shape[1] != config.model_dim:
        raise ValueError(
            f"sequence widths {a.shape[1]}/{v.shape[1]} != model_dim {config.model_dim}"
        )
    a_ctx, cache_av = _mha_fwd(a[None], v[None], params, "attn_audio2video", config.heads)
    v_ctx, cache_va = _mha_fwd(v[None], a[None], params, "attn_video2audio", config.heads)
    if return_weights:
        return a_ctx[0], v_ctx[0], cache_av[6][0], cache_va[6][0]
    return a_ctx[0], v_ctx[0]


def pool(seq) -> np.ndarray:
    """Mean over frames."""
    mat = np.asarray(seq, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError("pool expects a non-empty (T, D) matrix")
    return mat.mean(axis=0)


def embed_pair(audio_features, video_features, params, config: ModelConfig,
               training: bool = False, dropout_seed: int = 0) -> EmbeddingPair:
    """Full head: align both sequences, cross-attend, pool, normalize."""
    xa = _as_seq_array(audio_features)[None]
    xv = _as_seq_array(video_features)[None]
    rng = child_rng(dropout_seed, "dropout") if training else None
    an, vn, _ = _embed_batch(xa, xv, params, config, training, rng)
    clip_id = getattr(audio_features, "clip_id", "")
    return EmbeddingPair(clip_id=clip_id, audio_embedding=an[0], video_embedding=vn[0])


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------


def _info_nce_arrays(a_emb, v_emb, loss_config: LossConfig):
    """Loss plus gradients wrt the (normalized) embedding matrices."""
    b = a_emb.shape[0]
    tau = loss_config.temperature
    s = (a_emb @ v_emb.T) / tau
    shifted_rows = s - s.max(axis=1, keepdims=True)
    lse_rows = np.log(np.exp(shifted_rows).sum(axis=1)) + s.max(axis=1)
    p_rows = kernels.softmax_rows(s)
    diag = np.diagonal(s)
    loss_rows = (lse_rows - diag).mean()
    eye = np.eye(b)
    if loss_config.symmetric:
        st = s.T
        shifted_cols = st - st.max(axis=1, keepdims=True)
        lse_cols = np.log(np.exp(shifted_cols).sum(axis=1)) + st.max(axis=1)
        p_cols = kernels.softmax_rows(st).T
        loss_cols = (lse_cols - diag).mean()
        loss = 0.5 * (loss_rows + loss_cols)
        ds = (p_rows - eye) / (2 * b) + (p_cols - eye) / (2 * b)
    else:
        loss = loss_rows
        ds = (p_rows - eye) / b
    da = ds @ v_emb / tau
    dv = ds.T @ a_emb / tau
    return float(loss), da, dv


def _check_normalized(mat, what):
    norms = np.linalg.norm(mat, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{what} embeddings must be unit-norm (worst deviation {worst:.2e})")


def info_nce(batch, config: LossConfig = LossConfig()) -> float:
    """Symmetric contrastive loss over a batch of embedding pairs.

    Matched pairs sit on the diagonal of the cosine similarity matrix
    (scaled by 1/temperature); the loss is the mean cross-entropy of rows
    against their own index, averaged with the column direction when
    symmetric.
    """
    if len(batch) < 1:
        raise ValueError("batch must contain at least one pair")
    a_emb = np.stack([np.asarray(p.audio_embedding, dtype=np.float64) for p in batch])
    v_emb = np.stack([np.asarray(p.video_embedding, dtype=np.float64) for p in batch])
    _check_normalized(a_emb, "audio")
    _check_normalized(v_emb, "video")
    loss, _, _ = _info_nce_arrays(a_emb, v_emb, config)
    return loss


def zero_grads(params: dict) -> dict:
    return {name: np.zeros_like(block) for name, block in params.items()}


def loss_and_grad(feature_pairs, params, config: ModelConfig, training: bool = False,
                  rng=None):
    """Loss and parameter gradients for a batch of (audio, video) features.

    feature_pairs: list of (FeatureSequence|array, FeatureSequence|array).
    Items are grouped by shape so equally-shaped clips run as one stacked
    batch; the contrastive loss still couples the entire batch.
    """
    if len(feature_pairs) < 1:
        raise ValueError("batch must contain at least one pair")
    arrays = [(_as_seq_array(fa), _as_seq_array(fv)) for fa, fv in feature_pairs]
    b = len(arrays)
    m = config.cross_modal.model_dim

    groups = {}
    for i, (xa, xv) in enumerate(arrays):
        groups.setdefault((xa.shape, xv.shape), []).append(i)

    a_emb = np.empty((b, m))
    v_emb = np.empty((b, m))
    caches = []
    for key in sorted(groups, key=str):
        idx = groups[key]
        xa = np.stack([arrays[i][0] for i in idx])
        xv = np.stack([arrays[i][1] for i in idx])
        an, vn, cache = _embed_batch(xa, xv, params, config, training, rng)
        a_emb[idx] = an
        v_emb[idx] = vn
        caches.append((idx, cache))

    loss, da, dv = _info_nce_arrays(a_emb, v_emb, config.loss)
    if not np.isfinite(loss):
        raise NumericError("contrastive loss is non-finite")

    grads = zero_grads(params)
    for idx, cache in caches:
        _embed_batch_bwd(da[idx], dv[idx], cache, params, config, grads)

    for name, block in grads.items():
        if not np.all(np.isfinite(block)):
            raise NumericError(f"non-finite gradient in block {name!r}")
    return loss, grads


def loss_gradient(feature_pairs, params, config: ModelConfig, training: bool = False,
                  dropout_seed: int = 0) -> dict:
    """Gradient of the contrastive loss wrt every trainable block."""
    rng = child_rng(dropout_seed, "dropout") if training else None
    _, grads = loss_and_grad(feature_pairs, params, config, training=training, rng=rng)
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    """Versioned binary checkpoint: named float32 blocks plus config echo."""
    names = sorted(params)
    header = {
        "config": config.to_dict(),
        "blocks": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "dtype": "<f4",
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    for name in names:
        payload.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(payload))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, extra).

    Rejects bad magic/version, truncated payloads and any block whose shape
    disagrees with the config echo.
    """
    blob = open(path, "rb").read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    params = {}
    offset = 20 + hlen
    for block in header["blocks"]:
        name, shape = block["name"], tuple(block["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected parameter block {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: block {name!r} has shape {shape}, config requires {expected[name]}"
            )
        count = int(np.prod(shape))
        raw = blob[offset : offset + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated data for block {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        offset += 4 * count
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameter blocks {sorted(missing)}")
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return params, config, header.get("extra", {})
