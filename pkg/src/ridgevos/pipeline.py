"""Episodic meta-training, first-frame inference, evaluation and checkpoints."""

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import solver
from .encoder import (EncoderParams, OptimizerState, bce_with_logits, encode, encode_backward,
                      encode_with_cache, init_encoder, sgd_momentum_step)
from .errors import (BadMagicError, ConfigError, DimensionError, TruncatedPayloadError,
                     UnsupportedVersionError)
from .solver import RidgeConfig
from .synthvid import pool_mask
from .tensor import flatten_features, unflatten_features


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass
class Episode:
    reference: object  # Frame
    query: object  # Frame
    video_id: str
    reference_index: int = 0
    query_index: int = 1


@dataclass
class TrainConfig:
    episodes: int = 2000
    batch: int = 1
    lam: float = solver.DEFAULT_LAMBDA
    splits: int = 2
    c_out: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 0
    bias: bool = True
    widths: tuple = (16, 32)
    loss_weight: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.episodes < 0 or self.checkpoint_every < 0:
            raise ConfigError("episodes and checkpoint_every must be non-negative")
        if self.batch < 1 or self.c_out < 1 or self.splits < 1:
            raise ConfigError("batch, c_out and splits must be positive")
        if self.episodes % self.batch:
            raise ConfigError(f"episodes={self.episodes} is not a multiple of batch={self.batch}")
        if self.c_out % self.splits:
            raise ConfigError(f"splits={self.splits} does not divide feature dimension {self.c_out}")
        if self.lam < 0 or self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lambda, lr, momentum and weight_decay must be non-negative")

    def ridge(self):
        return RidgeConfig(self.lam, self.splits, self.bias)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- episodes ------------------------------------------------------------

def sample_episode(dataset, rng):
    """Uniform video, then a uniform ordered pair of distinct frames from it."""
    eligible = [v for v in dataset if len(v.frames) >= 2]
    if not eligible:
        raise ValueError("dataset has no video with at least two frames")
    video = eligible[int(rng.integers(len(eligible)))]
    n = len(video.frames)
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return Episode(video.frames[i], video.frames[j], video.video_id, i, j)


def _targets(mask, factor):
    return pool_mask(mask, factor)


def episode_loss(params, ref_image, ref_mask, query_image, query_mask, rcfg, loss_weight=1.0):
    """Forward pass only: encode both frames, fit on the reference, score the query."""
    factor = params.total_stride
    x_r = flatten_features(encode(params, ref_image))
    x_q = flatten_features(encode(params, query_image))
    y_r = 2.0 * _targets(ref_mask, factor) - 1.0
    w = solver.block_split_fit(x_r, y_r, rcfg)
    logits = solver.ridge_predict(x_q, w)
    loss, _ = bce_with_logits(logits, _targets(query_mask, factor), loss_weight)
    return loss


def episode_gradients(params, ref_image, ref_mask, query_image, query_mask, rcfg, loss_weight=1.0):
    """Loss and parameter gradients for one reference/query pair.

    The encoder is shared between the two frames, so its gradients from
    both uses are summed.
    """
    factor = params.total_stride
    f_r, cache_r = encode_with_cache(params, ref_image)
    f_q, cache_q = encode_with_cache(params, query_image)
    x_r, x_q = flatten_features(f_r), flatten_features(f_q)
    y_r = 2.0 * _targets(ref_mask, factor) - 1.0
    y_q = _targets(query_mask, factor)

    w = solver.block_split_fit(x_r, y_r, rcfg)
    logits = solver.ridge_predict(x_q, w)
    loss, d_logits = bce_with_logits(logits, y_q, loss_weight)

    d_xq, d_w = solver.predict_backward(x_q, w, d_logits)
    adj = solver.ridge_backward(x_r, y_r, rcfg, w, d_w)

    _, h, wd = f_r.shape
    g_r, _ = encode_backward(params, ref_image, unflatten_features(adj.d_x, h, wd), cache_r)
    _, h, wd = f_q.shape
    g_q, _ = encode_backward(params, query_image, unflatten_features(d_xq, h, wd), cache_q)
    grads = {k: g_r[k] + g_q[k] for k in g_r}
    return loss, grads


def train_step(params, state, episodes, cfg):
    """One optimizer step over a batch of episodes (losses and gradients averaged).

    Returns ``(loss, params, state)``.
    """
    if isinstance(episodes, Episode):
        episodes = [episodes]
    rcfg = cfg.ridge()
    total = 0.0
    acc = None
    for ep in episodes:
        loss, grads = episode_gradients(params, ep.reference.image, ep.reference.mask,
                                        ep.query.image, ep.query.mask, rcfg, cfg.loss_weight)
        total += loss
        if acc is None:
            acc = grads
        else:
            acc = {k: acc[k] + grads[k] for k in acc}
    n = len(episodes)
    if n > 1:
        acc = {k: v / n for k, v in acc.items()}
    loss = total / n
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in acc.values()):
        raise FloatingPointError(f"non-finite loss or gradient (loss={loss})")
    params, state = sgd_momentum_step(params, acc, state)
    return loss, params, state


def init_training(cfg):
    params = init_encoder(cfg.c_out, cfg.widths, seed=cfg.seed)
    state = OptimizerState.zeros_like(params, momentum=cfg.momentum,
                                      weight_decay=cfg.weight_decay, learning_rate=cfg.lr)
    return params, state


def train(dataset, cfg, log=None, checkpoint_path=None):
    """Run ``cfg.episodes // cfg.batch`` optimizer steps.

    ``log`` receives one dict per step: ``{"step", "loss", "wall_ms"}``.
    """
    params, state = init_training(cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    steps = cfg.episodes // cfg.batch
    for step in range(steps):
        t0 = time.perf_counter()
        batch = [sample_episode(dataset, rng) for _ in range(cfg.batch)]
        try:
            loss, params, state = train_step(params, state, batch, cfg)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as e:
            raise TrainingError(step, str(e)) from e
        if log is not None:
            log({"step": step, "loss": loss, "wall_ms": (time.perf_counter() - t0) * 1e3})
        if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, params, cfg)
    return params


# --- inference -----------------------------------------------------------

def _interp_matrix(n_out, n_in):
    # half-pixel-centre bilinear weights, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(a, height, width):
    a = np.asarray(a, dtype=np.float64)
    return _interp_matrix(height, a.shape[0]) @ a @ _interp_matrix(width, a.shape[1]).T


class Segmenter:
    """Holds the mapping fitted on a reference frame and segments query frames."""

    def __init__(self, params, rcfg):
        self.params = params
        self.rcfg = rcfg
        self.solution = None
        self.shape = None

    def fit(self, image, mask):
        mask = np.asarray(mask)
        if mask.shape != np.shape(image)[1:]:
            raise DimensionError(f"mask shape {mask.shape} does not match frame {np.shape(image)[1:]}")
        x = flatten_features(encode(self.params, image))
        y = 2.0 * pool_mask(mask, self.params.total_stride) - 1.0
        self.solution = solver.block_split_fit(x, y, self.rcfg)
        self.shape = mask.shape
        return self

    def logits(self, image):
        feats = encode(self.params, image)
        _, h, w = feats.shape
        return solver.ridge_predict(flatten_features(feats), self.solution).reshape(h, w)

    def segment(self, image):
        if np.shape(image)[1:] != self.shape:
            raise DimensionError(f"frame shape {np.shape(image)[1:]} does not match reference {self.shape}")
        up = upsample_bilinear(self.logits(image), *self.shape)
        return (up > 0).astype(np.uint8)


def infer_video(params, frames, first_mask, rcfg, timings=None):
    """Segment frames 1..T-1 from the mask of frame 0.

    The mapping is fitted once; each later frame costs one encoder pass.
    Per-frame seconds are appended to ``timings`` when given.
    """
    images = [getattr(f, "image", f) for f in frames]
    if len(images) < 2:
        raise ValueError("need at least two frames")
    if first_mask is None:
        raise ValueError("first-frame mask is required")
    seg = Segmenter(params, rcfg).fit(images[0], first_mask)
    out = []
    for img in images[1:]:
        t0 = time.perf_counter()
        out.append(seg.segment(img))
        if timings is not None:
            timings.append(time.perf_counter() - t0)
    return out


# --- evaluation ----------------------------------------------------------

def iou(pred, gt):
    """Jaccard index of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


@dataclass
class EvalReport:
    per_video: dict
    j_mean: float
    per_frame: list = field(default_factory=list)

    def sorted_videos(self):
        """(video_id, J) pairs, best first; ties broken by id."""
        return sorted(self.per_video.items(), key=lambda kv: (-kv[1], kv[0]))

    def to_dict(self):
        return {"j_mean": self.j_mean,
                "per_video": dict(sorted(self.per_video.items())),
                "per_frame": self.per_frame}


def score_predictions(videos, predictions):
    """Build an EvalReport from ``predictions[video_id]`` = masks for frames 1..T-1."""
    per_video, per_frame = {}, []
    for video in sorted(videos, key=lambda v: v.video_id):
        preds = predictions[video.video_id]
        gts = [f.mask for f in video.frames[1:]]
        if len(preds) != len(gts):
            raise ValueError(f"{video.video_id}: {len(preds)} predictions for {len(gts)} query frames")
        scores = [iou(p, g) for p, g in zip(preds, gts)]
        for t, s in enumerate(scores, start=1):
            per_frame.append({"video": video.video_id, "frame": t, "iou": s})
        per_video[video.video_id] = float(np.mean(scores))
    j_mean = float(np.mean(list(per_video.values()))) if per_video else 0.0
    return EvalReport(per_video, j_mean, per_frame)


def evaluate(params, dataset, rcfg):
    """Mean IoU per video over frames 1..T-1, using only the frame-0 mask."""
    preds = {}
    for video in dataset:
        if len(video.frames) < 2 or video.frames[0].mask is None:
            raise ValueError(f"{video.video_id}: need at least two frames and a first-frame mask")
        preds[video.video_id] = infer_video(params, video.frames, video.frames[0].mask, rcfg)
    return score_predictions(dataset, preds)


# --- checkpoints ---------------------------------------------------------

MAGIC = b"MRSG"
VERSION = 1


def checkpoint_bytes(params, cfg):
    meta = {"config": cfg.to_dict(), "strides": params.strides}
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = params.named_tensors()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_raw)), meta_raw,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, params, cfg):
    data = checkpoint_bytes(params, cfg)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data):
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I", "config length")
    meta = json.loads(r.take(meta_len, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{rank}Q", f"{name} dims")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(8 * n, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    cfg = TrainConfig.from_dict(meta["config"])
    return EncoderParams.from_named(tensors, meta["strides"]), cfg


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
