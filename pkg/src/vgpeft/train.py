"""Deterministic fine-tuning of the trainable subset of a grounding model."""

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergedError, InputError, StateError
from .metrics import BBox, PairRecord, report
from .model import pad_tokens, tokenize
from .peft import model_checksum, param_report
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    lambda_reg: float = 1.0
    lambda_iou: float = 1.0
    smooth_l1_beta: float = 0.1
    seed: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lambda_reg < 0 or self.lambda_iou < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_reg == 0 and self.lambda_iou == 0:
            raise ConfigError("lambda_reg and lambda_iou cannot both be zero")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")
        if not self.smooth_l1_beta > 0:
            raise ConfigError("smooth_l1_beta must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def _corners(box):
    cx, cy, w, h = box[:, 0], box[:, 1], box[:, 2], box[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def box_iou(pred, gt):
    """Differentiable IoU of (B, 4) normalised (cx, cy, w, h) boxes -> (B,)."""
    px1, py1, px2, py2 = _corners(pred)
    gx1, gy1, gx2, gy2 = _corners(gt)
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + gt[:, 2] * gt[:, 3] - inter
    return inter / union


def smooth_l1(pred, gt, beta):
    d = pred - gt
    ad = T.absolute(d)
    return T.where(ad.data < beta, d * d * (0.5 / beta), ad - 0.5 * beta)


def box_loss(pred, gt, lambda_reg=1.0, lambda_iou=1.0, beta=0.1):
    """Mean over the batch of ``lambda_reg * smoothL1 + lambda_iou * (1 - IoU)``.

    ``pred`` is a (B, 4) Tensor, ``gt`` a (B, 4) array or Tensor. The
    smooth-L1 term is summed over the four box coordinates.
    """
    gt = T.as_tensor(gt)
    total = 0.0
    if lambda_reg:
        total = T.sum(smooth_l1(pred, gt, beta), axis=1) * lambda_reg
    if lambda_iou:
        total = total + (1.0 - box_iou(pred, gt)) * lambda_iou
    return T.mean(total)


def loss(pred, gt, lambda_reg=1.0, lambda_iou=1.0, beta=0.1):
    """Loss for one (cx, cy, w, h) box pair; accepts Tensors or sequences."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=float))
    return box_loss(T.reshape(pred, (1, 4)), T.reshape(gt, (1, 4)), lambda_reg, lambda_iou, beta)


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, params, lr):
        self.params = [p for p in params if p.trainable]
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.trainable and p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable or p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------------------
# batching


class Batcher:
    """Pre-tokenised, pre-stacked view of a record list."""

    def __init__(self, model, records):
        records = list(records)
        if not records:
            raise InputError("need at least one record")
        for r in records:
            if r.patches is None:
                raise InputError(f"record {r.pair_id!r} carries no patch features")
        self.records = records
        self.patches = np.stack([np.asarray(r.patches, dtype=np.float64) for r in records])
        vocab = model.config.vocab_size
        self.tokens = [tokenize(r.query, vocab) for r in records]
        self.targets = np.stack([r.norm_box() for r in records])

    def __len__(self):
        return len(self.records)

    def select(self, idx):
        return self.patches[idx], [self.tokens[i] for i in idx], self.targets[idx]


def frozen_checksum(model):
    frozen = {path for path, p in model.named_parameters() if not p.trainable}
    return model_checksum(model, frozen)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # [(step, MetricsReport)]
    param_report: object = None
    wall_time: float = 0.0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""

    def to_dict(self):
        return {
            "losses": self.losses,
            "evals": [{"step": s, "metrics": r.to_dict()} for s, r in self.evals],
            "param_report": None if self.param_report is None else self.param_report.to_dict(),
            "wall_time": self.wall_time,
            "frozen_checksum_before": self.frozen_checksum_before,
            "frozen_checksum_after": self.frozen_checksum_after,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self):
        lines = [f"steps       {len(self.losses)}"]
        if self.losses:
            lines.append(f"loss        {self.losses[0]:.6f} -> {self.losses[-1]:.6f}")
        if self.param_report is not None:
            lines.append(f"trainable   {self.param_report.trainable:,} / {self.param_report.total:,}")
            lines.append(f"efficiency  {self.param_report.efficiency_str()}")
        for step, rep in self.evals:
            pr = " ".join(f"{v:6.2f}" for v in rep.row())
            lines.append(f"eval@{step:<6} {pr}")
        lines.append(f"frozen      {'unchanged' if self.frozen_checksum_before == self.frozen_checksum_after else 'CHANGED'}")
        lines.append(f"wall time   {self.wall_time:.1f}s")
        return "\n".join(lines) + "\n"


def train(model, data, cfg=None, eval_data=None, full_finetune=False, progress=None):
    """Train the trainable parameters of ``model`` in place.

    The model must be PEFT-adapted, or ``full_finetune`` must be set.
    Batches are drawn without replacement from a seeded per-epoch permutation.
    """
    cfg = cfg or TrainConfig()
    if model.peft is None and not full_finetune:
        raise StateError("model has no PEFT structure; pass full_finetune=True for full fine-tuning")
    batcher = Batcher(model, data)
    eval_batcher = Batcher(model, eval_data) if eval_data else None
    params = model.parameters()
    trainable = [p for p in params if p.trainable]
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)

    log = TrainLog(frozen_checksum_before=frozen_checksum(model))
    start = time.perf_counter()
    order, cursor = rng.permutation(len(batcher)), 0
    bs = min(cfg.batch_size, len(batcher))
    for step in range(1, cfg.steps + 1):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(batcher)), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        patches, tokens, targets = batcher.select(idx)
        value = _step(model, patches, tokens, targets, cfg, trainable, opt)
        if not math.isfinite(value):
            raise DivergedError(step, value)
        log.losses.append(value)
        if progress is not None:
            progress(step, value)
        if eval_batcher is not None and cfg.eval_every and step % cfg.eval_every == 0:
            log.evals.append((step, _evaluate(model, eval_batcher)))
    if eval_batcher is not None and (not log.evals or log.evals[-1][0] != cfg.steps):
        log.evals.append((cfg.steps, _evaluate(model, eval_batcher)))
    log.wall_time = time.perf_counter() - start
    log.param_report = param_report(model)
    log.frozen_checksum_after = frozen_checksum(model)
    return log


def _step(model, patches, tokens, targets, cfg, trainable, opt):
    ids, mask = pad_tokens(tokens)
    pred = model.forward(patches, ids, mask)
    value = box_loss(pred, targets, cfg.lambda_reg, cfg.lambda_iou, cfg.smooth_l1_beta)
    if trainable:
        for p in trainable:
            p.grad = None
        T.backward(value)
        opt.step()
    return value.item()


# ---------------------------------------------------------------------------
# evaluation


def denormalize(box, width, height):
    cx, cy, w, h = (float(v) for v in box)
    return BBox((cx - w / 2) * width, (cy - h / 2) * height,
                (cx + w / 2) * width, (cy + h / 2) * height)


def _predict(model, batcher, chunk=256):
    out = []
    for s in range(0, len(batcher), chunk):
        idx = np.arange(s, min(s + chunk, len(batcher)))
        patches, tokens, _ = batcher.select(idx)
        out.append(np.asarray(model.predict_batch(patches, tokens)))
    return np.concatenate(out, axis=0)


def predict_records(model, data):
    """[(pair_id, pixel BBox)] for every record."""
    batcher = data if isinstance(data, Batcher) else Batcher(model, data)
    boxes = _predict(model, batcher)
    return [(r.pair_id, denormalize(b, r.width, r.height)) for r, b in zip(batcher.records, boxes)]


def _evaluate(model, batcher):
    preds = dict(predict_records(model, batcher))
    return report([PairRecord(r.pair_id, r.image_id, r.query, r.bbox, preds[r.pair_id], r.category)
                   for r in batcher.records])


def evaluate(model, data):
    """Grounding metrics of ``model`` on annotation records. Never mutates the model.

    ``model`` only needs a ``config.vocab_size`` and a
    ``predict_batch(patches, token_lists)`` returning normalised boxes.
    """
    return _evaluate(model, Batcher(model, data))
