"""AdamW, cosine schedule, CE + soft-Dice loss and the epoch loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, parse_key_values
from .metrics import overlap_metrics
from .network import PCMambaNet, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_min: float = 0.0
    batch_size: int = 4
    epochs: int = 10
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    checkpoint_dir: str = ""
    stop_at_dice: float = 0.0  # stop once mean val Dice reaches this; 0 disables

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.lr_min <= self.lr0:
            raise ValueError("need 0 <= lr_min <= lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key = value`` lines; keyword overrides take precedence."""
        kv = parse_key_values(text)
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        vals = {}
        for k, v in kv.items():
            t = types[k]
            vals[k] = int(v) if t == "int" else float(v) if t == "float" else v
        vals.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**vals)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


# -- optimizer -----------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, t: int,
               lr: float, cfg: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """One AdamW update (decoupled weight decay), returning new arrays."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; step aborted")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * cfg.weight_decay * p
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_p.append(p.astype(g.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class AdamW:
    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState.zeros([p.data for p in params])

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adamw_step([p.data for p in self.params], grads, self.state,
                                     self.state.t + 1, lr, self.cfg)
        for p, d in zip(self.params, new):
            p.data = d


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def cosine_lr(epoch: int, epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine decay from ``lr0`` at epoch 0 to ``lr_min`` at the last epoch."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * epoch / (epochs - 1)))


# -- loss ------------------------------------------------------------------------
def seg_loss(logits, labels, ce_w: float = 1.0, dice_w: float = 1.0, smooth: float = 1.0) -> Tensor:
    """Pixelwise cross-entropy plus (1 - mean foreground soft Dice).

    ``logits``: (K, H, W) or (B, K, H, W); ``labels``: matching integer maps.
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    K = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels outside [0, {K})")
    onehot = (labels[:, None] == np.arange(K)[None, :, None, None]).astype(logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    n_pix = labels.size
    ce = -T.tsum(logp * onehot) * (1.0 / n_pix)
    probs = T.softmax(logits, axis=1)
    inter = T.tsum(probs * onehot, axis=(0, 2, 3))
    psum = T.tsum(probs, axis=(0, 2, 3))
    gsum = onehot.sum(axis=(0, 2, 3))
    dice = (inter * 2.0 + smooth) / (psum + gsum + smooth)
    fg_dice = T.mean(dice[1:])
    return ce * ce_w + (1.0 - fg_dice) * dice_w


# -- loop --------------------------------------------------------------------------
@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_dice: list[list[float]] = field(default_factory=list)  # per foreground class
    param_l2: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_dice: float = -1.0
    aborted: str = ""

    def __len__(self) -> int:
        return len(self.epoch)

    @property
    def mean_val_dice(self) -> list[float]:
        return [float(np.mean(d)) for d in self.val_dice]

    def comparable(self) -> dict:
        """Everything except wall-clock, for determinism checks."""
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return d

    def to_csv(self, path) -> None:
        n_cls = len(self.val_dice[0]) if self.val_dice else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "val_loss"]
                       + [f"val_dice_{c + 1}" for c in range(n_cls)]
                       + ["val_dice_mean", "param_l2", "seconds"])
            for i in range(len(self)):
                w.writerow([self.epoch[i], f"{self.lr[i]:.8g}", f"{self.train_loss[i]:.8g}",
                            f"{self.val_loss[i]:.8g}"]
                           + [f"{x:.6f}" for x in self.val_dice[i]]
                           + [f"{self.mean_val_dice[i]:.6f}", f"{self.param_l2[i]:.8g}",
                              f"{self.seconds[i]:.3f}"])


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def evaluate(net: PCMambaNet, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig | None = None,
             batch_size: int = 8) -> tuple[float, list[float], np.ndarray]:
    """Validation loss, per-class mean Dice over samples, and predicted labels."""
    cfg = cfg or TrainConfig()
    if len(images) == 0:
        raise ValueError("empty evaluation split")
    losses, preds = [], []
    K = net.config.num_classes
    for sl in _batches(len(images), batch_size):
        logits = net.forward(T.Tensor(images[sl]))
        losses.append(seg_loss(logits, labels[sl], cfg.ce_weight, cfg.dice_weight).item() * (sl.stop - sl.start))
        preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    per_cls = [float(np.mean([overlap_metrics(pred[i] == c, labels[i] == c)[0] for i in range(len(pred))]))
               for c in range(1, K)]
    return float(np.sum(losses) / len(images)), per_cls, pred


def _flat(net) -> np.ndarray:
    return np.concatenate([p.data.astype(np.float64).ravel() for p in net.parameters()])


def train_loop(net: PCMambaNet, dataset: Dataset, cfg: TrainConfig, train_idx=None, val_idx=None,
               dry_run: bool = False) -> History:
    """Train ``net`` in place; keeps the best-validation-Dice weights loaded at the end.

    ``train_idx``/``val_idx`` override the dataset's split. ``dry_run`` only
    evaluates (one history row, parameters untouched).
    """
    tr = np.asarray(dataset.splits["train"] if train_idx is None else train_idx)
    va = np.asarray(dataset.splits["val"] if val_idx is None else val_idx)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("empty train or validation split")
    x_val, y_val = dataset.images[va], dataset.labels[va]
    hist = History()
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    if dry_run:
        vl, vd, _ = evaluate(net, x_val, y_val, cfg)
        _record(hist, 0, 0.0, float("nan"), vl, vd, 0.0, 0.0)
        return hist

    params = net.parameters()
    opt = AdamW(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    prev = _flat(net)
    best_state = net.state_dict()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        order = tr[rng.permutation(len(tr))]
        total, count = 0.0, 0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            try:
                with T.Tape() as tape:
                    logits = net.forward(T.Tensor(dataset.images[idx]))
                    loss = seg_loss(logits, dataset.labels[idx], cfg.ce_weight, cfg.dice_weight)
            except FloatingPointError:
                hist.aborted = f"non-finite forward pass at epoch {epoch}"
                break
            if not math.isfinite(loss.item()):
                hist.aborted = f"non-finite loss at epoch {epoch}"
                break
            net.zero_grad()
            tape.backward(loss)
            tape.reset()
            clip_grad_norm(params, cfg.grad_clip)
            try:
                opt.step(lr)
            except NonFiniteError as e:
                hist.aborted = f"{e} at epoch {epoch}"
                break
            total += loss.item() * len(idx)
            count += len(idx)
        if hist.aborted:
            log.warning("training aborted: %s", hist.aborted)
            break
        net.zero_grad()
        vl, vd, _ = evaluate(net, x_val, y_val, cfg)
        cur = _flat(net)
        _record(hist, epoch, lr, total / count, vl, vd, float(np.linalg.norm(cur - prev)),
                time.perf_counter() - t0)
        prev = cur
        md = float(np.mean(vd))
        log.info("epoch %d lr %.3g train %.4f val %.4f dice %.4f", epoch, lr, total / count, vl, md)
        if md > hist.best_dice:
            hist.best_dice, hist.best_epoch = md, epoch
            best_state = net.state_dict()
            if ckpt_dir:
                save_checkpoint(net, ckpt_dir / "best.ckpt", {"epoch": epoch, "val_dice": f"{md:.6f}",
                                                               **net.config.to_meta()})
        if cfg.stop_at_dice and md >= cfg.stop_at_dice:
            break
    net.load_state_dict(best_state)
    return hist


def _record(h: History, epoch, lr, tl, vl, vd, l2, sec) -> None:
    h.epoch.append(epoch)
    h.lr.append(lr)
    h.train_loss.append(tl)
    h.val_loss.append(vl)
    h.val_dice.append(list(vd))
    h.param_l2.append(l2)
    h.seconds.append(sec)
