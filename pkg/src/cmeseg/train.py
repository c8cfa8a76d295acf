"""Joint logistic + Dice loss, plain SGD, and the epoch loop.

The loop is strictly sequential: batch size 1, seeded shuffling, one
parameter update per sample. Validation Dice is computed after every
epoch and the best-scoring parameter set is restored into the network
when training ends.
"""

import copy
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import model as model_mod
from . import ops
from .errors import DimsMismatch, EmptyDataset, ShapeMismatch
from .metrics import dice
from .ops import Tensor

DICE_EPS = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    base_lr: float = 1e-4
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    dice_weight: float = 1.0
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.dice_weight < 0:
            raise ValueError("dice_weight must be >= 0")


def _check_pair(heatmap, truth):
    if len(heatmap.dims) != 4 or heatmap.dims[0] != 1 or heatmap.dims[1] != 2:
        raise ShapeMismatch(f"expected heatmap dims (1, 2, H, W), got "
                            f"{heatmap.dims}")
    if truth.shape != heatmap.dims[2:]:
        raise ShapeMismatch(f"truth dims {truth.shape} != image plane "
                            f"{heatmap.dims[2:]}")


def logistic_loss(heatmap: Tensor, truth: np.ndarray):
    """Mean per-pixel negative log likelihood of the true class.

    Returns (loss, gradient w.r.t. the pre-softmax scores): the fused
    softmax+NLL form (p - onehot) / n_pixels.
    """
    _check_pair(heatmap, truth)
    p = heatmap.data
    n = truth.size
    t = truth.astype(np.int64)
    p_true = np.take_along_axis(p[0], t[None], axis=0)[0]
    loss = float(-np.log(np.maximum(p_true, 1e-300)).sum() / n)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot[0], t[None], 1.0, axis=0)
    grad = (p - onehot) / n
    return loss, Tensor(grad.astype(p.dtype))


def dice_loss(heatmap: Tensor, truth: np.ndarray):
    """Soft-Dice loss on the edema-class probability channel.

    D = (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps); loss = 1 - D.
    Returns (loss, gradient w.r.t. the probabilities), channel 0 zero.
    """
    _check_pair(heatmap, truth)
    p = heatmap.data[0, 1]
    g = truth.astype(p.dtype)
    inter = float((p * g).sum())
    denom = float((p * p).sum() + (g * g).sum()) + DICE_EPS
    d = (2.0 * inter + DICE_EPS) / denom
    grad_p = (2.0 * g * denom - (2.0 * inter + DICE_EPS) * 2.0 * p) \
        / (denom * denom)
    grad = np.zeros_like(heatmap.data)
    grad[0, 1] = -grad_p  # loss = 1 - D
    return 1.0 - d, Tensor(grad)


def joint_loss(heatmap: Tensor, truth: np.ndarray, dice_weight: float = 1.0):
    """logistic + weight * dice, gradient w.r.t. the pre-softmax scores."""
    lloss, lgrad = logistic_loss(heatmap, truth)
    if dice_weight == 0.0:
        return lloss, lgrad
    dloss, dgrad_probs = dice_loss(heatmap, truth)
    dgrad_scores = ops.softmax_backward(heatmap, dgrad_probs)
    total = lloss + dice_weight * dloss
    grad = lgrad.data + dice_weight * dgrad_scores.data
    return total, Tensor(grad)


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, state=None):
    """In-place theta <- theta - lr * grad; plain SGD unless momentum set.

    params and grads are name-keyed dicts with matching inventories.
    """
    if set(params) != set(grads):
        raise DimsMismatch(
            f"parameter/gradient inventories differ: "
            f"{sorted(set(params) ^ set(grads))}")
    for name, tensor in params.items():
        arr = tensor.data if isinstance(tensor, Tensor) else tensor
        g = grads[name]
        if g.shape != arr.shape:
            raise DimsMismatch(f"{name}: grad dims {g.shape} != param dims "
                               f"{arr.shape}")
        if weight_decay:
            g = g + weight_decay * arr
        if momentum:
            if state is None:
                raise ValueError("momentum requires a state dict")
            v = state.get(name)
            v = momentum * v + g if v is not None else g.copy()
            state[name] = v
            g = v
        arr -= (lr * g).astype(arr.dtype, copy=False)
    return params


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: base_lr * factor^(epoch // every)."""
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float

    def to_line(self):
        return (f"epoch={self.epoch} train_loss={self.train_loss:.6f} "
                f"val_dice={self.val_dice:.6f} lr={self.lr:.6g}")


@dataclass
class TrainResult:
    log: List[EpochLog]
    best_epoch: int
    best_val_dice: float


def predict_mask(net, image: Tensor) -> np.ndarray:
    """Hard per-pixel labeling from a forward pass (argmax over classes)."""
    _, heat = model_mod.forward(net, image)
    return np.argmax(heat.data[0], axis=0).astype(np.uint8)


def evaluate_dice(net, samples) -> float:
    """Mean Dice of hard predictions against the samples' masks."""
    vals = []
    for s in samples:
        img, mask = s.load()
        vals.append(dice(predict_mask(net, Tensor(img)), mask))
    return float(np.mean(vals)) if vals else float("nan")


def train(net, train_samples: Sequence, val_samples: Sequence,
          cfg: TrainConfig, log_fn: Optional[Callable[[str], None]] = None,
          stop_fn=None):
    """Run the epoch loop; returns a TrainResult.

    Samples expose load() -> (image (1,3,H,W) float array, mask (H,W)
    uint8). The network ends up holding the parameters of the best
    validation epoch (final-epoch parameters when there is no val split).
    stop_fn(log_entry) may end training early after any epoch.
    """
    if len(train_samples) == 0:
        raise EmptyDataset("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    momentum_state = {} if cfg.momentum else None
    best = (-1.0, -1, None)  # (val dice, epoch, params snapshot)
    log = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(train_samples))
        losses = []
        for idx in order:
            img, mask = train_samples[idx].load()
            _, heat = model_mod.forward(net, Tensor(img), train=True)
            loss, grad = joint_loss(heat, mask, cfg.dice_weight)
            grads = model_mod.backward(net, grad)
            sgd_step(net.params, grads, lr, momentum=cfg.momentum,
                     weight_decay=cfg.weight_decay, state=momentum_state)
            losses.append(loss)
        val = evaluate_dice(net, val_samples) if len(val_samples) else \
            float("nan")
        entry = EpochLog(epoch, float(np.mean(losses)), val, lr)
        log.append(entry)
        if log_fn:
            log_fn(entry.to_line())
        if len(val_samples) and (best[2] is None or val > best[0]):
            best = (val, epoch,
                    {k: t.data.copy() for k, t in net.params.items()})
        if stop_fn is not None and stop_fn(entry):
            break
    if best[2] is not None:
        for name, arr in best[2].items():
            net.params[name] = Tensor(arr)
    return TrainResult(log, best[1] if best[2] is not None else len(log) - 1,
                       best[0] if best[2] is not None else float("nan"))
