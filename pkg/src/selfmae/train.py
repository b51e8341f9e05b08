"""AdamW, cosine warmup schedule, layer-wise lr decay and the seeded training loop."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data.transforms import random_flip_crop
from .downstream import FinetuneConfig, bce_loss, classify, dice_ce_loss, segment
from .mae import MAEConfig, make_mask, mae_forward
from .vit import ModelState

log = logging.getLogger(__name__)

TASKS = ("pretrain", "finetune_cls", "finetune_seg")


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, lr: float, loss: float):
        self.step, self.lr, self.loss = step, lr, loss
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3e})")


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    warmup_steps: int | None = None
    total_steps: int = 100
    layer_decay: float = 1.0
    batch_size: int = 4
    seed: int = 0
    mask_ratio: float = 0.75
    droppath: float = 0.0
    flip: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(0.1 * self.total_steps)
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if not 0 < self.layer_decay <= 1:
            raise ValueError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def cosine_warmup_lr(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` then half-cosine decay reaching 0 at ``total``."""
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    wd: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update with decoupled weight decay (``t`` counts from 1)."""
    if t < 1:
        raise ValueError("adamw step counter starts at 1")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    if wd:
        param *= param.dtype.type(1 - lr * wd)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)


@dataclass
class ParamGroup:
    names: list[str]
    lr_scale: float
    weight_decay_enabled: bool
    layer: int = 0


_EMBED = re.compile(r"^encoder\.(patch_embed\.(weight|bias)|pos_embed|cls_token)$")
_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")
_HEAD = re.compile(r"^(encoder\.norm\.(weight|bias)|head\.|seg\.|decoder\.)")
_NO_DECAY = re.compile(r"(\.bias$|\.norm\d*\.weight$|^encoder\.cls_token$|^encoder\.pos_embed$|mask_token$)")


def layer_id(name: str, depth: int) -> int:
    if _EMBED.match(name):
        return 0
    m = _BLOCK.match(name)
    if m:
        i = int(m.group(1))
        if i >= depth:
            raise KeyError(f"parameter {name} refers to block {i} of a depth-{depth} trunk")
        return i + 1
    if _HEAD.match(name):
        return depth + 1
    raise KeyError(f"parameter {name!r} has no layer-decay group")


def build_layer_groups(state: ModelState | dict, depth: int, decay: float) -> list[ParamGroup]:
    """Groups ordered embedding, blocks 1..depth, head; layer ``i`` of ``depth + 2`` gets ``decay ** (depth + 1 - i)``.

    Each layer is split into a weight-decayed and a non-decayed group (norms,
    biases, class token, position table, mask token); empty groups are skipped.
    """
    if not 0 < decay <= 1:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    params = state.params if isinstance(state, ModelState) else state
    n_layers = depth + 2
    buckets: dict[tuple[int, bool], list[str]] = {}
    for name in sorted(params):
        lid = layer_id(name, depth)
        buckets.setdefault((lid, not _NO_DECAY.search(name)), []).append(name)
    groups = []
    for lid in range(n_layers):
        for wd in (True, False):
            names = buckets.get((lid, wd))
            if names:
                groups.append(ParamGroup(names, decay ** (n_layers - 1 - lid), wd, lid))
    return groups


def layer_scales(groups: list[ParamGroup]) -> list[float]:
    """One lr scale per layer, embedding first."""
    by_layer = {g.layer: g.lr_scale for g in groups}
    return [by_layer[k] for k in sorted(by_layer)]


class AdamW:
    """AdamW over named parameter groups sharing one step counter."""

    def __init__(self, params: dict, groups: list[ParamGroup], weight_decay: float, betas, eps: float = 1e-8):
        self.params = params
        self.groups = groups
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for g in self.groups:
            glr = lr * g.lr_scale
            wd = self.weight_decay if g.weight_decay_enabled else 0.0
            for n in g.names:
                p = self.params[n]
                if p.grad is None:
                    continue
                adamw_step(p.data, p.grad, self.m[n], self.v[n], self.t, glr, wd, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    state: ModelState
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    def curve_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in self.curve]
        return "\n".join(lines) + "\n"


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch):
            yield order[i : i + batch]


def _assemble(images, labels, idx, out_size, rng, flip, task):
    xs, ys = [], []
    for i in idx:
        lab = labels[i] if task == "finetune_seg" else None
        x, y = random_flip_crop(images[i], lab, out_size, rng, flip=flip)
        xs.append(x)
        ys.append(y if task == "finetune_seg" else labels[i])
    return np.stack(xs), np.stack(ys)


def task_loss(task: str, x: T.Tensor, y: np.ndarray, state: ModelState, model_cfg, cfg: TrainConfig, mask_rng, dp_rng):
    if task == "pretrain":
        plan = make_mask(model_cfg.grid.token_count, cfg.mask_ratio, mask_rng, x.shape[0])
        loss, _ = mae_forward(x, state, model_cfg, plan, training=True, rng=dp_rng)
        return loss
    if task == "finetune_cls":
        return bce_loss(classify(x, state, model_cfg, training=True, rng=dp_rng), y)
    if task == "finetune_seg":
        return dice_ce_loss(segment(x, state, model_cfg, training=True, rng=dp_rng), y)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def model_config(task: str, state: ModelState):
    if task == "pretrain":
        return MAEConfig.from_dict(state.config)
    if state.config.get("kind") != "finetune":
        raise ValueError(f"{task} needs a fine-tuning state, got kind {state.config.get('kind')!r}")
    cfg = FinetuneConfig.from_dict(state.config)
    want = "cls" if task == "finetune_cls" else "seg"
    if cfg.task != want:
        raise ValueError(f"state was built for task {cfg.task!r}, loop asked for {task!r}")
    return cfg


def train_loop(
    task: str,
    images: np.ndarray,
    labels: np.ndarray | None,
    cfg: TrainConfig,
    state: ModelState,
    checkpoint_fn: Callable[[int, ModelState], None] | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Seeded loop: batch, forward, loss, backward, scheduled AdamW step; records ``(step, lr, loss)``.

    ``images`` is ``[n, C, *spatial]``; spatial extents larger than the model grid are randomly cropped.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    model_cfg = model_config(task, state)
    if task != "pretrain" and labels is None:
        raise ValueError(f"{task} needs labels")
    grid = model_cfg.grid
    if images.shape[1] != grid.channels or any(a < b for a, b in zip(images.shape[2:], grid.spatial)):
        raise ValueError(f"data of shape {images.shape[1:]} cannot feed a model expecting {grid.channels}x{grid.spatial}")
    depth = model_cfg.encoder.depth
    groups = build_layer_groups(state, depth, cfg.layer_decay)
    opt = AdamW(state.params, groups, cfg.weight_decay, cfg.betas, cfg.eps)
    batch_rng, aug_rng, mask_rng, dp_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    batches = _batches(images.shape[0], cfg.batch_size, batch_rng)
    dtype = next(iter(state.params.values())).dtype
    result = TrainResult(state)
    ys = labels if labels is not None else np.zeros(images.shape[0])
    for step in range(cfg.total_steps):
        idx = next(batches)
        xb, yb = _assemble(images, ys, idx, grid.spatial, aug_rng, cfg.flip, task)
        x = T.Tensor(xb, dtype=dtype)
        lr = cosine_warmup_lr(step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)
        loss = task_loss(task, x, yb, state, model_cfg, cfg, mask_rng, dp_rng)
        lv = float(loss.item())
        if not math.isfinite(lv):
            raise NumericalAbort(step, lr, lv)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        result.curve.append((step, lr, lv))
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3e loss %.5f", step, lr, lv)
        if checkpoint_fn is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(step + 1, state)
    opt.zero_grad()
    return result
