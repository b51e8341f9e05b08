"""Fine-tuning heads: class-token linear classifier and a UNETR-style decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import PatchGrid, patch_embed, patchify, sincos_pos_embed
from .mae import MAEConfig
from .tensor import ShapeError, Tensor
from .vit import ModelState, ViTConfig, init_linear, init_trunk, vit_forward

DICE_SMOOTH = 1e-5


def default_taps(depth: int, stages: int) -> list[int]:
    """Evenly spaced 1-based block indices ending at the last block."""
    if depth < stages:
        raise ValueError(f"depth {depth} cannot feed {stages} decoder stages")
    return [depth * (j + 1) // stages for j in range(stages)]


@dataclass
class SegDecoderConfig:
    grid: PatchGrid
    num_classes: int
    tap_layers: list[int] | None = None
    feature_size: int = 4
    depth: int = 4

    def __post_init__(self):
        stages = int(round(math.log2(self.grid.patch_edge)))
        if 2**stages != self.grid.patch_edge or stages < 1:
            raise ValueError(f"segmentation decoder needs a power-of-two patch edge, got {self.grid.patch_edge}")
        if self.grid.dims != 3:
            raise ValueError("segmentation decoder is 3D only")
        if self.num_classes < 2:
            raise ValueError("segmentation needs at least two classes")
        if self.tap_layers is None:
            self.tap_layers = default_taps(self.depth, stages)
        self.tap_layers = [int(t) for t in self.tap_layers]
        if len(self.tap_layers) != stages:
            raise ValueError(f"{len(self.tap_layers)} tap layers given for {stages} decoder stages")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ValueError(f"tap layers must be strictly increasing, got {self.tap_layers}")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.depth:
            raise ValueError(f"tap layer out of range 1..{self.depth}: {self.tap_layers}")

    @property
    def stages(self) -> int:
        return len(self.tap_layers)

    @property
    def feature_dims(self) -> list[int]:
        """Channel width per resolution level, full resolution first."""
        return [self.feature_size * 2**j for j in range(self.stages)]


@dataclass
class FinetuneConfig:
    grid: PatchGrid
    encoder: ViTConfig = field(default_factory=ViTConfig)
    task: str = "cls"
    num_labels: int = 2
    feature_size: int = 4
    tap_layers: list[int] | None = None

    def __post_init__(self):
        if self.task not in ("cls", "seg"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_labels < 1:
            raise ValueError("num_labels must be at least 1")
        if self.task == "seg":
            self.tap_layers = self.seg.tap_layers

    @property
    def seg(self) -> SegDecoderConfig:
        return SegDecoderConfig(self.grid, self.num_labels, self.tap_layers, self.feature_size, self.encoder.depth)

    def to_dict(self) -> dict:
        return {
            "kind": "finetune",
            "task": self.task,
            "grid": self.grid.to_dict(),
            "encoder": asdict(self.encoder),
            "num_labels": self.num_labels,
            "feature_size": self.feature_size,
            "tap_layers": self.tap_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(
            grid=PatchGrid.from_dict(d["grid"]),
            encoder=ViTConfig(**d["encoder"]),
            task=d["task"],
            num_labels=d["num_labels"],
            feature_size=d.get("feature_size", 4),
            tap_layers=d.get("tap_layers"),
        )


# -- state construction --------------------------------------------------------------


def _conv_param(p, name, c_out, c_in, k, rng, dtype):
    std = math.sqrt(2.0 / (c_in * k**3))
    p[f"{name}.weight"] = T.parameter((rng.standard_normal((c_out, c_in, k, k, k)) * std).astype(dtype), dtype=dtype)
    p[f"{name}.bias"] = T.parameter(np.zeros(c_out, dtype=dtype), dtype=dtype)


def _deconv_param(p, name, c_in, c_out, rng, dtype):
    std = math.sqrt(2.0 / (c_in * 8))
    p[f"{name}.weight"] = T.parameter((rng.standard_normal((c_in, c_out, 2, 2, 2)) * std).astype(dtype), dtype=dtype)
    p[f"{name}.bias"] = T.parameter(np.zeros(c_out, dtype=dtype), dtype=dtype)


def _conv_block_params(p, name, c_out, c_in, rng, dtype):
    _conv_param(p, f"{name}.conv", c_out, c_in, 3, rng, dtype)
    p[f"{name}.norm.weight"] = T.parameter(np.ones(c_out, dtype=dtype), dtype=dtype)
    p[f"{name}.norm.bias"] = T.parameter(np.zeros(c_out, dtype=dtype), dtype=dtype)


def init_seg_decoder(p: dict, cfg: SegDecoderConfig, embed_dim: int, rng, dtype=np.float32) -> None:
    fd = cfg.feature_dims
    L = cfg.stages
    _conv_block_params(p, "seg.stem", fd[0], cfg.grid.channels, rng, dtype)
    for j in range(L - 1):
        c_out = fd[j + 1]
        c_in = embed_dim
        for u in range(L - 1 - j):
            _deconv_param(p, f"seg.skip{j}.up{u}.deconv", c_in, c_out, rng, dtype)
            _conv_block_params(p, f"seg.skip{j}.up{u}.block", c_out, c_out, rng, dtype)
            c_in = c_out
    c_in = embed_dim
    for j in range(L - 2, -1, -1):
        c_out = fd[j + 1]
        _deconv_param(p, f"seg.dec{j}.deconv", c_in, c_out, rng, dtype)
        _conv_block_params(p, f"seg.dec{j}.block", c_out, 2 * c_out, rng, dtype)
        c_in = c_out
    _deconv_param(p, "seg.final.deconv", c_in, fd[0], rng, dtype)
    _conv_block_params(p, "seg.final.block", fd[0], 2 * fd[0], rng, dtype)
    _conv_param(p, "seg.out", cfg.num_classes, fd[0], 1, rng, dtype)


def init_encoder(p: dict, grid: PatchGrid, enc: ViTConfig, rng, dtype=np.float32) -> None:
    init_linear(p, "encoder.patch_embed", grid.patch_dim, enc.embed_dim, rng, dtype)
    init_trunk(p, "encoder", enc, rng, dtype)
    pos = sincos_pos_embed(grid, enc.embed_dim, cls_token=enc.use_class_token, dtype=dtype, pad=True)
    p["encoder.pos_embed"] = T.parameter(pos, dtype=dtype)


def init_head(p: dict, cfg: FinetuneConfig, rng, dtype=np.float32) -> None:
    if cfg.task == "cls":
        init_linear(p, "head", cfg.encoder.embed_dim, cfg.num_labels, rng, dtype)
    else:
        init_seg_decoder(p, cfg.seg, cfg.encoder.embed_dim, rng, dtype)


def init_finetune(cfg: FinetuneConfig, rng: np.random.Generator, dtype=np.float32) -> ModelState:
    """Randomly initialised encoder plus task head (the from-scratch baseline)."""
    p: dict[str, Tensor] = {}
    init_encoder(p, cfg.grid, cfg.encoder, rng, dtype)
    init_head(p, cfg, rng, dtype)
    return ModelState(p, cfg.to_dict())


class ConfigMismatch(ValueError):
    pass


def transfer_weights(
    mae_state: ModelState,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ModelState:
    """Fine-tuning state whose encoder is copied from an MAE state.

    The MAE decoder is dropped, the position table becomes a learnable copy of
    the sine-cosine values and the task head is freshly initialised.
    """
    mcfg = MAEConfig.from_dict(mae_state.config)
    menc, fenc = mcfg.encoder, cfg.encoder
    mismatches = [
        k
        for k in ("embed_dim", "depth", "num_heads", "mlp_ratio", "use_class_token")
        if getattr(menc, k) != getattr(fenc, k)
    ]
    if mcfg.grid.patch_dim != cfg.grid.patch_dim or mcfg.grid.grid != cfg.grid.grid:
        mismatches.append("grid")
    if mismatches:
        raise ConfigMismatch(
            f"pre-trained encoder does not match fine-tune config on {mismatches}: "
            f"pretrain={mae_state.config} finetune={cfg.to_dict()}"
        )
    p: dict[str, Tensor] = {}
    for name, t in mae_state.params.items():
        if name.startswith("encoder."):
            p[name] = T.parameter(t.data.copy(), dtype=dtype)
    pos = sincos_pos_embed(cfg.grid, fenc.embed_dim, cls_token=fenc.use_class_token, dtype=dtype, pad=True)
    p["encoder.pos_embed"] = T.parameter(pos, dtype=dtype)
    init_head(p, cfg, rng, dtype)
    return ModelState(p, cfg.to_dict())


# -- forward paths ---------------------------------------------------------------------


def encode(x: Tensor, state: ModelState, cfg: FinetuneConfig, training: bool = False, rng=None):
    """Full-visibility encoder forward; returns ``(final, hiddens)``."""
    p = state.params
    tokens = patchify(x, cfg.grid)
    h = patch_embed(tokens, p["encoder.patch_embed.weight"], p["encoder.patch_embed.bias"])
    return vit_forward(h, p["encoder.pos_embed"], p, cfg.encoder, "encoder", training, rng)


def classify(x: Tensor, state: ModelState, cfg: FinetuneConfig, training: bool = False, rng=None) -> Tensor:
    """Logits ``[B, num_labels]`` from the class-token output (no activation)."""
    final, _ = encode(x, state, cfg, training, rng)
    p = state.params
    cls = final[:, 0, :]
    return T.linear(cls, p["head.weight"], p["head.bias"])


def _bce_node(z: Tensor, y: np.ndarray) -> Tensor:
    zd = z.data
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size
    out = np.asarray(per.mean(), dtype=zd.dtype)

    def bw(g):
        sig = np.where(zd >= 0, 1 / (1 + np.exp(-np.abs(zd))), np.exp(-np.abs(zd)) / (1 + np.exp(-np.abs(zd))))
        return ((g * (sig - y) / n).astype(zd.dtype),)

    return T.make_node(out, (z,), bw, "bce_with_logits")


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean logit-space binary cross-entropy over ``[B, L]``."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_loss: targets {y.shape} do not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss targets must be 0 or 1")
    return _bce_node(logits, y.astype(logits.dtype))


def _conv_block(x: Tensor, p: dict, name: str) -> Tensor:
    h = T.conv3d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], stride=1, padding=1)
    h = T.instance_norm(h, p[f"{name}.norm.weight"], p[f"{name}.norm.bias"])
    return T.relu(h)


def _deconv(x: Tensor, p: dict, name: str) -> Tensor:
    return T.conv_transpose3d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=2)


def tokens_to_volume(h: Tensor, grid: PatchGrid, has_cls: bool) -> Tensor:
    """``[B, N(+1), D]`` hidden state -> ``[B, D, *grid]`` after stripping the class token."""
    if has_cls:
        h = h[:, 1:, :]
    b, n, d = h.shape
    if n != grid.token_count:
        raise ShapeError(f"token count {n} does not match grid of {grid.token_count} patches")
    return h.permute(0, 2, 1).reshape((b, d) + grid.grid)


def unetr_decode(x: Tensor, hiddens: list[Tensor], state: ModelState, cfg: SegDecoderConfig, has_cls: bool = True):
    """Per-voxel class logits ``[B, K, *spatial]`` from the input and tapped hidden states."""
    p = state.params
    if cfg.tap_layers[-1] > len(hiddens):
        raise ShapeError(f"tap layer {cfg.tap_layers[-1]} exceeds encoder depth {len(hiddens)}")
    feats = [tokens_to_volume(hiddens[t - 1], cfg.grid, has_cls) for t in cfg.tap_layers]
    L = cfg.stages
    skips = []
    for j in range(L - 1):
        s = feats[j]
        for u in range(L - 1 - j):
            s = _conv_block(_deconv(s, p, f"seg.skip{j}.up{u}.deconv"), p, f"seg.skip{j}.up{u}.block")
        skips.append(s)
    d = feats[-1]
    for j in range(L - 2, -1, -1):
        d = _deconv(d, p, f"seg.dec{j}.deconv")
        d = _conv_block(T.concat([d, skips[j]], axis=1), p, f"seg.dec{j}.block")
    d = _deconv(d, p, "seg.final.deconv")
    stem = _conv_block(x, p, "seg.stem")
    d = _conv_block(T.concat([d, stem], axis=1), p, "seg.final.block")
    return T.conv3d(d, p["seg.out.weight"], p["seg.out.bias"])


def segment(x: Tensor, state: ModelState, cfg: FinetuneConfig, training: bool = False, rng=None) -> Tensor:
    _, hiddens = encode(x, state, cfg, training, rng)
    return unetr_decode(x, hiddens, state, cfg.seg, cfg.encoder.use_class_token)


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """``[B, *spatial]`` integer labels -> ``[B, K, *spatial]``."""
    labels = np.asarray(labels)
    oh = (labels[:, None] == np.arange(k).reshape((1, k) + (1,) * (labels.ndim - 1))).astype(dtype)
    return oh


def soft_dice_term(probs: Tensor, onehot: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - mean_k (2 sum(p*y) + s) / (sum p + sum y + s)`` with sums over batch and space."""
    axes = (0,) + tuple(range(2, probs.ndim))
    y = Tensor._wrap(onehot.astype(probs.dtype))
    inter = T.sum_(probs * y, axis=axes)
    denom = T.sum_(probs, axis=axes) + Tensor._wrap(onehot.sum(axis=axes).astype(probs.dtype) + smooth)
    dice = (T.scale(inter, 2.0) + smooth) / denom
    return 1.0 - T.mean(dice)


def cross_entropy_term(logits: Tensor, onehot: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=1)
    per_voxel = T.sum_(logp * Tensor._wrap(onehot.astype(logits.dtype)), axis=1)
    return -T.mean(per_voxel)


def dice_ce_loss(logits: Tensor, labels, smooth: float = DICE_SMOOTH, return_terms: bool = False):
    """Equal-weight mean of soft-Dice loss and voxelwise cross-entropy."""
    k = logits.shape[1]
    if k < 2:
        raise ValueError("dice_ce_loss needs at least two classes")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}, found {labels.min()}..{labels.max()}")
    oh = one_hot(labels, k, logits.dtype)
    dice = soft_dice_term(T.softmax(logits, axis=1), oh, smooth)
    ce = cross_entropy_term(logits, oh)
    loss = T.scale(dice + ce, 0.5)
    return (loss, dice, ce) if return_terms else loss


def encoder_param_names(state: ModelState) -> list[str]:
    return sorted(n for n in state.params if n.startswith("encoder."))

