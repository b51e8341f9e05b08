"""Masked-autoencoder pre-training: masking, visible-only encoder, decoder, loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .embeddings import PatchGrid, denormalize, patch_embed, patchify, per_patch_normalize, sincos_pos_embed, unpatchify
from .tensor import ShapeError, Tensor
from .vit import (
    ModelState,
    ViTConfig,
    init_block,
    init_linear,
    init_norm,
    init_trunk,
    prepend_cls,
    run_trunk,
    trunc_normal,
)


def visible_count(n: int, ratio: float) -> int:
    return int(math.floor(n * (1.0 - ratio) + 0.5))


@dataclass
class MaskPlan:
    """Per-sample split of token indices into visible and masked sets.

    ``perm[b]`` lists the visible indices first, then the masked ones;
    ``restore`` is its inverse permutation.
    """

    ratio: float
    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if self.perm.ndim == 1:
            self.perm = self.perm[None]
        n = self.perm.shape[1]
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        if np.any(np.sort(self.perm, axis=1) != np.arange(n)):
            raise ValueError("MaskPlan.perm rows must be permutations of 0..N-1")
        self.restore = np.argsort(self.perm, axis=1)

    @property
    def num_tokens(self) -> int:
        return self.perm.shape[1]

    @property
    def batch(self) -> int:
        return self.perm.shape[0]

    @property
    def num_visible(self) -> int:
        return visible_count(self.num_tokens, self.ratio)

    @property
    def visible_idx(self) -> np.ndarray:
        return self.perm[:, : self.num_visible]

    @property
    def masked_idx(self) -> np.ndarray:
        return self.perm[:, self.num_visible :]

    def mask(self) -> np.ndarray:
        """``[B, N]`` array, 1 at masked tokens."""
        m = np.zeros(self.perm.shape, dtype=np.uint8)
        np.put_along_axis(m, self.masked_idx, 1, axis=1)
        return m


def make_mask(n: int, ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskPlan:
    """Uniformly random visible subset of ``round_half_up(n * (1 - ratio))`` tokens per sample.

    Both index sets are kept in ascending token order inside ``perm``.
    """
    if n < 1:
        raise ValueError(f"token count must be positive, got {n}")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    v = visible_count(n, ratio)
    rows = []
    for _ in range(batch):
        shuffled = rng.permutation(n)
        rows.append(np.concatenate([np.sort(shuffled[:v]), np.sort(shuffled[v:])]))
    return MaskPlan(ratio, np.stack(rows))


@dataclass
class MAEConfig:
    grid: PatchGrid
    encoder: ViTConfig = field(default_factory=ViTConfig)
    decoder_dim: int | None = None
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    norm_targets: bool = True

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = self.encoder.embed_dim // 2
        if not self.encoder.use_class_token:
            raise ValueError("MAE encoder is built with a class token")

    @property
    def decoder(self) -> ViTConfig:
        return ViTConfig(self.decoder_dim, self.decoder_depth, self.decoder_heads, self.mlp_ratio, 0.0, True)

    def to_dict(self) -> dict:
        return {
            "kind": "mae",
            "grid": self.grid.to_dict(),
            "encoder": asdict(self.encoder),
            "decoder_dim": self.decoder_dim,
            "decoder_depth": self.decoder_depth,
            "decoder_heads": self.decoder_heads,
            "mlp_ratio": self.mlp_ratio,
            "norm_targets": self.norm_targets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        return cls(
            grid=PatchGrid.from_dict(d["grid"]),
            encoder=ViTConfig(**d["encoder"]),
            decoder_dim=d["decoder_dim"],
            decoder_depth=d["decoder_depth"],
            decoder_heads=d["decoder_heads"],
            mlp_ratio=d.get("mlp_ratio", 4.0),
            norm_targets=d.get("norm_targets", True),
        )


def init_mae(cfg: MAEConfig, rng: np.random.Generator, dtype=np.float32) -> ModelState:
    p: dict[str, Tensor] = {}
    enc = cfg.encoder
    init_linear(p, "encoder.patch_embed", cfg.grid.patch_dim, enc.embed_dim, rng, dtype)
    init_trunk(p, "encoder", enc, rng, dtype)
    dec = cfg.decoder
    init_linear(p, "decoder.embed", enc.embed_dim, dec.embed_dim, rng, dtype)
    p["decoder.mask_token"] = T.parameter(trunc_normal(rng, (dec.embed_dim,), dtype=dtype), dtype=dtype)
    for i in range(dec.depth):
        init_block(p, f"decoder.blocks.{i}", dec, rng, dtype)
    init_norm(p, "decoder.norm", dec.embed_dim, dtype)
    init_linear(p, "decoder.pred", dec.embed_dim, cfg.grid.patch_dim, rng, dtype)
    return ModelState(p, cfg.to_dict())


def encoder_pos(cfg: MAEConfig, dtype=np.float32) -> np.ndarray:
    return sincos_pos_embed(cfg.grid, cfg.encoder.embed_dim, cls_token=False, dtype=dtype, pad=True)


def decoder_pos(cfg: MAEConfig, dtype=np.float32) -> np.ndarray:
    return sincos_pos_embed(cfg.grid, cfg.decoder_dim, cls_token=True, dtype=dtype, pad=True)


def _check_plan(plan: MaskPlan, grid: PatchGrid, batch: int) -> None:
    if plan.num_tokens != grid.token_count:
        raise ShapeError(f"mask plan covers {plan.num_tokens} tokens, grid has {grid.token_count}")
    if plan.batch != batch:
        raise ShapeError(f"mask plan has {plan.batch} rows for a batch of {batch}")


def mae_encode(
    x: Tensor,
    grid: PatchGrid,
    plan: MaskPlan,
    state: ModelState,
    cfg: MAEConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode only the visible patches; output ``[B, V + 1, embed_dim]`` (class token first)."""
    b = x.shape[0]
    _check_plan(plan, grid, b)
    p = state.params
    tokens = patchify(x, grid)
    h = patch_embed(tokens, p["encoder.patch_embed.weight"], p["encoder.patch_embed.bias"])
    h = h + Tensor._wrap(encoder_pos(cfg, h.dtype))
    h = T.gather_rows(h, plan.visible_idx)
    h = prepend_cls(h, p["encoder.cls_token"])
    final, _ = run_trunk(h, p, "encoder", cfg.encoder, training, rng)
    return final


def mae_decode(enc_out: Tensor, plan: MaskPlan, state: ModelState, cfg: MAEConfig) -> Tensor:
    """Mask tokens fill masked slots, order is restored, decoder predicts ``[B, N, patch_dim]``."""
    b, t, _ = enc_out.shape
    if t != plan.num_visible + 1 or b != plan.batch:
        raise ShapeError(f"encoder output {enc_out.shape} does not match plan (V={plan.num_visible}, B={plan.batch})")
    p = state.params
    n = plan.num_tokens
    h = T.linear(enc_out, p["decoder.embed.weight"], p["decoder.embed.bias"])
    dd = h.shape[2]
    masked = n - plan.num_visible
    mask_tokens = T.add(T.zeros((b, masked, dd), dtype=h.dtype), p["decoder.mask_token"])
    seq = T.concat([h[:, 1:, :], mask_tokens], axis=1)
    seq = T.gather_rows(seq, plan.restore)
    seq = T.concat([h[:, :1, :], seq], axis=1)
    seq = seq + Tensor._wrap(decoder_pos(cfg, h.dtype))
    final, _ = run_trunk(seq, p, "decoder", cfg.decoder)
    pred = T.linear(final, p["decoder.pred.weight"], p["decoder.pred.bias"])
    return pred[:, 1:, :]


def make_targets(x: np.ndarray, grid: PatchGrid, normalize: bool):
    """Patchified reconstruction targets plus per-patch ``(mean, var)`` (``None`` when raw)."""
    tokens = patchify(np.asarray(x), grid)
    if not normalize:
        return tokens, None
    targets, mean, var = per_patch_normalize(tokens)
    return targets, (mean, var)


def mae_loss(predictions: Tensor, x, grid: PatchGrid, plan: MaskPlan, normalize_targets: bool = True) -> Tensor:
    """Mean squared error over masked tokens and patch values only."""
    if plan.num_visible == plan.num_tokens:
        raise ValueError("mask ratio produced no masked patches")
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    targets, _ = make_targets(xd, grid, normalize_targets)
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} do not match targets {targets.shape}")
    idx = plan.masked_idx
    pm = T.gather_rows(predictions, idx)
    tm = np.take_along_axis(targets, idx[:, :, None], axis=1).astype(predictions.dtype)
    diff = pm - Tensor._wrap(tm)
    return T.mean(T.square(diff))


def mae_forward(x: Tensor, state: ModelState, cfg: MAEConfig, plan: MaskPlan, training=False, rng=None):
    """Encode, decode and score one batch; returns ``(loss, predictions)``."""
    enc = mae_encode(x, cfg.grid, plan, state, cfg, training, rng)
    pred = mae_decode(enc, plan, state, cfg)
    return mae_loss(pred, x, cfg.grid, plan, cfg.norm_targets), pred


def reconstruct_full(
    predictions: np.ndarray,
    x: np.ndarray,
    grid: PatchGrid,
    plan: MaskPlan,
    stats: tuple[np.ndarray, np.ndarray] | None,
    fill_value: float = 0.5,
):
    """Paste predicted patches into masked slots of ``x``.

    Returns ``(reconstruction, masked_image)``; the masked image carries
    ``fill_value`` on every masked patch and the original elsewhere.
    """
    predictions = predictions.data if isinstance(predictions, Tensor) else np.asarray(predictions)
    x = np.asarray(x)
    original = patchify(x, grid)
    pred = denormalize(predictions, *stats) if stats is not None else predictions
    pred = pred.astype(original.dtype, copy=False)
    mask = plan.mask().astype(bool)[:, :, None]
    recon_tokens = np.where(mask, pred, original)
    masked_tokens = np.where(mask, original.dtype.type(fill_value), original)
    return unpatchify(recon_tokens, grid), unpatchify(masked_tokens, grid)
