"""Pre-norm ViT trunk over a ``{name: Tensor}`` parameter map."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ViTConfig:
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    droppath_rate: float = 0.0
    use_class_token: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ValueError(f"droppath_rate must lie in [0, 1), got {self.droppath_rate}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class ModelState:
    """Named parameters plus the JSON-serialisable config that built them."""

    params: dict[str, Tensor]
    config: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return ModelState(params, json_copy(self.config))


def json_copy(d):
    return json.loads(json.dumps(d))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    return (truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) * std).astype(dtype)


def init_linear(params: dict, name: str, fan_in: int, fan_out: int, rng, dtype=np.float32) -> None:
    params[f"{name}.weight"] = T.parameter(trunc_normal(rng, (fan_in, fan_out), dtype=dtype), dtype=dtype)
    params[f"{name}.bias"] = T.parameter(np.zeros(fan_out, dtype=dtype), dtype=dtype)


def init_norm(params: dict, name: str, dim: int, dtype=np.float32) -> None:
    params[f"{name}.weight"] = T.parameter(np.ones(dim, dtype=dtype), dtype=dtype)
    params[f"{name}.bias"] = T.parameter(np.zeros(dim, dtype=dtype), dtype=dtype)


def init_block(params: dict, prefix: str, cfg: ViTConfig, rng, dtype=np.float32) -> None:
    d = cfg.embed_dim
    init_norm(params, f"{prefix}.norm1", d, dtype)
    init_linear(params, f"{prefix}.attn.qkv", d, 3 * d, rng, dtype)
    init_linear(params, f"{prefix}.attn.proj", d, d, rng, dtype)
    init_norm(params, f"{prefix}.norm2", d, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", d, cfg.hidden_dim, rng, dtype)
    init_linear(params, f"{prefix}.mlp.fc2", cfg.hidden_dim, d, rng, dtype)


def init_trunk(params: dict, prefix: str, cfg: ViTConfig, rng, dtype=np.float32) -> None:
    """Blocks, final norm and (optionally) the class token under ``prefix``."""
    for i in range(cfg.depth):
        init_block(params, f"{prefix}.blocks.{i}", cfg, rng, dtype)
    init_norm(params, f"{prefix}.norm", cfg.embed_dim, dtype)
    if cfg.use_class_token:
        params[f"{prefix}.cls_token"] = T.parameter(trunc_normal(rng, (1, 1, cfg.embed_dim), dtype=dtype), dtype=dtype)


def msa(x: Tensor, params: dict, prefix: str, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention, ``[B, T, D] -> [B, T, D]``."""
    b, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"msa: width {d} not divisible by {num_heads} heads")
    hd = d // num_heads
    qkv = T.linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(b, t, 3, num_heads, hd).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.scale(q @ k.transpose(-2, -1), 1.0 / math.sqrt(hd)), axis=-1)
    out = (att @ v).permute(0, 2, 1, 3).reshape(b, t, d)
    return T.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return T.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def drop_path(y: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Per-sample stochastic depth; identity in eval mode or when ``p == 0``."""
    if not training or p <= 0.0:
        return y
    if rng is None:
        raise ValueError("drop_path in training mode needs an explicit rng")
    keep = rng.random(y.shape[0]) >= p
    return T.droppath_apply(y, keep, p)


def block(
    x: Tensor,
    params: dict,
    prefix: str,
    num_heads: int,
    droppath_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    x = x + drop_path(msa(h, params, f"{prefix}.attn", num_heads), droppath_p, training, rng)
    h = T.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    return x + drop_path(mlp(h, params, f"{prefix}.mlp"), droppath_p, training, rng)


def run_trunk(x: Tensor, params: dict, prefix: str, cfg: ViTConfig, training: bool = False, rng=None):
    """Blocks then final norm on an already embedded sequence. Returns ``(final, hiddens)``."""
    hiddens = []
    for i in range(cfg.depth):
        x = block(x, params, f"{prefix}.blocks.{i}", cfg.num_heads, cfg.droppath_rate, training, rng)
        hiddens.append(x)
    final = T.layer_norm(x, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    return final, hiddens


def prepend_cls(x: Tensor, cls: Tensor) -> Tensor:
    b = x.shape[0]
    return T.concat([T.add(T.zeros((b, 1, x.shape[2]), dtype=x.dtype), cls), x], axis=1)


def vit_forward(
    tokens: Tensor,
    pos: Tensor | np.ndarray,
    params: dict,
    cfg: ViTConfig,
    prefix: str = "encoder",
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Embedded tokens ``[B, T, D]`` -> ``(final [B, T(+1), D], per-block hiddens)``.

    ``pos`` includes the class-token row when the config uses one.
    """
    if not isinstance(pos, Tensor):
        pos = Tensor._wrap(np.asarray(pos, dtype=tokens.dtype))
    t = tokens.shape[1] + (1 if cfg.use_class_token else 0)
    if pos.shape != (t, cfg.embed_dim):
        raise ShapeError(f"vit_forward: position table {pos.shape} does not match sequence ({t}, {cfg.embed_dim})")
    x = tokens
    if cfg.use_class_token:
        x = prepend_cls(x, params[f"{prefix}.cls_token"])
    x = x + pos
    return run_trunk(x, params, prefix, cfg, training, rng)


def config_dict(cfg: ViTConfig) -> dict:
    return asdict(cfg)
