"""The Hierarchical Visual Transformer: parameters and forward pass.

All forward functions take token tensors shaped ``(..., n, D)``; a single
image is simply a batch of one. The fused QKV projection lays its ``3D``
output columns out as ``[Q | K | V]``, each block of ``D`` columns holding
the heads consecutively, ``head_dim`` columns apiece.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, stage_schedule
from .pooling import windows_1d, windows_2d
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class Linear:
    weight: Tensor      # (in, out)
    bias: Tensor        # (out,)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return T.reshape(T.matmul(T.reshape(x, (1, -1)), self.weight) + self.bias, (-1,))
        return T.matmul(x, self.weight) + self.bias


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, LN_EPS)


@dataclass
class BlockParams:
    ln1: LayerNorm
    qkv: Linear          # D -> 3D
    proj: Linear         # D -> D
    ln2: LayerNorm
    fc1: Linear          # D -> 4D
    fc2: Linear          # 4D -> D
    num_heads: int


@dataclass
class StageParams:
    pos_embed: Tensor                 # (n'_m, D)
    conv: Optional[Linear] = None     # (k*D, D), conv1d pooling only


@dataclass
class HvtModel:
    config: ModelConfig
    patch_proj: Linear
    pos_embed: Tensor
    blocks: list[BlockParams]
    stages: list[StageParams]
    head_norm: LayerNorm
    head_fc: Linear
    cls_token: Optional[Tensor] = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_proj.weight", self.patch_proj.weight
        yield "patch_proj.bias", self.patch_proj.bias
        if self.cls_token is not None:
            yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}."
            yield p + "ln1.gamma", b.ln1.gamma
            yield p + "ln1.beta", b.ln1.beta
            for name in ("qkv", "proj"):
                lin = getattr(b, name)
                yield p + name + ".weight", lin.weight
                yield p + name + ".bias", lin.bias
            yield p + "ln2.gamma", b.ln2.gamma
            yield p + "ln2.beta", b.ln2.beta
            for name in ("fc1", "fc2"):
                lin = getattr(b, name)
                yield p + name + ".weight", lin.weight
                yield p + name + ".bias", lin.bias
        for m, st in enumerate(self.stages):
            yield f"stages.{m}.pos_embed", st.pos_embed
            if st.conv is not None:
                yield f"stages.{m}.conv.weight", st.conv.weight
                yield f"stages.{m}.conv.bias", st.conv.bias
        yield "head.norm.gamma", self.head_norm.gamma
        yield "head.norm.beta", self.head_norm.beta
        yield "head.fc.weight", self.head_fc.weight
        yield "head.fc.bias", self.head_fc.bias

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ConfigError(f"parameter names differ; missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ConfigError(f"{name}: shape {arrays[name].shape} != expected {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every named parameter, without allocating a model."""
    return {name: p.shape for name, p in zeros_model(cfg).named_parameters()}


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _build(cfg: ModelConfig, weight, embed) -> HvtModel:
    d = cfg.embed_dim

    def lin(i, o):
        return Linear(Tensor(weight((i, o)), True), Tensor(np.zeros(o), True))

    def ln():
        return LayerNorm(Tensor(np.ones(d), True), Tensor(np.zeros(d), True))

    blocks = [BlockParams(ln(), lin(d, 3 * d), lin(d, d), ln(), lin(d, 4 * d), lin(4 * d, d),
                          cfg.num_heads)
              for _ in range(cfg.num_blocks)]
    sched = stage_schedule(cfg)
    stages = []
    for n_out in sched.pooled_lengths:
        conv = lin(cfg.pool_kernel * d, d) if cfg.pool_kind == "conv1d" else None
        stages.append(StageParams(Tensor(embed((n_out, d)), True), conv))
    n0 = cfg.num_patches + (1 if cfg.has_cls else 0)
    return HvtModel(
        config=cfg,
        patch_proj=lin(cfg.patch_dim, d),
        pos_embed=Tensor(embed((n0, d)), True),
        blocks=blocks,
        stages=stages,
        head_norm=ln(),
        head_fc=lin(d, cfg.num_classes),
        cls_token=Tensor(embed((d,)), True) if cfg.has_cls else None,
    )


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> HvtModel:
    """Truncated-normal weights and embeddings, zero biases, unit LN gain."""
    def draw(shape):
        return trunc_normal(rng, shape)
    return _build(cfg, draw, draw)


def zeros_model(cfg: ModelConfig) -> HvtModel:
    return _build(cfg, np.zeros, np.zeros)


# forward ops


def patchify(images: Tensor, cfg: ModelConfig) -> Tensor:
    """``(B, H, W, C)`` -> ``(B, N, P*P*C)``, patches row-major, channel-last."""
    b = images.shape[0]
    p = cfg.patch_size
    gh, gw = cfg.grid
    x = T.reshape(images, (b, gh, p, gw, p, cfg.channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, gh * gw, cfg.patch_dim))


def patch_embed(images, model: HvtModel) -> Tensor:
    cfg = model.config
    images = T.as_tensor(images)
    if images.ndim == 3:
        images = T.reshape(images, (1,) + images.shape)
    if images.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ConfigError(
            f"image shape {images.shape[1:]} does not match config "
            f"{(cfg.image_h, cfg.image_w, cfg.channels)}")
    x = model.patch_proj(patchify(images, cfg))
    if model.cls_token is not None:
        b, _, d = x.shape
        cls = T.mul(model.cls_token, np.ones((b, 1, d)))
        x = T.concat([cls, x], axis=1)
    return x + model.pos_embed


def msa_forward(x: Tensor, p: BlockParams) -> Tensor:
    *lead, n, d = x.shape
    h = p.num_heads
    dh = d // h
    qkv = p.qkv(x)                                           # (..., n, 3D)
    qkv = T.reshape(qkv, tuple(lead) + (n, 3, h, dh))
    r = len(lead)
    order = (r + 1,) + tuple(range(r)) + (r + 2, r, r + 3)   # (3, ..., h, n, dh)
    qkv = T.transpose(qkv, order)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = T.softmax_rows(scores)
    o = T.matmul(attn, v)                                    # (..., h, n, dh)
    o = T.swapaxes(o, -3, -2)                                # (..., n, h, dh)
    o = T.reshape(o, tuple(lead) + (n, d))
    return p.proj(o)


def mlp_forward(x: Tensor, p: BlockParams) -> Tensor:
    return p.fc2(T.gelu(p.fc1(x)))


def block_forward(x: Tensor, p: BlockParams) -> Tensor:
    x = x + msa_forward(p.ln1(x), p)
    return x + mlp_forward(p.ln2(x), p)


def pool_stage(x: Tensor, stage_index: int, model: HvtModel) -> Tensor:
    """Downsample the token axis of a block output, then add the stage embedding."""
    cfg = model.config
    if not 0 <= stage_index < len(model.stages):
        raise ConfigError(f"stage index {stage_index} out of range for {len(model.stages)} stages")
    if cfg.has_cls:
        raise ConfigError("pooling is undefined with a class token in the sequence")
    n = x.shape[-2]
    k, s, pad = cfg.pool_kernel, cfg.pool_stride, cfg.pool_pad
    stage = model.stages[stage_index]
    if cfg.pool_kind == "max1d":
        y = T.window_max(x, windows_1d(n, k, s, pad))
    elif cfg.pool_kind == "avg1d":
        y = T.window_mean(x, windows_1d(n, k, s, pad))
    elif cfg.pool_kind == "max2d":
        y = T.window_max(x, windows_2d(n, k, s, pad))
    else:
        win = T.window_gather(x, windows_1d(n, k, s, pad))     # (..., n', k, D)
        y = stage.conv(T.reshape(win, win.shape[:-2] + (k * x.shape[-1],)))
    if y.shape[-2] != stage.pos_embed.shape[0]:
        raise ConfigError(f"pooled length {y.shape[-2]} != stage embedding rows "
                          f"{stage.pos_embed.shape[0]}")
    return y + stage.pos_embed


def head_classless(x: Tensor, model: HvtModel) -> Tensor:
    """LN -> mean over tokens -> FC."""
    return model.head_fc(T.mean(model.head_norm(x), axis=-2))


def head_cls(x: Tensor, model: HvtModel) -> Tensor:
    """LN -> FC on the class token (row 0); all other rows are ignored."""
    return model.head_fc(model.head_norm(x[..., 0, :]))


def encode(images, model: HvtModel, capture: Optional[list] = None) -> Tensor:
    """Token sequence leaving the last block.

    When ``capture`` is a list, the sequence leaving each block (after that
    block's pooling layer, if any) is appended to it.
    """
    cfg = model.config
    sched = stage_schedule(cfg)
    stage_of = {b: m for m, b in enumerate(sched.stage_starts)}
    x = patch_embed(images, model)
    for i, p in enumerate(model.blocks):
        if x.shape[-2] != sched.seq_lengths[i]:
            raise ConfigError(f"block {i + 1} sees {x.shape[-2]} tokens, "
                              f"schedule says {sched.seq_lengths[i]}")
        x = block_forward(x, p)
        if i + 1 in stage_of:
            x = pool_stage(x, stage_of[i + 1], model)
        if capture is not None:
            capture.append(x)
    return x


def hvt_forward(images, model: HvtModel, capture: Optional[list] = None) -> Tensor:
    """Logits for ``(H, W, C)`` or ``(B, H, W, C)`` images."""
    single = T.as_tensor(images).ndim == 3
    x = encode(images, model, capture)
    logits = head_cls(x, model) if model.config.has_cls else head_classless(x, model)
    return logits[0] if single else logits
