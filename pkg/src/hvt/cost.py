"""Closed-form FLOPs and parameter accounting, plus a compute-budget explorer.

FLOPs count multiplies only (one per multiply-accumulate), which is the
convention under which a block costs ``12nd^2 + 2n^2d``. Softmax, LN, GELU,
residual adds, bias adds and pooling comparisons are not counted; the
patch projection, the classifier FC and strided-conv downsampling are.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .config import ConfigError, ModelConfig, stage_schedule


def flops_qkv(n: int, d: int) -> int:
    return 3 * n * d * d


def flops_msa(n: int, d: int) -> int:
    # qkv projection + attention map + attention-weighted values + output projection
    return flops_qkv(n, d) + n * n * d + n * n * d + n * d * d


def flops_mlp(n: int, d: int) -> int:
    return 4 * n * d * d + 4 * n * d * d


def flops_block(n: int, d: int) -> int:
    return 12 * n * d * d + 2 * n * n * d


def compression_ratio(n: int, d: int) -> float:
    """FLOPs ratio of one block before and after halving an even-length sequence."""
    if n < 2 or d < 1 or n % 2:
        raise ValueError(f"compression_ratio needs even n >= 2 and d >= 1, got n={n} d={d}")
    return 2.0 + 2.0 / (12.0 * (d / n) + 1.0)


@dataclass
class BlockCost:
    block: int
    seq_len: int
    flops: int


@dataclass
class FlopsReport:
    config: ModelConfig
    per_block: list[BlockCost]
    patch_embed_flops: int
    head_flops: int
    pool_flops: int
    total_flops: int
    total_params: int
    per_stage_alpha: list[float] = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def mparams(self) -> float:
        return self.total_params / 1e6

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "seq_len", "flops"])
        for b in self.per_block:
            w.writerow([b.block, b.seq_len, b.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'block':>5}  {'seq_len':>7}  {'flops':>14}"]
        for b in self.per_block:
            lines.append(f"{b.block:>5}  {b.seq_len:>7}  {b.flops:>14,}")
        lines.append(f"patch embed {self.patch_embed_flops:,}  head {self.head_flops:,}"
                     + (f"  pool {self.pool_flops:,}" if self.pool_flops else ""))
        if self.per_stage_alpha:
            lines.append("stage alpha " + " ".join(f"{a:.4f}" for a in self.per_stage_alpha))
        lines.append(f"total: {self.gflops:.2f} GFLOPs, {self.mparams:.2f} M params")
        return "\n".join(lines)


def model_params(cfg: ModelConfig) -> int:
    d, sched = cfg.embed_dim, stage_schedule(cfg)
    count = cfg.patch_dim * d + d
    count += (cfg.num_patches + (1 if cfg.has_cls else 0)) * d
    if cfg.has_cls:
        count += d
    block = (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d
    count += cfg.num_blocks * block
    for n_out in sched.pooled_lengths:
        count += n_out * d
        if cfg.pool_kind == "conv1d":
            count += cfg.pool_kernel * d * d + d
    count += 2 * d + d * cfg.num_classes + cfg.num_classes
    return count


def model_flops(cfg: ModelConfig) -> FlopsReport:
    d, sched = cfg.embed_dim, stage_schedule(cfg)
    per_block = [BlockCost(i + 1, n, flops_block(n, d)) for i, n in enumerate(sched.seq_lengths)]
    patch = cfg.num_patches * cfg.patch_dim * d
    head = d * cfg.num_classes
    pool = 0
    alphas = []
    for start, n_out in zip(sched.stage_starts, sched.pooled_lengths):
        n_in = sched.seq_lengths[start - 1]
        alphas.append(flops_block(n_in, d) / flops_block(n_out, d))
        if cfg.pool_kind == "conv1d":
            pool += n_out * cfg.pool_kernel * d * d
    total = patch + sum(b.flops for b in per_block) + pool + head
    return FlopsReport(cfg, per_block, patch, head, pool, total, model_params(cfg), alphas)


SEARCH_AXES = ("embed_dim", "num_heads", "num_blocks", "resolution", "patch_size", "num_stages")


def _candidates(base: ModelConfig, ranges: dict) -> Iterable[ModelConfig]:
    unknown = set(ranges) - set(SEARCH_AXES)
    if unknown:
        raise ConfigError(f"unknown search axes {sorted(unknown)}")
    axes = [a for a in SEARCH_AXES if a in ranges]
    for combo in itertools.product(*(sorted(set(ranges[a])) for a in axes)):
        values = dict(zip(axes, combo))
        changes = {}
        if "resolution" in values:
            changes["image_h"] = changes["image_w"] = values.pop("resolution")
        changes.update(values)
        if "num_heads" in changes and "embed_dim" not in changes:
            # width tracks head count at the base per-head dimension
            changes["embed_dim"] = changes["num_heads"] * base.head_dim
        try:
            yield base.replace(**changes)
        except ConfigError:
            continue


def scale_search(budget_flops: float, base: ModelConfig,
                 ranges: Optional[dict] = None) -> list[tuple[ModelConfig, FlopsReport]]:
    """Every config in the cartesian product of ``ranges`` within budget.

    Sorted by total FLOPs descending, ties by parameter count ascending, then
    by the config's text form. Invalid combinations are skipped.
    """
    found = []
    for cfg in _candidates(base, ranges or {}):
        rep = model_flops(cfg)
        if rep.total_flops <= budget_flops:
            found.append((cfg, rep))
    found.sort(key=lambda cr: (-cr[1].total_flops, cr[1].total_params, cr[0].to_text()))
    return found
