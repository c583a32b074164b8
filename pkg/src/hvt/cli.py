"""Command-line entry point: ``hvt <subcommand> [flags]``.

Settings resolve in this order, later winning: built-in defaults, the
``--preset`` architecture (plus its pinned training recipe, if any), the
``--config`` file, then individual flags. The fully resolved settings are
echoed to ``<out>/resolved.cfg``, which can be fed back with ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import (MODEL_KEYS, ConfigError, ModelConfig, format_config_text,
                     parse_config_text, preset)
from .cost import model_flops, scale_search
from .data import DatasetError, load_dataset, save_dataset, synth_dataset
from .model import encode
from .train import (TrainSettings, evaluate, model_from_checkpoint, norm_from_meta, train)
from .data import normalize
from .viz import read_pnm, token_map_export, write_pgm
from . import tensor as T

log = logging.getLogger("hvt")

HEAD_FLAGS = {"cls": "class_token", "avg": "avg_pool"}

# data keys accompany the training settings in a run config
DATA_DEFAULTS = {"n_train": 256, "n_val": 128, "noise": 0.3}

# pinned training recipes, keyed by preset
RUN_PRESETS = {
    "micro": {"epochs": 20, "batch_size": 32, "lr": 6e-3, "flip": True,
              "n_train": 2048, "n_val": 256},
}

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainSettings)}


def _style(text: str, code: str = "1") -> str:
    if os.environ.get("HVT_NO_COLOR") == "1" or not sys.stdout.isatty():
        return text
    return f"\x1b[{code}m{text}\x1b[0m"


def _coerce(key: str, raw):
    kind = _TRAIN_KEYS.get(key)
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int" or key in ("n_train", "n_val"):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


class RunConfig:
    """Resolved model config, training settings and data sizes."""

    def __init__(self, model: ModelConfig, settings: TrainSettings, data: dict):
        self.model = model
        self.settings = settings
        self.data = data

    def to_text(self) -> str:
        values = {k: v for k, v in self.model.to_dict().items()}
        values.update(asdict(self.settings))
        values.update(self.data)
        return format_config_text(values)


def resolve(args, default_preset: str) -> RunConfig:
    name = getattr(args, "preset", None)
    file_values = {}
    if getattr(args, "config", None):
        file_values = parse_config_text(Path(args.config).read_text())
        name = name or file_values.pop("preset", None)
    file_values.pop("preset", None)
    name = name or default_preset
    model = preset(name).to_dict()
    run = asdict(TrainSettings())
    run.update(DATA_DEFAULTS)
    run.update(RUN_PRESETS.get(name, {}))

    for key, raw in file_values.items():
        if key in MODEL_KEYS:
            model[key] = raw
        elif key in run:
            run[key] = _coerce(key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    model_cfg = ModelConfig.from_mapping(model)
    model = model_cfg.to_dict()

    flag_map = {"stages": "num_stages", "pool": "pool_kind", "patch": "patch_size",
                "dim": "embed_dim", "heads": "num_heads", "blocks": "num_blocks"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            model[key] = v
    if getattr(args, "heads", None) is not None and getattr(args, "dim", None) is None:
        model["embed_dim"] = args.heads * model_cfg.head_dim
    if getattr(args, "head", None) is not None:
        model["head_kind"] = HEAD_FLAGS[args.head]
    if getattr(args, "res", None) is not None:
        model["image_h"], model["image_w"] = args.res
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("seed", "seed"),
                      ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            run[key] = v
    settings = TrainSettings(**{k: run[k] for k in _TRAIN_KEYS})
    data = {k: run[k] for k in DATA_DEFAULTS}
    return RunConfig(ModelConfig.from_mapping(model), settings, data)


def _echo_resolved(out, rc: RunConfig) -> None:
    if out is None:
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(rc.to_text())


def _datasets(args, rc: RunConfig):
    if getattr(args, "data", None):
        d = Path(args.data)
        return load_dataset(d / "train.hvtd", "train"), load_dataset(d / "val.hvtd", "val")
    m = rc.model
    return synth_dataset(rc.settings.seed, rc.data["n_train"], rc.data["n_val"],
                         (m.image_h, m.image_w, m.channels), m.num_classes, rc.data["noise"])


# subcommands


def cmd_flops(args) -> int:
    rc = resolve(args, "hvt-s-4")
    rep = model_flops(rc.model)
    if args.emit == "csv":
        sys.stdout.write(rep.to_csv())
    else:
        lines = rep.to_table().splitlines()
        print(_style(lines[0]))
        print("\n".join(lines[1:-1]))
        print(_style(lines[-1]))
    if args.out:
        _echo_resolved(args.out, rc)
        (Path(args.out) / "flops.csv").write_text(rep.to_csv())
    return 0


def _search_rows(results):
    for rank, (cfg, rep) in enumerate(results, 1):
        yield [rank, cfg.num_heads, cfg.embed_dim, cfg.num_blocks, cfg.image_h, cfg.patch_size,
               cfg.num_stages, f"{rep.gflops:.2f}", f"{rep.mparams:.2f}", rep.total_flops]


SEARCH_HEADER = ["rank", "heads", "dim", "blocks", "res", "patch", "stages",
                 "gflops", "mparams", "flops"]


def cmd_scale_search(args) -> int:
    rc = resolve(args, "hvt-s-4")
    ranges = {}
    for flag, axis in (("heads", "num_heads"), ("dim", "embed_dim"), ("blocks", "num_blocks"),
                       ("res", "resolution"), ("patch", "patch_size"), ("stages", "num_stages")):
        v = getattr(args, flag + "_range")
        if v:
            ranges[axis] = v
    results = scale_search(args.budget * 1e9, rc.model, ranges)
    if args.top:
        results = results[:args.top]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEARCH_HEADER)
    w.writerows(_search_rows(results))
    if not results:
        print(f"warning: no configuration fits a {args.budget:.2f} GFLOPs budget", file=sys.stderr)
    if args.emit == "csv":
        sys.stdout.write(buf.getvalue())
    else:
        widths = [4, 5, 5, 6, 4, 5, 6, 7, 8, 14]
        print(_style("  ".join(h.rjust(n) for h, n in zip(SEARCH_HEADER, widths))))
        for row in _search_rows(results):
            print("  ".join(str(c).rjust(n) for c, n in zip(row, widths)))
    if args.out:
        _echo_resolved(args.out, rc)
        (Path(args.out) / "scale_search.csv").write_text(buf.getvalue())
    return 0


def cmd_synth(args) -> int:
    h, w = args.res or (16, 16)
    train_set, val_set = synth_dataset(args.seed or 0, args.n_train, args.n_val,
                                       (h, w, args.channels), args.classes, args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.hvtd", train_set)
    save_dataset(out / "val.hvtd", val_set)
    print(f"wrote {len(train_set)} train / {len(val_set)} val samples of {h}x{w}x{args.channels} "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    rc = resolve(args, "micro")
    train_set, val_set = _datasets(args, rc)
    out = Path(args.out)
    _echo_resolved(out, rc)
    result = train(rc.model, train_set, val_set, rc.settings, metrics_path=out / "metrics.csv",
                   checkpoint_dir=out, keep_epochs=args.keep_epochs, resume=args.resume)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last.epoch}: val top1 {last.val_top1:.4f} top5 {last.val_top5:.4f} "
              f"loss {last.val_loss:.4f}")
    print(f"checkpoint: {out / 'last.hvtc'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rc = resolve(args, "micro")
    rc.model = ckpt.config
    if args.data:
        val_set = load_dataset(Path(args.data) / "val.hvtd", "val")
    else:
        _, val_set = _datasets(args, rc)
    model = model_from_checkpoint(ckpt)
    top1, top5, loss = evaluate(model, val_set, norm_from_meta(ckpt.meta))
    print(f"top1 {top1:.4f}  top5 {top5:.4f}  loss {loss:.4f}")
    return 0


def cmd_visualize(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    model = model_from_checkpoint(ckpt)
    if args.image:
        image = read_pnm(args.image)
    else:
        image = load_dataset(args.data).images[args.index]
    if image.shape != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ConfigError(f"image shape {image.shape} does not match the checkpoint config")
    if not 1 <= args.block <= cfg.num_blocks:
        raise ConfigError(f"block must lie in [1, {cfg.num_blocks}]")
    norm = norm_from_meta(ckpt.meta) or (np.zeros(cfg.channels), np.ones(cfg.channels))
    captured = []
    with T.no_grad():
        encode(normalize(image[None], *norm), model, captured)
    tokens = captured[args.block - 1].data[0]
    if cfg.has_cls:
        tokens = tokens[1:]
    maps = token_map_export(tokens, cfg.num_patches, args.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c, m in zip(args.channels, maps):
        write_pgm(out / f"block{args.block}_ch{c}.pgm", m)
    print(f"wrote {len(maps)} map(s) of {maps.shape[1]}x{maps.shape[2]} from {tokens.shape[0]} "
          f"tokens to {out}")
    return 0


def _common(p, model_flags=True, train_flags=False):
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--preset", metavar="NAME")
    p.add_argument("--seed", type=int, metavar="U64")
    if model_flags:
        p.add_argument("--stages", type=int, metavar="M")
        p.add_argument("--pool", choices=("max1d", "avg1d", "conv1d", "max2d"))
        p.add_argument("--head", choices=tuple(HEAD_FLAGS))
        p.add_argument("--patch", type=int, metavar="P")
        p.add_argument("--res", type=int, nargs=2, metavar=("H", "W"))
        p.add_argument("--dim", type=int, metavar="D")
        p.add_argument("--heads", type=int, metavar="N")
        p.add_argument("--blocks", type=int, metavar="L")
    if train_flags:
        p.add_argument("--epochs", type=int, metavar="E")
        p.add_argument("--batch", type=int, metavar="B")
        p.add_argument("--lr", type=float)
        p.add_argument("--data", metavar="DIR", help="directory holding train.hvtd / val.hvtd")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvt", description="Hierarchical Visual Transformer lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="analytic FLOPs / parameter report")
    _common(p)
    p.add_argument("--emit", choices=("table", "csv"), default="table")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("scale-search", help="enumerate configs under a FLOPs budget")
    _common(p, model_flags=False)
    p.add_argument("--budget", type=float, required=True, metavar="GFLOPS")
    p.add_argument("--heads", dest="heads_range", type=int, nargs="+", metavar="N")
    p.add_argument("--dim", dest="dim_range", type=int, nargs="+", metavar="D")
    p.add_argument("--blocks", dest="blocks_range", type=int, nargs="+", metavar="L")
    p.add_argument("--res", dest="res_range", type=int, nargs="+", metavar="R",
                   help="square input resolutions")
    p.add_argument("--patch", dest="patch_range", type=int, nargs="+", metavar="P")
    p.add_argument("--stages", dest="stages_range", type=int, nargs="+", metavar="M")
    p.add_argument("--top", type=int, metavar="K", help="print only the first K rows")
    p.add_argument("--emit", choices=("table", "csv"), default="table")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_scale_search)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0, metavar="U64")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n-train", type=int, default=1024)
    p.add_argument("--n-val", type=int, default=256)
    p.add_argument("--res", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=DATA_DEFAULTS["noise"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _common(p, train_flags=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--resume", metavar="PATH")
    p.add_argument("--keep-epochs", action="store_true", help="keep a checkpoint per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, model_flags=False, train_flags=True)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export token maps of one block as PGM")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", metavar="PATH", help="binary PGM/PPM input")
    src.add_argument("--data", metavar="PATH", help="HVTD file; pick a sample with --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--block", type=int, required=True, metavar="L")
    p.add_argument("--channels", type=int, nargs="+", default=[0], metavar="C")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, OSError) as exc:
        print(f"hvt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
