"""Acceptance criteria 1 to 8, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines print even
when output capture is on. Criterion 7 runs the pinned training recipe three
times through the installed CLI and takes about a minute.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from hvt import cli
from hvt import tensor as T
from hvt.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from hvt.config import ConfigError, ModelConfig, preset, stage_schedule
from hvt.cost import compression_ratio, model_flops
from hvt.data import synth_dataset
from hvt.model import block_forward, head_classless, head_cls, hvt_forward, init_model
from hvt.pooling import pooled_length, windows_1d
from hvt.rng import make_rng
from hvt.tensor import Tensor
from hvt.train import TrainSettings, train


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def _cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, _ = capsys.readouterr()
    assert code == 0
    return out


def _total_line(text):
    # "total: X.XX GFLOPs, Y.YY M params"
    words = text.strip().splitlines()[-1].split()
    return float(words[1]), float(words[3])


# 1. cost table

TABLE1 = {"deit-ti": (1.25, 5.72), "hvt-ti-1": (0.64, None), "deit-s": (4.60, 22.05),
          "hvt-s-1": (2.40, None), "scale-hvt-ti-4": (1.39, 22.12)}


def test_criterion_1_cost_table(capsys, verdict):
    t0 = time.perf_counter()
    worst_f = worst_p = 0.0
    for name, (gflops, mparams) in TABLE1.items():
        shown = _total_line(_cli(capsys, "flops", "--preset", name))
        rep = model_flops(preset(name))
        assert shown == (round(rep.gflops, 2), round(rep.mparams, 2))
        worst_f = max(worst_f, abs(rep.gflops / gflops - 1))
        if mparams is not None:
            worst_p = max(worst_p, abs(rep.mparams / mparams - 1))
    elapsed = time.perf_counter() - t0
    ok = worst_f < 0.03 and worst_p < 0.01 and elapsed < 1.0
    verdict(1, ok, f"max FLOPs err {worst_f:.2%}, max params err {worst_p:.2%}, {elapsed * 1e3:.0f} ms")


# 2. stage-count trend

TABLE4 = [(4.57, 21.70), (2.40, 21.74), (1.94, 21.76), (1.62, 21.77), (1.39, 21.77)]


def test_criterion_2_stage_trend(verdict):
    reps = [model_flops(preset("hvt-s-1").replace(num_stages=m, num_classes=100)) for m in range(5)]
    f_err = max(abs(r.gflops / g - 1) for r, (g, _) in zip(reps, TABLE4))
    p_err = max(abs(r.mparams / p - 1) for r, (_, p) in zip(reps, TABLE4))
    totals = [r.total_flops for r in reps]
    decreasing = all(a > b for a, b in zip(totals, totals[1:]))
    verdict(2, f_err < 0.03 and p_err < 0.01 and decreasing,
            f"max FLOPs err {f_err:.2%}, max params err {p_err:.2%}, strictly decreasing {decreasing}")


# 3. scaling arithmetic under a 4.6G budget

EXAMPLES = {  # (heads, dim, blocks, res, patch) -> quoted GFLOPs
    (11, 704, 12, 224, 16): 4.51,
    (6, 384, 48, 224, 16): 4.33,
    (6, 384, 12, 192, 8): 4.35,
    (6, 384, 12, 384, 16): 4.48,
}


def test_criterion_3_scale_search(capsys, verdict):
    out = _cli(capsys, "scale-search", "--preset", "hvt-s-4", "--budget", 4.6, "--emit", "csv",
               "--heads", 6, 11, "--blocks", 12, 48, "--patch", 8, 16, "--res", 192, 224, 384)
    rows = {}
    for line in out.splitlines()[1:]:
        c = line.split(",")
        rows[tuple(int(v) for v in c[1:6])] = int(c[9]) / 1e9
    errs = {k: abs(rows[k] / g - 1) if k in rows else math.inf for k, g in EXAMPLES.items()}
    worst = max(errs.values())
    verdict(3, worst < 0.03, f"{sum(k in rows for k in EXAMPLES)}/4 examples found, max err {worst:.2%}")


# 4. compression ratio

def test_criterion_4_compression_ratio(verdict):
    rng = np.random.default_rng(0)
    n = 2 * rng.integers(1, 2000, size=10_000)
    d = rng.integers(1, 4000, size=10_000)
    alpha = np.array([compression_ratio(int(a), int(b)) for a, b in zip(n, d)])
    bounded = bool(np.all((alpha > 2) & (alpha < 4)))
    ratio = d / n
    order = np.argsort(ratio, kind="stable")
    r, a = ratio[order], alpha[order]
    step = np.diff(a)
    monotone = bool(np.all(step[np.diff(r) > 0] < 0) and np.all(np.abs(step[np.diff(r) == 0]) < 1e-15))
    spot = abs(compression_ratio(196, 384) - (2 + 2 / (12 * 384 / 196 + 1)))
    verdict(4, bounded and monotone and spot < 1e-6,
            f"bounded {bounded}, monotone {monotone}, spot error {spot:.1e}")


# 5. gradients

GRAD_CFG = ModelConfig(image_h=8, image_w=8, channels=1, patch_size=4, embed_dim=8, num_heads=2,
                       num_blocks=2, num_stages=1, num_classes=4)


def _op_errors():
    rng = np.random.default_rng(1)
    w = rng.standard_normal
    b, g, beta, c = Tensor(w((4, 2))), Tensor(w(5)), Tensor(w(5)), Tensor(w(4))
    win = np.array([[-1, 0, 1], [1, 2, 3], [3, 4, -1]])
    cases = [
        ((3, 4), lambda x: T.matmul(x, b)),
        ((3, 5), T.softmax_rows),
        ((3, 5), lambda x: T.layer_norm(x, g, beta)),
        ((3, 4), T.gelu),
        ((3, 4), lambda x: T.add(T.mul(x, x), c)),
        ((5, 3), lambda x: T.window_max(x, win)),
        ((5, 3), lambda x: T.window_mean(x, win)),
        ((3, 4), T.log_softmax),
    ]
    errs = []
    for shape, op in cases:
        x = Tensor(w(shape), requires_grad=True)
        weight = w(op(x).shape)
        errs.append(T.grad_check(lambda t, op=op, weight=weight: T.sum_(T.mul(op(t), weight)), x))
    return max(errs)


def test_criterion_5_gradients(verdict):
    t0 = time.perf_counter()
    model = init_model(GRAD_CFG, make_rng(0, 1))
    img = np.random.default_rng(2).standard_normal((1, 8, 8, 1))
    onehot = np.eye(4)[[1]]

    def loss(_):
        return T.mul(T.sum_(T.mul(T.log_softmax(hvt_forward(img, model), -1), onehot)), -1.0)
    e2e = max(T.grad_check(loss, p) for p in model.parameters().values())
    per_op = _op_errors()
    elapsed = time.perf_counter() - t0
    verdict(5, e2e < 1e-4 and per_op < 1e-6 and elapsed < 60,
            f"end-to-end {e2e:.1e}, per-op {per_op:.1e}, {elapsed:.1f} s")


# 6. structural invariants

def test_criterion_6_structure(verdict):
    checks = {}
    # schedule: exactly M pooling points, each the pooled length
    ok = True
    for blocks in range(1, 13):
        for m in range(0, blocks + 1):
            try:
                cfg = preset("hvt-s-1").replace(num_blocks=blocks, num_stages=m, pool_pad=1)
            except ConfigError:
                continue
            s = stage_schedule(cfg)
            lengths = list(s.seq_lengths) + [s.final_length]
            pools = [b for b in range(1, blocks + 1) if b in s.stage_starts]
            ok &= len(pools) == m
            for b in range(1, blocks + 1):
                want = pooled_length(lengths[b - 1], 3, 2, 1) if b in pools else lengths[b - 1]
                ok &= lengths[b] == want
    checks["schedule"] = ok

    micro = preset("micro")
    model = init_model(micro, make_rng(0, 1))
    p = model.blocks[0]
    for lin in (p.proj, p.fc2):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = np.random.default_rng(0).standard_normal((16, 16))
    checks["residual"] = bool(np.array_equal(block_forward(Tensor(x), p).data, x))

    flat = init_model(micro.replace(num_stages=0), make_rng(1, 1))
    perm = np.random.default_rng(1).permutation(16)

    def run(tokens):
        t = Tensor(tokens)
        for b in flat.blocks:
            t = block_forward(t, b)
        return head_classless(t, flat).data
    checks["permutation"] = float(np.max(np.abs(run(x) - run(x[perm])))) < 1e-12

    cls_model = init_model(micro.replace(num_stages=0, head_kind="class_token"), make_rng(2, 1))
    seq = np.random.default_rng(3).standard_normal((17, 16))
    other = seq.copy()
    other[1:] *= -7.0
    checks["cls head"] = bool(np.array_equal(head_cls(Tensor(seq), cls_model).data,
                                             head_cls(Tensor(other), cls_model).data))

    dom = True
    rng = np.random.default_rng(4)
    for n in (3, 8, 49, 196):
        t = Tensor(rng.standard_normal((n, 6)))
        for pad in (0, 1):
            w = windows_1d(n, 3, 2, pad)
            dom &= bool(np.all(T.window_max(t, w).data >= T.window_mean(t, w).data))
    checks["max>=avg"] = dom
    failed = [k for k, v in checks.items() if not v]
    verdict(6, not failed, "all five hold" if not failed else f"failed: {', '.join(failed)}")


# 7. desk-scale learning

ONE_CORE = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1",
            "MKL_NUM_THREADS": "1", "HVT_NO_COLOR": "1"}


def _train_cli(out, *flags):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "hvt", "train", "--preset", "micro", "--seed", "0",
                           "--out", str(out), *flags], env=ONE_CORE, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return time.perf_counter() - t0


def _final_top1(out):
    last = (out / "metrics.csv").read_text().splitlines()[-1].split(",")
    return int(last[0]), float(last[4])


def test_criterion_7_desk_scale_learning(tmp_path, verdict):
    t_a = _train_cli(tmp_path / "m1a")
    t_b = _train_cli(tmp_path / "m1b")
    t_0 = _train_cli(tmp_path / "m0", "--stages", "0")
    epochs, top1 = _final_top1(tmp_path / "m1a")
    _, top1_flat = _final_top1(tmp_path / "m0")
    identical = ((tmp_path / "m1a" / "metrics.csv").read_bytes() == (tmp_path / "m1b" / "metrics.csv").read_bytes()
                 and (tmp_path / "m1a" / "last.hvtc").read_bytes() == (tmp_path / "m1b" / "last.hvtc").read_bytes())
    f1 = model_flops(preset("micro")).total_flops
    f0 = model_flops(preset("micro").replace(num_stages=0)).total_flops
    saving = 1 - f1 / f0
    first = (tmp_path / "m1a" / "metrics.csv").read_text().splitlines()[1].split(",")
    ok = (epochs == 20 and top1 >= 0.80 and top1_flat >= 0.80 and identical and saving >= 0.40
          and max(t_a, t_b) < 300 and float(first[2]) < math.log(4) + 0.1)
    verdict(7, ok, f"M=1 top1 {top1:.3f} in {t_a:.0f} s, M=0 top1 {top1_flat:.3f} in {t_0:.0f} s, "
                   f"rerun identical {identical}, FLOPs saving {saving:.1%}")


# 8. persistence

def test_criterion_8_persistence(tmp_path, verdict):
    cfg = preset("micro").replace(pool_kind="conv1d")
    data = synth_dataset(0, 128, 64)
    s = TrainSettings(epochs=5, batch_size=16, lr=6e-3, seed=3)
    full = train(cfg, *data, s, metrics_path=tmp_path / "full.csv", checkpoint_dir=tmp_path / "full",
                 keep_epochs=True)
    ck_path = tmp_path / "full" / "epoch_005.hvtc"
    ck = load_checkpoint(ck_path)
    round_trip = encode_checkpoint(decode_checkpoint(ck_path.read_bytes())) == ck_path.read_bytes()
    round_trip &= all(full.model.parameters()[k].data.tobytes() == v.tobytes() for k, v in ck.params.items())
    resumed_ok = True
    for e in (1, 2, 4):
        res = train(cfg, *data, s, resume=tmp_path / "full" / f"epoch_{e:03d}.hvtc")
        resumed_ok &= [m.row() for m in res.history] == [m.row() for m in full.history[e:]]
    verdict(8, round_trip and resumed_ok, f"round trip bit-exact {round_trip}, resume exact {resumed_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
