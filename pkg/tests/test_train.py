import math

import numpy as np
import pytest

from hvt import tensor as T
from hvt.config import ConfigError, preset
from hvt.data import channel_stats, normalize, synth_dataset
from hvt.model import hvt_forward, init_model
from hvt.rng import make_rng
from hvt.train import (METRICS_HEADER, TrainSettings, cosine_lr, cross_entropy, evaluate,
                       settings_from_meta, topk_hits, train, _meta)

MICRO = preset("micro")
SMALL = TrainSettings(epochs=3, batch_size=16, lr=3e-3, seed=5)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(5, 96, 32)


# loss and metrics


def test_cross_entropy_uniform():
    assert cross_entropy(T.Tensor(np.zeros(7)), 3).item() == pytest.approx(math.log(7), abs=1e-15)


def test_cross_entropy_confident():
    logits = np.zeros(4)
    logits[2] = 20.0
    assert cross_entropy(T.Tensor(logits), 2).item() == pytest.approx(0.0, abs=1e-8)


def test_cross_entropy_hand_value():
    loss = cross_entropy(T.Tensor([0.0, math.log(3)]), 0).item()
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_stable_for_large_logits():
    assert np.isfinite(cross_entropy(T.Tensor([[1000.0, -1000.0, 0.0]]), [1]).item())


def test_cross_entropy_label_smoothing():
    c = 4
    logits = np.array([2.0, 0.0, -1.0, 0.5])
    logp = logits - np.log(np.exp(logits).sum())
    target = np.full(c, 0.1 / c)
    target[0] += 0.9
    got = cross_entropy(T.Tensor(logits), 0, label_smoothing=0.1).item()
    assert got == pytest.approx(-(target * logp).sum(), rel=1e-14)


def test_cross_entropy_bad_label():
    with pytest.raises(ConfigError):
        cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])


def test_topk_crafted_three_samples():
    logits = np.zeros((3, 10))
    logits[0, 4] = 9.0                                        # top-1 hit
    logits[1, :4] = [5, 4, 3, 2]
    logits[1, 6] = 1.0                                        # rank 5
    logits[2, [0, 1, 2]] = 7.0
    logits[2, 8] = 6.5                                        # rank 4
    labels = np.array([4, 6, 8])
    assert topk_hits(logits, labels, 1).mean() == pytest.approx(1 / 3)
    assert topk_hits(logits, labels, 5).mean() == 1.0


def test_topk_ties_prefer_lower_index():
    logits = np.zeros((1, 6))
    assert topk_hits(logits, np.array([0]), 1).all()
    assert not topk_hits(logits, np.array([1]), 1).any()
    assert topk_hits(logits, np.array([4]), 5).all()
    assert not topk_hits(logits, np.array([5]), 5).any()


def test_evaluate_few_classes_top5_is_one(data):
    _, val = data
    top1, top5, loss = evaluate(init_model(MICRO, make_rng(0, 1)), val)
    assert top5 == 1.0 and 0.0 <= top1 <= 1.0 and loss > 0


def test_evaluate_perfect_model(data):
    # a head that reads off the label through the bias is perfect on a one-class split
    _, val = data
    one = type(val)(val.images[val.labels == 2], val.labels[val.labels == 2], 4, "val")
    model = init_model(MICRO, make_rng(0, 1))
    model.head_fc.weight.data[:] = 0.0
    model.head_fc.bias.data[:] = [0, 0, 5.0, 0]
    assert evaluate(model, one)[0] == 1.0


def test_initial_loss_near_log_classes(data):
    train_set, _ = data
    for seed in range(3):
        model = init_model(MICRO, make_rng(seed, 1))
        x = normalize(train_set.images, *channel_stats(train_set))
        loss = cross_entropy(hvt_forward(x, model), train_set.labels).item()
        assert abs(loss - math.log(4)) < 0.2


@pytest.mark.parametrize("cfg", [MICRO, MICRO.replace(pool_kind="conv1d", num_stages=2),
                                 MICRO.replace(num_stages=0, head_kind="class_token")])
def test_gradient_flow(cfg, data):
    train_set, _ = data
    model = init_model(cfg, make_rng(0, 1))
    x = normalize(train_set.images[:16], *channel_stats(train_set))
    T.backward(cross_entropy(hvt_forward(x, model), train_set.labels[:16]))
    for name, p in model.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name


# schedule


def test_cosine_lr_endpoints():
    s = TrainSettings(epochs=10, lr=1e-3, min_lr=1e-6)
    lrs = [cosine_lr(e, s) for e in range(10)]
    assert lrs[0] == 1e-3
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(10, s) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(5, s) == pytest.approx((1e-3 + 1e-6) / 2)


# training loop


def test_zero_epochs_empty_history(data, tmp_path):
    res = train(MICRO, *data, TrainSettings(epochs=0), metrics_path=tmp_path / "m.csv")
    assert res.history == []
    assert (tmp_path / "m.csv").read_text() == ",".join(METRICS_HEADER) + "\n"


def test_batch_larger_than_dataset(data):
    with pytest.raises(ConfigError):
        train(MICRO, *data, TrainSettings(batch_size=97))


def test_geometry_mismatch(data):
    with pytest.raises(ConfigError):
        train(MICRO.replace(image_h=20, image_w=20), *data, SMALL)


def test_bit_identical_reruns(data, tmp_path):
    for name in ("a", "b"):
        train(MICRO, *data, SMALL, metrics_path=tmp_path / f"{name}.csv",
              checkpoint_dir=tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a" / "last.hvtc").read_bytes() == (tmp_path / "b" / "last.hvtc").read_bytes()


def test_seed_changes_run(data):
    a = train(MICRO, *data, SMALL).history
    b = train(MICRO, *data, TrainSettings(epochs=3, batch_size=16, lr=3e-3, seed=6)).history
    assert a[-1].train_loss != b[-1].train_loss


def test_metrics_csv_rows(data, tmp_path):
    res = train(MICRO, *data, SMALL, metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss,val_top1,val_top5"
    assert len(lines) == 4
    assert [float(v) for v in lines[2].split(",")] == [
        2, res.history[1].lr, res.history[1].train_loss, res.history[1].val_loss,
        res.history[1].val_top1, res.history[1].val_top5]


def test_loss_decreases(data):
    hist = train(MICRO, *data, TrainSettings(epochs=4, batch_size=16, lr=5e-3)).history
    assert hist[-1].train_loss < hist[0].train_loss


@pytest.mark.parametrize("at", [1, 2])
def test_resume_matches_uninterrupted(data, tmp_path, at):
    s = TrainSettings(epochs=4, batch_size=16, lr=3e-3, seed=2, warmup_epochs=1)
    full = train(MICRO, *data, s, metrics_path=tmp_path / "full.csv",
                 checkpoint_dir=tmp_path / "full", keep_epochs=True)
    ck = tmp_path / "full" / f"epoch_{at:03d}.hvtc"
    part_csv = tmp_path / "part.csv"
    lines = (tmp_path / "full.csv").read_text().splitlines(keepends=True)
    part_csv.write_text("".join(lines[:1 + at]))
    res = train(MICRO, *data, s, metrics_path=part_csv, checkpoint_dir=tmp_path / "part", resume=ck)
    assert [m.row() for m in res.history] == [m.row() for m in full.history[at:]]
    assert part_csv.read_bytes() == (tmp_path / "full.csv").read_bytes()
    assert (tmp_path / "part" / "last.hvtc").read_bytes() == (tmp_path / "full" / "last.hvtc").read_bytes()


def test_resume_rejects_other_config(data, tmp_path):
    train(MICRO, *data, SMALL, checkpoint_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(MICRO.replace(num_stages=0), *data, SMALL, resume=tmp_path / "last.hvtc")


def test_settings_meta_round_trip():
    s = TrainSettings(epochs=7, lr=1.5e-3, flip=False, label_smoothing=0.1)
    assert settings_from_meta(_meta(s, (np.zeros(1), np.ones(1)))) == s
