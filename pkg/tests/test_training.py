import numpy as np
import pytest

from penletters.autodiff import Tensor, precision
from penletters.dataset import Batch, make_batches
from penletters.exceptions import CheckpointError, ChecksumError, NumericalError, SpecMismatchError
from penletters.model import CNNLSTMNet, ModelSpec
from penletters.training import (
    AdamState,
    ConfusionMatrix,
    MetricsRow,
    TrainConfig,
    adam_step,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    fit,
    read_checkpoint_header,
    read_metrics_csv,
    train_epoch,
    write_metrics_csv,
)

from conftest import random_processed

SMALL = ModelSpec.reduced()


def param(v):
    return {"p": Tensor(np.array(v, dtype=np.float64), dtype=np.float64)}


def test_adam_first_step_by_hand():
    p = param([0.0])
    state = adam_step(p, {"p": np.array([1.0])}, AdamState(lr=0.1, weight_decay=0.0))
    assert state.t == 1
    assert p["p"].item() == pytest.approx(-0.1, abs=1e-8)


def test_adam_zero_gradient_is_a_no_op():
    p = param([0.7, -2.0])
    state = adam_step(p, {"p": np.zeros(2)}, AdamState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p["p"].numpy(), [0.7, -2.0])
    assert state.t == 1


def test_adam_weight_decay_shrinks_positive_params():
    p = param([0.5])
    state = AdamState(lr=0.01, weight_decay=1e-3)
    for _ in range(3):
        before = p["p"].item()
        adam_step(p, {"p": np.zeros(1)}, state)
        assert p["p"].item() < before


def test_adam_zero_lr_is_identity():
    rng = np.random.default_rng(0)
    p = param(rng.normal(size=5))
    before = p["p"].numpy().copy()
    state = AdamState(lr=0.0)
    for _ in range(4):
        adam_step(p, {"p": rng.normal(size=5) * 100}, state)
    assert p["p"].numpy().tobytes() == before.tobytes()
    assert (state.v["p"] >= 0).all() and state.m["p"].shape == (5,)


def test_adam_non_finite_gradient_names_parameter():
    p = {"conv1.weight": Tensor([1.0]), "fc.bias": Tensor([2.0])}
    with pytest.raises(NumericalError, match="fc.bias"):
        adam_step(p, {"fc.bias": np.array([np.nan])}, AdamState())
    assert p["conv1.weight"].item() == 1.0


def test_train_epoch_with_zero_lr_keeps_parameters():
    model = CNNLSTMNet(SMALL)
    before = {n: p.numpy().copy() for n, p in model.named_parameters()}
    train_epoch(model, make_batches(random_processed(4), 4), AdamState(lr=0.0, weight_decay=0.0))
    assert all(before[n].tobytes() == p.numpy().tobytes() for n, p in model.named_parameters())


def test_train_epoch_reduces_loss_on_toy_set():
    model = CNNLSTMNet(SMALL)
    batches = make_batches(random_processed(4), 4)
    state = AdamState(lr=3e-3)
    losses = [train_epoch(model, batches, state)[0] for _ in range(50)]
    smooth = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert smooth[-1] < smooth[0] - 0.5
    assert np.mean(np.diff(smooth) < 0) > 0.9


def test_train_epoch_empty():
    with pytest.raises(ValueError):
        train_epoch(CNNLSTMNet(SMALL), [], AdamState())


class FixedPredictor:
    """Stands in for a model: returns logits that favour a chosen class."""

    def __init__(self, choose):
        self.choose = choose
        self.spec = SMALL

    def eval(self):
        return self

    def __call__(self, x):
        labels = self.choose(x.numpy())
        logits = np.zeros((len(labels), 52))
        logits[np.arange(len(labels)), labels] = 5.0
        return Tensor(logits)


def labelled_batches(labels):
    x = np.zeros((len(labels), 1, 4))
    x[:, 0, 0] = labels
    return [Batch(Tensor(x[:6]), np.array(labels[:6])), Batch(Tensor(x[6:]), np.array(labels[6:]))]


def test_evaluate_perfect_predictor():
    labels = [0, 3, 3, 7, 51, 20, 20, 9, 1, 0]
    res = evaluate(FixedPredictor(lambda x: x[:, 0, 0].astype(int)), labelled_batches(labels))
    assert res.accuracy == 1.0
    cm = res.confusion.counts
    assert cm.trace() == 10 and (cm - np.diag(np.diag(cm))).sum() == 0
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels, minlength=52))


def test_evaluate_constant_predictor():
    labels = [0, 3, 3, 7, 51, 3, 20, 9, 1, 0]
    res = evaluate(FixedPredictor(lambda x: np.full(len(x), 3)), labelled_batches(labels))
    assert res.accuracy == pytest.approx(0.3)
    cm = res.confusion.counts
    assert np.count_nonzero(cm.sum(axis=0)) == 1 and cm[:, 3].sum() == 10
    assert res.confusion.total == 10


def test_argmax_ties_go_to_lowest_index():
    class Flat(FixedPredictor):
        def __call__(self, x):
            return Tensor(np.zeros((len(x.numpy()), 52)))

    res = evaluate(Flat(None), labelled_batches([5] * 10))
    assert res.confusion.counts[5, 0] == 10


def test_confusion_csv_round_trip(tmp_path):
    cm = ConfusionMatrix()
    cm.update([0, 1, 51], [0, 2, 51])
    cm.to_csv(tmp_path / "cm.csv")
    header = (tmp_path / "cm.csv").read_text().splitlines()[0]
    assert header.startswith("a,b,c") and header.endswith("Y,Z")
    np.testing.assert_array_equal(ConfusionMatrix.from_csv(tmp_path / "cm.csv").counts, cm.counts)


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow(1, 3.5, 0.1), MetricsRow(2, 0.1 + 0.2, 0.25, 4.0, 1 / 3)]
    write_metrics_csv(rows, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == rows
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "1,3.5,0.1,,"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, final_epoch=6)
    assert TrainConfig().adam().lr == 3e-5 and TrainConfig().adam().weight_decay == 1e-3


def small_fit(tmp_path, **kw):
    train, test = random_processed(8, seed=1), random_processed(4, seed=2)
    config = TrainConfig(**{"batch_size": 4, "lr": 1e-3, **kw})
    return fit(train, test, SMALL, config, tmp_path)


def test_fit_single_epoch(tmp_path):
    res = small_fit(tmp_path, epochs=1)
    assert len(res.metrics) == 1
    assert list(res.checkpoints) == [1]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_0001.ckpt"]
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 2
    assert (tmp_path / "confusion_matrix.csv").exists()


def test_fit_is_deterministic(tmp_path):
    small_fit(tmp_path / "a", epochs=3, seed=4)
    small_fit(tmp_path / "b", epochs=3, seed=4)
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoints/epoch_0003.ckpt").read_bytes() == \
        (tmp_path / "b/checkpoints/epoch_0003.ckpt").read_bytes()


def test_fit_eval_cadence(tmp_path):
    res = small_fit(tmp_path, epochs=10, eval_every=5, checkpoint_every=4)
    filled = [r.epoch for r in res.metrics if r.test_acc is not None]
    assert filled == [5, 10]
    assert all(r.test_loss is None for r in res.metrics if r.epoch not in (5, 10))
    assert sorted(res.checkpoints) == [4, 8, 10]


def test_fit_final_epoch_pick(tmp_path):
    res = small_fit(tmp_path, epochs=4, eval_every=10, checkpoint_every=10, final_epoch=2)
    assert sorted(res.checkpoints) == [2, 4]
    assert res.final_checkpoint == tmp_path / "checkpoints/epoch_0002.ckpt"
    assert [r.epoch for r in res.metrics if r.test_acc is not None] == [2]


def test_fit_without_test_set(tmp_path):
    res = fit(random_processed(4), [], SMALL, TrainConfig(epochs=2, batch_size=4), tmp_path)
    assert all(r.test_acc is None for r in res.metrics)
    assert not (tmp_path / "confusion_matrix.csv").exists()
    with pytest.raises(ValueError):
        fit([], [], SMALL, TrainConfig(epochs=1))


def test_train_metrics_match_evaluate(tmp_path):
    train = random_processed(8, seed=1)
    res = fit(train, [], SMALL, TrainConfig(epochs=2, batch_size=4, lr=1e-3))
    again = evaluate(res.model, make_batches(train, 4))
    assert again.loss == res.metrics[-1].train_loss
    assert again.accuracy == res.metrics[-1].train_acc


def trained_model():
    model = CNNLSTMNet(SMALL, seed=3)
    train_epoch(model, make_batches(random_processed(8), 4), AdamState(lr=1e-2))
    return model


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = trained_model()
    checkpoint_save(model, tmp_path / "m.ckpt", {"note": "x"})
    loaded = checkpoint_load(tmp_path / "m.ckpt", SMALL)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.numpy().tobytes() == p2.numpy().tobytes()
    for (n1, b1), (n2, b2) in zip(model.named_buffers(), loaded.named_buffers()):
        assert n1 == n2 and b1.tobytes() == b2.tobytes()
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3, 32)))
    assert model.eval()(x).numpy().tobytes() == loaded.eval()(x).numpy().tobytes()
    assert read_checkpoint_header(tmp_path / "m.ckpt").meta == {"note": "x"}


def test_checkpoint_spec_mismatch(tmp_path):
    checkpoint_save(trained_model(), tmp_path / "m.ckpt")
    with pytest.raises(SpecMismatchError):
        checkpoint_load(tmp_path / "m.ckpt", ModelSpec.reduced(input_channels=4))


def test_checkpoint_corrupted_byte(tmp_path):
    checkpoint_save(trained_model(), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[-100] ^= 0xFF
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        checkpoint_load(tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path):
    checkpoint_save(trained_model(), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(tmp_path / "m.ckpt")
    (tmp_path / "m.ckpt").write_bytes(raw[:50])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "m.ckpt")


def test_checkpoint_restores_precision(tmp_path):
    checkpoint_save(trained_model(), tmp_path / "m.ckpt")
    with precision("f64"):
        loaded = checkpoint_load(tmp_path / "m.ckpt")
    assert loaded.parameters()[0].dtype == np.float64
