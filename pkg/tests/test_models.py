import numpy as np
import pytest

from sptlab import autodiff as ad
from sptlab.data import Dataset, one_hot
from sptlab.errors import FormatError, UsageError
from sptlab.optim import Adam
from sptlab.models import (MODEL_IDS, accuracy, build, checkpoint_bytes, load_checkpoint,
                           save_checkpoint, train_classifier, train_step)

# Worked out by hand from the layer table (SAME padding, 28x28 input, 2x2 pools).
# C_p:  conv 5*5*1*32+32, conv 5*5*32*64+64, fc 3136*1024+1024, fc 1024*10+10
# C_a1: conv 4*4*1*32+32, conv 4*4*32*32+32, conv 4*4*32*64+64, fc 3136*1024+1024, fc 10250
# C_a2: the same with 3x3 kernels
# C_a3: conv 3*3*1*32+32, fc 6272*1024+1024, fc 1024*512+512, fc 512*10+10
PARAM_COUNTS = {
    "C_p": 3_274_634,
    "C_a0": 3_274_634,
    "C_a1": 3_272_330,
    "C_a2": 3_250_602,
    "C_a3": 6_953_802,
}


def test_layer_sequences():
    assert build("C_p").spec.describe(include_inserted=False) == [
        "Conv(32,5,5,1)", "ReLU", "MaxPool(2,2)", "Conv(64,5,5,1)", "ReLU", "MaxPool(2,2)",
        "FC(1024)", "FC(10)", "Softmax"]
    assert build("C_a3").spec.describe() == [
        "Conv(32,3,3,1)", "ReLU", "MaxPool(2,2)", "FC(1024)", "ReLU", "FC(512)", "ReLU", "FC(10)",
        "Softmax"]


def test_inserted_relus():
    # table omits the activation after FC(1024) and after the third conv; we insert them
    assert build("C_a1").spec.describe() == [
        "Conv(32,4,4,1)", "ReLU", "MaxPool(2,2)", "Conv(32,4,4,1)", "ReLU", "MaxPool(2,2)",
        "Conv(64,4,4,1)", "ReLU", "FC(1024)", "ReLU", "FC(10)", "Softmax"]


@pytest.mark.parametrize("mid", MODEL_IDS)
def test_parameter_counts(mid):
    assert build(mid).num_parameters() == PARAM_COUNTS[mid]


def test_flatten_size_cp():
    assert build("C_p").params["fc1.weight"].shape == (64 * 7 * 7, 1024)


@pytest.mark.parametrize("mid", MODEL_IDS)
def test_forward_gives_ten_probabilities(mid, rng):
    probs = build(mid).predict(rng.uniform(0, 1, (3, 1, 28, 28)))
    assert probs.shape == (3, 10)
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_predict_pure(rng):
    m = build("C_a2")
    x = rng.uniform(0, 1, (4, 1, 28, 28))
    np.testing.assert_array_equal(m.predict(x), m.predict(x))


def test_seeded_build_identical():
    a, b = build("C_a1", seed=7), build("C_a1", seed=7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    c = build("C_a1", seed=8)
    assert not np.array_equal(a.params["conv1.kernel"], c.params["conv1.kernel"])


def test_default_seeds_separate_cp_and_ca0():
    assert not np.array_equal(build("C_p").params["conv1.kernel"], build("C_a0").params["conv1.kernel"])


def test_truncated_init():
    m = build("C_p")
    w = m.params["fc1.weight"]
    assert np.abs(w).max() <= 0.2
    assert abs(w.std() - 0.088) < 0.005  # sd of a normal(0, 0.1) cut at 2 sigma
    assert np.all(m.params["fc1.bias"] == 0.1)


def test_unknown_model():
    with pytest.raises(UsageError):
        build("C_x")


def test_logits_match_manual_forward(rng):
    """C_a3 forward pass rebuilt from plain numpy loops for one image."""
    m = build("C_a3", seed=3)
    x = rng.uniform(0, 1, (1, 1, 28, 28))
    p = m.params
    xp = np.pad(x[0, 0], 1)
    conv = np.zeros((32, 28, 28))
    for f in range(32):
        for i in range(28):
            for j in range(28):
                conv[f, i, j] = (xp[i:i + 3, j:j + 3] * p["conv1.kernel"][f, 0]).sum() + p["conv1.bias"][f]
    conv = np.maximum(conv, 0)
    pooled = conv.reshape(32, 14, 2, 14, 2).max(axis=(2, 4))
    h = np.maximum(pooled.reshape(-1) @ p["fc1.weight"] + p["fc1.bias"], 0)
    h = np.maximum(h @ p["fc2.weight"] + p["fc2.bias"], 0)
    logits = h @ p["fc3.weight"] + p["fc3.bias"]
    got = m.logits(ad.Tensor(x)).data[0]
    np.testing.assert_allclose(got, logits, rtol=1e-10, atol=1e-10)


def _twenty_steps(mid, batch):
    x, y = batch
    m = build(mid).copy()
    opt = Adam(m.params, lr=1e-3)
    return [train_step(m, opt, x, y) for _ in range(20)]


@pytest.fixture(scope="module")
def fixed_batch(mnist_train):
    sub = mnist_train.subset(64)
    return sub.images(), one_hot(sub.labels)


@pytest.mark.xfail(strict=True, reason=(
    "with truncated-normal(0.1) weights and 0.1 biases the initial logits are large and the "
    "first Adam steps at lr 1e-3 overshoot; loss rises for 2-5 steps before falling"))
@pytest.mark.parametrize("mid", MODEL_IDS)
def test_loss_strictly_decreases_first_twenty_steps(mid, fixed_batch):
    losses = _twenty_steps(mid, fixed_batch)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


@pytest.mark.parametrize("mid", MODEL_IDS)
def test_loss_falls_over_twenty_steps(mid, fixed_batch):
    losses = _twenty_steps(mid, fixed_batch)
    assert losses[-1] < 0.5 * losses[0], losses


def test_zero_epochs_is_noop(rng):
    ds = Dataset("mnist", "train", rng.integers(0, 256, (8, 28, 28), dtype=np.uint8), np.arange(8) % 10)
    m = build("C_a3")
    out = train_classifier(m, ds, epochs=0)
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], out.params[k])


def test_training_does_not_touch_input_model(rng):
    ds = Dataset("mnist", "train", rng.integers(0, 256, (16, 28, 28), dtype=np.uint8), np.arange(16) % 10)
    m = build("C_a3")
    before = checkpoint_bytes(m)
    train_classifier(m, ds, epochs=1)
    assert checkpoint_bytes(m) == before


def test_training_deterministic(rng):
    ds = Dataset("mnist", "train", rng.integers(0, 256, (40, 28, 28), dtype=np.uint8), np.arange(40) % 10)
    a = train_classifier(build("C_a3"), ds, epochs=1, batch_size=16, seed=3)
    b = train_classifier(build("C_a3"), ds, epochs=1, batch_size=16, seed=3)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_checkpoint_round_trip(tmp_path, rng):
    m = build("C_a1", seed=11)
    m.metadata["note"] = "x"
    path = save_checkpoint(m, tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    assert back.id == "C_a1"
    assert back.seed == 11
    assert back.metadata["note"] == "x"
    x = rng.uniform(0, 1, (3, 1, 28, 28))
    np.testing.assert_array_equal(m.predict(x), back.predict(x))


def test_checkpoint_bad_magic(tmp_path):
    path = save_checkpoint(build("C_a3"), tmp_path / "a.ckpt")
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_corrupt_payload(tmp_path):
    path = save_checkpoint(build("C_a3"), tmp_path / "a.ckpt")
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(build("C_a3"), tmp_path / "a.ckpt")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_accuracy_definition():
    m = build("C_a3")
    x = np.zeros((5, 1, 28, 28))
    pred = m.classify(x)
    assert accuracy(m, x, pred) == 1.0
    assert accuracy(m, x, (pred + 1) % 10) == 0.0


def test_small_subset_fits(mnist_train):
    """512 training images, five epochs: the network should memorise most of them."""
    sub = mnist_train.subset(512)
    m = train_classifier(build("C_p"), sub, epochs=5, seed=0)
    assert accuracy(m, sub.images(), sub.labels) > 0.9
