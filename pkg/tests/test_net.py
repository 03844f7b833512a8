import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgf.errors import ModelFormatError, NoTriplets, ShapeError
from cgf.net import (
    AdamState,
    EmbeddingNet,
    IndexedTriplets,
    NetConfig,
    TripletBatch,
    adam_step,
    embed_all,
    init_net,
    load_model,
    loss_and_gradient,
    save_model,
    train,
    triplet_loss,
)

from helpers import finite_difference_check, reference_loss


def small_batch(rng, n=8, d=6):
    return TripletBatch(*(rng.normal(size=(n, d)) for _ in range(3)))


def test_default_architecture():
    net = init_net(NetConfig(2244, output_dim=32), seed=0)
    assert [w.shape for w in net.weights] == [(512, 2244)] + [(512, 512)] * 4 + [(32, 512)]
    assert all(not b.any() for b in net.biases)
    std = np.concatenate([w.ravel() for w in net.weights]).std()
    assert abs(std - 0.1) < 1e-3


def test_init_is_seeded():
    a, b = init_net(NetConfig(10, (7,), 3), 5), init_net(NetConfig(10, (7,), 3), 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))


def test_loss_matches_reference():
    rng = np.random.default_rng(0)
    net = init_net(NetConfig(6, (5, 5), 3), 0)
    for w in net.weights:
        w *= 5
    b = small_batch(rng)
    want = reference_loss(net.weights, net.biases, 1.0, b.anchors, b.positives, b.negatives)
    assert triplet_loss(net, b) == pytest.approx(want, rel=1e-12)


def test_identical_inputs_give_margin():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6))
    net = init_net(NetConfig(6, (5,), 3), 1)
    assert triplet_loss(net, TripletBatch(x, x, x)) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    err, n = finite_difference_check(seed)
    assert n > 50
    assert err < 1e-4


def test_inactive_triplets_give_zero_gradient():
    rng = np.random.default_rng(2)
    net = init_net(NetConfig(6, (5,), 3), 2)
    a = rng.normal(size=(3, 6))
    loss, grads = loss_and_gradient(net, TripletBatch(a, a, a + 100.0))
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def test_adam_step_matches_hand_formula():
    rng = np.random.default_rng(3)
    net = init_net(NetConfig(4, (3,), 2), 3)
    before = [p.copy() for p in net.params()]
    state = AdamState.for_net(net, lr=1e-2)
    g1 = [rng.normal(size=p.shape) for p in before]
    g2 = [rng.normal(size=p.shape) for p in before]
    adam_step(net, state, g1)
    adam_step(net, state, g2)
    for p0, a, b, p in zip(before, g1, g2, net.params()):
        x = p0.copy()
        m = v = 0.0
        for t, g in ((1, a), (2, b)):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p, x, rtol=0, atol=1e-14)


def test_adam_rejects_wrong_gradient_shape():
    net = init_net(NetConfig(4, (3,), 2), 0)
    with pytest.raises(ShapeError):
        adam_step(net, AdamState.for_net(net), [np.zeros(1)] * 4)


def test_training_reduces_loss_and_is_deterministic():
    rng = np.random.default_rng(4)
    centers = rng.normal(size=(20, 10))
    a = np.repeat(np.arange(20), 30)
    pool = np.concatenate([centers + 0.05 * rng.normal(size=centers.shape) for _ in range(3)])
    trip = IndexedTriplets(pool, a, a + 20, (a + rng.integers(1, 20, size=a.size)) % 20 + 40)
    runs = []
    for _ in range(2):
        net = init_net(NetConfig(10, (16, 16), 4), 0)
        runs.append(train(net, trip, epochs=4, batch_size=32, seed=9, lr=1e-2))
    means = runs[0].epoch_means()
    assert means[-1] < 0.7 * means[0]
    assert runs[0].losses == runs[1].losses
    assert all(np.array_equal(x, y) for x, y in zip(runs[0].net.params(), runs[1].net.params()))


def test_permutations_are_recorded():
    rng = np.random.default_rng(5)
    b = small_batch(rng, n=10)
    res = train(init_net(NetConfig(6, (4,), 2), 0), b, epochs=2, batch_size=4, keep_permutations=True)
    assert len(res.permutations) == 2
    assert all(sorted(p) == list(range(10)) for p in res.permutations)
    assert len(res.losses) == 6 and res.epoch_of_batch == [0, 0, 0, 1, 1, 1]


def test_no_triplets():
    with pytest.raises(NoTriplets):
        empty = np.zeros(0, dtype=np.int64)
        train(init_net(NetConfig(6, (4,), 2), 0), IndexedTriplets(np.zeros((3, 6)), empty, empty, empty))


def test_forward_shape_errors():
    net = init_net(NetConfig(6, (4,), 2), 0)
    assert net(np.zeros(6)).shape == (2,)
    with pytest.raises(ShapeError):
        net(np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        EmbeddingNet([np.zeros((4, 6)), np.zeros((2, 3))], [np.zeros(4), np.zeros(2)])


def test_model_round_trip(tmp_path):
    net = init_net(NetConfig(7, (5, 4), 3, margin=0.5), 11)
    save_model(tmp_path / "m.cgf", net)
    back = load_model(tmp_path / "m.cgf")
    assert back.margin == 0.5
    assert all(np.array_equal(x, y) for x, y in zip(net.params(), back.params()))
    save_model(tmp_path / "m2.cgf", back)
    assert (tmp_path / "m.cgf").read_bytes() == (tmp_path / "m2.cgf").read_bytes()


@pytest.mark.parametrize("mutate", ["magic", "header", "truncate", "nan"])
def test_model_format_errors(tmp_path, mutate):
    net = init_net(NetConfig(3, (2,), 2), 0)
    save_model(tmp_path / "m.cgf", net)
    data = bytearray((tmp_path / "m.cgf").read_bytes())
    if mutate == "magic":
        data[0:3] = b"XXX"
    elif mutate == "header":
        data = data.replace(b"dims:", b"dimz:")
    elif mutate == "truncate":
        data = data[:-8]
    else:
        data[-8:] = np.array([np.nan], "<f8").tobytes()
    (tmp_path / "m.cgf").write_bytes(bytes(data))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.cgf")


def test_embed_all_skips_invalid_rows():
    net = init_net(NetConfig(4, (3,), 2), 0)
    X = np.arange(20, dtype=float).reshape(5, 4)
    idx, out = embed_all(net, X, valid=np.array([1, 0, 1, 1, 0], bool))
    assert idx.tolist() == [0, 2, 3]
    assert np.array_equal(out, net(X[[0, 2, 3]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9))
def test_loss_is_nonnegative_and_bounded_by_hinge(seed, n):
    rng = np.random.default_rng(seed)
    net = init_net(NetConfig(5, (4,), 3), seed)
    b = small_batch(rng, n=n, d=5)
    loss = triplet_loss(net, b)
    fa, fp = net(b.anchors), net(b.positives)
    assert 0.0 <= loss <= ((fa - fp) ** 2).sum(1).mean() + 1.0 + 1e-12
