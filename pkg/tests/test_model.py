import numpy as np
import pytest
from sklearn.svm import LinearSVC

from cases import random_pair_batch
from oracles import max_rel_err
from pfid.data import Dataset, SynthConfig, generate_synthetic
from pfid.model import (
    NetworkConfig,
    SGDState,
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    embed,
    forward,
    init_network,
    load_checkpoint,
    predict,
    save_checkpoint,
    sgd_step,
    train,
)
from pfid.numerics import finite_difference_gradient


def small_net(**kw):
    return init_network(NetworkConfig(input_dim=5, num_classes=3, hidden_dims=(7,), embedding_dim=4, **kw))


def test_init_deterministic_and_shaped():
    a, b = small_net(seed=3), small_net(seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))
    assert a.weights[-1].shape[1] == 3
    for w in a.weights:
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[0])
    assert not any(b.any() for b in a.biases)


def test_forward_shapes_and_zero_weights():
    net = small_net()
    emb, logits = forward(net, np.ones(5))
    assert emb.shape == (4,) and logits.shape == (3,)
    for w in net.weights:
        w[:] = 0
    _, logits = forward(net, np.arange(5.0))
    assert np.all(logits == logits[0])
    with pytest.raises(ValueError, match="input dim"):
        forward(net, np.ones(4))


def test_forward_is_deterministic():
    net = small_net(seed=1)
    x = np.random.default_rng(0).normal(size=(6, 5))
    a, b = forward(net, x), forward(net, x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_lr_schedule():
    cfg = TrainConfig(epochs=40, learning_rate=1e-3, lr_decay_epochs=(25, 35), lr_decay_factor=0.1)
    assert cfg.lr_at(10) == pytest.approx(1e-3, rel=1e-12)
    assert cfg.lr_at(30) == pytest.approx(1e-4, rel=1e-12)
    assert cfg.lr_at(38) == pytest.approx(1e-5, rel=1e-12)
    assert cfg.lr_at(25) == pytest.approx(1e-4, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_decay_epochs=(25,))
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_epochs=(30, 20))
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="arcface")


def test_zero_gradient_step_is_identity():
    net = small_net(seed=2)
    before = [p.copy() for p in net.params]
    sgd_step(net, [np.zeros_like(p) for p in net.params], TrainConfig(weight_decay=0.0), 0, SGDState())
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params))


def test_single_step_matches_closed_form():
    # f(theta) = theta^2 on every parameter entry; two steps to exercise momentum
    net = small_net(seed=4)
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    state = SGDState()
    theta0 = net.weights[0][0, 0]
    sgd_step(net, [2 * p for p in net.params], cfg, 0, state)
    v1 = 2 * theta0 + 0.01 * theta0
    theta1 = theta0 - 0.1 * v1
    assert net.weights[0][0, 0] == pytest.approx(theta1, rel=1e-14)
    sgd_step(net, [2 * p for p in net.params], cfg, 0, state)
    v2 = 0.9 * v1 + 2 * theta1 + 0.01 * theta1
    assert net.weights[0][0, 0] == pytest.approx(theta1 - 0.1 * v2, rel=1e-14)


def test_non_finite_gradient_aborts():
    net = small_net()
    grads = [np.zeros_like(p) for p in net.params]
    grads[1][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        sgd_step(net, grads, TrainConfig(), 0, SGDState())


@pytest.mark.parametrize("mode", ["ce", "pfid", "siamese"])
def test_end_to_end_parameter_gradient(mode):
    rng = np.random.default_rng(5)
    cfg = NetworkConfig(input_dim=3, num_classes=2, hidden_dims=(5,), embedding_dim=4, seed=1)
    net = init_network(cfg)
    for b in net.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    batch, labels = random_pair_batch(rng, 2, 2, pool_size=8)
    x = rng.normal(size=(4, 3))
    _, grads = batch_loss(net, x, labels, batch, mode, 1.0)
    for k, p in enumerate(net.params):
        def f(v, k=k):
            saved = net.params[k].copy()
            net.params[k][...] = v
            val = batch_loss(net, x, labels, batch, mode, 1.0)[0]
            net.params[k][...] = saved
            return val

        numeric = finite_difference_gradient(f, p.copy(), 1e-5)
        assert max_rel_err(grads[k].ravel(), numeric.ravel()) < 1e-4, f"block {k}"


def separable_toy():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(loc=+2.0, size=(20, 4)), rng.normal(loc=-2.0, size=(20, 4))])
    return Dataset(x, np.repeat([1, 2], 20), 2)


def test_ce_fits_linearly_separable_toy():
    ds = separable_toy()
    # independent check that the toy set is linearly separable
    svm = LinearSVC(C=1e4, max_iter=100_000).fit(ds.features, ds.labels)
    assert svm.score(ds.features, ds.labels) == 1.0
    tc = TrainConfig(epochs=30, loss_mode="ce", learning_rate=1e-2, lr_decay_epochs=(), seed=0)
    net, history = train(ds, NetworkConfig(4, 2, hidden_dims=(8,), embedding_dim=4), tc)
    assert len(history) == 30
    assert np.mean(predict(net, ds.features) == ds.labels) == 1.0


@pytest.mark.parametrize("mode", ["ce", "pfid", "siamese"])
def test_training_is_deterministic_and_finite(mode):
    ds = generate_synthetic(SynthConfig(num_identities=6, samples_per_identity=(8, 12), seed=1))
    nc = NetworkConfig(ds.dim, ds.num_classes, seed=2)
    tc = TrainConfig(epochs=4, loss_mode=mode, lr_decay_epochs=(2,), seed=3)
    a, ha = train(ds, nc, tc)
    b, hb = train(ds, nc, tc)
    assert ha == hb and all(np.isfinite(ha))
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


def test_loss_modes_share_batches_and_initial_forward():
    ds = generate_synthetic(SynthConfig(num_identities=5, samples_per_identity=(6, 9), seed=4))
    nc = NetworkConfig(ds.dim, ds.num_classes, seed=0)
    seen = {}
    for mode in ("ce", "pfid"):
        batches = []
        train(ds, nc, TrainConfig(epochs=1, loss_mode=mode, lr_decay_epochs=()),
              on_batch=lambda e, b: batches.append(b.sample_indices.copy()))
        seen[mode] = batches
    assert len(seen["ce"]) == len(seen["pfid"])
    assert all(np.array_equal(a, b) for a, b in zip(seen["ce"], seen["pfid"]))
    first = ds.features[seen["ce"][0]]
    assert np.array_equal(forward(init_network(nc), first)[1], forward(init_network(nc), first)[1])


def test_embed_unit_norm_rows():
    net = small_net(seed=6)
    x = np.random.default_rng(1).normal(size=(9, 5))
    e = embed(net, x)
    assert e.shape == (9, 4)
    assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-9)
    assert np.array_equal(embed(net, x[[2, 2]])[0], embed(net, x[[2, 2]])[1])


def test_embed_rejects_zero_embedding():
    net = small_net()
    for w in net.weights:
        w[:] = 0
    with pytest.raises(ValueError, match=r"sample\(s\) \[0, 1\]"):
        embed(net, np.ones((2, 5)))


def test_checkpoint_round_trip_is_exact(tmp_path):
    net = small_net(seed=8)
    net.weights[0][0, 0] = np.nextafter(1 / 3, 1.0)
    save_checkpoint(net, tmp_path / "m.json", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "m.json")
    assert extra == {"note": "x"}
    assert back.config == net.config
    assert all(np.array_equal(a, b) and a.dtype == b.dtype for a, b in zip(net.params, back.params))
    save_checkpoint(back, tmp_path / "n.json", {"note": "x"})
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "n.json").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not a"):
        load_checkpoint(tmp_path / "bad.json")
