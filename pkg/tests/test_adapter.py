import numpy as np
import pytest

from anoadapt.adapter import (
    AdapterParams,
    Checkpoint,
    OptState,
    backward,
    default_widths,
    forward,
    init_adapter,
    init_head,
    load_checkpoint,
    pretrain_classifier,
    save_checkpoint,
    sgd_step,
    snapshot,
)
from anoadapt.benchmark import fd_gradient, max_rel_err
from anoadapt.errors import FormatError, NumericError, ValidationError
from anoadapt.feature_store import FeatureMatrix
from conftest import identity_adapter, init_params, set_params


def test_forward_zero_network(rng):
    p = AdapterParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    out = forward(p, rng.normal(size=(5, 3)))
    assert np.array_equal(out, np.zeros((5, 2)))


def test_forward_identity_on_nonnegative(rng):
    p = identity_adapter(4)
    x = np.abs(rng.normal(size=(6, 4)))
    assert np.array_equal(forward(p, x), x)


def test_forward_matches_straight_line_reimplementation(rng):
    p = init_adapter([3, 5, 2], seed=9)
    x = rng.normal(size=(7, 3))
    # independent re-evaluation, scalar loops only
    expect = np.zeros((7, 2))
    for r in range(7):
        h = [0.0] * 5
        for j in range(5):
            acc = p.biases[0][j]
            for i in range(3):
                acc += p.weights[0][j, i] * x[r, i]
            h[j] = max(acc, 0.0)
        for j in range(2):
            acc = p.biases[1][j]
            for i in range(5):
                acc += p.weights[1][j, i] * h[i]
            expect[r, j] = acc
    assert np.allclose(forward(p, x), expect, rtol=1e-12, atol=1e-12)


def test_forward_dimension_mismatch(rng):
    p = init_adapter([3, 4], seed=0)
    with pytest.raises(ValueError):
        forward(p, rng.normal(size=(2, 5)))


def test_backward_zero_upstream(rng):
    p = init_adapter([3, 4, 2], seed=1)
    g = backward(p, rng.normal(size=(4, 3)), np.zeros((4, 2)))
    assert np.array_equal(g, np.zeros(p.num_params))


def test_backward_scalar_linear_chain_rule(rng):
    w = 1.7
    p = init_params([[w]], [0.0])
    x = rng.normal(size=(6, 1))
    up = rng.normal(size=(6, 1))
    g = backward(p, x, up)
    assert np.allclose(g[0], float((up * x).sum()), rtol=1e-14)
    assert np.allclose(g[1], float(up.sum()), rtol=1e-14)


def test_backward_finite_difference(rng):
    p = init_adapter([4, 6, 5, 3], seed=2)
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 3))
    g = backward(p, x, up)

    def loss(vec):
        return float((up * forward(set_params(p, vec), x)).sum())

    fd = fd_gradient(loss, p.flatten())
    assert max_rel_err(g, fd) < 1e-4


def test_backward_shape_mismatch(rng):
    p = init_adapter([3, 4], seed=0)
    with pytest.raises(ValueError):
        backward(p, rng.normal(size=(2, 3)), rng.normal(size=(3, 4)))


def test_flatten_unflatten_bijection(rng):
    p = init_adapter([3, 7, 2], seed=5)
    flat = p.flatten()
    q = AdapterParams.from_flat(flat, p.layer_widths)
    assert np.array_equal(q.flatten(), flat)
    for w1, w2 in zip(p.weights, q.weights):
        assert np.array_equal(w1, w2)


def test_default_widths():
    assert default_widths(8) == [8, 16, 16, 8]
    assert default_widths(4, hidden_layers=1) == [4, 8, 4]


def test_sgd_decay_only():
    p = init_params([[2.0]], [0.0])
    o = OptState(learning_rate=0.5, momentum=0.0, weight_decay=0.1, clip_norm=1.0)
    sgd_step(p, np.zeros(2), o)
    # theta <- theta * (1 - lr*wd)
    assert np.isclose(p.weights[0][0, 0], 2.0 * (1 - 0.5 * 0.1))


def test_sgd_clip_bound():
    p = init_params([[0.0]], [0.0])
    o = OptState(learning_rate=1.0, momentum=0.0, weight_decay=0.0, clip_norm=1e-3)
    grad = np.array([8e-3, 6e-3])  # norm = 10 * clip
    sgd_step(p, grad, o)
    applied = -np.array([p.weights[0][0, 0], p.biases[0][0]])
    assert np.isclose(np.linalg.norm(applied), 1e-3, rtol=1e-12)


def test_sgd_momentum_hand_recurrence():
    p = AdapterParams([np.array([[0.0]])], [np.array([0.0])])
    o = OptState(learning_rate=0.1, momentum=0.9, weight_decay=0.0, clip_norm=10.0)
    history = []
    for _ in range(2):
        before = p.weights[0][0, 0]
        sgd_step(p, np.array([1.0, 0.0]), o)
        history.append(p.weights[0][0, 0] - before)
    assert np.isclose(history[0], -0.1)
    assert np.isclose(history[1], -0.19)


def test_sgd_rejects_non_finite():
    p = init_adapter([2, 2], seed=0)
    o = OptState(learning_rate=0.1)
    with pytest.raises(NumericError):
        sgd_step(p, np.full(p.num_params, np.nan), o)


def test_optstate_invariants():
    with pytest.raises(ValueError):
        OptState(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptState(learning_rate=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        OptState(learning_rate=0.1, weight_decay=-1.0)
    with pytest.raises(ValueError):
        OptState(learning_rate=0.1, clip_norm=0.0)


def test_pretrain_uniform_softmax_loss():
    from anoadapt.adapter import cross_entropy_grads

    p = AdapterParams([np.zeros((3, 2))], [np.zeros(3)])
    head = init_head(4, 3, seed=0)
    head.weight[:] = 0.0
    loss, _, _ = cross_entropy_grads(p, head, np.ones((5, 2)), np.array([0, 1, 2, 3, 0]))
    assert np.isclose(loss, np.log(4.0), rtol=1e-12)


def test_pretrain_separable_blobs(rng):
    n = 256
    x = np.vstack([rng.normal(-2.0, 0.5, size=(n, 4)), rng.normal(2.0, 0.5, size=(n, 4))]).astype(np.float32)
    y = np.concatenate([np.zeros(n, dtype=np.int32), np.ones(n, dtype=np.int32)])
    aux = FeatureMatrix(x, y)
    widths = default_widths(4, 1)
    p = init_adapter(widths, seed=3)
    head = init_head(2, widths[-1], seed=4)
    o = OptState(learning_rate=0.05, momentum=0.9, weight_decay=1e-4, clip_norm=5.0)
    pretrain_classifier(p, head, aux, o, minibatches=500, batch_size=32, seed=5)
    logits = forward(p, aux.values()) @ head.weight.T + head.bias
    accuracy = float((logits.argmax(axis=1) == y).mean())
    assert accuracy > 0.95


def test_pretrain_zero_minibatches_is_noop(rng):
    aux = FeatureMatrix(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 2, 10))
    p = init_adapter([3, 4, 3], seed=0)
    before = p.flatten()
    head = init_head(2, 3, seed=1)
    pretrain_classifier(p, head, aux, OptState(0.1), minibatches=0, seed=2)
    assert np.array_equal(p.flatten(), before)


def test_pretrain_single_class_rejected(rng):
    aux = FeatureMatrix(rng.normal(size=(10, 3)).astype(np.float32), np.zeros(10, dtype=np.int32))
    p = init_adapter([3, 3], seed=0)
    with pytest.raises(ValueError):
        pretrain_classifier(p, init_head(1, 3, seed=0), aux, OptState(0.1), 10)


def test_pretrain_determinism(rng):
    aux = FeatureMatrix(rng.normal(size=(40, 3)).astype(np.float32), rng.integers(0, 3, 40))
    results = []
    for _ in range(2):
        p = init_adapter([3, 6, 3], seed=7)
        head = init_head(3, 3, seed=8)
        pretrain_classifier(p, head, aux, OptState(0.05, clip_norm=5.0), 50, seed=9)
        results.append(p.flatten())
    assert np.array_equal(results[0], results[1])


def test_snapshot_copy_semantics():
    p = init_adapter([2, 3, 2], seed=0)
    ckpt = snapshot(p, 5)
    frozen = ckpt.params.flatten().copy()
    p.weights[0][:] = 99.0
    assert np.array_equal(ckpt.params.flatten(), frozen)


def test_snapshot_bank_ordering():
    from anoadapt.trainer import CheckpointBank

    p = init_adapter([2, 2], seed=0)
    CheckpointBank(checkpoints=[snapshot(p, 5), snapshot(p, 10)], interval=5, batch_size=32)
    with pytest.raises(ValueError):
        CheckpointBank(checkpoints=[snapshot(p, 10), snapshot(p, 5)], interval=5, batch_size=32)


def test_checkpoint_file_round_trip(tmp_path):
    p = init_adapter([3, 6, 3], seed=11)
    ckpt = snapshot(p, 42)
    ckpt.normalizer = 1.5
    path = tmp_path / "c.pndc"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.minibatch_index == 42
    assert back.normalizer == 1.5
    assert not back.degenerate
    assert np.array_equal(back.params.flatten(), p.flatten())
    assert back.params.layer_widths == p.layer_widths


def test_checkpoint_degenerate_flag_round_trip(tmp_path):
    ckpt = Checkpoint(params=init_adapter([2, 2], seed=0), minibatch_index=7, normalizer=None, degenerate=True)
    path = tmp_path / "d.pndc"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.degenerate and back.normalizer is None


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pndc"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_forward_thread_safe_on_frozen_copy(rng):
    from concurrent.futures import ThreadPoolExecutor

    p = init_adapter([6, 12, 6], seed=21)
    x = rng.normal(size=(64, 6))
    want = forward(p, x)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(lambda _: forward(p, x), range(32)))
    for got in results:
        assert np.array_equal(got, want)


def test_adapter_params_validation():
    with pytest.raises(ValidationError):
        AdapterParams([np.ones((2, 2))], [np.ones(3)])
    with pytest.raises(ValidationError):
        AdapterParams([np.ones((2, 2)), np.ones((2, 3))], [np.ones(2), np.ones(2)])
    with pytest.raises(ValidationError):
        AdapterParams([np.array([[np.inf]])], [np.zeros(1)])
