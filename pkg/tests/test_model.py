import math

import numpy as np
import pytest

from trainbench.core import derive_rng
from trainbench.model import (
    LAYERS,
    SOFTMAX_CE,
    SVM_HINGE,
    Architecture,
    FreezeMask,
    ModelParams,
    ShapeError,
    StaleCacheError,
    apply_freeze,
    backward,
    features,
    forward,
    head_loss,
    init_model,
    load_checkpoint,
    reinit_head,
    save_checkpoint,
    unfreeze_boundaries,
)

SMALL = Architecture(height=8, width=8, channels=3, n_classes=3, conv1=4, conv2=5, dense1=6)


def _loss(params, x, y, kind):
    return head_loss(kind, forward(params, x), y)[0]


def _perturbed(params, name, slot, idx, delta):
    w, b = (t.copy() for t in params[name])
    target = w if slot == 0 else b
    target[idx] += delta
    return params.replace({name: (w, b)})


def _fd(params, x, y, kind, name, slot, idx, eps):
    hi = _loss(_perturbed(params, name, slot, idx, eps), x, y, kind)
    lo = _loss(_perturbed(params, name, slot, idx, -eps), x, y, kind)
    return (hi - lo) / (2 * eps)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(kind, probes=50):
    """Worst relative error over random coordinates of every layer, ``probes`` random models."""
    worst = 0.0
    for probe in range(probes):
        rng = derive_rng(probe, f"gradcheck:{kind}")
        params = init_model(SMALL, rng.child("init"))
        # small random biases keep units away from exact zeros
        params = params.replace({n: (params[n][0], rng.normal(0, 0.1, size=params[n][1].shape)) for n in LAYERS})
        x = rng.random((3, 8, 8, 3))
        y = rng.integers(0, 3, size=3)
        logits, cache = forward(params, x, return_cache=True)
        _, d = head_loss(kind, logits, y)
        grads = backward(params, cache, d)
        for name in LAYERS:
            for slot in (0, 1):
                shape = params[name][slot].shape
                checked = tries = 0
                while checked < 2 and tries < 40:
                    tries += 1
                    idx = tuple(int(rng.integers(0, s)) for s in shape)
                    g1 = _fd(params, x, y, kind, name, slot, idx, 1e-4)
                    g2 = _fd(params, x, y, kind, name, slot, idx, 1e-5)
                    if abs(g1 - g2) > 1e-4 * max(abs(g1), abs(g2), 1e-6):
                        continue  # a relu / pool / hinge kink lies within eps; reject this point
                    worst = max(worst, _rel(grads[name][slot][idx], g1))
                    checked += 1
                if checked < 2:
                    raise AssertionError(f"could not find a smooth point in {name}")
    return worst


@pytest.mark.parametrize("kind", [SOFTMAX_CE, SVM_HINGE])
def test_gradient_check_every_layer(kind):
    assert gradient_check(kind) < 1e-3


def test_init_is_kaiming_uniform():
    arch = Architecture()
    stds = []
    for seed in range(10):
        p = init_model(arch, derive_rng(seed, "init"))
        assert all(np.all(p[n][1] == 0) for n in LAYERS)
        stds.append(p["conv1"][0].std())
    fan_in = 3 * 3 * 3
    # uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)] has std sqrt(2/fan_in)
    assert abs(np.mean(stds) - math.sqrt(2 / fan_in)) <= 0.2 * math.sqrt(2 / fan_in)
    a = init_model(arch, derive_rng(1, "init"))
    assert a.equal(init_model(arch, derive_rng(1, "init")))
    assert not a.equal(init_model(arch, derive_rng(2, "init")))


def test_forward_batch_independence_and_purity():
    p = init_model(Architecture(height=16, width=16), derive_rng(0, "i"))
    x = derive_rng(0, "x").random((16, 16, 16, 3))
    full = forward(p, x)
    assert np.array_equal(full, forward(p, x))
    single = forward(p, x[5:6])
    assert np.allclose(single[0], full[5], rtol=0, atol=1e-12)
    assert full.shape == (16, 5) and np.isfinite(full).all()


def test_zero_input_gives_equal_logits():
    p = init_model(Architecture(height=16, width=16), derive_rng(0, "i"))
    out = forward(p, np.zeros((2, 16, 16, 3)))
    assert np.all(out == out[0, 0])


def test_dense1_linearity():
    p = init_model(SMALL, derive_rng(3, "i"))
    x = derive_rng(3, "x").random((4, 8, 8, 3))
    wd, bd = p["dense1"]
    # with the dense1 weights and input features non-negative nothing is cut by the relu
    pos = p.replace({"dense1": (np.abs(wd), bd)})
    doubled = p.replace({"dense1": (2 * np.abs(wd), bd)})
    assert np.allclose(features(doubled, x), 2 * features(pos, x))


def test_shape_errors():
    p = init_model(SMALL, derive_rng(0, "i"))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((1, 9, 8, 3)))
    with pytest.raises(ShapeError):
        Architecture(height=10)
    with pytest.raises(ShapeError):
        ModelParams(SMALL, {n: p[n] for n in LAYERS[:3]})


def test_head_loss_examples():
    loss, d = head_loss(SOFTMAX_CE, np.zeros((4, 5)), [0, 1, 2, 3])
    assert loss == pytest.approx(math.log(5))
    assert np.allclose(d.sum(axis=1), 0.0)
    logits = np.array([[5.0, 1.0, 3.9], [0.0, 2.0, 0.5]])
    loss, d = head_loss(SVM_HINGE, logits, [0, 1])
    assert loss == 0.0 and np.all(d == 0)
    # a violation of exactly zero contributes nothing
    loss, d = head_loss(SVM_HINGE, np.array([[1.0, 0.0, -3.0]]), [0])
    assert loss == 0.0 and np.all(d == 0)
    with pytest.raises(ValueError):
        head_loss("nonlinear_svm", logits, [0, 1])


def test_backward_contracts():
    p = init_model(SMALL, derive_rng(0, "i"))
    x = derive_rng(0, "x").random((2, 8, 8, 3))
    _, cache = forward(p, x, return_cache=True)
    zero = backward(p, cache, np.zeros((2, 3)))
    assert all(np.all(g == 0) for n in LAYERS for g in zero[n])
    d = derive_rng(0, "d").normal(size=(2, 3))
    full = backward(p, cache, d)
    part = backward(p, cache, d, layers=("head", "dense1"))
    for n in ("head", "dense1"):
        assert all(np.array_equal(a, b) for a, b in zip(full[n], part[n]))
    other = init_model(SMALL, derive_rng(1, "i"))
    with pytest.raises(StaleCacheError):
        backward(other, cache, d)


def test_freeze_masks():
    p = init_model(SMALL, derive_rng(0, "i"))
    x = derive_rng(0, "x").random((2, 8, 8, 3))
    _, cache = forward(p, x, return_cache=True)
    g = backward(p, cache, derive_rng(0, "d").normal(size=(2, 3)))
    frozen = apply_freeze(g, FreezeMask.all_frozen())
    assert all(np.all(t == 0) for n in LAYERS for t in frozen[n])
    same = apply_freeze(g, FreezeMask.all_trainable())
    assert all(np.array_equal(a, b) for n in LAYERS for a, b in zip(same[n], g[n]))
    no_conv1 = apply_freeze(g, FreezeMask.unfrozen(["conv2", "dense1", "head"]))
    assert all(np.all(t == 0) for t in no_conv1["conv1"])
    assert all(np.array_equal(a, b) for n in LAYERS[1:] for a, b in zip(no_conv1[n], g[n]))
    with pytest.raises(ValueError):
        FreezeMask({"conv1": True})
    states = [m.label() for m in unfreeze_boundaries()]
    assert states == ["none", "head", "dense1+head", "conv2+dense1+head", "conv1+conv2+dense1+head"]


def test_reinit_head_keeps_body():
    p = init_model(SMALL, derive_rng(0, "i"))
    q = reinit_head(p, 7, derive_rng(0, "h"))
    assert q.arch.n_classes == 7 and q["head"][0].shape == (6, 7)
    assert q.equal(p, layers=("conv1", "conv2", "dense1"))


def test_checkpoint_roundtrip(tmp_path):
    p = init_model(SMALL, derive_rng(0, "i"))
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path, {"note": "x"})
    raw = path.read_bytes()
    assert raw[:8] == b"TBCKPT\x00\x01"
    q = load_checkpoint(path)
    assert q.arch == p.arch and q.equal(p)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(path)
