import numpy as np
import pytest

from daegan.embedders import (FaceEmbedderNet, NetConfig, PoseEmbedderNet, embedder_objective,
                              flatten_drivers, reconstruction_loss, smoothness_terms)
from daegan.optim import AdamState, adam_step
from daegan.tensor import Tensor, backward, default_dtype, no_grad
from daegan.warp import tv_smoothness

TINY = NetConfig(resolution=16, base_width=4, n_down=3, d_p=8)


def _nets(cfg=TINY, seed=0):
    return FaceEmbedderNet(cfg, np.random.default_rng([seed, 1])), \
        PoseEmbedderNet(cfg, np.random.default_rng([seed, 2]))


def test_face_embedder_shapes():
    cfg = NetConfig(resolution=64, base_width=8)
    f = FaceEmbedderNet(cfg, np.random.default_rng(0))
    frames = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 8, 3, 64, 64)).astype(np.float32))
    with no_grad():
        fhat, fields, attns = f(frames)
    assert fhat.shape == (1, 3, 64, 64)
    assert fields.shape == (1, 8, 2, 64, 64)
    assert attns.shape == (1, 8, 1, 64, 64)


def test_untrained_gray_frames_finite_nonnegative_attention():
    f, _ = _nets()
    with no_grad():
        fhat, _, attns = f(Tensor(np.zeros((2, 3, 3, 16, 16), np.float32)))
    assert np.all(np.isfinite(fhat.data))
    assert np.all(attns.data >= 0)


def test_pose_embedder_shapes_and_purity():
    cfg = NetConfig(resolution=64, base_width=8)
    p = PoseEmbedderNet(cfg, np.random.default_rng(0))
    r = np.random.default_rng(3)
    frame = Tensor(r.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32))
    with no_grad():
        code, t_inv, (r_low, r_high), xhat = p(frame, Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        code2, *_ = p(frame, Tensor(r.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32)))
    assert code.shape == (1, 128)
    assert t_inv.shape == (1, 2, 16, 16)
    assert r_low.shape == (1, 3, 32, 32) and r_high.shape == (1, 3, 64, 64)
    assert xhat.shape == (1, 3, 64, 64)
    np.testing.assert_array_equal(code.data, code2.data)


def test_face_embedder_frame_permutation(f64):
    f, _ = _nets()
    frames = np.random.default_rng(4).uniform(-1, 1, (1, 4, 3, 16, 16))
    perm = [2, 0, 3, 1]
    with no_grad():
        a, fa, aa = f(Tensor(frames))
        b, fb, ab = f(Tensor(frames[:, perm]))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    np.testing.assert_allclose(fa.data[:, perm], fb.data, atol=1e-12)
    np.testing.assert_allclose(aa.data[:, perm], ab.data, atol=1e-12)


def test_resolution_guard():
    f, p = _nets()
    with pytest.raises(ValueError, match="model expects"):
        f(Tensor(np.zeros((1, 2, 3, 8, 8), np.float32)))
    with pytest.raises(ValueError):
        p.encode(Tensor(np.zeros((1, 3, 8, 8), np.float32)))


def test_reconstruction_loss_cases(f64, rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert reconstruction_loss(Tensor(x), Tensor(x)).item() == 0.0
    assert reconstruction_loss(Tensor(np.zeros((1, 3, 2, 2))),
                               Tensor(np.full((1, 3, 2, 2), 0.5))).item() == 0.5
    y = rng.standard_normal((2, 3, 4, 4))
    ref = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert reconstruction_loss(Tensor(x), Tensor(y)).item() == pytest.approx(ref, abs=1e-7)


def _batch(seed, b=1, k=3, d=2, res=16):
    r = np.random.default_rng(seed)
    return Tensor(r.uniform(-1, 1, (b, k, 3, res, res))), Tensor(r.uniform(-1, 1, (b, d, 3, res, res)))


def test_objective_components(f64):
    f, p = _nets()
    refs, drv = _batch(5)
    with no_grad():
        total, parts = embedder_objective(f, p, refs, drv, 1.0, return_parts=True)
        fhat, fields, _ = f(refs)
        flat, rep = flatten_drivers(drv, fhat)
        _, t_inv, _, xhat = p(flat, rep)
        l_rec = reconstruction_loss(flat, xhat).item()
        l_s = tv_smoothness(smoothness_terms(fields, t_inv)).item()
        only_rec = embedder_objective(f, p, refs, drv, 0.0).item()
    assert total.item() == pytest.approx(l_rec + l_s, abs=1e-6)
    assert parts["L_REC"].item() == pytest.approx(l_rec, abs=1e-12)
    assert only_rec == l_rec


def test_perfect_reconstruction_scores_zero(f64):
    f, p = _nets()
    for head in (f.disp_head, p.tinv_head, p.rlow_head, p.rhigh_head):
        head.weight.data = np.zeros_like(head.weight.data)
        head.bias.data = np.zeros_like(head.bias.data)
    const = np.full((1, 3, 3, 16, 16), 0.4)
    with no_grad():
        loss = embedder_objective(f, p, Tensor(const), Tensor(const[:, :2]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_single_driver_layout(f64):
    f, p = _nets()
    refs, drv = _batch(6, d=1)
    with no_grad():
        a = embedder_objective(f, p, refs, drv).item()
        b = embedder_objective(f, p, refs, Tensor(drv.data[:, 0])).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_small_adam_step_descends():
    failures = 0
    for seed in range(10):
        with default_dtype(np.float64):
            f, p = _nets(seed=seed)
            refs, drv = _batch(100 + seed)
            params = f.parameters() + p.parameters()
            loss = embedder_objective(f, p, refs, drv)
            backward(loss, params=params)
            adam_step(params, [q.grad for q in params], AdamState.for_params(params), 1e-5)
            with no_grad():
                after = embedder_objective(f, p, refs, drv)
        failures += after.item() > loss.item()
    assert failures <= 1


def test_end_to_end_gradient_probe(f64):
    f, p = _nets(seed=3)
    refs, drv = _batch(7)
    params = f.parameters() + p.parameters()
    backward(embedder_objective(f, p, refs, drv), params=params)
    probes = [(f.encoder.blocks[0].conv.weight, (0, 0, 1, 1)),
              (p.decoder[1].conv.weight, (1, 0, 0, 2))]
    for param, idx in probes:
        ana = param.grad[idx]
        old = param.data[idx]
        vals = []
        for sgn in (1, -1):
            param.data[idx] = old + sgn * 1e-6
            with no_grad():
                vals.append(embedder_objective(f, p, refs, drv).item())
        param.data[idx] = old
        num = (vals[0] - vals[1]) / 2e-6
        assert abs(ana - num) / max(abs(ana), abs(num), 1e-8) < 1e-3
