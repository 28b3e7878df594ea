import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from daegan import evaluation as ev
from daegan.synthdata import FrameStore
from daegan.training import Model, TrainConfig
from oracles import naive_ssim


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (3, 32, 32))
    y = rng.uniform(-1, 1, (3, 32, 32))
    assert ev.ssim(x, x) == 1.0
    assert abs(ev.ssim(x, y) - ev.ssim(y, x)) < 1e-7


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.uniform(-1, 1, (3, 64, 64))
        y = np.clip(x + rng.normal(0, 0.5, x.shape), -1, 1)
        assert abs(ev.ssim(x, y) - naive_ssim(x, y)) < 1e-5


def test_ssim_constant_images():
    x, y = np.zeros((16, 16)), np.ones((16, 16))
    c1 = 0.02 ** 2
    # zero variance everywhere: only the luminance term survives
    assert ev.ssim(x, y) == pytest.approx(c1 / (1 + c1), rel=1e-12)
    assert ev.ssim(x, y) == pytest.approx(naive_ssim(x, y), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError, match="smaller"):
        ev.ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))
    with pytest.raises(ValueError, match="differ"):
        ev.ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 17)))


def test_cosine_cases():
    assert ev.cosine_similarity([1, 2], [2, 1]) == pytest.approx(0.8)
    assert ev.cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0
    assert ev.cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0)
    assert ev.cosine_similarity([0, 0], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        ev.cosine_similarity([1, 2], [1, 2, 3])


vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


@given(vec, vec, st.floats(0.01, 100))
def test_cosine_bounded_and_scale_invariant(a, b, s):
    c = ev.cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    if np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3:
        assert ev.cosine_similarity(a * s, b) == pytest.approx(c, abs=1e-9)


def test_retrieval_index():
    rng = np.random.default_rng(2)
    codes = rng.standard_normal((6, 4))
    idx = ev.RetrievalIndex.build([f"v{i}" for i in range(6)], codes)
    np.testing.assert_allclose(np.linalg.norm(idx.codes, axis=1), 1.0, atol=1e-12)
    for i in range(6):
        top = idx.query(codes[i] * 3.0)
        assert top[0][0] == f"v{i}" and top[0][1] == pytest.approx(1.0)
        sims = [s for _, s in top]
        assert sims == sorted(sims, reverse=True)
    assert len(idx.query(codes[0], top=2)) == 2
    one = ev.RetrievalIndex.build(["only"], codes[:1])
    assert [i for i, _ in one.query(codes[3])] == ["only"]
    with pytest.raises(ValueError, match="unique"):
        ev.RetrievalIndex.build(["a", "a"], codes[:2])


def test_retrieval_ties_break_by_id():
    idx = ev.RetrievalIndex.build(["c", "a", "b"], [[1, 0], [1, 0], [0, 1]])
    assert [i for i, _ in idx.query([1, 0])] == ["a", "c", "b"]


def test_ridge_fit_recovers_linear_map():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((200, 5))
    y = x @ rng.standard_normal((5, 2)) + 0.7
    w, b = ev.ridge_fit(x, y, reg=1e-9)
    np.testing.assert_allclose(x @ w + b, y, atol=1e-6)


def test_probe_oracle_and_null_codes():
    rng = np.random.default_rng(4)
    poses = rng.uniform(-1, 1, (500, 5))
    np.testing.assert_allclose(ev.pose_code_probe(poses, poses, rng), 1.0, atol=1e-6)
    null = ev.pose_code_probe(rng.standard_normal((500, 16)), poses, rng)
    assert np.all(np.abs(null) < 0.15)
    with pytest.raises(ValueError, match="50"):
        ev.pose_code_probe(poses[:49], poses[:49], rng)


def test_ridge_closed_form_matches_gradient_descent():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((100, 4))
    y = x @ rng.standard_normal((4, 1)) + rng.normal(0, 0.3, (100, 1)) + 1.0
    xte = rng.standard_normal((40, 4))
    w, b = ev.ridge_fit(x, y)
    # gradient descent on the same objective, intercept unpenalized
    gw, gb = np.zeros((4, 1)), np.zeros(1)
    for _ in range(5000):
        r = x @ gw + gb - y
        gw -= 0.005 * (x.T @ r + 1e-3 * gw)
        gb -= 0.005 * r.sum(axis=0)
    yte = xte @ w + b + rng.normal(0, 0.3, (40, 1))
    assert abs(ev.r2_score(yte, xte @ w + b)[0] - ev.r2_score(yte, xte @ gw + gb)[0]) < 1e-3


def _tiny_model():
    return Model(TrainConfig(resolution=32, K=2, d_p=8, base_width=4, g_width=4, d_width=4,
                             dtype="float64"))


def test_invariance_degenerate_and_untrained(tiny_corpus):
    model = _tiny_model()
    frames = FrameStore(tiny_corpus, np.float64).video(tiny_corpus.videos[0])
    rep = np.repeat(frames[:1], 4, axis=0)
    assert ev.embedded_face_invariance(model, rep, 3, np.random.default_rng(0)) == 0.0
    assert ev.embedded_face_invariance(model, frames, 3, np.random.default_rng(0)) > 0.0
    with pytest.raises(ValueError, match="2K"):
        ev.embedded_face_invariance(model, frames[:3], 1, np.random.default_rng(0))


def test_pose_retrieval_self_rank(tiny_corpus):
    model = _tiny_model()
    frames = FrameStore(tiny_corpus, np.float64).video(tiny_corpus.videos[1])[:6]
    codes = ev.encode_frames(model, frames)
    idx = ev.RetrievalIndex.build([f"f{i}" for i in range(6)], codes)
    ranked = ev.pose_retrieval(frames[4], idx, model)
    assert ranked[0][0] == "f4" and ranked[0][1] == pytest.approx(1.0)


def test_protocol_metrics_run_on_untrained_model(tiny_corpus):
    model = _tiny_model()
    m = ev.heldout_reenactment(model, tiny_corpus, holdout=2)
    assert all(np.isfinite(v) for v in m.values())
    assert -1.0 <= m["generator_min"] <= m["generator_max"] <= 1.0
    d = ev.disentanglement_metrics(model, tiny_corpus, holdout=2, trials=2)
    assert "invariance" in d and d["invariance"] > 0


def test_eval_report_roundtrip(tmp_path):
    rep = ev.EvalReport({"b": 0.5, "a": 1.25e-7}, {"K": 8, "seed": 0}, "x.ckpt@abc")
    rep.validate()
    rep.save(tmp_path / "r.txt")
    text = (tmp_path / "r.txt").read_text()
    assert text.splitlines()[:3] == ["checkpoint=x.ckpt@abc", "a=1.25e-07", "b=0.5"]
    back = ev.EvalReport.load(tmp_path / "r.txt")
    assert back.metrics == rep.metrics and back.checkpoint == rep.checkpoint
    assert back.to_text() == text
    with pytest.raises(ValueError, match="non-finite"):
        ev.EvalReport({"x": float("nan")}).validate()
