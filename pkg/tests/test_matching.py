import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualenc import autodiff as ad
from dualenc.autodiff import ParameterSet, Tensor
from dualenc.matching import (LossError, ProjectionHead, batch_loss, cosine_similarity, hardest_negatives,
                              ranking_loss, similarity_matrix)
from dualenc.model import DualEncoding

import oracles
from conftest import micro_config, random_batch


def head(in_dim, out_dim, rng=None, identity=False):
    params = ParameterSet()
    if identity:
        w = np.eye(in_dim, out_dim)
    else:
        w = rng.normal(size=(in_dim, out_dim))
    params["p.weight"] = Tensor(w, requires_grad=True)
    params["p.bias"] = Tensor(np.zeros(out_dim) if identity else rng.normal(size=out_dim), requires_grad=True)
    params["p.bn.gamma"] = Tensor(np.ones(out_dim), requires_grad=True)
    params["p.bn.beta"] = Tensor(np.zeros(out_dim), requires_grad=True)
    return ProjectionHead(params, "p", in_dim, out_dim)


# --- projection ------------------------------------------------------------------


def test_identical_batch_projects_to_zero(float64):
    h = head(3, 3, identity=True)
    out = h.project(Tensor(np.tile([1.0, -2.0, 5.0], (4, 1))), train=True)
    np.testing.assert_allclose(out.data, 0, atol=1e-12)


def test_train_output_is_standardized(float64, rng):
    h = head(6, 5, rng)
    out = h.project(Tensor(rng.normal(size=(32, 6)) * 3 + 1), train=True).data
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_projection_matches_oracle(float64, seed):
    rng = np.random.default_rng(seed)
    h = head(4, 3, rng)
    h.params["p.bn.gamma"].data[...] = rng.normal(size=3)
    h.params["p.bn.beta"].data[...] = rng.normal(size=3)
    phi = rng.normal(size=(8, 4))
    out = h.project(Tensor(phi), train=True).data
    pre = [oracles.matvec(row, h.params["p.weight"].data.tolist()) for row in phi.tolist()]
    pre = [[a + b for a, b in zip(r, h.params["p.bias"].data)] for r in pre]
    ref = oracles.batchnorm(pre, h.params["p.bn.gamma"].data.tolist(), h.params["p.bn.beta"].data.tolist(), 1e-5)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_eval_before_training_raises(rng):
    h = head(4, 3, rng)
    with pytest.raises(RuntimeError, match="running stats"):
        h.project(Tensor(rng.normal(size=(2, 4))), train=False)


def test_running_stats_update_only_in_train(float64, rng):
    h = head(4, 3, rng)
    x = Tensor(rng.normal(size=(6, 4)))
    h.project(x, train=True, update_stats=False)
    assert not h.has_running_stats
    h.project(x, train=True)
    pre = x.data @ h.params["p.weight"].data + h.params["p.bias"].data
    np.testing.assert_allclose(h.running_mean, 0.1 * pre.mean(axis=0), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(h.running_var, 0.9 + 0.1 * pre.var(axis=0, ddof=1), rtol=1e-5)
    mean, var = h.running_mean.copy(), h.running_var.copy()
    h.project(x, train=False)
    np.testing.assert_array_equal(h.running_mean, mean)
    np.testing.assert_array_equal(h.running_var, var)


def test_eval_is_per_item(float64, rng):
    h = head(4, 3, rng)
    h.project(Tensor(rng.normal(size=(6, 4))), train=True)
    x = rng.normal(size=(5, 4))
    batch = h.project(Tensor(x), train=False).data
    for i in range(5):
        np.testing.assert_allclose(h.project(Tensor(x[i:i + 1]), train=False).data[0], batch[i], atol=1e-12)


def test_projection_shape_checks(rng):
    h = head(4, 3, rng)
    with pytest.raises(ad.ShapeError):
        h.project(Tensor(np.zeros((2, 5))), train=True)
    with pytest.raises(LossError):
        h.project(Tensor(np.zeros((1, 4))), train=True)


# --- cosine ----------------------------------------------------------------------


@pytest.mark.parametrize("a,b,expected", [([1, 0], [0, 1], 0.0), ([1, 1], [2, 2], 1.0), ([1, 0], [-1, 0], -1.0)])
def test_cosine_examples(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_vector():
    with pytest.raises(FloatingPointError):
        cosine_similarity([0, 0], [1, 2])


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
@settings(max_examples=50)
def test_similarity_matrix_bounded(a, b):
    if (np.linalg.norm(a, axis=1) < 1e-3).any() or (np.linalg.norm(b, axis=1) < 1e-3).any():
        return
    with ad.precision(np.float64):
        s = similarity_matrix(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(s) <= 1 + 1e-12)
    assert s[0, 0] == pytest.approx(oracles.cosine(a[0], b[0]), abs=1e-9)


# --- loss ------------------------------------------------------------------------


def test_loss_arithmetic_example(float64):
    # pair 0: positive 0.5, hardest sentence negative 0.6, hardest video negative 0.4
    sims = np.array([[0.5, 0.6, 0.1],
                     [0.4, 1.0, -1.0],
                     [0.2, -1.0, 1.0]])
    loss = ranking_loss(Tensor(sims), ["a", "b", "c"], 0.2)
    # pairs 1 and 2 are margin-satisfied
    assert loss.item() == pytest.approx(0.4 / 3)
    ref, _, _ = oracles.hardest_negative_loss(sims.tolist(), ["a", "b", "c"], 0.2)
    assert loss.item() == pytest.approx(ref)


def test_loss_zero_when_margin_satisfied(float64, rng):
    sims = rng.uniform(-1, 0.8, size=(6, 6))
    np.fill_diagonal(sims, 1.0)
    assert ranking_loss(Tensor(sims), list("abcdef")).item() == 0.0
    sims[2, 4] = 0.81
    assert ranking_loss(Tensor(sims), list("abcdef")).item() > 0


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_exhaustive_oracle(float64, seed):
    rng = np.random.default_rng(seed)
    ids = [f"v{i}" for i in rng.integers(0, 4, size=8)]
    if len(set(ids)) < 2:
        ids[0] = "other"
    sims = rng.uniform(-1, 1, size=(8, 8))
    ref, neg_s, neg_v = oracles.hardest_negative_loss(sims.tolist(), ids, 0.2)
    ns, nv = hardest_negatives(sims, ids)
    assert ns.tolist() == neg_s and nv.tolist() == neg_v
    assert ranking_loss(Tensor(sims), ids).item() == pytest.approx(ref, abs=1e-12)


def test_ties_go_to_lowest_index():
    sims = np.zeros((4, 4))
    ns, nv = hardest_negatives(sims, ["a", "b", "c", "d"])
    assert ns.tolist() == [1, 0, 0, 0]
    assert nv.tolist() == [1, 0, 0, 0]


def test_same_video_never_negative():
    sims = np.array([[0.1, 0.9, 0.3], [0.9, 0.1, 0.2], [0.0, 0.0, 0.5]])
    ns, nv = hardest_negatives(sims, ["a", "a", "b"])
    assert ns.tolist() == [2, 2, 0]
    assert nv.tolist() == [2, 2, 0]


def test_no_negative_raises():
    with pytest.raises(LossError, match="'a'"):
        ranking_loss(Tensor(np.eye(3)), ["a", "a", "a"])
    with pytest.raises(LossError):
        ranking_loss(Tensor(np.eye(1)), ["a"])


# a coarse grid keeps the transforms strictly increasing in floating point too
@given(hnp.arrays(np.float64, (6, 6), elements=st.integers(-64, 64).map(lambda k: k / 64)),
       st.lists(st.sampled_from("abc"), min_size=6, max_size=6),
       st.sampled_from(["exp", "cube", "affine"]))
@settings(max_examples=100)
def test_selection_invariant_under_monotone_transform(sims, ids, kind):
    if len(set(ids)) < 2:
        return
    f = {"exp": np.exp, "cube": lambda x: x ** 3 + x, "affine": lambda x: 3 * x - 7}[kind]
    a = hardest_negatives(sims, ids)
    b = hardest_negatives(f(sims), ids)
    assert a[0].tolist() == b[0].tolist() and a[1].tolist() == b[1].tolist()


@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(-1, 1)), st.floats(0, 1))
@settings(max_examples=100)
def test_loss_nonnegative_and_zero_iff_satisfied(sims, margin):
    ids = list("abcde")
    with ad.precision(np.float64):
        loss = ranking_loss(Tensor(sims), ids, margin).item()
    _, ns, nv = oracles.hardest_negative_loss(sims.tolist(), ids, margin)
    # difference first: margin + s - pos can round a tiny margin away
    satisfied = all((sims[i, ns[i]] - sims[i, i]) + margin <= 0 and (sims[nv[i], i] - sims[i, i]) + margin <= 0
                    for i in range(5))
    assert loss >= 0
    assert (loss == 0) == satisfied


def test_loss_gradient_matches_finite_differences(float64):
    rng = np.random.default_rng(5)
    va = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    sa = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    ids = ["a", "a", "b", "c", "c", "d"]
    report = ad.finite_difference_check(lambda: batch_loss(va, sa, ids, 0.2),
                                        ParameterSet({"v": va, "s": sa}), tol=1e-3)
    assert report.passed, report.failures()


def test_model_loss_gradient_all_params(float64):
    rng = np.random.default_rng(9)
    cfg = micro_config(hidden=3, filters=2, common_dim=4, video_kernels=(2, 3), text_kernels=(2,))
    model = DualEncoding(cfg, seed=2)
    batch = random_batch(rng, batch=4, max_frames=3, max_words=3, video_ids=["a", "b", "b", "c"])
    report = ad.finite_difference_check(lambda: model.loss(batch), model.params, tol=1e-3)
    assert report.passed, report.failures()


def test_loss_shape_errors():
    with pytest.raises(ad.ShapeError):
        ranking_loss(Tensor(np.zeros((2, 3))), ["a", "b"])
    with pytest.raises(ad.ShapeError):
        ranking_loss(Tensor(np.zeros((2, 2))), ["a", "b", "c"])
