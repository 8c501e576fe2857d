import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualenc.data import CaptionItem, EmptyCaptionError, VideoItem, Vocabulary
from dualenc.model import DualEncoding
from dualenc.retrieval import (IndexFileError, MetricError, RankedList, VideoIndex, average_precision, build_index,
                               compute_metrics, evaluate_bidirectional, evaluate_embeddings, format_metrics, query,
                               ranked_lists)
from dualenc.trainer import Adam, run_epoch
from dualenc.data import make_minibatches, make_pairs

import oracles
from conftest import micro_config


def lists_with_first_ranks(ranks, length=20):
    out = []
    for q, r in enumerate(ranks):
        rel = np.zeros(length, dtype=bool)
        rel[r - 1] = True
        out.append(RankedList(f"q{q}", [f"i{j}" for j in range(length)], rel))
    return out


# --- metrics -----------------------------------------------------------------------


def test_metrics_hand_example():
    m = compute_metrics(lists_with_first_ranks([1, 3, 12, 2]))
    assert (m["R@1"], m["R@5"], m["R@10"], m["MedR"]) == (25.0, 75.0, 75.0, 2.5)
    assert m["mAP"] == pytest.approx((1 + 1 / 3 + 1 / 12 + 1 / 2) / 4)
    assert round(m["mAP"], 3) == 0.479


def test_median_odd_count():
    assert compute_metrics(lists_with_first_ranks([4, 1, 9]))["MedR"] == 4.0


def test_query_without_relevant_item_is_named():
    lists = lists_with_first_ranks([1, 2])
    lists[1].relevant[:] = False
    with pytest.raises(MetricError, match="q1"):
        compute_metrics(lists)
    with pytest.raises(MetricError):
        compute_metrics([])


@pytest.mark.parametrize("seed", range(5))
def test_twenty_relevant_matches_exhaustive_ap(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(4, 30))
    relevance = np.zeros((4, 30), dtype=bool)
    for q in range(4):
        relevance[q, rng.choice(30, size=20, replace=False)] = True
    ids = [f"s{j:02d}" for j in range(30)]
    got = compute_metrics(ranked_lists(scores, relevance, list("abcd"), ids))
    ref = oracles.brute_force_metrics(scores.tolist(), relevance.tolist(), ids)
    for key in ref:
        assert got[key] == pytest.approx(ref[key], abs=1e-9)


def test_ties_broken_by_item_id():
    scores = np.zeros((1, 3))
    rl = ranked_lists(scores, np.array([[False, True, False]]), ["q"], ["c", "b", "a"])[0]
    assert rl.item_ids == ["a", "b", "c"]
    assert rl.first_relevant_rank() == 2


def test_average_precision_closed_form():
    assert average_precision(np.array([0, 1, 0, 1], dtype=bool)) == pytest.approx((1 / 2 + 2 / 4) / 2)


@given(st.lists(st.integers(1, 40), min_size=1, max_size=30))
@settings(max_examples=100)
def test_recall_monotone(ranks):
    m = compute_metrics(lists_with_first_ranks(ranks, length=40))
    assert 0 <= m["R@1"] <= m["R@5"] <= m["R@10"] <= 100


def test_identity_fixture_gives_600():
    emb = np.eye(5)
    caps = np.repeat(emb, 2, axis=0)
    vids = [f"v{i}" for i in range(5)]
    result = evaluate_embeddings(emb, caps, vids, [f"c{j}" for j in range(10)], np.repeat(vids, 2).tolist())
    assert result["sum_of_recalls"] == 600
    assert result["text_to_video"]["R@1"] == 100 and result["video_to_text"]["mAP"] == 1.0
    table = format_metrics(result)
    for token in ("R@1", "R@5", "R@10", "MedR", "mAP", "sum of recalls", "600.0"):
        assert token in table


def test_missing_video_rejected():
    with pytest.raises(MetricError, match="vx"):
        evaluate_embeddings(np.eye(2), np.eye(2), ["a", "b"], ["c1", "c2"], ["a", "vx"])


def _random_fixture(n_videos=10, per_video=2, seed=0):
    rng = np.random.default_rng(seed)
    cfg = micro_config()
    videos = [VideoItem(f"v{i:02d}", rng.normal(size=(rng.integers(1, 6), 8)).astype(np.float32))
              for i in range(n_videos)]
    caps = [CaptionItem(f"c{j:02d}", f"v{j // per_video:02d}", tuple(rng.integers(0, 20, size=rng.integers(1, 6))))
            for j in range(n_videos * per_video)]
    model = DualEncoding(cfg, seed=seed)
    run_epoch(model, make_minibatches(make_pairs({v.video_id: v for v in videos}, caps), 8), "train",
              Adam(model.params))
    return model, videos, caps


def test_random_model_matches_brute_force_script():
    model, videos, caps = _random_fixture()
    result = evaluate_bidirectional(model, videos, caps)
    fv = model.embed_videos(videos).astype(np.float64).tolist()
    fs = model.embed_captions(caps).astype(np.float64).tolist()
    t2v_scores = [[oracles.cosine(s, v) for v in fv] for s in fs]
    t2v_rel = [[c.video_id == v.video_id for v in videos] for c in caps]
    t2v = oracles.brute_force_metrics(t2v_scores, t2v_rel, [v.video_id for v in videos])
    v2t_scores = [list(col) for col in zip(*t2v_scores)]
    v2t_rel = [list(col) for col in zip(*t2v_rel)]
    v2t = oracles.brute_force_metrics(v2t_scores, v2t_rel, [c.caption_id for c in caps])
    for key in t2v:
        assert result["text_to_video"][key] == pytest.approx(t2v[key], abs=1e-9)
        assert result["video_to_text"][key] == pytest.approx(v2t[key], abs=1e-9)
    assert result["sum_of_recalls"] == pytest.approx(sum(t2v[f"R@{k}"] + v2t[f"R@{k}"] for k in (1, 5, 10)))


# --- index -------------------------------------------------------------------------


def test_three_video_index_has_unit_rows():
    model, videos, _ = _random_fixture()
    index = build_index(model, videos[:3], "h")
    assert len(index) == 3
    np.testing.assert_allclose(np.linalg.norm(index.vectors, axis=1), 1, atol=1e-5)


def test_index_rebuild_byte_identical(tmp_path):
    model, videos, _ = _random_fixture()
    build_index(model, videos, "h").save(tmp_path / "a.idx")
    build_index(model, videos, "h").save(tmp_path / "b.idx")
    assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
    loaded = VideoIndex.load(tmp_path / "a.idx")
    assert loaded.ids == [v.video_id for v in videos] and loaded.checkpoint_hash == "h"


def test_index_rows_match_per_item_embeddings():
    model, videos, _ = _random_fixture()
    index = build_index(model, videos, "h")
    for i, v in enumerate(videos):
        f = model.embed_videos([v])[0].astype(np.float64)
        np.testing.assert_allclose(index.vectors[i], f / np.linalg.norm(f), atol=1e-5)


def test_index_dim_mismatch():
    model, _, _ = _random_fixture()
    with pytest.raises(IndexFileError, match="dim"):
        build_index(model, [VideoItem("x", np.ones((2, 3)))], "h")


@pytest.fixture
def searchable():
    model, videos, caps = _random_fixture()
    vocab = Vocabulary(["<unk>"] + [f"w{i}" for i in range(1, 20)])
    return model, vocab, build_index(model, videos, "h"), videos


def test_query_full_ranking_when_top_k_large(searchable):
    model, vocab, index, videos = searchable
    out = query(model, vocab, index, "w1 w2 w3", top_k=100)
    assert len(out) == len(videos)
    assert sorted(i for i, _ in out) == sorted(v.video_id for v in videos)
    scores = [s for _, s in out]
    assert scores == sorted(scores, reverse=True)
    assert query(model, vocab, index, "w1 w2 w3", top_k=3) == out[:3]


def test_query_repeatable_and_exact(searchable):
    model, vocab, index, videos = searchable
    a = query(model, vocab, index, "W4 w9, w9!", top_k=5)
    assert a == query(model, vocab, index, "W4 w9, w9!", top_k=5)
    s = model.embed_captions([vocab.encode(["w4", "w9", "w9"])])[0].astype(np.float64)
    fv = model.embed_videos(videos).astype(np.float64)
    brute = {v.video_id: oracles.cosine(s, f) for v, f in zip(videos, fv)}
    for vid, score in a:
        assert score == pytest.approx(brute[vid], abs=1e-5)


def test_query_errors(searchable):
    model, vocab, index, _ = searchable
    with pytest.raises(IndexFileError, match="other"):
        query(model, vocab, index, "w1", checkpoint_hash="other")
    with pytest.raises(EmptyCaptionError):
        query(model, vocab, index, "?!")


def test_search_ties_by_id():
    index = VideoIndex(["b", "c", "a"], np.array([[1.0, 0], [1.0, 0], [1.0, 0]]), "h")
    assert [i for i, _ in index.search(np.array([1.0, 0]), 2)] == ["a", "b"]
    assert index.search(np.array([1.0, 0]), 0) == []


@pytest.mark.parametrize("seed", range(5))
def test_search_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(200, 6))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ids = [f"v{i:03d}" for i in range(200)]
    index = VideoIndex(ids, vecs, "h")
    q = rng.normal(size=6)
    scores = index.vectors @ (q / np.linalg.norm(q)).astype(np.float32)
    expected = sorted(range(200), key=lambda i: (-scores[i], ids[i]))[:17]
    assert [i for i, _ in index.search(q, 17)] == [ids[i] for i in expected]


def test_corrupted_index_rejected(tmp_path):
    index = VideoIndex(["a", "b"], np.eye(2), "h")
    index.save(tmp_path / "x.idx")
    data = bytearray((tmp_path / "x.idx").read_bytes())
    data[40] ^= 1
    (tmp_path / "y.idx").write_bytes(bytes(data))
    with pytest.raises(IndexFileError, match="checksum"):
        VideoIndex.load(tmp_path / "y.idx")
    (tmp_path / "z.idx").write_bytes(bytes(data[:-5]))
    with pytest.raises(IndexFileError):
        VideoIndex.load(tmp_path / "z.idx")
    (tmp_path / "w.idx").write_bytes(b"not an index")
    with pytest.raises(IndexFileError, match="magic"):
        VideoIndex.load(tmp_path / "w.idx")


def test_index_invariants():
    with pytest.raises(IndexFileError):
        VideoIndex(["a", "a"], np.eye(2), "h")
    with pytest.raises(IndexFileError):
        VideoIndex(["a"], np.eye(2), "h")
