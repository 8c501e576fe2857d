"""Ranking metrics, bidirectional evaluation, and the offline video index."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CaptionItem, VideoItem, Vocabulary, tokenize
from .model import DualEncoding

DEFAULT_KS = (1, 5, 10)
INDEX_MAGIC = b"DUALENC-INDEX\n"
INDEX_VERSION = 1


class MetricError(ValueError):
    pass


class IndexFileError(ValueError):
    """Invalid, corrupted or mismatched video index."""


@dataclass
class RankedList:
    query_id: str
    item_ids: list[str]
    relevant: np.ndarray  # bool, aligned with item_ids

    def first_relevant_rank(self) -> int:
        hits = np.flatnonzero(self.relevant)
        if hits.size == 0:
            raise MetricError(f"query {self.query_id!r} has no relevant item")
        return int(hits[0]) + 1


def id_ranks(ids: Sequence[str]) -> np.ndarray:
    """Position of every id in ascending lexicographic order (for tie-breaking)."""
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def rank_order(scores: np.ndarray, tie_ranks: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending ``tie_ranks``."""
    return np.lexsort((tie_ranks, -np.asarray(scores, dtype=np.float64)))


def ranked_lists(scores: np.ndarray, relevance: np.ndarray, query_ids: Sequence[str],
                 item_ids: Sequence[str]) -> list[RankedList]:
    """One ranked list per row of a (queries x items) score matrix."""
    ties = id_ranks(item_ids)
    items = np.asarray(item_ids, dtype=object)
    out = []
    for q, qid in enumerate(query_ids):
        order = rank_order(scores[q], ties)
        out.append(RankedList(qid, list(items[order]), np.asarray(relevance[q])[order].astype(bool)))
    return out


def average_precision(relevant: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of all relevant items."""
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        raise MetricError("average precision needs at least one relevant item")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def compute_metrics(lists: Sequence[RankedList], ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """R@K (percent), median first-relevant rank and mAP over ranked lists."""
    if not lists:
        raise MetricError("no queries to evaluate")
    empty = [rl.query_id for rl in lists if not np.any(rl.relevant)]
    if empty:
        raise MetricError(f"queries without relevant items: {empty[:10]}")
    ranks = np.array([rl.first_relevant_rank() for rl in lists])
    out = {f"R@{k}": 100.0 * float(np.mean(ranks <= k)) for k in ks}
    out["MedR"] = float(np.median(ranks))
    out["mAP"] = float(np.mean([average_precision(rl.relevant) for rl in lists]))
    return out


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise FloatingPointError("cosine similarity with a zero vector")
    return (a / na) @ (b / nb).T


def evaluate_embeddings(video_emb: np.ndarray, caption_emb: np.ndarray, video_ids: Sequence[str],
                        caption_ids: Sequence[str], caption_video_ids: Sequence[str],
                        ks: Sequence[int] = DEFAULT_KS) -> dict:
    """Text-to-video and video-to-text metrics plus the sum of all recalls."""
    missing = sorted(set(caption_video_ids) - set(video_ids))
    if missing:
        raise MetricError(f"captions refer to videos not in the test set: {missing[:5]}")
    sims = cosine_matrix(caption_emb, video_emb)  # captions x videos
    rel = np.asarray(caption_video_ids, dtype=object)[:, None] == np.asarray(video_ids, dtype=object)[None, :]
    t2v = compute_metrics(ranked_lists(sims, rel, caption_ids, video_ids), ks)
    v2t = compute_metrics(ranked_lists(sims.T, rel.T, video_ids, caption_ids), ks)
    total = sum(t2v[f"R@{k}"] + v2t[f"R@{k}"] for k in ks)
    return {"text_to_video": t2v, "video_to_text": v2t, "sum_of_recalls": total}


def evaluate_bidirectional(model: DualEncoding, videos: Sequence[VideoItem], captions: Sequence[CaptionItem],
                           ks: Sequence[int] = DEFAULT_KS) -> dict:
    """Encode the test set in eval mode and score both retrieval directions."""
    video_emb = model.embed_videos(list(videos))
    caption_emb = model.embed_captions(list(captions))
    return evaluate_embeddings(video_emb, caption_emb, [v.video_id for v in videos],
                               [c.caption_id for c in captions], [c.video_id for c in captions], ks)


def format_metrics(result: dict) -> str:
    """Aligned plain-text table of an evaluation result."""
    cols = [k for k in result["text_to_video"]]
    head = f"{'direction':<15}" + "".join(f"{c:>9}" for c in cols)
    lines = [head, "-" * len(head)]
    for name in ("text_to_video", "video_to_text"):
        row = result[name]
        cells = "".join(f"{row[c]:>9.3f}" if c == "mAP" else f"{row[c]:>9.1f}" for c in cols)
        lines.append(f"{name:<15}{cells}")
    lines.append(f"{'sum of recalls':<15}{result['sum_of_recalls']:>9.1f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# offline index / online query


class VideoIndex:
    """Unit-normalized eval-mode video embeddings, searchable by cosine."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, checkpoint_hash: str):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        ids = list(ids)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise IndexFileError(f"index has {len(ids)} ids but vectors of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise IndexFileError("index ids must be unique")
        self.ids = ids
        self.vectors = vectors
        self.checkpoint_hash = checkpoint_hash
        self._ties = id_ranks(ids)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, vector: np.ndarray, top_k: int) -> list[tuple[str, float]]:
        """Top ``top_k`` (id, cosine) pairs; ties broken by ascending id."""
        q = np.asarray(vector, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.dim:
            raise IndexFileError(f"query has dim {q.shape[0]}, index has {self.dim}")
        norm = np.linalg.norm(q)
        if norm == 0:
            raise FloatingPointError("query embedding is the zero vector")
        scores = self.vectors @ (q / norm)
        k = min(max(int(top_k), 0), len(self.ids))
        if k == 0:
            return []
        if k < len(scores):
            kth = np.partition(scores, len(scores) - k)[len(scores) - k]
            cand = np.flatnonzero(scores >= kth)
        else:
            cand = np.arange(len(scores))
        order = cand[rank_order(scores[cand], self._ties[cand])][:k]
        return [(self.ids[i], float(scores[i])) for i in order]

    def save(self, path: str | Path) -> None:
        header = json.dumps({"version": INDEX_VERSION, "checkpoint_hash": self.checkpoint_hash,
                             "count": len(self.ids), "dim": self.dim}, sort_keys=True).encode("utf-8")
        rows = self.vectors.astype("<f4").tobytes()
        id_table = "\n".join(self.ids).encode("utf-8")
        body = struct.pack("<I", len(header)) + header + rows + struct.pack("<Q", len(id_table)) + id_table
        digest = hashlib.sha256(body).digest()
        Path(path).write_bytes(INDEX_MAGIC + body + digest)

    @classmethod
    def load(cls, path: str | Path) -> "VideoIndex":
        data = Path(path).read_bytes()
        if not data.startswith(INDEX_MAGIC):
            raise IndexFileError(f"{path}: not a video index (bad magic)")
        body, digest = data[len(INDEX_MAGIC):-32], data[-32:]
        if len(data) < len(INDEX_MAGIC) + 36 or hashlib.sha256(body).digest() != digest:
            raise IndexFileError(f"{path}: checksum mismatch (truncated or corrupted)")
        (hlen,) = struct.unpack_from("<I", body, 0)
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
        if header.get("version") != INDEX_VERSION:
            raise IndexFileError(f"{path}: index version {header.get('version')} != {INDEX_VERSION}")
        count, dim = header["count"], header["dim"]
        pos = 4 + hlen
        nbytes = 4 * count * dim
        vectors = np.frombuffer(body, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
        pos += nbytes
        (idlen,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if pos + idlen != len(body):
            raise IndexFileError(f"{path}: id table length mismatch")
        ids = body[pos:pos + idlen].decode("utf-8").split("\n") if count else []
        return cls(ids, vectors.astype(np.float32), header["checkpoint_hash"])


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FloatingPointError("cannot normalize a zero embedding")
    return (x / norms).astype(np.float32)


def build_index(model: DualEncoding, videos: Sequence[VideoItem], checkpoint_hash: str) -> VideoIndex:
    """Encode every video in eval mode and store unit-normalized rows."""
    videos = list(videos)
    if videos and videos[0].dim != model.config.video_dim:
        raise IndexFileError(f"feature dim {videos[0].dim} does not match model video dim {model.config.video_dim}")
    emb = model.embed_videos(videos)
    return VideoIndex([v.video_id for v in videos], normalize_rows(emb), checkpoint_hash)


def query(model: DualEncoding, vocab: Vocabulary, index: VideoIndex, sentence: str, top_k: int = 10,
          checkpoint_hash: str | None = None) -> list[tuple[str, float]]:
    """Rank indexed videos for a free-form sentence."""
    if checkpoint_hash is not None and checkpoint_hash != index.checkpoint_hash:
        raise IndexFileError(f"index was built from checkpoint {index.checkpoint_hash}, "
                             f"loaded model is {checkpoint_hash}")
    tokens = vocab.encode(tokenize(sentence))
    emb = model.embed_captions([tokens])[0]
    return index.search(emb, top_k)
