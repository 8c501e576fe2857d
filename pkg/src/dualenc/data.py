"""Captions, vocabulary, frame features and mini-batches."""

from __future__ import annotations

import hashlib
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

UNK = "<unk>"
MIN_COUNT = 5

_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")
_ALNUM = re.compile(r"[^\W_]")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class EmptyCaptionError(DataError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip punctuation off token edges.

    Inner punctuation (hyphens, apostrophes) is kept, so "MAN-made" becomes
    "man-made".  Tokens left empty after stripping are dropped.
    """
    tokens = []
    for raw in text.lower().split():
        tok = _EDGE_PUNCT.sub("", raw)
        if tok and _ALNUM.search(tok):
            tokens.append(tok)
    if not tokens:
        raise EmptyCaptionError(f"caption has no alphanumeric content: {text!r}")
    return tokens


class Vocabulary:
    """Token to index map; index 0 is the shared rare/unknown token."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            raise DataError(f"vocabulary must start with {UNK}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary has duplicate tokens")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, captions: Iterable[str | Sequence[str]], min_count: int = MIN_COUNT) -> "Vocabulary":
        """Build from training captions (raw strings or token lists)."""
        counts: Counter[str] = Counter()
        n = 0
        for cap in captions:
            counts.update(tokenize(cap) if isinstance(cap, str) else cap)
            n += 1
        if n == 0:
            raise DataError("cannot build a vocabulary from an empty corpus")
        kept = sorted(t for t, c in counts.items() if c >= min_count and t != UNK)
        return cls([UNK, *kept])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def index(self, token: str) -> int:
        return self._index.get(token, 0)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, 0) for t in tokens]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass(frozen=True)
class VideoItem:
    video_id: str
    frames: np.ndarray  # (n, d)

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"video {self.video_id!r} needs at least one frame, got shape {self.frames.shape}")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class CaptionItem:
    caption_id: str
    video_id: str
    indices: tuple[int, ...]
    text: str = ""

    def __post_init__(self):
        if not self.indices:
            raise EmptyCaptionError(f"caption {self.caption_id!r} is empty")


def make_caption(caption_id: str, video_id: str, text: str, vocab: Vocabulary) -> CaptionItem:
    return CaptionItem(caption_id, video_id, tuple(vocab.encode(tokenize(text))), text)


def bow_encode(indices: Sequence[int], vocab_size: int) -> np.ndarray:
    """Average of the one-hot vectors of a caption's tokens."""
    if len(indices) == 0:
        raise EmptyCaptionError("bag-of-words needs at least one token")
    counts = np.bincount(np.asarray(indices), minlength=vocab_size).astype(np.float64)
    if counts.size != vocab_size:
        raise DataError(f"token index out of range for vocabulary of size {vocab_size}")
    return counts / len(indices)


# ---------------------------------------------------------------------------
# file formats


def load_frame_features(path: str | Path) -> dict[str, VideoItem]:
    """Read ``#dim d`` then ``video_id<TAB>frame_index<TAB>floats`` lines."""
    videos: dict[str, list[np.ndarray]] = {}
    dim = None
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if dim is None:
                m = re.fullmatch(r"#dim\s+(\d+)\s*", line)
                if not m or int(m.group(1)) < 1:
                    raise DataError(f"{path}:{lineno}: expected '#dim <d>' header")
                dim = int(m.group(1))
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            vid, idx, values = parts
            try:
                frame_idx = int(idx)
                row = np.array(values.split(), dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if row.shape[0] != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {row.shape[0]}")
            if vid != current:
                if vid in videos:
                    raise DataError(f"{path}:{lineno}: duplicate or non-contiguous video id {vid!r}")
                videos[vid] = []
                current = vid
            if frame_idx != len(videos[vid]):
                raise DataError(f"{path}:{lineno}: frame index {frame_idx} out of order for {vid!r}")
            videos[vid].append(row)
    if dim is None:
        raise DataError(f"{path}: missing '#dim <d>' header")
    return {vid: VideoItem(vid, np.stack(rows)) for vid, rows in videos.items()}


def write_frame_features(path: str | Path, videos: Iterable[VideoItem]) -> None:
    videos = list(videos)
    if not videos:
        raise DataError("no videos to write")
    dim = videos[0].dim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim {dim}\n")
        for v in videos:
            if v.dim != dim:
                raise DataError(f"video {v.video_id!r} has dim {v.dim}, expected {dim}")
            for t, row in enumerate(v.frames):
                # repr of a float32 round-trips exactly
                fh.write(f"{v.video_id}\t{t}\t{' '.join(repr(float(x)) for x in np.float32(row))}\n")


def read_caption_file(path: str | Path) -> list[tuple[str, str, str]]:
    """Raw ``(caption_id, video_id, sentence)`` records."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected '<caption_id>\\t<video_id>\\t<sentence>'")
            if parts[0] in seen:
                raise DataError(f"{path}:{lineno}: duplicate caption id {parts[0]!r}")
            seen.add(parts[0])
            records.append((parts[0], parts[1], parts[2]))
    return records


def load_captions(path: str | Path, vocab: Vocabulary) -> list[CaptionItem]:
    items = []
    for lineno, (cid, vid, text) in enumerate(read_caption_file(path), 1):
        try:
            items.append(make_caption(cid, vid, text, vocab))
        except EmptyCaptionError as exc:
            raise DataError(f"{path}: caption {cid!r}: {exc}") from None
    return items


def write_captions(path: str | Path, records: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cid, vid, text in records:
            fh.write(f"{cid}\t{vid}\t{text}\n")


def load_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """``<token> <floats>`` per line; all vectors must share one dimension."""
    out: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array(parts[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.shape[0]
            if vec.shape[0] != dim or dim == 0:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {vec.shape[0]}")
            out[parts[0]] = vec
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class MiniBatch:
    frames: np.ndarray  # (B, n_max, d), zero padded
    frame_lengths: np.ndarray  # (B,)
    tokens: np.ndarray  # (B, m_max), zero padded
    token_lengths: np.ndarray  # (B,)
    video_ids: list[str]
    caption_ids: list[str]

    def __len__(self) -> int:
        return len(self.video_ids)


def pad_frames(videos: Sequence[VideoItem]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([v.frames.shape[0] for v in videos])
    dims = {v.dim for v in videos}
    if len(dims) != 1:
        raise DataError(f"videos in one batch have different feature dims {sorted(dims)}")
    out = np.zeros((len(videos), lengths.max(), dims.pop()), dtype=np.float32)
    for i, v in enumerate(videos):
        out[i, : lengths[i]] = v.frames
    return out, lengths


def pad_tokens(captions: Sequence[CaptionItem]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(c.indices) for c in captions])
    out = np.zeros((len(captions), lengths.max()), dtype=np.int64)
    for i, c in enumerate(captions):
        out[i, : lengths[i]] = c.indices
    return out, lengths


def collate(pairs: Sequence[tuple[VideoItem, CaptionItem]]) -> MiniBatch:
    frames, flen = pad_frames([v for v, _ in pairs])
    tokens, tlen = pad_tokens([c for _, c in pairs])
    return MiniBatch(frames, flen, tokens, tlen, [v.video_id for v, _ in pairs],
                     [c.caption_id for _, c in pairs])


def make_pairs(videos: dict[str, VideoItem], captions: Sequence[CaptionItem]) -> list[tuple[VideoItem, CaptionItem]]:
    """One training pair per caption; the video's features are shared, not copied."""
    missing = sorted({c.video_id for c in captions} - set(videos))
    if missing:
        raise DataError(f"captions reference unknown videos: {missing[:5]}")
    return [(videos[c.video_id], c) for c in captions]


def make_minibatches(pairs: Sequence[tuple[VideoItem, CaptionItem]], batch_size: int = 128,
                     seed: int = 0, epoch: int = 0) -> Iterator[MiniBatch]:
    """Shuffle pairs deterministically for (seed, epoch) and yield padded batches.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    if len({v.video_id for v, _ in pairs}) < 2:
        raise DataError("need pairs from at least two distinct videos to form negatives")
    order = list(range(len(pairs)))
    random.Random(f"{seed}:{epoch}").shuffle(order)
    for start in range(0, len(order), batch_size):
        yield collate([pairs[i] for i in order[start:start + batch_size]])
