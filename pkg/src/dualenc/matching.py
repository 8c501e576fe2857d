"""Common-space projection, cosine similarity and the hardest-negative ranking loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor


class LossError(ValueError):
    pass


class ProjectionHead:
    """Affine map into the common space followed by batch normalization.

    Running statistics are plain arrays, not parameters; they are updated only
    by ``project(..., train=True)`` and are required for eval mode.
    """

    def __init__(self, params: ParameterSet, prefix: str, in_dim: int, out_dim: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.params = params
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.momentum = momentum
        self.eps = eps
        for name in ("weight", "bias", "bn.gamma", "bn.beta"):
            if f"{prefix}.{name}" not in params:
                raise KeyError(f"missing parameter {prefix}.{name}")
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    @property
    def has_running_stats(self) -> bool:
        return self.running_mean is not None

    def project(self, phi: Tensor, train: bool, update_stats: bool | None = None) -> Tensor:
        """f = BN(phi @ W + b).

        In train mode the batch statistics normalize the output; they are folded
        into the running averages unless ``update_stats`` is False.
        """
        if phi.ndim != 2 or phi.shape[1] != self.in_dim:
            raise ad.ShapeError(f"{self.prefix}: expected (N, {self.in_dim}) input, got {phi.shape}")
        pre = ad.affine(phi, self._p("weight"), self._p("bias"))
        gamma, beta = self._p("bn.gamma"), self._p("bn.beta")
        if train:
            if pre.shape[0] < 2:
                raise LossError(f"{self.prefix}: batch normalization needs at least 2 items in train mode")
            out = ad.batchnorm(pre, gamma, beta, self.eps)
            if update_stats is None or update_stats:
                self._update_stats(pre.data)
            return out
        if not self.has_running_stats:
            raise RuntimeError(f"{self.prefix}: eval mode before any training step (running stats unset)")
        return ad.batchnorm(pre, gamma, beta, self.eps, mean=self.running_mean, var=self.running_var)

    def _update_stats(self, x: np.ndarray) -> None:
        mu, _, unbiased = ad.batch_stats(x.astype(np.float64))
        if self.running_mean is None:
            self.running_mean = np.zeros(self.out_dim, dtype=np.float32)
            self.running_var = np.ones(self.out_dim, dtype=np.float32)
        m = self.momentum
        # stored as float32 so checkpoints reproduce them exactly
        self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(np.float32)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise FloatingPointError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(videos: Tensor, sentences: Tensor) -> Tensor:
    """S[i, j] = cos(video i, sentence j) for (B, D) inputs."""
    return ad.matmul(ad.l2_normalize(videos), ad.transpose(ad.l2_normalize(sentences)))


def hardest_negatives(sims: np.ndarray, video_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Hardest in-batch negatives for every positive pair i.

    Returns (neg_sentence, neg_video): column of the most similar sentence of
    another video for video i, and row of the most similar video of another
    video id for sentence i.  Ties go to the lowest index.
    """
    ids = np.asarray(video_ids)
    negative = ids[:, None] != ids[None, :]
    if not negative.any(axis=1).all():
        lonely = [str(ids[i]) for i in np.flatnonzero(~negative.any(axis=1))]
        raise LossError(f"no eligible negative in batch for video ids {sorted(set(lonely))}")
    masked = np.where(negative, sims, -np.inf)
    neg_sentence = np.argmax(masked, axis=1)
    neg_video = np.argmax(masked, axis=0)
    return neg_sentence, neg_video


def ranking_loss(sims: Tensor, video_ids: Sequence[str], margin: float = 0.2) -> Tensor:
    """Mean over pairs of the two hinge terms against the hardest negatives.

    ``sims`` is the (B, B) video x sentence similarity matrix whose diagonal
    holds the positive pairs.
    """
    bsz = sims.shape[0]
    if sims.shape != (bsz, bsz) or len(video_ids) != bsz:
        raise ad.ShapeError(f"ranking_loss: sims {sims.shape} vs {len(video_ids)} video ids")
    if bsz < 2:
        raise LossError("ranking loss needs a batch of at least 2 pairs")
    neg_s, neg_v = hardest_negatives(sims.data, video_ids)
    idx = np.arange(bsz)
    pos = ad.gather_2d(sims, idx, idx)
    s_neg = ad.gather_2d(sims, idx, neg_s)
    v_neg = ad.gather_2d(sims, neg_v, idx)
    term_s = ad.relu(ad.add_scalar(s_neg - pos, margin))
    term_v = ad.relu(ad.add_scalar(v_neg - pos, margin))
    return ad.scale(ad.sum_all(term_s + term_v), 1.0 / bsz)


def batch_loss(video_emb: Tensor, sentence_emb: Tensor, video_ids: Sequence[str],
               margin: float = 0.2) -> Tensor:
    return ranking_loss(similarity_matrix(video_emb, sentence_emb), video_ids, margin)
