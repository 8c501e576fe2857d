"""The full dual encoding model: both encoders plus their projection heads."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import CaptionItem, MiniBatch, VideoItem, pad_frames, pad_tokens
from .encoders import ModelConfig, encode_sentences, encode_videos, init_params, param_specs
from .matching import ProjectionHead, batch_loss


def check_params(config: ModelConfig, params: ParameterSet) -> None:
    """Raise if ``params`` does not hold exactly the tensors ``config`` needs."""
    expected = {name: shape for name, shape, _, _ in param_specs(config)}
    names = set(params.names())
    if names != set(expected):
        diff = sorted(names ^ set(expected))
        raise ValueError(f"parameters do not match the config: {diff[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")


class DualEncoding:
    def __init__(self, config: ModelConfig, seed: int = 0, params: ParameterSet | None = None):
        self.config = config
        if params is None:
            params = init_params(config, np.random.default_rng(seed))
        else:
            check_params(config, params)
        self.params = params
        self.video_head = ProjectionHead(params, "video.proj", config.encoding_dim("video"), config.common_dim,
                                         config.bn_momentum, config.bn_eps)
        self.text_head = ProjectionHead(params, "text.proj", config.encoding_dim("text"), config.common_dim,
                                        config.bn_momentum, config.bn_eps)

    @property
    def heads(self) -> dict[str, ProjectionHead]:
        return {"video": self.video_head, "text": self.text_head}

    @property
    def is_trained(self) -> bool:
        return self.video_head.has_running_stats and self.text_head.has_running_stats

    def video_embeddings(self, frames: np.ndarray, lengths: np.ndarray, train: bool = False,
                         update_stats: bool | None = None) -> Tensor:
        phi = encode_videos(frames, lengths, self.config, self.params)
        return self.video_head.project(phi, train, update_stats)

    def sentence_embeddings(self, tokens: np.ndarray, lengths: np.ndarray, train: bool = False,
                            update_stats: bool | None = None) -> Tensor:
        phi = encode_sentences(tokens, lengths, self.config, self.params)
        return self.text_head.project(phi, train, update_stats)

    def loss(self, batch: MiniBatch, update_stats: bool = True) -> Tensor:
        """Ranking loss of a batch with batch-statistics normalization."""
        fv = self.video_embeddings(batch.frames, batch.frame_lengths, train=True, update_stats=update_stats)
        fs = self.sentence_embeddings(batch.tokens, batch.token_lengths, train=True, update_stats=update_stats)
        return batch_loss(fv, fs, batch.video_ids, self.config.margin)

    # inference helpers; eval mode, no graph

    def embed_videos(self, videos: Sequence[VideoItem], chunk: int = 256) -> np.ndarray:
        """Eval-mode f(v) rows, in input order."""
        out = []
        with ad.no_grad():
            for i in range(0, len(videos), chunk):
                frames, lengths = pad_frames(videos[i:i + chunk])
                out.append(self.video_embeddings(frames, lengths).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.common_dim), np.float32)

    def embed_captions(self, captions: Sequence[CaptionItem | Sequence[int]], chunk: int = 256) -> np.ndarray:
        out = []
        items = [c if isinstance(c, CaptionItem) else CaptionItem("", "", tuple(c)) for c in captions]
        with ad.no_grad():
            for i in range(0, len(items), chunk):
                tokens, lengths = pad_tokens(items[i:i + chunk])
                out.append(self.sentence_embeddings(tokens, lengths).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.common_dim), np.float32)
