"""Multi-level video and sentence encoders.

Each side produces up to three encodings which are concatenated in level
order:

1. mean pooling of the input vectors (frame features, or one-hot words,
   which gives a bag-of-words vector);
2. the time-averaged output of a bidirectional GRU;
3. 1-d convolutions of several kernel sizes over the biGRU output, ReLU,
   max-pooled over time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor

DEFAULT_HIDDEN = 512
DEFAULT_FILTERS = 512
DEFAULT_VIDEO_KERNELS = (2, 3, 4, 5)
DEFAULT_TEXT_KERNELS = (2, 3, 4)
DEFAULT_WORD_DIM = 300
DEFAULT_COMMON_DIM = 2048
DEFAULT_MARGIN = 0.2
ALL_LEVELS = (1, 2, 3)


@dataclass
class ModelConfig:
    """Architecture hyperparameters for both encoders and the common space."""

    video_dim: int
    vocab_size: int
    hidden: int = DEFAULT_HIDDEN
    filters: int = DEFAULT_FILTERS
    video_kernels: tuple[int, ...] = DEFAULT_VIDEO_KERNELS
    text_kernels: tuple[int, ...] = DEFAULT_TEXT_KERNELS
    word_dim: int = DEFAULT_WORD_DIM
    video_levels: tuple[int, ...] = ALL_LEVELS
    text_levels: tuple[int, ...] = ALL_LEVELS
    common_dim: int = DEFAULT_COMMON_DIM
    margin: float = DEFAULT_MARGIN
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("video_kernels", "text_kernels", "video_levels", "text_levels"):
            setattr(self, name, tuple(int(x) for x in getattr(self, name)))
        self.video_levels = tuple(sorted(set(self.video_levels)))
        self.text_levels = tuple(sorted(set(self.text_levels)))
        self.validate()

    def validate(self) -> None:
        for side, levels in (("video", self.video_levels), ("text", self.text_levels)):
            if not levels:
                raise ad.ConfigurationError(f"{side} side needs at least one enabled level")
            if not set(levels) <= set(ALL_LEVELS):
                raise ad.ConfigurationError(f"{side} levels must be a subset of {{1,2,3}}, got {levels}")
        for side, kernels in (("video", self.video_kernels), ("text", self.text_kernels)):
            if 3 in getattr(self, f"{side}_levels") and not kernels:
                raise ad.ConfigurationError(f"{side} level 3 needs at least one kernel size")
            if any(k < 2 for k in kernels):
                raise ad.ConfigurationError(f"{side} kernel sizes must be >= 2, got {kernels}")
        for name in ("video_dim", "vocab_size", "hidden", "filters", "word_dim", "common_dim"):
            if getattr(self, name) < 1:
                raise ad.ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ad.ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def level_dims(self, side: str) -> dict[int, int]:
        """Output width of each enabled level on ``side`` ('video' or 'text')."""
        if side == "video":
            widths = {1: self.video_dim, 2: 2 * self.hidden, 3: len(self.video_kernels) * self.filters}
            levels = self.video_levels
        elif side == "text":
            widths = {1: self.vocab_size, 2: 2 * self.hidden, 3: len(self.text_kernels) * self.filters}
            levels = self.text_levels
        else:
            raise ValueError(f"unknown side {side!r}")
        return {lv: widths[lv] for lv in levels}

    def level_slices(self, side: str) -> dict[int, slice]:
        """Where each enabled level sits inside the concatenated encoding."""
        out, start = {}, 0
        for lv, width in self.level_dims(side).items():
            out[lv] = slice(start, start + width)
            start += width
        return out

    def encoding_dim(self, side: str) -> int:
        return sum(self.level_dims(side).values())


# ---------------------------------------------------------------------------
# initialization


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _gru_specs(prefix: str, in_dim: int, hidden: int) -> list[tuple[str, tuple[int, ...], str, int]]:
    specs = []
    for gate in ("z", "r", "h"):
        specs.append((f"{prefix}.W_{gate}", (in_dim, hidden), "uniform", in_dim))
        specs.append((f"{prefix}.U_{gate}", (hidden, hidden), "uniform", hidden))
        specs.append((f"{prefix}.b_{gate}", (hidden,), "zeros", 0))
    return specs


def _conv_specs(prefix: str, in_dim: int, filters: int, kernels: Sequence[int]):
    specs = []
    for k in kernels:
        specs.append((f"{prefix}.k{k}.weight", (k, in_dim, filters), "uniform", k * in_dim))
        specs.append((f"{prefix}.k{k}.bias", (filters,), "zeros", 0))
    return specs


def head_specs(prefix: str, in_dim: int, out_dim: int):
    return [
        (f"{prefix}.weight", (in_dim, out_dim), "uniform", in_dim),
        (f"{prefix}.bias", (out_dim,), "zeros", 0),
        (f"{prefix}.bn.gamma", (out_dim,), "ones", 0),
        (f"{prefix}.bn.beta", (out_dim,), "zeros", 0),
    ]


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str, int]]:
    """(name, shape, init kind, fan_in) for every trainable tensor of the model.

    GRU and convolution parameters exist only for sides that use level 2 or 3.
    """
    h = config.hidden
    specs = []
    if {2, 3} & set(config.video_levels):
        specs += _gru_specs("video.gru.fwd", config.video_dim, h)
        specs += _gru_specs("video.gru.bwd", config.video_dim, h)
    if 3 in config.video_levels:
        specs += _conv_specs("video.conv", 2 * h, config.filters, config.video_kernels)
    if {2, 3} & set(config.text_levels):
        specs.append(("text.embedding", (config.vocab_size, config.word_dim), "embedding", 0))
        specs += _gru_specs("text.gru.fwd", config.word_dim, h)
        specs += _gru_specs("text.gru.bwd", config.word_dim, h)
    if 3 in config.text_levels:
        specs += _conv_specs("text.conv", 2 * h, config.filters, config.text_kernels)
    specs += head_specs("video.proj", config.encoding_dim("video"), config.common_dim)
    specs += head_specs("text.proj", config.encoding_dim("text"), config.common_dim)
    return specs


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Weights uniform(+-1/sqrt(fan_in)), biases zero, BN scale one, embeddings N(0, 0.01^2)."""
    params = ParameterSet()
    for name, shape, kind, fan_in in param_specs(config):
        if kind == "uniform":
            params[name] = uniform_init(rng, shape, fan_in)
        elif kind == "embedding":
            params[name] = Tensor(rng.normal(0.0, 0.01, size=shape), requires_grad=True)
        elif kind == "ones":
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        else:
            params[name] = zeros(shape)
    return params


def load_pretrained_embeddings(params: ParameterSet, vocab_tokens: Sequence[str],
                               vectors: dict[str, np.ndarray]) -> int:
    """Overwrite embedding rows for tokens found in ``vectors``; returns the count."""
    if "text.embedding" not in params:
        return 0
    table = params["text.embedding"].data
    hits = 0
    for i, tok in enumerate(vocab_tokens):
        vec = vectors.get(tok)
        if vec is None:
            continue
        if vec.shape != (table.shape[1],):
            raise ad.ShapeError(f"embedding for {tok!r} has dim {vec.shape[0]}, expected {table.shape[1]}")
        table[i] = vec
        hits += 1
    return hits


# ---------------------------------------------------------------------------
# building blocks


def gru_layer(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """Run a GRU over x (B, T, in) from a zero state; returns states (B, T, H).

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * c
    """
    p = {name: params[f"{prefix}.{name}"] for name in
         ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}
    hidden = p["U_h"].shape[0]
    w_x = ad.concat_last_axis([p["W_z"], p["W_r"], p["W_h"]])
    b_x = ad.concat_last_axis([p["b_z"], p["b_r"], p["b_h"]])
    u_zr = ad.concat_last_axis([p["U_z"], p["U_r"]])
    # input projections for all steps at once
    xp = ad.affine(x, w_x, b_x)
    batch, steps = x.shape[0], x.shape[1]
    h = Tensor(np.zeros((batch, hidden), dtype=x.data.dtype), dtype=x.data.dtype)
    states = []
    for t in range(steps):
        xt = ad.select_step(xp, t)
        zr = ad.sigmoid(ad.slice_last_axis(xt, 0, 2 * hidden) + ad.matmul(h, u_zr))
        z = ad.slice_last_axis(zr, 0, hidden)
        r = ad.slice_last_axis(zr, hidden, 2 * hidden)
        cand = ad.tanh(ad.slice_last_axis(xt, 2 * hidden, 3 * hidden) + ad.matmul(r * h, p["U_h"]))
        h = (1.0 - z) * h + z * cand
        states.append(h)
    return ad.stack_steps(states)


def reverse_index(lengths: np.ndarray, steps: int) -> np.ndarray:
    """Per-row index reversing the first lengths[b] steps; padding stays put."""
    t = np.arange(steps)[None, :]
    n = np.asarray(lengths)[:, None]
    return np.where(t < n, n - 1 - t, t)


def bigru(x: Tensor, lengths: np.ndarray, params: ParameterSet, prefix: str) -> Tensor:
    """Bidirectional GRU; row t of the output is [forward h_t, backward h_t].

    The backward state at position t has read x_n ... x_t of the unpadded
    sequence, so padding never leaks into valid positions.
    """
    fwd = gru_layer(x, params, f"{prefix}.fwd")
    rev = reverse_index(lengths, x.shape[1])
    bwd = ad.gather_steps(gru_layer(ad.gather_steps(x, rev), params, f"{prefix}.bwd"), rev)
    return ad.concat_last_axis([fwd, bwd])


def step_mask(lengths: np.ndarray, steps: int, width: int, dtype) -> Tensor:
    mask = (np.arange(steps)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)
    return Tensor(np.repeat(mask[:, :, None], width, axis=2), dtype=dtype)


def conv_pool(h: Tensor, lengths: np.ndarray, params: ParameterSet, prefix: str,
              kernels: Sequence[int]) -> Tensor:
    """[max_t relu(conv_k(H))_t for k in kernels], padded steps zeroed first."""
    masked = h * step_mask(lengths, h.shape[1], h.shape[2], h.data.dtype)
    pooled = []
    for k in sorted(kernels):
        conv = ad.conv1d_same(masked, params[f"{prefix}.k{k}.weight"], params[f"{prefix}.k{k}.bias"])
        pooled.append(ad.max_axis(ad.relu(conv), axis=1, lengths=lengths))
    return ad.concat_last_axis(pooled)


def multi_level(level1: Tensor, seq: Tensor | None, lengths: np.ndarray, params: ParameterSet,
                prefix: str, levels: Sequence[int], kernels: Sequence[int]) -> Tensor:
    parts = []
    if 1 in levels:
        parts.append(level1)
    if {2, 3} & set(levels):
        h = bigru(seq, lengths, params, f"{prefix}.gru")
        if 2 in levels:
            parts.append(ad.mean_axis(h, axis=1, lengths=lengths))
        if 3 in levels:
            parts.append(conv_pool(h, lengths, params, f"{prefix}.conv", kernels))
    return ad.concat_last_axis(parts)


# ---------------------------------------------------------------------------
# public encoders


def encode_videos(frames: np.ndarray, lengths: np.ndarray, config: ModelConfig,
                  params: ParameterSet) -> Tensor:
    """phi(v) for a padded batch of frame sequences (B, n_max, d)."""
    lengths = np.asarray(lengths)
    if frames.ndim != 3 or frames.shape[2] != config.video_dim:
        raise ad.ShapeError(f"frames {frames.shape} do not match video dim {config.video_dim}")
    if np.any(lengths < 1):
        raise ValueError("cannot encode a video with no frames")
    x = Tensor(frames)
    level1 = ad.mean_axis(x, axis=1, lengths=lengths)
    return multi_level(level1, x, lengths, params, "video", config.video_levels, config.video_kernels)


def encode_sentences(tokens: np.ndarray, lengths: np.ndarray, config: ModelConfig,
                     params: ParameterSet) -> Tensor:
    """phi(s) for a padded batch of token index sequences (B, m_max)."""
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("cannot encode an empty caption")
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ad.ShapeError(f"token index out of range for vocabulary of size {config.vocab_size}")
    level1 = None
    if 1 in config.text_levels:
        bow = np.zeros((tokens.shape[0], config.vocab_size))
        for i, n in enumerate(lengths):
            np.add.at(bow[i], tokens[i, :n], 1.0 / n)
        level1 = Tensor(bow)
    seq = None
    if {2, 3} & set(config.text_levels):
        seq = ad.embedding_lookup(params["text.embedding"], tokens)
    return multi_level(level1, seq, lengths, params, "text", config.text_levels, config.text_kernels)


def encode_video(frames: np.ndarray, config: ModelConfig, params: ParameterSet) -> Tensor:
    """phi(v) of a single (n, d) frame sequence, as a 1-d tensor."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"video needs at least one frame, got shape {frames.shape}")
    with ad.no_grad():
        return Tensor(encode_videos(frames[None], np.array([frames.shape[0]]), config, params).data[0])


def encode_sentence(indices: Sequence[int], config: ModelConfig, params: ParameterSet) -> Tensor:
    """phi(s) of a single token index sequence, as a 1-d tensor."""
    if len(indices) == 0:
        raise ValueError("cannot encode an empty caption")
    tokens = np.asarray(indices)[None]
    with ad.no_grad():
        return Tensor(encode_sentences(tokens, np.array([tokens.shape[1]]), config, params).data[0])
