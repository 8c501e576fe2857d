"""Small generated corpora with a known video/caption correspondence.

Every video is a (object, action) combination.  Its frames show the object's
feature cluster in the first half and the action's cluster in the second
half, plus Gaussian noise.  Captions name the object and the action among
filler words, so a model can only match them by learning both halves.
"""

from __future__ import annotations

import numpy as np

from .data import VideoItem


def generate_corpus(n_videos: int = 32, captions_per_video: int = 2, dim: int = 16,
                    min_frames: int = 4, max_frames: int = 8, n_objects: int = 8, n_actions: int = 4,
                    n_fillers: int = 38, fillers_per_caption: int = 4, noise: float = 0.3,
                    seed: int = 0) -> tuple[dict[str, VideoItem], list[tuple[str, str, str]]]:
    """Return (videos by id, caption records ``(caption_id, video_id, sentence)``).

    The default vocabulary is 8 object words + 4 action words + 38 fillers =
    50 tokens.  Fillers are dealt round-robin, so each appears at least six
    times; with seed 0 every object and action word also clears the
    five-occurrence threshold.
    """
    if n_objects * n_actions < n_videos:
        raise ValueError("not enough (object, action) combinations for the requested videos")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_objects + n_actions, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    objects = [f"obj{i}" for i in range(n_objects)]
    actions = [f"act{i}" for i in range(n_actions)]
    fillers = [f"w{i}" for i in range(n_fillers)]
    combos = [(o, a) for o in range(n_objects) for a in range(n_actions)]
    chosen = rng.permutation(len(combos))[:n_videos]

    n_slots = n_videos * captions_per_video * fillers_per_caption
    filler_pool = [fillers[i % n_fillers] for i in range(n_slots)]
    rng.shuffle(filler_pool)

    videos: dict[str, VideoItem] = {}
    captions = []
    slot = 0
    for vi, ci in enumerate(chosen):
        obj, act = combos[ci]
        vid = f"video{vi}"
        n = int(rng.integers(min_frames, max_frames + 1))
        split = n // 2
        base = np.where(np.arange(n)[:, None] < split, centers[obj], centers[n_objects + act])
        frames = base + noise * rng.normal(size=(n, dim))
        videos[vid] = VideoItem(vid, frames.astype(np.float32))
        for k in range(captions_per_video):
            words = filler_pool[slot:slot + fillers_per_caption]
            slot += fillers_per_caption
            tokens = [objects[obj], actions[act], *words]
            order = rng.permutation(len(tokens))
            # keep object before action so word order carries the same story as frame order
            positions = sorted(order[:2])
            sentence = [None] * len(tokens)
            sentence[positions[0]], sentence[positions[1]] = tokens[0], tokens[1]
            rest = iter(words)
            sentence = [w if w is not None else next(rest) for w in sentence]
            captions.append((f"{vid}#{k}", vid, " ".join(sentence).capitalize() + "."))
    return videos, captions
