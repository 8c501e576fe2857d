"""Adam, the plateau learning-rate schedule, the epoch loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .data import MiniBatch, VideoItem, CaptionItem, Vocabulary, make_minibatches
from .encoders import ModelConfig
from .matching import LossError
from .model import DualEncoding

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
DEFAULT_BATCH_SIZE = 128
MAX_EPOCHS = 50
LR_PATIENCE = 3
STOP_PATIENCE = 10

CHECKPOINT_MAGIC = b"DUALENC-CKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Adam:
    """Bias-corrected Adam over a :class:`ParameterSet`."""

    def __init__(self, params: ParameterSet, lr: float = DEFAULT_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self) -> None:
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data -= update.astype(t.data.dtype)
        self.params.zero_grad()


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_since_lr_improvement: int = 0
    epochs_since_best: int = 0
    lr: float = DEFAULT_LR


def schedule_update(state: TrainState, val_loss: float, max_epochs: int = MAX_EPOCHS,
                    lr_patience: int = LR_PATIENCE, stop_patience: int = STOP_PATIENCE) -> str:
    """Advance the schedule by one epoch; returns 'continue', 'halve_lr' or 'stop'.

    An epoch improves when its validation loss is strictly below the best so
    far.  After ``lr_patience`` non-improving epochs the rate is halved and that
    counter restarts; after ``stop_patience`` of them, or at ``max_epochs``,
    training stops.
    """
    state.epoch += 1
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_best = 0
        state.epochs_since_lr_improvement = 0
    else:
        state.epochs_since_best += 1
        state.epochs_since_lr_improvement += 1
    if state.epochs_since_best >= stop_patience or state.epoch >= max_epochs:
        return "stop"
    if state.epochs_since_lr_improvement >= lr_patience:
        state.epochs_since_lr_improvement = 0
        state.lr /= 2
        return "halve_lr"
    return "continue"


def run_epoch(model: DualEncoding, batches: Iterable[MiniBatch], mode: str = "train",
              optimizer: Adam | None = None) -> float:
    """Mean batch loss; in train mode one Adam step per batch.

    Batches without any eligible negative (e.g. a final batch holding a single
    video) are skipped with a warning.  Validation uses batch statistics, as
    in training, and leaves every parameter and running statistic untouched.
    """
    if mode not in ("train", "validate"):
        raise ValueError(f"mode must be 'train' or 'validate', got {mode!r}")
    if mode == "train" and optimizer is None:
        raise ValueError("train mode needs an optimizer")
    losses = []
    seen = 0
    for batch in batches:
        seen += 1
        if len(set(batch.video_ids)) < 2:
            log.warning("skipping batch of %d pairs with a single video id", len(batch))
            continue
        if mode == "train":
            loss = model.loss(batch, update_stats=True)
            losses.append(loss.item())
            ad.backward(loss)
            optimizer.step()
        else:
            with ad.no_grad():
                losses.append(model.loss(batch, update_stats=False).item())
    if seen == 0:
        raise ValueError("empty batch stream")
    if not losses:
        raise LossError("no batch in the stream had an eligible negative")
    return float(np.mean(losses))


def prefetch(batches: Iterable[MiniBatch], capacity: int = 4) -> Iterator[MiniBatch]:
    """Produce batches on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=max(2, capacity))
    done = object()
    errors: list[BaseException] = []

    def worker():
        try:
            for b in batches:
                q.put(b)
        except BaseException as exc:  # handed to the consumer
            errors.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    if errors:
        raise errors[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    action: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def train(model: DualEncoding, train_pairs: Sequence[tuple[VideoItem, CaptionItem]],
          val_pairs: Sequence[tuple[VideoItem, CaptionItem]] | None = None, lr: float = DEFAULT_LR,
          batch_size: int = DEFAULT_BATCH_SIZE, max_epochs: int = MAX_EPOCHS, seed: int = 0,
          use_schedule: bool = True, on_epoch: Callable[[EpochRecord], None] | None = None,
          state: TrainState | None = None) -> tuple[TrainState, list[EpochRecord]]:
    """Train until the schedule says stop (or ``max_epochs``).

    Without validation pairs the training pairs double as the validation set.
    Returns the final state and one record per epoch.
    """
    state = state or TrainState(lr=lr)
    optimizer = Adam(model.params, lr=state.lr)
    val_pairs = val_pairs if val_pairs else train_pairs
    records = []
    for _ in range(max_epochs):
        epoch = state.epoch
        optimizer.lr = state.lr
        train_loss = run_epoch(model, prefetch(make_minibatches(train_pairs, batch_size, seed, epoch)),
                               "train", optimizer)
        val_loss = run_epoch(model, make_minibatches(val_pairs, batch_size, seed, 0), "validate")
        lr_used = state.lr
        if use_schedule:
            action = schedule_update(state, val_loss, max_epochs=max_epochs)
        else:
            state.epoch += 1
            action = "stop" if state.epoch >= max_epochs else "continue"
        rec = EpochRecord(state.epoch, train_loss, val_loss, lr_used, action)
        records.append(rec)
        log.info(rec.to_json())
        if on_epoch:
            on_epoch(rec)
        if action == "stop":
            break
    return state, records


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic line, u32 manifest length, JSON manifest, then for every blob
# listed in the manifest a u64 byte length followed by little-endian float32s.


def _blob_entries(model: DualEncoding) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{n}", t.data) for n, t in model.params.items()]
    for side, head in model.heads.items():
        if head.has_running_stats:
            entries.append((f"bn/{side}/running_mean", head.running_mean))
            entries.append((f"bn/{side}/running_var", head.running_var))
    return entries


def save_checkpoint(model: DualEncoding, path: str | Path, vocab: Vocabulary | None = None,
                    state: TrainState | None = None) -> str:
    """Write ``model`` to ``path``; returns the file's sha256."""
    entries = _blob_entries(model)
    blobs = [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in entries]
    payload = b"".join(struct.pack("<Q", len(b)) + b for b in blobs)
    manifest = {
        "format": "dualenc-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab_hash": vocab.content_hash() if vocab is not None else None,
        "train_state": asdict(state) if state is not None else None,
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    data = CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + payload
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a dual encoding checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    pos += hlen
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    payload = data[pos:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    arrays = {}
    for entry in manifest["blobs"]:
        if len(data) < pos + 8:
            raise CheckpointError(f"{path}: truncated before blob {entry['name']}")
        (blen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        expected = 4 * int(np.prod(entry["shape"], dtype=np.int64))
        if blen != expected or len(data) < pos + blen:
            raise CheckpointError(f"{path}: blob {entry['name']} has {blen} bytes, expected {expected}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=blen // 4, offset=pos).reshape(entry["shape"])
        pos += blen
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return manifest, arrays


def load_checkpoint(path: str | Path, vocab: Vocabulary | None = None) -> tuple[DualEncoding, TrainState | None]:
    """Rebuild a model; with ``vocab`` its content hash must match the stored one."""
    manifest, arrays = read_checkpoint(path)
    stored = manifest.get("vocab_hash")
    if vocab is not None and stored is not None and vocab.content_hash() != stored:
        raise CheckpointError(f"{path}: vocabulary hash {vocab.content_hash()} does not match checkpoint {stored}")
    config = ModelConfig.from_dict(manifest["config"])
    params = ParameterSet()
    for name, arr in arrays.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
    try:
        model = DualEncoding(config, params=params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    for side, head in model.heads.items():
        mean = arrays.get(f"bn/{side}/running_mean")
        var = arrays.get(f"bn/{side}/running_var")
        if mean is not None:
            head.running_mean = mean.astype(np.float32)
            head.running_var = var.astype(np.float32)
    state = TrainState(**manifest["train_state"]) if manifest.get("train_state") else None
    return model, state


def checkpoint_vocab_hash(path: str | Path) -> str | None:
    return read_checkpoint(path)[0].get("vocab_hash")
