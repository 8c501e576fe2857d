"""Command line interface: build-vocab, train, encode-videos, retrieve, evaluate.

Exit status is 0 on success, 2 for usage errors (bad flags, missing files)
and 1 for failures at run time.  Errors are reported as one line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import (Vocabulary, load_captions, load_embeddings, load_frame_features, make_pairs,
                   read_caption_file)
from .encoders import DEFAULT_COMMON_DIM, DEFAULT_MARGIN, ModelConfig, load_pretrained_embeddings
from .model import DualEncoding
from .retrieval import VideoIndex, build_index, evaluate_bidirectional, format_metrics, query
from .trainer import (DEFAULT_BATCH_SIZE, DEFAULT_LR, MAX_EPOCHS, file_sha256, load_checkpoint,
                      save_checkpoint, train)


class UsageError(Exception):
    pass


def parse_levels(text: str) -> tuple[int, ...]:
    """'123', '1,3', '2+3' -> sorted level tuple."""
    digits = [c for c in text if c not in ", +"]
    if not digits or any(c not in "123" for c in digits):
        raise argparse.ArgumentTypeError(f"levels must be a non-empty subset of 1,2,3, got {text!r}")
    return tuple(sorted({int(c) for c in digits}))


def _existing(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualenc", description="Dual encoding text-to-video retrieval")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build the vocabulary from training captions")
    p.add_argument("--captions", required=True)
    p.add_argument("--vocab", required=True, help="output vocabulary file")
    p.add_argument("--min-count", type=int, default=5)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint file")
    p.add_argument("--config", help="JSON model config; flags below override it")
    p.add_argument("--val-features")
    p.add_argument("--val-captions")
    p.add_argument("--levels-video", type=parse_levels)
    p.add_argument("--levels-text", type=parse_levels)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--margin", type=float)
    p.add_argument("--common-dim", type=int)
    p.add_argument("--epochs", type=int, default=MAX_EPOCHS, help="maximum number of epochs")
    p.add_argument("--embeddings", help="optional word embedding file '<token> <floats>'")

    p = sub.add_parser("encode-videos", help="encode videos offline into an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--index", required=True, help="output index file")

    p = sub.add_parser("retrieve", help="answer a sentence query against an index")
    p.add_argument("query", help="query sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--top-k", type=int, default=10)

    p = sub.add_parser("evaluate", help="bidirectional retrieval metrics on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--output", help="also write the JSON metrics record here")
    return parser


def cmd_build_vocab(args) -> None:
    records = read_caption_file(_existing(args.captions, "--captions"))
    vocab = Vocabulary.build([text for _, _, text in records], min_count=args.min_count)
    vocab.save(args.vocab)
    print(f"vocabulary of {len(vocab)} tokens written to {args.vocab}")


def _model_config(args, video_dim: int, vocab_size: int) -> ModelConfig:
    base: dict = {}
    if args.config:
        base = json.loads(_existing(args.config, "--config").read_text(encoding="utf-8"))
    base["video_dim"] = video_dim
    base["vocab_size"] = vocab_size
    overrides = {"video_levels": args.levels_video, "text_levels": args.levels_text,
                 "margin": args.margin, "common_dim": args.common_dim}
    base.update({k: v for k, v in overrides.items() if v is not None})
    base.setdefault("margin", DEFAULT_MARGIN)
    base.setdefault("common_dim", DEFAULT_COMMON_DIM)
    return ModelConfig.from_dict(base)


def cmd_train(args) -> None:
    feats = _existing(args.features, "--features")
    caps = _existing(args.captions, "--captions")
    vocab = Vocabulary.load(_existing(args.vocab, "--vocab"))
    val_pairs = None
    if args.val_captions:
        val_videos = load_frame_features(_existing(args.val_features or args.features, "--val-features"))
        val_pairs = make_pairs(val_videos, load_captions(_existing(args.val_captions, "--val-captions"), vocab))
    embeddings = load_embeddings(_existing(args.embeddings, "--embeddings")) if args.embeddings else None
    videos = load_frame_features(feats)
    pairs = make_pairs(videos, load_captions(caps, vocab))
    config = _model_config(args, next(iter(videos.values())).dim, len(vocab))
    model = DualEncoding(config, seed=args.seed)
    if embeddings:
        load_pretrained_embeddings(model.params, vocab.tokens, embeddings)

    def report(rec):
        print(rec.to_json(), flush=True)

    state, _ = train(model, pairs, val_pairs, lr=args.lr, batch_size=args.batch_size,
                     max_epochs=args.epochs, seed=args.seed, on_epoch=report)
    digest = save_checkpoint(model, args.checkpoint, vocab, state)
    print(json.dumps({"checkpoint": args.checkpoint, "sha256": digest, "epochs": state.epoch}))


def cmd_encode_videos(args) -> None:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    feats = _existing(args.features, "--features")
    model, _ = load_checkpoint(ckpt)
    index = build_index(model, list(load_frame_features(feats).values()), file_sha256(ckpt))
    index.save(args.index)
    print(f"indexed {len(index)} videos into {args.index}")


def cmd_retrieve(args) -> None:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    vocab = Vocabulary.load(_existing(args.vocab, "--vocab"))
    index = VideoIndex.load(_existing(args.index, "--index"))
    model, _ = load_checkpoint(ckpt, vocab)
    for rank, (vid, score) in enumerate(query(model, vocab, index, args.query, args.top_k, file_sha256(ckpt)), 1):
        print(f"{rank}\t{vid}\t{score:.6f}")


def cmd_evaluate(args) -> None:
    ckpt = _existing(args.checkpoint, "--checkpoint")
    vocab = Vocabulary.load(_existing(args.vocab, "--vocab"))
    videos = load_frame_features(_existing(args.features, "--features"))
    captions = load_captions(_existing(args.captions, "--captions"), vocab)
    model, _ = load_checkpoint(ckpt, vocab)
    used = {c.video_id for c in captions}
    result = evaluate_bidirectional(model, [v for vid, v in videos.items() if vid in used], captions)
    print(format_metrics(result))
    record = json.dumps(result, sort_keys=True)
    print(record)
    if args.output:
        Path(args.output).write_text(record + "\n", encoding="utf-8")


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "encode-videos": cmd_encode_videos,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dualenc {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a one-line diagnostic
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dualenc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
