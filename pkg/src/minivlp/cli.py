"""Command-line entry point: data generation, training, evaluation, ablations.

Every run writes a manifest (command, config, seed, code version) into the
output directory before any computation, so artifacts stay traceable.
Config values layer as preset < --config file < MINIVLP_* environment
overrides < explicit flags; unknown keys fail hard.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, config_to_dict, load_configs
from .data import PairDataset, generate_pairs, word_id
from .evaluation import (
    attention_map,
    evaluate_matching,
    evaluate_retrieval,
    zero_shot_accuracy,
)
from .model import VLModel
from .training import (
    Trainer,
    finetune_matching,
    finetune_retrieval,
    load_model_from_checkpoint,
    pretrain,
)

ABLATION_FLAGS = {
    "et": {"use_et": False},
    "mlm": {"use_mlm": False},
    "tgd": {"use_tgd": False},
    "fgd": {"use_fgd": False},
    "twd": {"use_tgd": False, "use_fgd": False},
    "cross": {"use_cross_encoders": False},
}

ABLATION_MATRIX = [
    ("dual-only", {"use_cross_encoders": False}),
    ("full", {}),
    ("no-et", {"use_et": False}),
    ("no-mlm", {"use_mlm": False}),
    ("no-twd", {"use_tgd": False, "use_fgd": False}),
    ("no-tgd", {"use_tgd": False}),
    ("no-fgd", {"use_fgd": False}),
]


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"v{__version__}"


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "preset": getattr(args, "preset", None),
        "seed": getattr(args, "seed", None),
        "out": str(out_dir),
        "version": code_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "argv": sys.argv[1:],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _configs_from_args(args: argparse.Namespace):
    explicit = {}
    if getattr(args, "seed", None) is not None:
        explicit["seed"] = args.seed
    model_cfg, train_cfg = load_configs(
        preset=args.preset, config_path=args.config, **explicit
    )
    for name in (getattr(args, "ablation", None) or "").split(","):
        name = name.strip()
        if not name:
            continue
        if name not in ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation flag {name!r}; choose from {sorted(ABLATION_FLAGS)}"
            )
        train_cfg = dataclasses.replace(train_cfg, **ABLATION_FLAGS[name])
    return model_cfg, train_cfg


def _add_common(p: argparse.ArgumentParser, need_data: bool = True) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    if need_data:
        p.add_argument("--data", required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minivlp")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-gen", help="generate a synthetic paired dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="pre-train on a dataset's train split")
    _add_common(p)
    p.add_argument("--ablation", default=None, help="comma list: et,mlm,tgd,fgd,twd,cross")

    p = sub.add_parser("finetune-retrieval", help="contrastive+matching fine-tune")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("finetune-matching", help="matching-only fine-tune on labels")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval-retrieval", help="retrieval recalls with optional rerank")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--field", default="title")
    p.add_argument("--k", type=int, default=None, help="top-K rerank depth")

    p = sub.add_parser("eval-matching", help="matching AUC over a labeled split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--field", default="title")

    p = sub.add_parser("eval-zeroshot", help="zero-shot scene classification accuracy")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])

    p = sub.add_parser("attn-map", help="entity-conditioned attention heat map")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", type=int, required=True, help="record id in the split")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--entity", required=True, help="entity word, e.g. 'circle'")

    p = sub.add_parser("ablate", help="train+evaluate the component ablation matrix")
    _add_common(p)
    p.add_argument("--k", type=int, default=8, help="rerank depth for evaluation")

    return parser


def _emit(out_dir: Path, name: str, payload: dict) -> None:
    with open(out_dir / "results.jsonl", "a") as fh:
        fh.write(json.dumps({"record": name, **payload}) + "\n")


def run_command(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    write_manifest(out_dir, args.command, args)

    if args.command == "data-gen":
        records = generate_pairs(args.count, args.noise_rate, args.seed, args.resolution)
        dataset = PairDataset(records, args.resolution)
        dataset.save(out_dir)
        print(f"wrote {len(records)} records to {out_dir}")
        return 0

    dataset = PairDataset.load(args.data)

    if args.command == "pretrain":
        model_cfg, train_cfg = _configs_from_args(args)
        result = pretrain(model_cfg, train_cfg, dataset, out_dir)
        print(f"pre-trained {result.checkpoint_path} "
              f"(final loss {result.metrics[-1]['total']:.4f})")
        return 0

    if args.command == "finetune-retrieval":
        _, train_cfg = _configs_from_args(args)
        result = finetune_retrieval(args.checkpoint, dataset, train_cfg, out_dir)
        print(f"fine-tuned {result.checkpoint_path}")
        return 0

    if args.command == "finetune-matching":
        _, train_cfg = _configs_from_args(args)
        result = finetune_matching(args.checkpoint, dataset, train_cfg, out_dir)
        print(f"fine-tuned {result.checkpoint_path}")
        return 0

    model, _, _ = load_model_from_checkpoint(args.checkpoint)

    if args.command == "eval-retrieval":
        split = dataset.split(args.split)
        result = evaluate_retrieval(model, split, field=args.field, rerank_k=args.k)
        print(result.summary())
        _emit(out_dir, "retrieval", {"split": args.split, "k": args.k, **result.as_dict()})
        return 0

    if args.command == "eval-matching":
        split = dataset.split(args.split)
        score = evaluate_matching(model, split, field=args.field)
        print(f"matching AUC on {args.split}: {score:.4f}")
        _emit(out_dir, "matching", {"split": args.split, "auc": score})
        return 0

    if args.command == "eval-zeroshot":
        split = dataset.split(args.split)
        acc = zero_shot_accuracy(model, split)
        print(f"zero-shot accuracy on {args.split}: {100 * acc:.1f}%")
        _emit(out_dir, "zeroshot", {"split": args.split, "accuracy": acc})
        return 0

    if args.command == "attn-map":
        split = dataset.split(args.split)
        by_id = {r.record_id: r for r in split.records}
        if args.record not in by_id:
            print(f"record {args.record} not in split {args.split}", file=sys.stderr)
            return 1
        rec = by_id[args.record]
        from .data import tokens_with_cls

        ids, mask = tokens_with_cls(rec.title, model.cfg.max_text_len)
        heat = attention_map(
            model,
            torch.from_numpy(rec.pixels),
            torch.tensor(ids),
            torch.tensor(mask),
            {word_id(args.entity)},
        )
        np.save(out_dir / f"attn_{args.record}.npy", heat.numpy())
        _save_heat_png(heat.numpy(), out_dir / f"attn_{args.record}.png")
        print(f"hottest patch: {int(torch.argmax(heat))}; map saved under {out_dir}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def run_ablate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    write_manifest(out_dir, "ablate", args)
    dataset = PairDataset.load(args.data)
    val = dataset.split("val")
    rows = []
    for name, overrides in ABLATION_MATRIX:
        model_cfg, train_cfg = _configs_from_args(args)
        train_cfg = dataclasses.replace(train_cfg, **overrides)
        result = pretrain(model_cfg, train_cfg, dataset)
        rerank_k = args.k if train_cfg.use_cross_encoders else None
        res = evaluate_retrieval(result.model, val, rerank_k=rerank_k)
        rows.append((name, res))
        _emit(out_dir, "ablation", {"variant": name, **res.as_dict()})
    width = max(len(n) for n, _ in rows)
    print(f"{'variant':<{width}}  " + "R@1(i2t) R@5(i2t) R@10(i2t) R@1(t2i) R@5(t2i) R@10(t2i)   R@M")
    for name, res in rows:
        vals = list(res.i2t.values()) + list(res.t2i.values())
        print(f"{name:<{width}}  " + " ".join(f"{v:8.1f}" for v in vals) + f" {res.mean:6.1f}")
    return 0


def _save_heat_png(heat: np.ndarray, path: Path, upscale: int = 32) -> None:
    from PIL import Image

    lo, hi = float(heat.min()), float(heat.max())
    norm = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    img = Image.fromarray((norm * 255).astype(np.uint8), mode="L")
    img = img.resize((heat.shape[1] * upscale, heat.shape[0] * upscale), Image.NEAREST)
    img.save(path)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "ablate":
            return run_ablate(args)
        return run_command(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
