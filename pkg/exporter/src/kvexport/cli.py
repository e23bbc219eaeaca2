"""CLI: dump per-layer KV (and optional decode attention maps) to KVD1 files.

Examples:
  kv-export --tiny-random --samples 3 --prompt-len 24 --span 4:16 \
      --steps 4 --seed 0 --out-dir dump/
  kv-export --model /path/to/checkpoint --prompt "a photo of" --span 2:32 \
      --out-dir dump/
"""

from __future__ import annotations

import argparse
import sys

import torch

from .export import build_tiny_model, export_kv, load_model


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kv-export", description=__doc__)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="checkpoint path or hub id")
    src.add_argument(
        "--tiny-random", action="store_true",
        help="built-in randomly initialized small model (offline format tests)",
    )
    p.add_argument("--prompt", default=None, help="tokenized with the model's tokenizer")
    p.add_argument("--prompt-len", type=int, default=24,
                   help="random-token prompt length when no --prompt is given")
    p.add_argument("--span", required=True, help="vision-token span as start:n")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--steps", type=int, default=0, help="greedy decode steps for attention maps")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
    try:
        start, n = (int(x) for x in args.span.split(":"))
    except ValueError:
        print("kv-export: --span must be start:n", file=sys.stderr)
        return 1

    try:
        if args.tiny_random:
            model = build_tiny_model(seed=args.seed)
            name = "tiny-random-llama"
        else:
            model = load_model(args.model)
            name = args.model
        vocab = model.config.vocab_size

        torch.manual_seed(args.seed)
        inputs = {}
        for s in range(args.samples):
            if args.prompt is not None:
                from transformers import AutoTokenizer

                tok = AutoTokenizer.from_pretrained(args.model)
                ids = tok(args.prompt, return_tensors="pt").input_ids
            else:
                ids = torch.randint(0, vocab, (1, args.prompt_len))
            inputs[f"sample{s}"] = ids
        paths, manifest = export_kv(
            model, name, inputs, (start, n), args.out_dir, attention_steps=args.steps
        )
    except (ValueError, OSError) as exc:
        print(f"kv-export: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(paths)} KVD file(s) and manifest.json to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
