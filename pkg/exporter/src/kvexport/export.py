"""Capture per-layer KV tensors and decode attention maps from a
transformers model.

KV states come from the model's own cache (past_key_values), i.e. keys are
post-rotary; per-head tensors are written before any query-group expansion
so the analysis side applies its own GQA mapping. Attention maps are
captured during greedy decode steps, averaged over layers and heads, and
restricted to the designated token span.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .kvd import encode_kvd
from .manifest import ExportManifest


def build_tiny_model(seed: int = 0, layers: int = 2, kv_heads: int = 2,
                     query_heads: int = 4, head_dim: int = 8, vocab: int = 128):
    """Randomly initialized small causal LM for offline format tests."""
    from transformers import LlamaConfig, LlamaForCausalLM

    torch.manual_seed(seed)
    cfg = LlamaConfig(
        vocab_size=vocab,
        hidden_size=query_heads * head_dim,
        intermediate_size=4 * query_heads * head_dim,
        num_hidden_layers=layers,
        num_attention_heads=query_heads,
        num_key_value_heads=kv_heads,
        max_position_embeddings=512,
        attn_implementation="eager",
    )
    return LlamaForCausalLM(cfg).eval()


def load_model(name_or_path: str):
    """Load a causal LM checkpoint (local path or hub id) for capture."""
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(
        name_or_path, attn_implementation="eager", dtype=torch.float32
    )
    return model.eval()


def _cache_layer_kv(past_key_values, layer: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(keys, values) of one layer, shape (kv_heads, seq, head_dim); handles
    both the layered cache object and the legacy tuple format."""
    if hasattr(past_key_values, "layers"):
        entry = past_key_values.layers[layer]
        k, v = entry.keys, entry.values
    else:
        k, v = past_key_values[layer]
    if k.shape[0] != 1:
        raise ValueError(f"expected batch size 1, got {k.shape[0]}")
    return k[0], v[0]


def capture_kv(
    model,
    input_ids: torch.Tensor,
    span: tuple[int, int],
    attention_steps: int = 0,
) -> tuple[dict[str, np.ndarray], dict]:
    """Run one prefill (plus optional greedy decode steps) and collect
    span-restricted per-layer, per-head K/V entries and attention maps.

    Returns (entries, info) where info holds layer count, kv_heads,
    head_dim, and the prefill sequence length.
    """
    start, n = span
    if input_ids.ndim != 2 or input_ids.shape[0] != 1:
        raise ValueError("input_ids must have shape (1, seq)")
    seq_len = input_ids.shape[1]
    if start < 0 or start + n > seq_len:
        raise ValueError(f"span ({start}, {n}) exceeds sequence length {seq_len}")

    with torch.no_grad():
        out = model(input_ids, use_cache=True)
    pkv = out.past_key_values
    layers = len(pkv.layers) if hasattr(pkv, "layers") else len(pkv)

    entries: dict[str, np.ndarray] = {}
    kv_heads = head_dim = None
    for li in range(layers):
        k, v = _cache_layer_kv(pkv, li)
        kv_heads, head_dim = k.shape[0], k.shape[2]
        for h in range(kv_heads):
            entries[f"layer{li}.head{h}.K"] = (
                k[h, start : start + n].to(torch.float32).cpu().numpy()
            )
            entries[f"layer{li}.head{h}.V"] = (
                v[h, start : start + n].to(torch.float32).cpu().numpy()
            )

    next_ids = out.logits[:, -1:].argmax(dim=-1)
    for t in range(attention_steps):
        with torch.no_grad():
            step = model(
                next_ids, past_key_values=pkv, use_cache=True, output_attentions=True
            )
        pkv = step.past_key_values
        # (layers, heads, span) -> head- and layer-averaged map over the span
        maps = torch.stack(
            [a[0, :, -1, start : start + n] for a in step.attentions]
        )
        entries[f"step{t}.attn"] = maps.mean(dim=(0, 1)).to(torch.float32).cpu().numpy()
        next_ids = step.logits[:, -1:].argmax(dim=-1)

    info = {
        "layers": layers,
        "kv_heads": int(kv_heads),
        "head_dim": int(head_dim),
        "seq_len": int(seq_len),
    }
    return entries, info


def export_kv(
    model,
    model_name: str,
    sample_inputs: dict[str, torch.Tensor],
    span: tuple[int, int],
    out_dir: str | Path,
    attention_steps: int = 0,
) -> tuple[list[Path], ExportManifest]:
    """Write one KVD1 file per sample plus a manifest JSON.

    sample_inputs: sample id -> input_ids of shape (1, seq).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    info = None
    for sample_id, input_ids in sample_inputs.items():
        entries, info = capture_kv(model, input_ids, span, attention_steps)
        path = out / f"{sample_id}.kvd"
        path.write_bytes(encode_kvd(entries))
        paths.append(path)

    capture = ["keys", "values"] + (["attention_maps"] if attention_steps else [])
    manifest = ExportManifest(
        model=model_name,
        layer_indices=list(range(info["layers"])),
        span_start=span[0],
        span_len=span[1],
        kv_heads=info["kv_heads"],
        head_dim=info["head_dim"],
        capture=capture,
        sample_ids=list(sample_inputs),
    )
    manifest.validate(seq_len=info["seq_len"])
    (out / "manifest.json").write_text(manifest.to_json())
    return paths, manifest
