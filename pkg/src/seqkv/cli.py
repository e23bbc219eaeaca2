"""Command-line driver: fit / compress / simulate / analyze / bench / memplan.

Exit codes: 0 success, 1 usage error, 2 data or validation error (parse
failures include file name and byte offset), 3 numeric error. Every report
carries a provenance header (version, seed, schedule). A --config JSON file
can supply any flag (underscored keys); explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, kvmodel, memmodel, pipeline, synth
from .errors import (
    ConfigurationError,
    DegenerateRowError,
    DimensionError,
    KvdParseError,
    NumericError,
    ParameterError,
    SeqkvError,
    TrainingError,
    UnsupportedPathError,
    ValidationError,
)
from .keycodec import TrainConfig, train_key_codec
from .kvmodel import LayerCodec
from .pipeline import DEFAULT_R0, DEFAULT_R1, DecodeConfig, make_schedule
from .valuecodec import fit_value_pca

USAGE_ERRORS = (ParameterError, UnsupportedPathError)
DATA_ERRORS = (ValidationError, ConfigurationError, DimensionError, DegenerateRowError)
NUMERIC_ERRORS = (NumericError, TrainingError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _meta_lines(args, schedule=None) -> str:
    seed = getattr(args, "seed", None)
    sched = "-"
    if schedule is not None:
        sched = ":".join(f"{r:.6g}" for r in schedule.ratios)
    return (
        f"# seqkv={__version__} command={args.command} "
        f"seed={'-' if seed is None else seed} schedule={sched}\n"
    )


def _meta_dict(args, schedule=None) -> dict:
    return {
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "schedule": list(schedule.ratios) if schedule is not None else None,
    }


def _read_container(path: str, magic: bytes = kvmodel.KVD_MAGIC):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    try:
        if magic == kvmodel.KVC_MAGIC:
            return kvmodel.validate_codec_bundle(data)
        return kvmodel.decode_kvd(data, magic=magic)
    except KvdParseError as exc:
        raise KvdParseError(f"{path}: {exc} (offset {exc.offset})", offset=exc.offset) from exc


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth plumbing shared by simulate/bench


def _add_synth_flags(p) -> None:
    p.add_argument("--seed", type=int, required=True, help="generator seed (mandatory)")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--n", type=int, default=24, help="vision tokens per image")
    p.add_argument("--d-head", type=int, default=8)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--group-size", type=int, default=2, help="query heads per KV head")
    p.add_argument("--key-cosine", type=float, default=0.9)
    p.add_argument("--value-cosine", type=float, default=0.3)
    p.add_argument("--key-rank", type=int, default=8)
    p.add_argument("--drift", type=float, default=0.5)
    p.add_argument("--text-tokens", type=int, default=4)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--steps", type=int, default=8)


def _profile_from(args) -> synth.SynthProfile:
    return synth.SynthProfile(
        seed=args.seed,
        n=args.n,
        d_head=args.d_head,
        kv_heads=args.kv_heads,
        layers=args.layers,
        key_cosine=args.key_cosine,
        value_cosine=args.value_cosine,
        key_rank=args.key_rank,
        drift=args.drift,
    )


def _synth_inputs(args, profile):
    keys, values = synth.gen_visual_kv(profile)
    shape = kvmodel.ModelShape(
        layers=profile.layers,
        kv_heads=profile.kv_heads,
        query_heads=profile.kv_heads * args.group_size,
        head_dim=profile.d_head,
    )
    rng = np.random.default_rng([profile.seed, 11])
    c = args.text_tokens
    text = [
        (
            rng.standard_normal((shape.kv_heads, c, shape.head_dim)).astype(np.float32),
            rng.standard_normal((shape.kv_heads, c, shape.head_dim)).astype(np.float32),
        )
        for _ in range(shape.layers)
    ]
    vision = [
        [(keys[li], values[li])] * args.images for li in range(shape.layers)
    ]
    trace = synth.gen_query_trace(profile, args.steps, query_heads=shape.query_heads)
    return shape, text, vision, trace


def _load_codecs(args, shape, n):
    if args.bundle:
        codecs, meta = _read_container(args.bundle, magic=kvmodel.KVC_MAGIC)
        if meta.layers != shape.layers or meta.n != n or meta.kv_heads != shape.kv_heads:
            raise ConfigurationError(
                f"bundle ({meta.layers} layers, n={meta.n}, {meta.kv_heads} heads) does not "
                f"match inputs ({shape.layers} layers, n={n}, {shape.kv_heads} heads)"
            )
        schedule = pipeline.PyramidSchedule(ratios=meta.schedule_ratios)
        return codecs, schedule
    codecs = pipeline.make_identity_codecs(shape.layers, shape.kv_heads, n)
    return codecs, make_schedule(shape.layers, 1.0, 1.0)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_fit(args) -> int:
    sample_dumps = [kvmodel.group_kv_entries(_read_container(p)) for p in args.inputs]
    if not sample_dumps:
        raise ParameterError("fit needs at least one input KVD file")
    layer_ids = sorted(sample_dumps[0])
    if layer_ids != list(range(len(layer_ids))):
        raise ValidationError("input layers must be contiguous from 0")
    schedule = make_schedule(len(layer_ids), args.r0, args.r1)

    codecs: list[LayerCodec] = []
    csv_rows = ["layer,epoch,train_mse,val_mse,val_cosine,mask_mean\n"]
    d_head = None
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        mask_weight=args.mask_weight,
        seed=args.seed,
    )
    for li in layer_ids:
        keys = np.stack([dump[li][0] for dump in sample_dumps])
        values = np.stack([dump[li][1] for dump in sample_dumps])
        d_head = keys.shape[-1]
        key_codec, report = train_key_codec(keys, schedule.ratios[li], cfg, kind=args.kind)
        value_pca = fit_value_pca(values, schedule.ratios[li], mean_policy=args.mean_policy)
        codecs.append(LayerCodec(key=key_codec, value=value_pca, retention=schedule.ratios[li]))
        for row in report.epochs:
            csv_rows.append(
                f"{li},{row.epoch},{row.train_mse:.8e},{row.val_mse:.8e},"
                f"{row.val_cosine:.6f},{row.mask_mean:.6f}\n"
            )

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(kvmodel.encode_codec_bundle(codecs, d_head=d_head))
    csv_path = Path(args.train_csv) if args.train_csv else Path(args.out).with_suffix(".train.csv")
    _write(csv_path, _meta_lines(args, schedule) + "".join(csv_rows))
    print(f"wrote {args.out} ({len(codecs)} layers) and {csv_path}")
    return 0


def _cmd_compress(args) -> int:
    from .keycodec import compress_keys
    from .valuecodec import compress_values

    codecs, meta = _read_container(args.bundle, magic=kvmodel.KVC_MAGIC)
    dump = kvmodel.group_kv_entries(_read_container(args.input))
    entries: dict[str, np.ndarray] = {}
    for li in sorted(dump):
        if li >= len(codecs):
            raise ConfigurationError(f"dump layer {li} exceeds bundle layer count {len(codecs)}")
        keys, values = dump[li]
        if keys.shape[1] != meta.n:
            raise ConfigurationError(
                f"layer {li}: dump has n={keys.shape[1]}, bundle expects n={meta.n}"
            )
        kc = compress_keys(codecs[li].key, keys)
        vc, mu = compress_values(codecs[li].value, values)
        for h in range(kc.shape[0]):
            entries[kvmodel.kv_entry_name(li, h, "Kc")] = kc[h]
            entries[kvmodel.kv_entry_name(li, h, "Vc")] = vc[h]
            entries[kvmodel.kv_entry_name(li, h, "mu")] = mu[h]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(kvmodel.encode_kvd(entries))
    print(f"wrote {args.out} ({len(entries)} entries)")
    return 0


def _traffic_csv(args, schedule, reports) -> str:
    lines = [
        _meta_lines(args, schedule),
        "step,text_bytes,vision_bytes,mean_bytes,generated_bytes,codec_bytes,temp_bytes\n",
    ]
    for t, rep in enumerate(reports):
        d = rep.as_dict()
        lines.append(
            f"{t},{d['text_bytes']},{d['vision_bytes']},{d['mean_bytes']},"
            f"{d['generated_bytes']},{d['codec_bytes']},{d['temp_bytes']}\n"
        )
    return "".join(lines)


def _cmd_simulate(args) -> int:
    profile = _profile_from(args)
    shape, text, vision, trace = _synth_inputs(args, profile)
    codecs, schedule = _load_codecs(args, shape, profile.n)

    cfg = DecodeConfig(path=args.path, ablation=args.ablation)
    cfg.validate()
    if args.path == "baseline_full":
        cache = kvmodel.new_cache(shape, text, vision, None, None, mode="full")
    else:
        # bundle codecs carry their retained lengths; the schedule here is
        # metadata (its f32 ratios may sit a quantization step off the
        # fit-time ceilings, so it must not be used as a cross-check)
        cache = pipeline.prefill_compressed(
            shape, text, vision, None, codecs, ablation=args.ablation
        )
    result = pipeline.run_generation(cache, trace, codecs, cfg)

    out = _out_dir(args)
    entries: dict[str, np.ndarray] = {}
    for t in range(trace.steps):
        entries[f"step{t}.out"] = result.outputs[t]
        entries[f"step{t}.attn"] = result.step_vision_attention(t).astype(np.float32)
    (out / "outputs.kvd").write_bytes(kvmodel.encode_kvd(entries))
    _write(out / "traffic.csv", _traffic_csv(args, schedule, result.reports))
    print(f"wrote {out / 'outputs.kvd'} and {out / 'traffic.csv'}")
    return 0


def _cmd_analyze(args) -> int:
    out = _out_dir(args)
    wrote = []
    if args.kv:
        dump = kvmodel.group_kv_entries(_read_container(args.kv))
        if not dump:
            raise ValidationError(f"{args.kv}: no layer.head K/V entries found")
        stats = analysis.redundancy_stats(dump)
        lines = [_meta_lines(args), "layer,key_cosine,value_cosine,excluded_rows\n"]
        lines += [
            f"{s.layer},{s.key_cosine:.6f},{s.value_cosine:.6f},{len(s.excluded_rows)}\n"
            for s in stats
        ]
        _write(out / "redundancy.csv", "".join(lines))
        ranks = analysis.hidden_dim_rank(dump)
        lines = [_meta_lines(args), "layer,side,level,mean_rank,rank_fraction\n"]
        for r in ranks:
            for side, table in (("K", r.key_ranks), ("V", r.value_ranks)):
                for level, rank in sorted(table.items()):
                    lines.append(
                        f"{r.layer},{side},{level:.2f},{rank:.2f},{rank / r.dims:.4f}\n"
                    )
        _write(out / "hidden_rank.csv", "".join(lines))
        wrote += ["redundancy.csv", "hidden_rank.csv"]
    if args.attn:
        entries = _read_container(args.attn)
        steps = sorted(
            (int(name[4:].split(".")[0]), name)
            for name in entries
            if name.startswith("step") and name.endswith(".attn")
        )
        if len(steps) < 2:
            raise ValidationError(f"{args.attn}: need >= 2 step*.attn entries")
        maps = np.stack([entries[name] for _, name in steps])
        overlap = analysis.topk_overlap(maps, args.fraction)
        header = "step," + ",".join(f"ref{t}" for t, _ in steps) + "\n"
        lines = [_meta_lines(args), header]
        for i, (t, _) in enumerate(steps):
            lines.append(f"{t}," + ",".join(f"{overlap[i, j]:.4f}" for j in range(len(steps))) + "\n")
        _write(out / "topk_overlap.csv", "".join(lines))
        wrote.append("topk_overlap.csv")
    if args.fidelity_ref or args.fidelity_test:
        if not (args.fidelity_ref and args.fidelity_test):
            raise ParameterError("fidelity needs both --fidelity-ref and --fidelity-test")
        ref = _read_container(args.fidelity_ref)
        test = _read_container(args.fidelity_test)
        common = [n for n in ref if n in test]
        if not common:
            raise ValidationError("fidelity inputs share no entry names")
        per_entry = {n: analysis.attention_fidelity(ref[n], test[n]).as_dict() for n in common}
        mean_cos = float(np.mean([m["cosine"] for m in per_entry.values()]))
        mean_mse = float(np.mean([m["mse"] for m in per_entry.values()]))
        payload = {
            "meta": _meta_dict(args),
            "entries": per_entry,
            "mean": {"cosine": mean_cos, "mse": mean_mse},
        }
        _write(out / "fidelity.json", json.dumps(payload, indent=2) + "\n")
        wrote.append("fidelity.json")
    if not wrote:
        raise ParameterError("analyze needs --kv, --attn, or --fidelity-ref/--fidelity-test")
    print(f"wrote {', '.join(wrote)} in {out}")
    return 0


def _cmd_bench(args) -> int:
    profile = _profile_from(args)
    shape, text, vision, trace = _synth_inputs(args, profile)
    codecs, schedule = _load_codecs(args, shape, profile.n)

    full = kvmodel.new_cache(shape, text, vision, None, None, mode="full")
    comp = pipeline.prefill_compressed(shape, text, vision, None, codecs)
    base = pipeline.run_generation(full, trace, None, DecodeConfig(path="baseline_full"))
    fused = pipeline.run_generation(comp, trace, codecs, DecodeConfig(path="fused"))

    bt, ft = base.total_traffic(), fused.total_traffic()
    # effective retention from the codecs' exact retained lengths
    mean_eff = sum(c.k for c in codecs) / (len(codecs) * profile.n)
    report = {
        "meta": _meta_dict(args, schedule),
        "steps": trace.steps,
        "baseline": bt.as_dict(),
        "fused": ft.as_dict(),
        "vision_bytes_ratio": ft.vision_bytes / bt.vision_bytes if bt.vision_bytes else None,
        "persistent_bytes_ratio": (
            ft.persistent_bytes / bt.persistent_bytes if bt.persistent_bytes else None
        ),
        "mean_effective_retention": mean_eff,
    }
    out = _out_dir(args)
    _write(out / "bench.json", json.dumps(report, indent=2) + "\n")
    print(f"wrote {out / 'bench.json'}")
    return 0


def _cmd_memplan(args) -> int:
    schedule = make_schedule(args.layers, args.r0, args.r1)
    params = memmodel.FootprintParams(
        schedule=schedule,
        batch=args.batch,
        kv_heads=args.kv_heads,
        prompt_tokens=args.prompt_tokens,
        tokens_per_image=args.n,
        generated_tokens=args.generated_tokens,
        head_dim=args.head_dim,
        kv_bytes=args.kv_bytes,
        mean_policy=args.mean_policy,
    )
    sweep = list(range(args.sweep_start, args.sweep_stop + 1, args.sweep_step))
    rows = memmodel.sweep_table(params, sweep)
    crossing = memmodel.break_even(params, sweep)

    out = _out_dir(args)
    if args.format == "csv":
        lines = [_meta_lines(args, schedule)]
        lines.append(f"# break_even_vision_tokens={'-' if crossing is None else crossing}\n")
        lines.append("vision_tokens,base_bytes,ours_bytes,savings_bytes\n")
        for r in rows:
            lines.append(
                f"{int(r['vision_tokens'])},{r['base_bytes']:.0f},"
                f"{r['ours_bytes']:.0f},{r['savings_bytes']:.0f}\n"
            )
        _write(out / "memplan.csv", "".join(lines))
        print(f"wrote {out / 'memplan.csv'} (break-even: {crossing})")
    else:
        payload = {
            "meta": _meta_dict(args, schedule),
            "break_even_vision_tokens": crossing,
            "rows": rows,
        }
        _write(out / "memplan.json", json.dumps(payload, indent=2) + "\n")
        print(f"wrote {out / 'memplan.json'} (break-even: {crossing})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="seqkv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"seqkv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train codecs from sample KVD files into a KVC bundle")
    p.add_argument("inputs", nargs="+", help="KVD files, one sample each")
    p.add_argument("--out", required=True, help="output KVC bundle path")
    p.add_argument("--r0", type=float, default=DEFAULT_R0)
    p.add_argument("--r1", type=float, default=DEFAULT_R1)
    p.add_argument("--kind", choices=("linear", "mlp2"), default="linear")
    p.add_argument("--mean-policy", choices=("per_sample", "global"), default="per_sample")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=None,
                   help="fixed step size (default: auto-scaled from data curvature)")
    p.add_argument("--mask-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument(
        "--train-csv", default=None,
        help="per-epoch training report path (default: <out>.train.csv)",
    )
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("compress", help="apply a bundle to a KVD dump")
    p.add_argument("input", help="KVD dump with layer{i}.head{h}.K/V entries")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("simulate", help="run a synthetic generation trace through one path")
    _add_synth_flags(p)
    p.add_argument("--path", choices=pipeline.PATHS, default="fused")
    p.add_argument("--ablation", choices=pipeline.ABLATIONS, default="both")
    p.add_argument("--bundle", default=None, help="KVC bundle (identity codecs if omitted)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("analyze", help="emit redundancy/rank/overlap tables and fidelity JSON")
    p.add_argument("--kv", default=None, help="KVD dump for redundancy + hidden-rank tables")
    p.add_argument("--attn", default=None, help="KVD with step{t}.attn maps for top-k overlap")
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--fidelity-ref", default=None)
    p.add_argument("--fidelity-test", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("bench", help="paired fused vs baseline byte-traffic comparison")
    _add_synth_flags(p)
    p.add_argument("--bundle", required=True, help="KVC bundle with linear key codecs")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("memplan", help="footprint table and break-even point")
    p.add_argument("--layers", type=int, default=36)
    p.add_argument("--r0", type=float, default=DEFAULT_R0)
    p.add_argument("--r1", type=float, default=DEFAULT_R1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--kv-heads", type=int, default=4)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--kv-bytes", type=int, default=memmodel.PLANNING_KV_BYTES)
    p.add_argument("--n", type=int, default=196)
    p.add_argument("--prompt-tokens", type=int, default=0)
    p.add_argument("--generated-tokens", type=int, default=0)
    p.add_argument("--mean-policy", choices=("per_sample", "global"), default="per_sample")
    p.add_argument("--sweep-start", type=int, default=49)
    p.add_argument("--sweep-stop", type=int, default=1960)
    p.add_argument("--sweep-step", type=int, default=49)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_memplan)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="JSON file of flag defaults")
    parser.subcommands = dict(sub.choices)
    return parser


def _config_defaults(argv: list[str]) -> dict | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
            break
        if tok.startswith("--config="):
            path = tok.split("=", 1)[1]
            break
    else:
        return None
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON config: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
        if defaults:
            if not isinstance(defaults, dict):
                raise ValidationError("config file must hold a JSON object")
            flags = {k.replace("-", "_"): v for k, v in defaults.items()}
            # defaults must land on the invoked subparser; its own defaults
            # would otherwise overwrite values set on the parent
            command = next((tok for tok in argv if not tok.startswith("-")), None)
            target = parser.subcommands.get(command, parser)
            target.set_defaults(**flags)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except KvdParseError as exc:
        print(f"seqkv: parse error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"seqkv: data error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"seqkv: usage error: {exc}", file=sys.stderr)
        return 1
    except NUMERIC_ERRORS as exc:
        print(f"seqkv: numeric error: {exc}", file=sys.stderr)
        return 3
    except SeqkvError as exc:
        print(f"seqkv: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
