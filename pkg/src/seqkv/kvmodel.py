"""KV data model: binary tensor containers, the segmented decode cache,
and serialized codec bundles.

Containers are a fixed little-endian grammar shared by datasets ("KVD1")
and codec bundles ("KVC1"):

    magic(4) | version u32 | entry_count u32 |
    per entry: name_len u32 | name utf-8 | dtype u8 (1 = f32) | ndim u8 |
               dims u64 x ndim | payload f32 little-endian row-major

Parsers never allocate from unchecked sizes and always fail with a typed
KvdParseError carrying the byte offset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    KvdDtypeError,
    KvdDuplicateNameError,
    KvdMagicError,
    KvdNameError,
    KvdShapeError,
    KvdTrailingDataError,
    KvdTruncatedError,
    KvdVersionError,
    ParameterError,
    ValidationError,
)
from .keycodec import KeyCodec
from .retention import effective_len
from .valuecodec import ValuePca

KVD_MAGIC = b"KVD1"
KVC_MAGIC = b"KVC1"
FORMAT_VERSION = 1
DTYPE_F32 = 1

_KIND_CODES = {"linear": 0.0, "mlp2": 1.0}
_POLICY_CODES = {"per_sample": 0.0, "global": 1.0}


# ---------------------------------------------------------------------------
# container encode/decode


def encode_kvd(entries, magic: bytes = KVD_MAGIC) -> bytes:
    """Serialize an ordered mapping of name -> float32 ndarray."""
    items = list(entries.items()) if hasattr(entries, "items") else list(entries)
    seen = set()
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, arr in items:
        if name in seen:
            raise ParameterError(f"duplicate entry name {name!r}")
        seen.add(name)
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise ParameterError(f"entry {name!r} must be float32, got {a.dtype}")
        if a.ndim > 0:
            a = np.ascontiguousarray(a)  # ascontiguousarray would promote 0-dim to 1-dim
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", DTYPE_F32, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if nbytes < 0 or self.pos + nbytes > len(self.data):
            raise KvdTruncatedError(f"truncated while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def decode_kvd(data: bytes, magic: bytes = KVD_MAGIC) -> dict[str, np.ndarray]:
    """Parse a container; returns entries in file order."""
    r = _Reader(bytes(data))
    head = r.take(4, "magic")
    if head != magic:
        raise KvdMagicError(f"bad magic {head!r}, expected {magic!r}", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise KvdVersionError(f"unsupported version {version}", offset=4)
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_off = r.pos
        name_len = r.u32("name length")
        raw = r.take(name_len, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise KvdNameError(f"entry name is not valid UTF-8: {exc}", offset=name_off) from exc
        if name in entries:
            raise KvdDuplicateNameError(f"duplicate entry name {name!r}", offset=name_off)
        dtype_off = r.pos
        dtype = r.u8("dtype")
        if dtype != DTYPE_F32:
            raise KvdDtypeError(f"unsupported dtype code {dtype}", offset=dtype_off)
        ndim = r.u8("ndim")
        dims_off = r.pos
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "dims"))
        # the payload bound caps the element count, but a zero-element shape
        # can still carry an unrepresentable axis like (0, 2**63)
        if any(d > 2**48 for d in dims):
            raise KvdShapeError(f"entry {name!r} declares dimension > 2**48", offset=dims_off)
        nelem = 1
        for d in dims:
            nelem *= d
        payload = r.take(nelem * 4, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        entries[name] = arr
    if r.pos != len(r.data):
        raise KvdTrailingDataError(
            f"{len(r.data) - r.pos} trailing bytes after last entry", offset=r.pos
        )
    return entries


# ---------------------------------------------------------------------------
# model shape


@dataclass(frozen=True)
class ModelShape:
    layers: int
    kv_heads: int
    query_heads: int
    head_dim: int
    kv_bytes: int = 4

    def __post_init__(self):
        for name in ("layers", "kv_heads", "query_heads", "head_dim", "kv_bytes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.query_heads % self.kv_heads != 0:
            raise ParameterError(
                f"query_heads ({self.query_heads}) must be divisible by kv_heads ({self.kv_heads})"
            )

    @property
    def group_size(self) -> int:
        return self.query_heads // self.kv_heads


# ---------------------------------------------------------------------------
# layer codec (key + value artifacts for one layer)


@dataclass(frozen=True)
class LayerCodec:
    key: KeyCodec
    value: ValuePca
    retention: float

    def __post_init__(self):
        if self.key.n != self.value.n:
            raise ConfigurationError(
                f"key codec n={self.key.n} and value codec n={self.value.n} disagree"
            )
        if self.key.k != self.value.k:
            raise ConfigurationError(
                f"key codec k={self.key.k} and value codec k={self.value.k} disagree"
            )
        if self.key.heads != self.value.heads:
            raise ConfigurationError("key and value codecs have different head counts")

    @property
    def n(self) -> int:
        return self.key.n

    @property
    def k(self) -> int:
        return self.key.k

    @property
    def heads(self) -> int:
        return self.key.heads


# ---------------------------------------------------------------------------
# segmented cache


@dataclass
class VisionSegment:
    keys: np.ndarray                # (H, n, d) full or (H, k, d) compressed
    values: np.ndarray              # (H, n, d) full or (H, k, d) compressed
    mean: np.ndarray | None         # (H, d) iff values compressed with per-sample means
    keys_compressed: bool
    values_compressed: bool
    full_len: int                   # original token count n
    # Token slots of the stored key rows when keys are compressed. This is
    # index bookkeeping (the analogue of a page table), not payload, and is
    # excluded from stored-byte accounting.
    token_indices: np.ndarray | None = None


@dataclass
class LayerCache:
    text_k: np.ndarray              # (H, c, d)
    text_v: np.ndarray
    vision: list[VisionSegment]
    gen_k: list[np.ndarray] = field(default_factory=list)   # each (H, d)
    gen_v: list[np.ndarray] = field(default_factory=list)

    @property
    def gen_len(self) -> int:
        return len(self.gen_k)

    def gen_arrays(self, heads: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.gen_k:
            empty = np.zeros((heads, 0, head_dim), dtype=np.float32)
            return empty, empty.copy()
        gk = np.stack(self.gen_k, axis=1)
        gv = np.stack(self.gen_v, axis=1)
        return gk, gv


@dataclass
class SegmentedCache:
    shape: ModelShape
    layers: list[LayerCache]
    mode: str                       # "full" or "compressed"


def _as_head_matrix(x, heads: int, head_dim: int, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim == 2:
        a = a[None, :, :]
    if a.ndim != 3 or a.shape[0] != heads or a.shape[2] != head_dim:
        raise DimensionError(
            f"{what} must have shape ({heads}, tokens, {head_dim}), got {np.asarray(x).shape}"
        )
    return a


def new_cache(
    shape: ModelShape,
    text_kv,
    vision_kv,
    schedule,
    codecs,
    mode: str,
    compress_keys: bool = True,
    compress_values: bool = True,
) -> SegmentedCache:
    """Build a per-layer segmented cache from prefill KV tensors.

    text_kv: per layer (keys, values) with shape (kv_heads, c, d_head).
    vision_kv: per layer, list of (keys, values) segments of n tokens each.
    In compressed mode each layer needs a LayerCodec trained for that n, and
    the stored vision length per segment is the codec's retained length.
    """
    from . import keycodec as _kc
    from . import valuecodec as _vc

    if mode not in ("full", "compressed"):
        raise ParameterError(f"unknown cache mode {mode!r}")
    if len(text_kv) != shape.layers or len(vision_kv) != shape.layers:
        raise DimensionError(
            f"text_kv/vision_kv must list {shape.layers} layers, got "
            f"{len(text_kv)}/{len(vision_kv)}"
        )
    compressed = mode == "compressed"
    if compressed:
        if codecs is None or len(codecs) != shape.layers:
            raise ConfigurationError("compressed mode needs one codec per layer")

    layers = []
    for li in range(shape.layers):
        tk, tv = text_kv[li]
        tk = _as_head_matrix(tk, shape.kv_heads, shape.head_dim, f"layer {li} text keys").copy()
        tv = _as_head_matrix(tv, shape.kv_heads, shape.head_dim, f"layer {li} text values").copy()
        if tk.shape[1] != tv.shape[1]:
            raise DimensionError(f"layer {li}: text key/value lengths differ")

        segs = []
        codec = codecs[li] if codecs is not None else None
        for si, (vk, vv) in enumerate(vision_kv[li]):
            vk = _as_head_matrix(vk, shape.kv_heads, shape.head_dim, f"layer {li} vision keys")
            vv = _as_head_matrix(vv, shape.kv_heads, shape.head_dim, f"layer {li} vision values")
            if vk.shape[1] != vv.shape[1]:
                raise DimensionError(f"layer {li} segment {si}: key/value lengths differ")
            n = vk.shape[1]
            if not compressed:
                segs.append(
                    VisionSegment(vk.copy(), vv.copy(), None, False, False, full_len=n)
                )
                continue
            if codec is None:
                raise ConfigurationError(f"layer {li} has no codec")
            if codec.n != n:
                raise ConfigurationError(
                    f"layer {li} segment {si}: codec trained for n={codec.n}, input has n={n}"
                )
            if codec.heads != shape.kv_heads:
                raise ConfigurationError(
                    f"layer {li}: codec has {codec.heads} heads, cache needs {shape.kv_heads}"
                )
            if schedule is not None:
                expect = effective_len(schedule.ratios[li], n)
                if codec.k != expect:
                    raise ConfigurationError(
                        f"layer {li}: codec retains {codec.k} rows, schedule expects {expect}"
                    )
            if compress_keys:
                seg_k = _kc.compress_keys(codec.key, vk)
                indices = codec.key.mask.copy()
            else:
                seg_k, indices = vk.copy(), None
            if compress_values:
                seg_v, mu = _vc.compress_values(codec.value, vv)
                mean = mu if codec.value.mean_policy == "per_sample" else None
            else:
                seg_v, mean = vv.copy(), None
            segs.append(
                VisionSegment(
                    seg_k,
                    seg_v,
                    mean,
                    compress_keys,
                    compress_values,
                    full_len=n,
                    token_indices=indices,
                )
            )
        layers.append(LayerCache(text_k=tk, text_v=tv, vision=segs))
    return SegmentedCache(shape=shape, layers=layers, mode=mode)


def append_token_kv(cache: SegmentedCache, layer: int, new_k, new_v) -> None:
    """Append one generated token's KV rows to a layer (shape (kv_heads, d_head))."""
    shape = cache.shape
    if not 0 <= layer < shape.layers:
        raise ParameterError(f"layer {layer} out of range [0, {shape.layers})")

    def as_rows(x, what):
        a = np.asarray(x, dtype=np.float32)
        if a.ndim == 1:
            a = a[None, :]
        if a.shape != (shape.kv_heads, shape.head_dim):
            raise DimensionError(
                f"{what} must have shape ({shape.kv_heads}, {shape.head_dim}), "
                f"got {np.asarray(x).shape}"
            )
        return a.copy()

    lc = cache.layers[layer]
    lc.gen_k.append(as_rows(new_k, "new_k"))
    lc.gen_v.append(as_rows(new_v, "new_v"))


# ---------------------------------------------------------------------------
# stored-byte accounting (must agree with memmodel formulas)


@dataclass(frozen=True)
class CacheBytes:
    text: int
    vision: int
    mean: int
    generated: int

    @property
    def total(self) -> int:
        return self.text + self.vision + self.mean + self.generated


def cache_stored_bytes(cache: SegmentedCache) -> CacheBytes:
    """Exact persistent byte counts of the cache arrays."""
    b = cache.shape.kv_bytes
    text = vision = mean = gen = 0
    for lc in cache.layers:
        text += (lc.text_k.size + lc.text_v.size) * b
        for seg in lc.vision:
            vision += (seg.keys.size + seg.values.size) * b
            if seg.mean is not None:
                mean += seg.mean.size * b
        gen += sum(r.size * b for r in lc.gen_k) + sum(r.size * b for r in lc.gen_v)
    return CacheBytes(text=text, vision=vision, mean=mean, generated=gen)


def codec_param_bytes(codecs, bytes_per: int = 4) -> int:
    """Parameter bytes of the value bases, key reconstructors, and global means."""
    total = 0
    for codec in codecs:
        total += codec.value.basis.size * bytes_per
        total += sum(w.size for w in codec.key.weights.values()) * bytes_per
        if codec.value.global_mean is not None:
            total += codec.value.global_mean.size * bytes_per
    return total


# ---------------------------------------------------------------------------
# codec bundle (KVC1)


@dataclass(frozen=True)
class BundleMeta:
    layers: int
    n: int
    d_head: int
    kv_heads: int
    kind: str
    mean_policy: str
    schedule_ratios: tuple[float, ...]


def encode_codec_bundle(codecs, d_head: int) -> bytes:
    """Serialize per-layer codecs plus metadata into a KVC1 container."""
    codecs = list(codecs)
    if not codecs:
        raise ParameterError("bundle needs at least one layer codec")
    kinds = {c.key.kind for c in codecs}
    policies = {c.value.mean_policy for c in codecs}
    ns = {c.n for c in codecs}
    heads = {c.heads for c in codecs}
    if len(kinds) != 1 or len(policies) != 1 or len(ns) != 1 or len(heads) != 1:
        raise ParameterError("bundle codecs must share kind, mean policy, n, and head count")
    kind, policy, n, h = kinds.pop(), policies.pop(), ns.pop(), heads.pop()

    entries: dict[str, np.ndarray] = {
        "meta": np.array(
            [len(codecs), n, d_head, h, _KIND_CODES[kind], _POLICY_CODES[policy]],
            dtype=np.float32,
        ),
        "schedule": np.array([c.retention for c in codecs], dtype=np.float32),
        # authoritative per-layer retained lengths: integers survive the f32
        # payload exactly, while a ratio like 0.8 would quantize and shift
        # its ceiling by one
        "retained": np.array([c.k for c in codecs], dtype=np.float32),
    }
    for li, c in enumerate(codecs):
        entries[f"layer{li}.mask"] = c.key.mask.astype(np.float32)
        entries[f"layer{li}.value_basis"] = c.value.basis
        for wname, w in c.key.weights.items():
            entries[f"layer{li}.key_{wname}"] = w
        if c.value.global_mean is not None:
            entries[f"layer{li}.value_mean"] = c.value.global_mean
    return encode_kvd(entries, magic=KVC_MAGIC)


def _req(entries: dict, name: str) -> np.ndarray:
    if name not in entries:
        raise ValidationError(f"bundle is missing entry {name!r}")
    return entries[name]


def validate_codec_bundle(data: bytes) -> tuple[list[LayerCodec], BundleMeta]:
    """Parse and structurally validate a KVC1 bundle.

    Checks, per layer: mask cardinality equals the scheduled retained length
    and is strictly increasing within [0, n); value basis rows orthonormal
    within 1e-4 per head; reconstructor weights map retained-length inputs
    to n-length outputs.
    """
    entries = decode_kvd(data, magic=KVC_MAGIC)
    meta = _req(entries, "meta")
    if meta.shape != (6,) or not np.all(np.isfinite(meta)):
        raise ValidationError("meta entry must hold 6 finite values")
    ints = meta[:4]
    if np.any(ints != np.round(ints)) or np.any(ints < 1):
        raise ValidationError("meta counts must be positive integers")
    layers, n, d_head, kv_heads = (int(x) for x in ints)
    kind = {v: k for k, v in _KIND_CODES.items()}.get(float(meta[4]))
    policy = {v: k for k, v in _POLICY_CODES.items()}.get(float(meta[5]))
    if kind is None or policy is None:
        raise ValidationError("meta has unknown kind or mean-policy code")

    sched = _req(entries, "schedule")
    if sched.shape != (layers,):
        raise ValidationError(f"schedule must list {layers} ratios, got shape {sched.shape}")
    ratios = tuple(float(r) for r in sched)
    if any(not 0.0 < r <= 1.0 for r in ratios):
        raise ValidationError("schedule ratios must lie in (0, 1]")
    retained = _req(entries, "retained")
    if retained.shape != (layers,) or np.any(retained != np.round(retained)):
        raise ValidationError(f"retained lengths must be {layers} integers")

    codecs = []
    for li in range(layers):
        k_expect = int(retained[li])
        if not 1 <= k_expect <= n:
            raise ValidationError(f"layer {li}: retained length {k_expect} outside [1, {n}]")
        # the f32 ratio is informational; it may sit one quantization step
        # away from the exact ceiling computed at fit time
        if abs(k_expect - effective_len(ratios[li], n)) > 1:
            raise ValidationError(
                f"layer {li}: retained length {k_expect} inconsistent with ratio "
                f"{ratios[li]} over n={n}"
            )
        mask_f = _req(entries, f"layer{li}.mask")
        if mask_f.ndim != 1 or mask_f.shape[0] != k_expect:
            raise ValidationError(
                f"layer {li}: mask holds {mask_f.shape} indices, expected {k_expect}"
            )
        if np.any(mask_f != np.round(mask_f)):
            raise ValidationError(f"layer {li}: mask indices must be integral")
        mask = mask_f.astype(np.int64)
        if mask[0] < 0 or mask[-1] >= n or np.any(np.diff(mask) <= 0):
            raise ValidationError(
                f"layer {li}: mask must be strictly increasing within [0, {n})"
            )

        basis = _req(entries, f"layer{li}.value_basis")
        if basis.shape != (kv_heads, k_expect, n):
            raise ValidationError(
                f"layer {li}: value basis shape {basis.shape}, expected "
                f"({kv_heads}, {k_expect}, {n})"
            )
        for h in range(kv_heads):
            u = basis[h].astype(np.float64)
            if np.max(np.abs(u @ u.T - np.eye(k_expect))) > 1e-4:
                raise ValidationError(
                    f"layer {li} head {h}: value basis rows are not orthonormal within 1e-4"
                )

        if kind == "linear":
            w = _req(entries, f"layer{li}.key_w")
            if w.shape != (kv_heads, n, k_expect):
                raise ValidationError(
                    f"layer {li}: key weights shape {w.shape}, expected "
                    f"({kv_heads}, {n}, {k_expect})"
                )
            weights = {"w": w}
        else:
            w1 = _req(entries, f"layer{li}.key_w1")
            b1 = _req(entries, f"layer{li}.key_b1")
            w2 = _req(entries, f"layer{li}.key_w2")
            b2 = _req(entries, f"layer{li}.key_b2")
            hidden = w1.shape[1] if w1.ndim == 3 else 0
            ok = (
                w1.shape == (kv_heads, hidden, k_expect)
                and b1.shape == (kv_heads, hidden)
                and w2.shape == (kv_heads, n, hidden)
                and b2.shape == (kv_heads, n)
                and hidden >= k_expect
            )
            if not ok:
                raise ValidationError(f"layer {li}: mlp2 weight shapes are inconsistent")
            weights = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}

        gmean = entries.get(f"layer{li}.value_mean")
        if policy == "global":
            if gmean is None or gmean.shape != (kv_heads, d_head):
                raise ValidationError(
                    f"layer {li}: global mean must have shape ({kv_heads}, {d_head})"
                )
        elif gmean is not None:
            raise ValidationError(f"layer {li}: per-sample policy must not store a global mean")

        key = KeyCodec(mask=mask, kind=kind, weights=weights, n=n)
        value = ValuePca(basis=basis, mean_policy=policy, global_mean=gmean)
        codecs.append(LayerCodec(key=key, value=value, retention=ratios[li]))

    bmeta = BundleMeta(
        layers=layers,
        n=n,
        d_head=d_head,
        kv_heads=kv_heads,
        kind=kind,
        mean_policy=policy,
        schedule_ratios=ratios,
    )
    return codecs, bmeta


# ---------------------------------------------------------------------------
# dataset-entry helpers shared with the exporter format


def kv_entry_name(layer: int, head: int, which: str) -> str:
    return f"layer{layer}.head{head}.{which}"


def group_kv_entries(entries: dict[str, np.ndarray]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Group flat `layer{i}.head{h}.K/V` entries into per-layer (K, V) stacks.

    Returns layer -> (keys, values) with shape (heads, n, d). Raises
    ValidationError when a layer's head set is ragged or a side is missing.
    """
    per_layer: dict[int, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in entries.items():
        parts = name.split(".")
        if len(parts) != 3 or parts[2] not in ("K", "V"):
            continue
        if not (parts[0].startswith("layer") and parts[1].startswith("head")):
            continue
        try:
            li = int(parts[0][5:])
            h = int(parts[1][4:])
        except ValueError:
            continue
        per_layer.setdefault(li, {}).setdefault(h, {})[parts[2]] = arr

    out = {}
    for li in sorted(per_layer):
        heads = per_layer[li]
        idx = sorted(heads)
        if idx != list(range(len(idx))):
            raise ValidationError(f"layer {li}: head indices are not contiguous from 0")
        ks, vs = [], []
        for h in idx:
            if "K" not in heads[h] or "V" not in heads[h]:
                raise ValidationError(f"layer {li} head {h}: missing K or V entry")
            ks.append(heads[h]["K"])
            vs.append(heads[h]["V"])
        shapes = {a.shape for a in ks} | {a.shape for a in vs}
        if len(shapes) != 1:
            raise ValidationError(f"layer {li}: inconsistent K/V shapes {shapes}")
        out[li] = (np.stack(ks), np.stack(vs))
    return out
