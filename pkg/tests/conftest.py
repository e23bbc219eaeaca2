"""Shared fixture builders for the decode-path and acceptance tests."""

import numpy as np
import pytest

from seqkv.keycodec import KeyCodec
from seqkv.kvmodel import LayerCodec, ModelShape
from seqkv.retention import effective_len
from seqkv.valuecodec import ValuePca


def rel_err(ref, test):
    """Max abs deviation scaled by the reference's sup norm."""
    a = np.asarray(ref, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    scale = max(np.abs(a).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def random_orthonormal_rows(rng, k, n):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q[:, :k].T.astype(np.float32)


def random_linear_codecs(rng, layers, heads, n, retention, mean_policy="per_sample", d_head=None):
    """Valid (not trained) codecs: random mask, weights, orthonormal bases."""
    k = effective_len(retention, n)
    out = []
    for _ in range(layers):
        mask = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
        w = (rng.standard_normal((heads, n, k)) * 0.4).astype(np.float32)
        basis = np.stack([random_orthonormal_rows(rng, k, n) for _ in range(heads)])
        gmean = None
        if mean_policy == "global":
            gmean = rng.standard_normal((heads, d_head)).astype(np.float32)
        key = KeyCodec(mask=mask, kind="linear", weights={"w": w}, n=n)
        value = ValuePca(basis=basis, mean_policy=mean_policy, global_mean=gmean)
        out.append(LayerCodec(key=key, value=value, retention=retention))
    return out


def random_cache_inputs(rng, shape: ModelShape, n, text_len, segments=1):
    """Random prefill tensors: per-layer text KV and vision segments."""
    def mat(tokens):
        return rng.standard_normal((shape.kv_heads, tokens, shape.head_dim)).astype(np.float32)

    text = [(mat(text_len), mat(text_len)) for _ in range(shape.layers)]
    vision = [[(mat(n), mat(n)) for _ in range(segments)] for _ in range(shape.layers)]
    return text, vision


def random_queries(rng, shape: ModelShape):
    return rng.standard_normal((shape.layers, shape.query_heads, shape.head_dim)).astype(
        np.float32
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
