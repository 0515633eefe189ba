"""Small layer toolkit on top of the autodiff tape.

Parameters live in a flat dict name -> float64 array; `wrap` turns that into
a dict of (optionally trainable) Tensors for one forward pass. Layers are
init/apply function pairs keyed by a name prefix.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def wrap(params: dict, trainable=True):
    return {k: ad.Tensor(v, requires_grad=trainable) for k, v in params.items()}


def init_linear(params, rng, name, d_in, d_out, bias=True, bias_scale=0.0):
    std = np.sqrt(2.0 / (d_in + d_out))
    params[f"{name}/W"] = rng.normal(0.0, std, size=(d_in, d_out))
    if bias:
        if bias_scale > 0.0:
            params[f"{name}/b"] = rng.normal(0.0, bias_scale, size=(d_out,))
        else:
            params[f"{name}/b"] = np.zeros(d_out)


def linear(pt, name, x):
    y = ad.matmul(x, pt[f"{name}/W"])
    b = pt.get(f"{name}/b")
    return y if b is None else ad.add(y, b)


def init_layer_norm(params, name, d):
    params[f"{name}/gamma"] = np.ones(d)
    params[f"{name}/beta"] = np.zeros(d)


def layer_norm(pt, name, x):
    h = ad.layer_norm(x)
    return ad.add(ad.mul(h, pt[f"{name}/gamma"]), pt[f"{name}/beta"])


def init_embedding(params, rng, name, n, d, std=0.02):
    params[f"{name}/table"] = rng.normal(0.0, std, size=(n, d))


def embed(pt, name, ids):
    return ad.embedding(pt[f"{name}/table"], ids)


def sinusoid_1d(n, d):
    """Classic interleaved sin/cos positional table, shape (n, d)."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


def split_heads(x, n_heads):
    """(n, d) -> (heads, n, d/h)."""
    n, d = x.shape
    dh = d // n_heads
    x = ad.reshape(x, (n, n_heads, dh))
    return ad.transpose(x, (1, 0, 2))


def merge_heads(x):
    """(heads, n, d/h) -> (n, d)."""
    h, n, dh = x.shape
    x = ad.transpose(x, (1, 0, 2))
    return ad.reshape(x, (n, h * dh))


def attention(q, k, v, n_heads, bias=None):
    """Multi-head scaled dot-product attention over already-projected q/k/v.

    q: (nq, d), k/v: (nk, d). `bias` is a constant (nq, nk) array added to
    every head's logits.
    """
    d = q.shape[1]
    dh = d // n_heads
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(logits, bias=None if bias is None else bias[None, :, :])
    return merge_heads(ad.matmul(attn, vh))


def init_self_attention_block(params, rng, name, d, n_heads, d_ff):
    init_layer_norm(params, f"{name}/ln1", d)
    for proj in ("q", "k", "v", "o"):
        # the key bias is inert under softmax (constant shift per row)
        init_linear(params, rng, f"{name}/{proj}", d, d, bias=proj != "k")
    init_layer_norm(params, f"{name}/ln2", d)
    init_linear(params, rng, f"{name}/ff1", d, d_ff)
    init_linear(params, rng, f"{name}/ff2", d_ff, d)


def self_attention_block(pt, name, x, n_heads):
    """Pre-LN transformer encoder block."""
    h = layer_norm(pt, f"{name}/ln1", x)
    q = linear(pt, f"{name}/q", h)
    k = linear(pt, f"{name}/k", h)
    v = linear(pt, f"{name}/v", h)
    a = attention(q, k, v, n_heads)
    x = ad.add(x, linear(pt, f"{name}/o", a))
    h = layer_norm(pt, f"{name}/ln2", x)
    h = linear(pt, f"{name}/ff2", ad.gelu(linear(pt, f"{name}/ff1", h)))
    return ad.add(x, h)
