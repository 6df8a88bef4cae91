"""Four self-attention mechanisms behind one multi-head interface.

All variants consume and produce (F x T) feature maps (features on axis 0,
positions on the last axis). Queries/keys/values are produced by shared
projection weights; each head runs a variant-specific core and the heads
are concatenated and recombined by an output matrix.

Variants:

* ``full``       -- dense scaled dot-product attention, every position
                    attends to every position (non-causal).
* ``longformer`` -- sliding window of odd width plus evenly spaced global
                    positions that attend to (and are attended by) all.
* ``linformer``  -- keys/values projected from length T down to a fixed
                    number of slots before the softmax.
* ``reformer``   -- shared-QK attention restricted to LSH buckets,
                    computed chunkwise over the bucket-sorted sequence with
                    one look-back chunk, averaged over hash rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndkernel as nd
from .ndkernel import Tensor

__all__ = [
    "VARIANTS", "AttentionSpec", "AttentionWeights", "SequenceTooLongError",
    "positional_encoding", "multi_head_dispatch", "full_attention",
    "longformer_attention", "linformer_attention", "reformer_attention",
    "init_attention_weights", "hash_buckets", "longformer_allowed",
    "attention_core_macs", "derive_seed",
]

VARIANTS = ("full", "longformer", "linformer", "reformer")

# Additive logit biases: HARD removes a slot outright, SOFT keeps a slot
# alive only when nothing else is attendable (a position falls back to
# itself when it is alone).
_HARD_MASK = -1e30
_SOFT_MASK = -1e5


class SequenceTooLongError(ValueError):
    """Input longer than the projection length the weights were built for."""


@dataclass(frozen=True)
class AttentionSpec:
    """Variant selector plus hyperparameters shared by all heads."""

    variant: str = "full"
    heads: int = 8
    d_model: int = 256
    # longformer: odd window width; global positions every `global_stride`
    # indices (always including 0), or None for a pure sliding window
    window: int = 101
    global_stride: int | None = 100
    # linformer: keys/values projected to `proj_len` slots; inputs longer
    # than `max_len` are rejected
    proj_len: int = 128
    max_len: int = 8000
    # reformer: LSH rounds over `n_buckets` buckets, chunked attention with
    # `bucket_chunk` positions per chunk plus one look-back chunk
    n_buckets: int = 16
    n_rounds: int = 2
    bucket_chunk: int = 64

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError("unknown attention variant %r" % (self.variant,))
        if self.heads < 1 or self.d_model < 1:
            raise ValueError("heads and d_model must be positive")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model %d not divisible by heads %d"
                             % (self.d_model, self.heads))
        if self.variant == "longformer":
            if self.window < 1 or self.window % 2 == 0:
                raise ValueError("window must be odd and positive, got %d"
                                 % self.window)
            if self.global_stride is not None and self.global_stride < 1:
                raise ValueError("global_stride must be positive or None")
        if self.variant == "linformer":
            if not (1 <= self.proj_len <= self.max_len):
                raise ValueError("need 1 <= proj_len <= max_len, got %d > %d"
                                 % (self.proj_len, self.max_len))
        if self.variant == "reformer":
            nb = self.n_buckets
            if nb < 2 or (nb & (nb - 1)) != 0:
                raise ValueError("n_buckets must be a power of two >= 2")
            if self.n_rounds < 1 or self.bucket_chunk < 1:
                raise ValueError("n_rounds and bucket_chunk must be positive")

    @property
    def d_head(self):
        return self.d_model // self.heads


@dataclass
class AttentionWeights:
    """Projection matrices for one multi-head attention instance.

    ``wk`` is absent for the reformer (shared-QK: keys are the queries
    normalized to unit length); ``proj_p``/``proj_f`` exist only for the
    linformer.
    """

    wq: Tensor
    wv: Tensor
    wo: Tensor
    wk: Tensor | None = None
    proj_p: Tensor | None = None
    proj_f: Tensor | None = None

    def named(self, prefix):
        out = {prefix + ".wq": self.wq, prefix + ".wv": self.wv,
               prefix + ".wo": self.wo}
        if self.wk is not None:
            out[prefix + ".wk"] = self.wk
        if self.proj_p is not None:
            out[prefix + ".proj_p"] = self.proj_p
            out[prefix + ".proj_f"] = self.proj_f
        return out


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_attention_weights(spec, feat_dim, rng):
    d = spec.d_model
    w = AttentionWeights(
        wq=_uniform(rng, (d, feat_dim), feat_dim),
        wv=_uniform(rng, (d, feat_dim), feat_dim),
        wo=_uniform(rng, (d, d), d),
    )
    if spec.variant != "reformer":
        w.wk = _uniform(rng, (d, feat_dim), feat_dim)
    if spec.variant == "linformer":
        w.proj_p = _uniform(rng, (spec.max_len, spec.proj_len), spec.max_len)
        w.proj_f = _uniform(rng, (spec.max_len, spec.proj_len), spec.max_len)
    return w


def derive_seed(base, *indices):
    """Deterministic child seed for nested components (layers, heads)."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFF, *map(int, indices)])
    return int(ss.generate_state(1)[0])


def positional_encoding(length, d_model):
    """Sinusoidal position table (length x d_model), values in [-1, 1].

    Column 2i oscillates as sin(t / 10000^(2i/d_model)), column 2i+1 as the
    matching cosine.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    t = np.arange(length)[:, None]
    i2 = 2 * (np.arange(d_model) // 2)
    angles = t / np.power(10000.0, i2 / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return Tensor(pe)


# ---------------------------------------------------------------------------
# per-head cores

def _full_head(q, k, v, scale, details):
    scores = nd.scale(nd.matmul(nd.transpose(q), k), scale)
    a = nd.softmax_rows(scores)
    if details is not None:
        details["map"] = a.data.copy()
    return nd.matmul(v, nd.transpose(a))


def longformer_allowed(length, window, global_stride):
    """Boolean (T x T) matrix of the realized longformer attention pattern."""
    half = (window - 1) // 2
    t = np.arange(length)
    allowed = np.abs(t[:, None] - t[None, :]) <= half
    if global_stride is not None:
        g = np.arange(0, length, global_stride)
        allowed[g, :] = True
        allowed[:, g] = True
    return allowed


def _longformer_masks(length, window, global_stride):
    """Constant additive masks and index arrays for the banded computation."""
    half = (window - 1) // 2
    t = np.arange(length)[:, None]
    src = t + np.arange(-half, half + 1)[None, :]        # (T, w) band targets
    in_range = (src >= 0) & (src < length)
    if global_stride is not None:
        globals_idx = np.arange(0, length, global_stride)
        dup = in_range & np.isin(src, globals_idx)
    else:
        globals_idx = np.zeros(0, dtype=np.intp)
        dup = np.zeros_like(in_range)
    band_mask = np.where(in_range & ~dup, 0.0, _HARD_MASK)
    src_clipped = np.clip(src, 0, length - 1)
    return half, src_clipped, band_mask, globals_idx


def _longformer_head(q, k, v, scale, spec, length, masks, details):
    half, _, band_mask, gidx = masks
    w = spec.window
    ng = len(gidx)

    kp = nd.pad_cols(k, half, half)
    kwin = nd.frame(kp, w, 1)                             # (dk, w, T)
    q3 = nd.reshape(nd.transpose(q), (length, -1, 1))     # (T, dk, 1)
    loc = nd.bmm(nd.permute(kwin, (2, 1, 0)), q3)         # (T, w, 1)
    loc = nd.add(nd.reshape(nd.scale(loc, scale), (length, w)),
                 Tensor(band_mask))
    if ng:
        kg = nd.gather_cols(k, gidx)
        sg = nd.scale(nd.matmul(nd.transpose(q), kg), scale)  # (T, g)
        scores = nd.concat([loc, sg], axis=1)
    else:
        scores = loc
    a = nd.softmax_rows(scores)                           # (T, w [+ g])

    vp = nd.pad_cols(v, half, half)
    vwin = nd.frame(vp, w, 1)                             # (dk, w, T)
    a_loc3 = nd.reshape(nd.slice_cols(a, 0, w), (length, w, 1))
    out = nd.bmm(nd.permute(vwin, (2, 0, 1)), a_loc3)     # (T, dk, 1)
    out = nd.transpose(nd.reshape(out, (length, -1)))     # (dk, T)
    if details is not None:
        details["map"] = a.data.copy()
    if ng:
        ag = nd.slice_cols(a, w, w + ng)                  # (T, g)
        out = nd.add(out, nd.matmul(nd.gather_cols(v, gidx), nd.transpose(ag)))
        # rows at global positions instead attend to everything
        sgr = nd.scale(nd.matmul(nd.transpose(nd.gather_cols(q, gidx)), k),
                       scale)                             # (g, T)
        agr = nd.softmax_rows(sgr)
        outg = nd.matmul(v, nd.transpose(agr))            # (dk, g)
        keep = np.ones(length)
        keep[gidx] = 0.0
        out = nd.add(nd.scale_cols(out, Tensor(keep)),
                     nd.scatter_cols(outg, gidx, length))
        if details is not None:
            details["global_rows"] = agr.data.copy()
    return out


def _linformer_head(q, k, v, scale, spec, length, weights, details):
    kproj = nd.slice_rows(weights.proj_p, 0, length)      # (T, k)
    vproj = nd.slice_rows(weights.proj_f, 0, length)
    kp = nd.matmul(k, kproj)                              # (dk, k)
    scores = nd.scale(nd.matmul(nd.transpose(q), kp), scale)  # (T, k)
    a = nd.softmax_rows(scores)
    if details is not None:
        details["map"] = a.data.copy()
    vf = nd.matmul(v, vproj)                              # (dk, k)
    return nd.matmul(vf, nd.transpose(a))


def hash_buckets(vectors, n_buckets, rotation):
    """Angular LSH: bucket ids for unit column vectors under one rotation.

    ``vectors`` is (d, T); ``rotation`` is (d, n_buckets / 2). The bucket is
    the argmax over the concatenated [proj, -proj] coordinates.
    """
    proj = vectors.T @ rotation                           # (T, nb/2)
    both = np.concatenate([proj, -proj], axis=1)
    assert both.shape[1] == n_buckets
    return np.argmax(both, axis=1)


def _reformer_round_mask(order, n_chunks, m, length):
    """Additive mask for chunked shared-QK attention in sorted coordinates.

    Keys beyond the real sequence (padding) and the missing look-back of
    chunk 0 are removed outright; a position's own slot is soft-masked so
    it only wins when nothing else is attendable.
    """
    csel = np.arange(n_chunks)[:, None, None]
    qpos = csel * m + np.arange(m)[None, :, None]          # (nch, m, 1)
    kpos = np.concatenate([(csel - 1) * m + np.arange(m)[None, None, :],
                           csel * m + np.arange(m)[None, None, :]], axis=2)
    valid = (kpos >= 0) & (kpos < length)
    self_slot = kpos == qpos
    return np.where(~valid, _HARD_MASK,
                    np.where(self_slot, _SOFT_MASK, 0.0))


def _reformer_head(q, v, scale, spec, length, rotations, details):
    dk = spec.d_head
    m = spec.bucket_chunk
    n_chunks = -(-length // m)
    padded = n_chunks * m
    kq = nd.unit_columns(q)

    round_outs = []
    round_lses = []
    for r in range(spec.n_rounds):
        buckets = hash_buckets(kq.data, spec.n_buckets, rotations[r])
        order = np.lexsort((np.arange(length), buckets))
        qs = nd.pad_cols(nd.gather_cols(q, order), 0, padded - length)
        ks = nd.pad_cols(nd.gather_cols(kq, order), 0, padded - length)
        vs = nd.pad_cols(nd.gather_cols(v, order), 0, padded - length)

        qc = nd.permute(nd.reshape(qs, (dk, n_chunks, m)), (1, 2, 0))
        kc = nd.permute(nd.reshape(ks, (dk, n_chunks, m)), (1, 0, 2))
        vc = nd.permute(nd.reshape(vs, (dk, n_chunks, m)), (1, 2, 0))
        zero_k = Tensor(np.zeros((1, dk, m)))
        zero_v = Tensor(np.zeros((1, m, dk)))
        k_prev = nd.concat([zero_k, nd.slice_rows(kc, 0, n_chunks - 1)], 0)
        v_prev = nd.concat([zero_v, nd.slice_rows(vc, 0, n_chunks - 1)], 0)
        kcc = nd.concat([k_prev, kc], axis=2)             # (nch, dk, 2m)
        vcc = nd.concat([v_prev, vc], axis=1)             # (nch, 2m, dk)

        mask = _reformer_round_mask(order, n_chunks, m, length)
        scores = nd.add(nd.scale(nd.bmm(qc, kcc), scale), Tensor(mask))
        flat = nd.reshape(scores, (n_chunks * m, 2 * m))
        a = nd.softmax_rows(flat)
        lse = nd.logsumexp_rows(flat)                     # (nch*m,)
        outc = nd.bmm(nd.reshape(a, (n_chunks, m, 2 * m)), vcc)
        outs = nd.reshape(nd.permute(outc, (2, 0, 1)), (dk, padded))
        out_r = nd.scatter_cols(nd.slice_cols(outs, 0, length), order, length)
        lse_row = nd.scatter_cols(
            nd.slice_cols(nd.reshape(lse, (1, padded)), 0, length),
            order, length)
        round_outs.append(out_r)
        round_lses.append(lse_row)
        if details is not None:
            details.setdefault("rounds", []).append({
                "buckets": buckets.copy(),
                "map": a.data.reshape(n_chunks, m, 2 * m).copy(),
            })

    if spec.n_rounds == 1:
        return round_outs[0]
    lses = nd.concat(round_lses, axis=0)                  # (R, T)
    weights = nd.transpose(nd.softmax_rows(nd.transpose(lses)))
    out = None
    for r in range(spec.n_rounds):
        wr = nd.reshape(nd.slice_rows(weights, r, r + 1), (length,))
        term = nd.scale_cols(round_outs[r], wr)
        out = term if out is None else nd.add(out, term)
    return out


# ---------------------------------------------------------------------------
# dispatch

def multi_head_dispatch(x, weights, spec, seed=0, details=None):
    """Project, run the variant core per head, concatenate, recombine.

    ``seed`` only matters for the reformer, whose LSH rotations are drawn
    per call from it; equal seeds give bit-identical outputs. When
    ``details`` is a dict it is filled with per-head diagnostics
    (attention maps, bucket assignments).
    """
    x = nd.as_tensor(x)
    if x.data.ndim != 2:
        raise nd.ShapeError("attention expects (F, T), got %r" % (x.shape,))
    length = x.shape[1]
    dk = spec.d_head
    scale = 1.0 / math.sqrt(dk)

    if spec.variant == "linformer" and length > spec.max_len:
        raise SequenceTooLongError(
            "sequence length %d exceeds projection size %d"
            % (length, spec.max_len))

    q = nd.matmul(weights.wq, x)
    v = nd.matmul(weights.wv, x)
    k = nd.matmul(weights.wk, x) if weights.wk is not None else None

    masks = None
    if spec.variant == "longformer":
        masks = _longformer_masks(length, spec.window, spec.global_stride)
    rotations = None
    if spec.variant == "reformer":
        rng = np.random.Generator(np.random.PCG64(seed))
        rotations = [rng.standard_normal((dk, spec.n_buckets // 2))
                     for _ in range(spec.n_rounds)]

    heads = []
    head_details = [] if details is not None else None
    for i in range(spec.heads):
        qi = nd.slice_rows(q, i * dk, (i + 1) * dk)
        vi = nd.slice_rows(v, i * dk, (i + 1) * dk)
        ki = nd.slice_rows(k, i * dk, (i + 1) * dk) if k is not None else None
        hd = {} if details is not None else None
        if spec.variant == "full":
            head = _full_head(qi, ki, vi, scale, hd)
        elif spec.variant == "longformer":
            head = _longformer_head(qi, ki, vi, scale, spec, length, masks, hd)
        elif spec.variant == "linformer":
            head = _linformer_head(qi, ki, vi, scale, spec, length,
                                   weights, hd)
        else:
            head = _reformer_head(qi, vi, scale, spec, length, rotations, hd)
        heads.append(head)
        if head_details is not None:
            head_details.append(hd)

    cat = heads[0] if spec.heads == 1 else nd.concat(heads, axis=0)
    out = nd.matmul(weights.wo, cat)
    if details is not None:
        details["heads"] = head_details
    return out


def _variant_entry(variant):
    def op(x, weights, spec, seed=0, details=None):
        if spec.variant != variant:
            raise ValueError("spec variant is %r, expected %r"
                             % (spec.variant, variant))
        return multi_head_dispatch(x, weights, spec, seed=seed,
                                   details=details)
    op.__name__ = variant + "_attention"
    return op


full_attention = _variant_entry("full")
longformer_attention = _variant_entry("longformer")
linformer_attention = _variant_entry("linformer")
reformer_attention = _variant_entry("reformer")


# ---------------------------------------------------------------------------
# cost model

def attention_core_macs(spec, length):
    """MACs of the per-head attention cores (all heads), excluding the
    Q/K/V/O projections. Mirrors the matmul/bmm calls of the forward pass
    exactly, so an instrumented count of the same ops matches it.
    """
    dk = spec.d_head
    h = spec.heads
    t = length
    if spec.variant == "full":
        per_head = 2 * t * t * dk
    elif spec.variant == "longformer":
        per_head = 2 * t * spec.window * dk
        if spec.global_stride is not None:
            g = len(range(0, t, spec.global_stride))
            per_head += 4 * t * g * dk
    elif spec.variant == "linformer":
        per_head = 4 * t * spec.proj_len * dk
    else:
        m = spec.bucket_chunk
        n_chunks = -(-t // m)
        per_head = spec.n_rounds * 2 * (n_chunks * m * dk * 2 * m)
    return h * per_head


def projection_macs(spec, feat_dim, length):
    """MACs of the Q/K/V projections plus the output recombination."""
    d = spec.d_model
    n_proj = 2 if spec.variant == "reformer" else 3
    return n_proj * d * feat_dim * length + d * d * length
