"""Dual-path sequence processing: 50%-overlap chunking, alternating
within-chunk and across-chunk transformer stacks, overlap-add inversion.

A feature map (F, T') becomes a (F, C, Nc) chunk tensor whose frames start
every C/2 positions. The intra stack treats each chunk as a length-C
sequence; the inter stack treats each within-chunk offset as a length-Nc
sequence across chunks. Overlap-add sums frames at their offsets, divides
by coverage, and trims the padding, which makes chunk -> overlap_add an
exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndkernel as nd
from .attention import AttentionSpec, derive_seed
from .ndkernel import Tensor
from .transformer import init_transformer_stack, transformer_stack

__all__ = [
    "ChunkTensor", "InvalidChunkSizeError", "chunk", "overlap_add",
    "SepformerBlockParams", "init_sepformer_block", "sepformer_block",
    "padded_chunk_geometry",
]


class InvalidChunkSizeError(ValueError):
    """Chunk size must be even (hop is exactly half the chunk)."""


@dataclass
class ChunkTensor:
    """(F, C, Nc) frames of a feature map plus what is needed to invert."""

    data: Tensor
    original_length: int
    chunk_size: int

    @property
    def hop(self):
        return self.chunk_size // 2

    @property
    def n_chunks(self):
        return self.data.shape[2]


def padded_chunk_geometry(length, chunk_size):
    """Padded length and frame count for 50%-overlap chunking.

    The padded length is the smallest L >= chunk_size covering ``length``
    with (L - chunk_size) divisible by the hop.
    """
    hop = chunk_size // 2
    if length <= chunk_size:
        padded = chunk_size
    else:
        padded = chunk_size + hop * (-(-(length - chunk_size) // hop))
    n_chunks = 1 + (padded - chunk_size) // hop
    return padded, n_chunks


def chunk(feature_map, chunk_size):
    """Frame an (F, T') map into a 50%-overlap :class:`ChunkTensor`."""
    if chunk_size < 2 or chunk_size % 2 != 0:
        raise InvalidChunkSizeError(
            "chunk size must be even and >= 2, got %d" % chunk_size)
    feature_map = nd.as_tensor(feature_map)
    length = feature_map.shape[1]
    hop = chunk_size // 2
    padded, _ = padded_chunk_geometry(length, chunk_size)
    x = nd.pad_cols(feature_map, 0, padded - length)
    frames = nd.frame(x, chunk_size, hop)
    return ChunkTensor(frames, length, chunk_size)


def overlap_add(chunks):
    """Invert :func:`chunk`: sum frames at offsets, divide by coverage,
    trim to the original length."""
    c = chunks.chunk_size
    hop = chunks.hop
    n = chunks.n_chunks
    padded = c + (n - 1) * hop
    summed = nd.overlap_sum(chunks.data, hop, padded)
    coverage = np.zeros(padded)
    for j in range(n):
        coverage[j * hop:j * hop + c] += 1.0
    out = nd.scale_cols(summed, Tensor(1.0 / coverage))
    return nd.slice_cols(out, 0, chunks.original_length)


@dataclass
class SepformerBlockParams:
    """N repeats of an intra stack followed by an inter stack.

    The two stacks may use different attention variants; parameters are
    independent across repeats.
    """

    intra_spec: AttentionSpec
    inter_spec: AttentionSpec
    intra_stacks: list = field(default_factory=list)
    inter_stacks: list = field(default_factory=list)

    @property
    def n_repeats(self):
        return len(self.intra_stacks)

    def named(self, prefix):
        out = {}
        for r in range(self.n_repeats):
            out.update(self.intra_stacks[r].named(
                "%s.rep%d.intra" % (prefix, r)))
            out.update(self.inter_stacks[r].named(
                "%s.rep%d.inter" % (prefix, r)))
        return out


def init_sepformer_block(intra_spec, inter_spec, feat_dim, ffw_dim,
                         n_repeats, intra_layers, inter_layers, rng):
    intra = [init_transformer_stack(intra_spec, feat_dim, ffw_dim,
                                    intra_layers, rng)
             for _ in range(n_repeats)]
    inter = [init_transformer_stack(inter_spec, feat_dim, ffw_dim,
                                    inter_layers, rng)
             for _ in range(n_repeats)]
    return SepformerBlockParams(intra_spec, inter_spec, intra, inter)


def sepformer_block(chunks, params, seed=0):
    """Apply N repeats of intra-chunk then inter-chunk modeling.

    Each chunk is an independent length-C sequence for the intra stack
    (block-diagonal attention); each within-chunk offset is an independent
    length-Nc sequence for the inter stack (strided attention). Chunks are
    processed sequentially so the result is deterministic.
    """
    x = chunks.data
    for r in range(params.n_repeats):
        n_chunks = x.shape[2]
        cols = [transformer_stack(nd.take_index(x, 2, j),
                                  params.intra_stacks[r], params.intra_spec,
                                  seed=derive_seed(seed, r, 0, j))
                for j in range(n_chunks)]
        x = nd.stack_along(cols, axis=2)
        c = x.shape[1]
        rows = [transformer_stack(nd.take_index(x, 1, p),
                                  params.inter_stacks[r], params.inter_spec,
                                  seed=derive_seed(seed, r, 1, p))
                for p in range(c)]
        x = nd.stack_along(rows, axis=1)
    return ChunkTensor(x, chunks.original_length, chunks.chunk_size)
