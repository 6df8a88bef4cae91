"""The complete separator: learned conv encoder, dual-path masking network,
conv decoder, and mask application.

The encoder turns a mono waveform into a nonnegative (F, T') latent map.
The masking network normalizes it, chunks it, runs the repeated
intra/inter transformer block, expands to one channel group per source,
overlap-adds back to (F, T'), and finishes with a pair of position-wise
feed-forward layers; ReLU keeps the masks nonnegative but unbounded.
Each estimate is the transposed convolution of mask * latent, length-fixed
to the input.

With chunking disabled only the intra stacks run, directly on the full
sequence. With one source the same network acts as an enhancer.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import ndkernel as nd
from .attention import AttentionSpec, derive_seed
from .dualpath import ChunkTensor, chunk, init_sepformer_block, \
    overlap_add, sepformer_block
from .ndkernel import Tensor
from .transformer import init_transformer_stack, transformer_stack

__all__ = [
    "SepformerConfig", "Sepformer", "SeparationOutput", "CheckpointError",
    "parameter_shapes", "parameter_census", "save_checkpoint",
    "load_checkpoint", "encoded_length",
]

CHECKPOINT_MAGIC = b"SPFK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class SepformerConfig:
    """Architecture hyperparameters; the defaults are the full-size model."""

    n_filters: int = 256
    kernel_size: int = 16
    stride: int = 8
    chunk_size: int | None = 250
    n_repeats: int = 2
    intra_layers: int = 8
    inter_layers: int = 8
    n_heads: int = 8
    ffw_dim: int = 1024
    n_sources: int = 2
    sample_rate: int = 8000
    intra_attention: AttentionSpec | None = None
    inter_attention: AttentionSpec | None = None

    def __post_init__(self):
        if self.intra_attention is None:
            self.intra_attention = AttentionSpec(
                "full", heads=self.n_heads, d_model=self.n_filters)
        if self.inter_attention is None:
            self.inter_attention = replace(self.intra_attention)
        for name, spec in (("intra", self.intra_attention),
                           ("inter", self.inter_attention)):
            if spec.d_model != self.n_filters:
                raise ValueError(
                    "%s attention d_model %d must equal n_filters %d"
                    % (name, spec.d_model, self.n_filters))
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if self.chunk_size is not None and (self.chunk_size < 2
                                            or self.chunk_size % 2):
            raise ValueError("chunk_size must be even and >= 2 (or None)")


def encoded_length(cfg, n_samples):
    """Latent frames produced for a signal of ``n_samples``."""
    if n_samples < cfg.kernel_size:
        raise nd.InputTooShortError(
            "signal length %d shorter than kernel %d"
            % (n_samples, cfg.kernel_size))
    return (n_samples - cfg.kernel_size) // cfg.stride + 1


@dataclass
class SeparationOutput:
    estimates: list
    masks: list


# ---------------------------------------------------------------------------
# parameter bookkeeping

def _attention_shapes(spec, feat_dim, prefix):
    d = spec.d_model
    yield prefix + ".wq", (d, feat_dim)
    yield prefix + ".wv", (d, feat_dim)
    yield prefix + ".wo", (d, d)
    if spec.variant != "reformer":
        yield prefix + ".wk", (d, feat_dim)
    if spec.variant == "linformer":
        yield prefix + ".proj_p", (spec.max_len, spec.proj_len)
        yield prefix + ".proj_f", (spec.max_len, spec.proj_len)


def _layer_shapes(spec, feat_dim, ffw_dim, prefix):
    yield from _attention_shapes(spec, feat_dim, prefix + ".attn")
    yield prefix + ".ln1.gain", (feat_dim,)
    yield prefix + ".ln1.bias", (feat_dim,)
    yield prefix + ".ln2.gain", (feat_dim,)
    yield prefix + ".ln2.bias", (feat_dim,)
    yield prefix + ".ffw.w1", (feat_dim, ffw_dim)
    yield prefix + ".ffw.b1", (ffw_dim,)
    yield prefix + ".ffw.w2", (ffw_dim, feat_dim)
    yield prefix + ".ffw.b2", (feat_dim,)


def _stack_shapes(spec, feat_dim, ffw_dim, depth, prefix):
    for k in range(depth):
        yield from _layer_shapes(spec, feat_dim, ffw_dim,
                                 "%s.layer%d" % (prefix, k))


def parameter_shapes(cfg):
    """Name -> shape for every learnable tensor, mirroring construction."""
    f, kw = cfg.n_filters, cfg.kernel_size
    yield "encoder.filters", (f, 1, kw)
    yield "masknet.norm.gain", (f,)
    yield "masknet.norm.bias", (f,)
    yield "masknet.input_linear.weight", (f, f)
    yield "masknet.input_linear.bias", (f,)
    for r in range(cfg.n_repeats):
        yield from _stack_shapes(cfg.intra_attention, f, cfg.ffw_dim,
                                 cfg.intra_layers,
                                 "masknet.dual.rep%d.intra" % r)
        if cfg.chunk_size is not None:
            yield from _stack_shapes(cfg.inter_attention, f, cfg.ffw_dim,
                                     cfg.inter_layers,
                                     "masknet.dual.rep%d.inter" % r)
    yield "masknet.prelu.slope", (f,)
    yield "masknet.output_linear.weight", (cfg.n_sources * f, f)
    yield "masknet.output_linear.bias", (cfg.n_sources * f,)
    yield "masknet.mask_ffw1.weight", (f, f)
    yield "masknet.mask_ffw1.bias", (f,)
    yield "masknet.mask_ffw2.weight", (f, f)
    yield "masknet.mask_ffw2.bias", (f,)
    yield "decoder.filters", (f, 1, kw)


def parameter_census(cfg):
    """Exact count of learnable scalars for a configuration."""
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(cfg))


# ---------------------------------------------------------------------------
# model

def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


class Sepformer:
    """A constructed separator; immutable during inference, single-owner
    during a training step."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        f, kw = cfg.n_filters, cfg.kernel_size
        ns = cfg.n_sources

        self.encoder_filters = _uniform(rng, (f, 1, kw), kw)
        self.norm_gain = Tensor(np.ones(f))
        self.norm_bias = Tensor(np.zeros(f))
        self.input_w = _uniform(rng, (f, f), f)
        self.input_b = Tensor(np.zeros(f))
        if cfg.chunk_size is not None:
            self.dual = init_sepformer_block(
                cfg.intra_attention, cfg.inter_attention, f, cfg.ffw_dim,
                cfg.n_repeats, cfg.intra_layers, cfg.inter_layers, rng)
            self.intra_only = None
        else:
            self.dual = None
            self.intra_only = [
                init_transformer_stack(cfg.intra_attention, f, cfg.ffw_dim,
                                       cfg.intra_layers, rng)
                for _ in range(cfg.n_repeats)]
        self.prelu_slope = Tensor(np.full(f, 0.25))
        self.output_w = _uniform(rng, (ns * f, f), f)
        self.output_b = Tensor(np.zeros(ns * f))
        self.mask_w1 = _uniform(rng, (f, f), f)
        self.mask_b1 = Tensor(np.zeros(f))
        self.mask_w2 = _uniform(rng, (f, f), f)
        self.mask_b2 = Tensor(np.zeros(f))
        self.decoder_filters = _uniform(rng, (f, 1, kw), kw)

    def parameters(self):
        """Stable name -> tensor map covering every learnable scalar."""
        params = OrderedDict()
        params["encoder.filters"] = self.encoder_filters
        params["masknet.norm.gain"] = self.norm_gain
        params["masknet.norm.bias"] = self.norm_bias
        params["masknet.input_linear.weight"] = self.input_w
        params["masknet.input_linear.bias"] = self.input_b
        if self.dual is not None:
            params.update(self.dual.named("masknet.dual"))
        else:
            for r, stack in enumerate(self.intra_only):
                params.update(stack.named("masknet.dual.rep%d.intra" % r))
        params["masknet.prelu.slope"] = self.prelu_slope
        params["masknet.output_linear.weight"] = self.output_w
        params["masknet.output_linear.bias"] = self.output_b
        params["masknet.mask_ffw1.weight"] = self.mask_w1
        params["masknet.mask_ffw1.bias"] = self.mask_b1
        params["masknet.mask_ffw2.weight"] = self.mask_w2
        params["masknet.mask_ffw2.bias"] = self.mask_b2
        params["decoder.filters"] = self.decoder_filters
        return params

    # -- forward ------------------------------------------------------

    def encode(self, x):
        """Waveform -> nonnegative latent map (F, T')."""
        x = nd.as_tensor(x)
        return nd.relu(nd.conv1d(x, self.encoder_filters, self.cfg.stride))

    def mask_net(self, latent, details=None):
        """Latent map -> one nonnegative (F, T') mask per source."""
        cfg = self.cfg
        f = cfg.n_filters
        length = latent.shape[1]
        normed = nd.layer_norm(latent, self.norm_gain, self.norm_bias,
                               axis=0)
        hbar = nd.add_bias(nd.matmul(self.input_w, normed), self.input_b)

        if cfg.chunk_size is not None:
            chunked = chunk(hbar, cfg.chunk_size)
            processed = sepformer_block(chunked, self.dual,
                                        seed=derive_seed(self.seed, 101))
            if details is not None:
                details["chunked"] = chunked.data
                details["dual_out"] = processed.data
            activated = nd.prelu(processed.data, self.prelu_slope)
            c, n_chunks = activated.shape[1], activated.shape[2]
            positions = c * n_chunks
            flat = nd.reshape(activated, (f, positions))
        else:
            x = hbar
            for r, stack in enumerate(self.intra_only):
                x = transformer_stack(x, stack, cfg.intra_attention,
                                      seed=derive_seed(self.seed, 101, r))
            if details is not None:
                details["dual_out"] = x
            flat = nd.prelu(x, self.prelu_slope)
            positions = length

        expanded = nd.add_bias(nd.matmul(self.output_w, flat),
                               self.output_b)      # (Ns*F, positions)
        if details is not None and cfg.chunk_size is not None:
            details["expanded"] = nd.reshape(
                expanded, (cfg.n_sources * f, c, n_chunks))

        masks = []
        per_source = []
        for k in range(cfg.n_sources):
            mk = nd.slice_rows(expanded, k * f, (k + 1) * f)
            if cfg.chunk_size is not None:
                mk = overlap_add(ChunkTensor(
                    nd.reshape(mk, (f, c, n_chunks)), length,
                    cfg.chunk_size))
            per_source.append(mk)
            m = nd.relu(nd.add_bias(nd.matmul(self.mask_w1, mk),
                                    self.mask_b1))
            m = nd.relu(nd.add_bias(nd.matmul(self.mask_w2, m),
                                    self.mask_b2))
            masks.append(m)
        if details is not None:
            details["per_source"] = np.stack(
                [t.data for t in per_source], axis=1)  # (F, Ns, T')
            details["masks"] = masks
        return masks

    def separate(self, x, details=None):
        """Waveform -> per-source estimates (input length) plus masks."""
        x = nd.as_tensor(x)
        n = x.shape[0]
        latent = self.encode(x)
        if details is not None:
            details["latent"] = latent
        masks = self.mask_net(latent, details=details)
        estimates = []
        for mask in masks:
            est = nd.conv1d_transpose(nd.mul(mask, latent),
                                      self.decoder_filters, self.cfg.stride)
            if est.shape[0] < n:
                est = nd.pad_cols(est, 0, n - est.shape[0])
            elif est.shape[0] > n:
                est = nd.slice_cols(est, 0, n)
            estimates.append(est)
        if details is not None:
            details["estimates"] = estimates
        return SeparationOutput(estimates, masks)


# ---------------------------------------------------------------------------
# checkpoint container

_SPEC_KEYS = ("variant", "heads", "d_model", "window", "global_stride",
              "proj_len", "max_len", "n_buckets", "n_rounds", "bucket_chunk")
_CFG_KEYS = ("n_filters", "kernel_size", "stride", "chunk_size", "n_repeats",
             "intra_layers", "inter_layers", "n_heads", "ffw_dim",
             "n_sources", "sample_rate")


def _config_lines(cfg, seed):
    lines = []
    for key in _CFG_KEYS:
        lines.append("%s=%s" % (key, getattr(cfg, key)))
    for tag, spec in (("intra", cfg.intra_attention),
                      ("inter", cfg.inter_attention)):
        for key in _SPEC_KEYS:
            lines.append("%s.%s=%s" % (tag, key, getattr(spec, key)))
    lines.append("seed=%d" % seed)
    return "\n".join(lines) + "\n"


def _parse_int_or_none(text):
    return None if text == "None" else int(text)


def _config_from_lines(text):
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    specs = {}
    for tag in ("intra", "inter"):
        specs[tag] = AttentionSpec(
            variant=kv["%s.variant" % tag],
            heads=int(kv["%s.heads" % tag]),
            d_model=int(kv["%s.d_model" % tag]),
            window=int(kv["%s.window" % tag]),
            global_stride=_parse_int_or_none(kv["%s.global_stride" % tag]),
            proj_len=int(kv["%s.proj_len" % tag]),
            max_len=int(kv["%s.max_len" % tag]),
            n_buckets=int(kv["%s.n_buckets" % tag]),
            n_rounds=int(kv["%s.n_rounds" % tag]),
            bucket_chunk=int(kv["%s.bucket_chunk" % tag]),
        )
    cfg = SepformerConfig(
        n_filters=int(kv["n_filters"]),
        kernel_size=int(kv["kernel_size"]),
        stride=int(kv["stride"]),
        chunk_size=_parse_int_or_none(kv["chunk_size"]),
        n_repeats=int(kv["n_repeats"]),
        intra_layers=int(kv["intra_layers"]),
        inter_layers=int(kv["inter_layers"]),
        n_heads=int(kv["n_heads"]),
        ffw_dim=int(kv["ffw_dim"]),
        n_sources=int(kv["n_sources"]),
        sample_rate=int(kv["sample_rate"]),
        intra_attention=specs["intra"],
        inter_attention=specs["inter"],
    )
    return cfg, int(kv["seed"])


def save_checkpoint(path, model):
    """Write the flat binary container: magic, version, config text,
    then each named parameter as (name, rank, dims, float64 LE values)."""
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config = _config_lines(model.cfg, model.seed).encode("utf-8")
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", tensor.data.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Reconstruct a model bit-exactly from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic %r in %s"
                              % (bytes(view[:4]), path))
    offset = 4
    (version,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint version %d" % version)
    (config_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    cfg, seed = _config_from_lines(
        bytes(view[offset:offset + config_len]).decode("utf-8"))
    offset += config_len
    (n_params,) = struct.unpack_from("<I", view, offset)
    offset += 4

    model = Sepformer(cfg, seed=seed)
    params = model.parameters()
    seen = set()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<I", view, offset)
        offset += 4
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", view, offset)
        offset += 4
        dims = struct.unpack_from("<%dI" % rank, view, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(view, dtype="<f8", count=count,
                               offset=offset).reshape(dims)
        offset += 8 * count
        if name not in params:
            raise CheckpointError("unknown parameter %r in checkpoint" % name)
        if params[name].shape != tuple(dims):
            raise CheckpointError(
                "parameter %r has shape %r, checkpoint stores %r"
                % (name, params[name].shape, tuple(dims)))
        params[name].data[...] = values
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError("checkpoint missing parameters: %s"
                              % ", ".join(sorted(missing)))
    return model
