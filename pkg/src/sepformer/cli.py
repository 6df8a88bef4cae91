"""Command-line entry point tying the modules into runnable workflows.

Subcommands:

* ``separate``  -- run a trained checkpoint on a WAV file
* ``train-toy`` -- desk-scale training on a fixed synthetic mixture
* ``bench``     -- cost reports across attention variants / chunk settings
* ``gradcheck`` -- finite-difference audit of the gradient machinery

Configuration is a flat key=value file (UTF-8, ``#`` comments); precedence
is flag > file > built-in defaults. Exit codes: 0 success, 1 usage or
configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .attention import AttentionSpec, SequenceTooLongError
from .datagen import MixSpec, Signal, WavFormatError, dynamic_mix, \
    synth_sources, wav_read, wav_write
from .gradcheck import TOLERANCE, run_suite
from .model import CheckpointError, Sepformer, SepformerConfig, \
    load_checkpoint, save_checkpoint
from .objectives import TrainingDivergedError, si_snr_improvement, \
    train_toy, write_trace
from .profiler import bench_baseline, bench_forward, render_csv, \
    render_json, render_markdown

__all__ = ["main", "ConfigError", "parse_config_file", "build_run_config",
           "TOY_DEFAULTS", "PAPER_DEFAULTS"]


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError("%s: %s" % (self.prog, message))


# Built-in full-size defaults; the shipped toy.cfg mirrors TOY_DEFAULTS.
PAPER_DEFAULTS = {
    "filters": "256", "kernel": "16", "stride": "8", "chunk": "250",
    "repeats": "2", "intra_layers": "8", "inter_layers": "8", "heads": "8",
    "ffw": "1024", "sources": "2", "sample_rate": "8000",
    "attention": "full", "inter_attention": "same",
    "window": "101", "global_stride": "100", "proj_len": "128",
    "max_len": "8000", "n_buckets": "16", "n_rounds": "2",
    "bucket_chunk": "64",
    "seed": "0", "lr": "0.00015", "steps": "2000", "duration": "1.0",
}

TOY_DEFAULTS = dict(PAPER_DEFAULTS)
TOY_DEFAULTS.update({
    "filters": "32", "chunk": "50", "repeats": "1", "intra_layers": "1",
    "inter_layers": "1", "heads": "4", "ffw": "64",
    "lr": "0.001", "duration": "0.25",
})

_KNOWN_KEYS = frozenset(PAPER_DEFAULTS)
_VARIANT_KEYS = {
    "window": ("window", int), "global_stride": ("global_stride", "intnone"),
    "proj_len": ("proj_len", int), "max_len": ("max_len", int),
    "n_buckets": ("n_buckets", int), "n_rounds": ("n_rounds", int),
    "bucket_chunk": ("bucket_chunk", int),
}


def parse_config_file(path):
    """Flat key=value lines; blank lines and # comments allowed."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError("%s:%d: expected key=value, got %r"
                                  % (path, lineno, line))
            if key not in _KNOWN_KEYS:
                raise ConfigError("%s:%d: unknown config key %r"
                                  % (path, lineno, key))
            values[key] = value
    return values


def _int_or_none(text, key):
    if text.lower() == "none":
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError("key %r wants an integer or 'none', got %r"
                          % (key, text)) from None


def build_run_config(values):
    """Merged key=value strings -> (SepformerConfig, run options dict)."""
    def geti(key):
        try:
            return int(values[key])
        except ValueError:
            raise ConfigError("key %r wants an integer, got %r"
                              % (key, values[key])) from None

    def getf(key):
        try:
            return float(values[key])
        except ValueError:
            raise ConfigError("key %r wants a number, got %r"
                              % (key, values[key])) from None

    heads, filters = geti("heads"), geti("filters")
    spec_kwargs = {"heads": heads, "d_model": filters}
    for key, (attr, kind) in _VARIANT_KEYS.items():
        spec_kwargs[attr] = (_int_or_none(values[key], key)
                             if kind == "intnone" else int(values[key]))
    variant = values["attention"]
    try:
        intra = AttentionSpec(variant, **spec_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    inter_mode = values["inter_attention"]
    if inter_mode == "same":
        inter = replace(intra)
    elif inter_mode == "full":
        inter = AttentionSpec("full", heads=heads, d_model=filters)
    else:
        raise ConfigError("inter_attention must be 'same' or 'full', got %r"
                          % inter_mode)
    try:
        cfg = SepformerConfig(
            n_filters=filters, kernel_size=geti("kernel"),
            stride=geti("stride"),
            chunk_size=_int_or_none(values["chunk"], "chunk"),
            n_repeats=geti("repeats"), intra_layers=geti("intra_layers"),
            inter_layers=geti("inter_layers"), n_heads=heads,
            ffw_dim=geti("ffw"), n_sources=geti("sources"),
            sample_rate=geti("sample_rate"),
            intra_attention=intra, inter_attention=inter,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = {"seed": geti("seed"), "lr": getf("lr"), "steps": geti("steps"),
           "duration": getf("duration")}
    return cfg, run


def _merge(defaults, config_path, flag_values):
    values = dict(defaults)
    if config_path:
        values.update(parse_config_file(config_path))
    for key, val in flag_values.items():
        if val is not None:
            values[key] = str(val)
    return values


# ---------------------------------------------------------------------------
# subcommands

def _cmd_separate(args):
    if not os.path.exists(args.input):
        print("input file not found: %s" % args.input, file=sys.stderr)
        return 1
    model = load_checkpoint(args.model)
    if args.sources is not None and args.sources != model.cfg.n_sources:
        print("checkpoint separates %d sources, --sources asked for %d"
              % (model.cfg.n_sources, args.sources), file=sys.stderr)
        return 1
    signal = wav_read(args.input)
    if signal.sample_rate != model.cfg.sample_rate:
        print("sample rate mismatch: input %d Hz, model trained at %d Hz"
              % (signal.sample_rate, model.cfg.sample_rate), file=sys.stderr)
        return 1
    out = model.separate(signal.samples)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = []
    for k, est in enumerate(out.estimates, start=1):
        path = os.path.join(args.out_dir, "source%d.wav" % k)
        wav_write(path, Signal(est.data, signal.sample_rate))
        paths.append(path)
        print("wrote %s" % path)
    if args.ref:
        if len(args.ref) != model.cfg.n_sources:
            print("need %d --ref files, got %d"
                  % (model.cfg.n_sources, len(args.ref)), file=sys.stderr)
            return 1
        refs = [wav_read(p) for p in args.ref]
        n = min(min(len(r) for r in refs), len(signal))
        gain, pit = si_snr_improvement(
            signal.samples[:n], [e.data[:n] for e in out.estimates],
            [r.samples[:n] for r in refs])
        print("si_snr_db=%.4f si_snri_db=%.4f" % (pit.mean_db, gain))
    return 0


def _toy_item(cfg, run):
    pool = synth_sources("multi_sine", max(8, 2 * cfg.n_sources),
                         run["duration"], run["seed"],
                         sample_rate=cfg.sample_rate)
    mix_spec = MixSpec(n_sources=cfg.n_sources, seed=run["seed"])
    mixture, targets = dynamic_mix(pool, mix_spec)
    return mixture.samples, [t.samples for t in targets]


def _cmd_train_toy(args):
    values = _merge(TOY_DEFAULTS, args.config, {
        "steps": args.steps, "seed": args.seed, "lr": args.lr,
        "duration": args.duration,
    })
    cfg, run = build_run_config(values)
    model = Sepformer(cfg, seed=run["seed"])
    mixture, targets = _toy_item(cfg, run)
    rows = train_toy(model, lambda step: (mixture, targets), run["steps"],
                     lr=run["lr"])
    save_checkpoint(args.out, model)
    print("wrote %s" % args.out)
    if args.trace:
        write_trace(rows, args.trace)
        print("wrote %s" % args.trace)
    if rows:
        print("final_loss=%.4f si_snri_db=%.4f"
              % (rows[-1].loss, rows[-1].si_snri))
    return 0


_CHUNK_CHOICES = {"c250": 250, "c1000": 1000, "none": None}


def _cmd_bench(args):
    values = _merge(PAPER_DEFAULTS, args.config, {})
    reports = []
    for variant in args.attention:
        for chunking in args.chunking:
            bench_values = dict(values)
            bench_values["attention"] = variant
            bench_values["chunk"] = str(_CHUNK_CHOICES[chunking])
            bench_values["inter_attention"] = args.inter_attention
            cfg, run = build_run_config(bench_values)
            reports.extend(bench_forward(cfg, args.seconds,
                                         repeats=args.repeats,
                                         seed=run["seed"]))
    if args.with_baseline:
        reports.extend(bench_baseline(args.seconds, repeats=args.repeats))
    renderer = {"csv": render_csv, "md": render_markdown,
                "json": render_json}[args.emit]
    text = renderer(reports)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print("wrote %s" % args.out)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args):
    results = run_suite(args.module)
    worst = 0.0
    for name, err in results:
        print("%-40s max_rel_err=%.3e" % (name, err))
        worst = max(worst, err)
    if worst >= TOLERANCE:
        print("FAILED: worst relative error %.3e >= %.0e"
              % (worst, TOLERANCE), file=sys.stderr)
        return 2
    print("all gradients within %.0e" % TOLERANCE)
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="sepformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("separate", help="separate a WAV with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sources", type=int)
    p.add_argument("--ref", action="append",
                   help="reference WAV per source; prints SI-SNRi")
    p.set_defaults(handler=_cmd_separate)

    p = sub.add_parser("train-toy", help="train on one synthetic mixture")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(handler=_cmd_train_toy)

    p = sub.add_parser("bench", help="profile MACs, speed and memory")
    p.add_argument("--attention", nargs="+", default=["full"],
                   choices=["full", "longformer", "linformer", "reformer"])
    p.add_argument("--chunking", nargs="+", default=["c250"],
                   choices=sorted(_CHUNK_CHOICES))
    p.add_argument("--seconds", nargs="+", type=float,
                   default=[1, 2, 3, 4, 5])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--inter-attention", default="same",
                   choices=["same", "full"])
    p.add_argument("--config")
    p.add_argument("--emit", default="csv", choices=["csv", "md", "json"])
    p.add_argument("--out")
    p.add_argument("--with-baseline", action="store_true")
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", default="all",
                   choices=["all", "ndkernel", "attention", "model"])
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, WavFormatError,
            SequenceTooLongError, FileNotFoundError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except (TrainingDivergedError, FloatingPointError) as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
