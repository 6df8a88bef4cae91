"""Training objectives and evaluation metrics.

The training loss is negative scale-invariant SNR under an exhaustive
utterance-level permutation search. SI-SNR uses a soft ceiling: a tau
fraction of the projected-target energy is added to the residual, so a
perfect estimate tops out at 10*log10(1/tau) = 30 dB while gradients stay
alive near the ceiling. A simplified scalar-fit SDR ("SDR-simple", not
BSS-Eval) is provided for reporting, along with improvement-over-mixture
metrics, Adam with global-norm gradient clipping, and a small
deterministic training loop with plateau-halved learning rate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import ndkernel as nd
from .ndkernel import Tape, Tensor

__all__ = [
    "SISNR_TAU", "SISNR_CEILING_DB", "SDR_CAP_DB",
    "UndefinedTargetError", "TrainingDivergedError",
    "si_snr", "si_snr_db", "sdr_simple", "pit_loss", "PitResult",
    "improvement", "si_snr_improvement",
    "OptimState", "init_optim_state", "clip_gradients", "adam_step",
    "PlateauScheduler", "TraceRow", "write_trace", "train_toy",
]

SISNR_TAU = 1e-3
SISNR_CEILING_DB = 10.0 * math.log10(1.0 / SISNR_TAU)
SDR_CAP_DB = 60.0
_LOG10_SCALE = 10.0 / math.log(10.0)


class UndefinedTargetError(ValueError):
    """Metrics are undefined for a zero-energy target."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending step index."""

    def __init__(self, step, value):
        super().__init__("non-finite loss %r at step %d" % (value, step))
        self.step = step


def _zero_mean(x):
    m = nd.scale(nd.sum_all(x), -1.0 / x.shape[0])
    return nd.add_scalar(x, m)


def si_snr(estimate, target):
    """Scale-invariant SNR in dB as a differentiable 0-d tensor.

    Both signals are zero-meaned, the estimate is projected onto the
    target, and the ratio of projected energy to residual energy (plus the
    tau soft-clip term) is returned on a log scale. Invariant to rescaling
    either argument; maximum 30 dB.
    """
    estimate, target = nd.as_tensor(estimate), nd.as_tensor(target)
    if estimate.shape != target.shape or estimate.data.ndim != 1:
        raise ValueError("signals must be 1-d and equal length, got %r / %r"
                         % (estimate.shape, target.shape))
    if not np.any(target.data - target.data.mean()):
        raise UndefinedTargetError("target has zero energy after mean removal")
    e0 = _zero_mean(estimate)
    s0 = _zero_mean(target)
    cross = nd.dot(e0, s0)
    energy = nd.dot(s0, s0)
    proj = nd.scale_by(s0, nd.divide(cross, energy))
    resid = nd.sub(e0, proj)
    proj_energy = nd.dot(proj, proj)
    resid_energy = nd.add(nd.dot(resid, resid),
                          nd.scale(proj_energy, SISNR_TAU))
    return nd.scale(nd.sub(nd.log(proj_energy), nd.log(resid_energy)),
                    _LOG10_SCALE)


def si_snr_db(estimate, target):
    """Float convenience wrapper around :func:`si_snr`."""
    return si_snr(estimate, target).item()


def sdr_simple(estimate, target):
    """Scaled-SNR distortion ratio in dB (labelled SDR-simple in reports).

    The target is fitted to the estimate with a least-squares scalar; the
    value is capped at 60 dB when the residual vanishes. Reporting only,
    not differentiable.
    """
    e = np.asarray(estimate.data if isinstance(estimate, Tensor) else estimate,
                   dtype=np.float64)
    s = np.asarray(target.data if isinstance(target, Tensor) else target,
                   dtype=np.float64)
    if e.shape != s.shape or e.ndim != 1:
        raise ValueError("signals must be 1-d and equal length")
    energy = float(s @ s)
    if energy == 0.0:
        raise UndefinedTargetError("target has zero energy")
    beta = float(e @ s) / energy
    fitted = beta * s
    resid = float((e - fitted) @ (e - fitted))
    if resid == 0.0:
        return SDR_CAP_DB
    value = 10.0 * math.log10((beta * beta * energy) / resid)
    return min(value, SDR_CAP_DB)


@dataclass
class PitResult:
    """Outcome of the exhaustive permutation search."""

    permutation: tuple          # estimate index -> target index
    matrix: np.ndarray          # pairwise SI-SNR in dB, (Ns, Ns)
    mean_db: float              # mean SI-SNR under the best permutation


def pit_loss(estimates, targets):
    """Permutation-invariant loss: minus the best mean SI-SNR.

    All source-to-target assignments are enumerated (sources <= 3, so at
    most 6); ties go to the lexicographically smallest permutation. The
    returned loss tensor differentiates through the winning assignment.
    """
    if len(estimates) != len(targets):
        raise ValueError("got %d estimates but %d targets"
                         % (len(estimates), len(targets)))
    ns = len(estimates)
    if not 1 <= ns <= 3:
        raise ValueError("permutation search supports 1..3 sources, got %d"
                         % ns)
    pairs = [[si_snr(e, t) for t in targets] for e in estimates]
    matrix = np.array([[p.item() for p in row] for row in pairs])
    best_perm = None
    best_mean = -np.inf
    for perm in permutations(range(ns)):
        mean = matrix[range(ns), perm].mean()
        if mean > best_mean:
            best_mean, best_perm = mean, perm
    if best_perm is None:
        # non-finite metric matrix; keep the identity assignment so the
        # caller sees the non-finite loss instead of a crash here
        best_perm = tuple(range(ns))
        best_mean = float(matrix[range(ns), best_perm].mean())
    picked = pairs[0][best_perm[0]]
    for i in range(1, ns):
        picked = nd.add(picked, pairs[i][best_perm[i]])
    loss = nd.scale(picked, -1.0 / ns)
    return loss, PitResult(best_perm, matrix, float(best_mean))


def improvement(metric, mixture, estimates, targets, permutation=None):
    """Mean metric gain over using the mixture as every source estimate.

    ``metric`` maps (estimate, target) to dB. The source assignment is the
    SI-SNR PIT choice unless given explicitly.
    """
    if permutation is None:
        _, pit = pit_loss(estimates, targets)
        permutation = pit.permutation
    gains = []
    for i, j in enumerate(permutation):
        gains.append(metric(estimates[i], targets[j])
                     - metric(mixture, targets[j]))
    return float(np.mean(gains))


def si_snr_improvement(mixture, estimates, targets):
    """SI-SNRi plus the permutation search result it used."""
    loss, pit = pit_loss(estimates, targets)
    baseline = np.mean([si_snr_db(mixture, targets[j])
                        for j in pit.permutation])
    return pit.mean_db - float(baseline), pit


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    """Adam accumulators keyed like the parameter dict."""

    lr: float
    clip_norm: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim_state(params, lr=1.5e-4, clip_norm=5.0):
    state = OptimState(lr=lr, clip_norm=clip_norm)
    for name, tensor in params.items():
        state.m[name] = np.zeros_like(tensor.data)
        state.v[name] = np.zeros_like(tensor.data)
    return state


def clip_gradients(grads, max_norm):
    """Scale the whole gradient set so its global l2 norm is <= max_norm.

    Returns the pre-clip norm; ``grads`` is modified in place.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place; expects pre-clipped grads."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, tensor in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        tensor.data[...] -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` evaluations without
    improvement (strictly higher metric resets the counter)."""

    def __init__(self, state, patience=3):
        self.state = state
        self.patience = patience
        self.best = -np.inf
        self.stall = 0

    def update(self, metric):
        if metric > self.best:
            self.best = metric
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.state.lr *= 0.5
                self.stall = 0
        return self.state.lr


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    si_snri: float
    wall_ms: float


TRACE_HEADER = "step,loss,lr,si_snri,wall_ms"


def write_trace(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for r in rows:
            fh.write("%d,%.17g,%.17g,%.17g,%.6g\n"
                     % (r.step, r.loss, r.lr, r.si_snri, r.wall_ms))


def train_toy(model, data_fn, steps, lr=1.5e-4, clip_norm=5.0,
              plateau_patience=3, eval_every=100, trace_path=None):
    """Desk-scale training: batch size 1, Adam, clipped gradients, PIT loss.

    ``data_fn(step)`` must deterministically return (mixture, targets) as
    1-d arrays; a constant item makes this an overfit run. Returns the
    per-step trace. Raises :class:`TrainingDivergedError` on a non-finite
    loss, naming the step.
    """
    params = model.parameters()
    state = init_optim_state(params, lr=lr, clip_norm=clip_norm)
    scheduler = PlateauScheduler(state, patience=plateau_patience)
    rows = []
    for step in range(steps):
        mixture, targets = data_fn(step)
        t0 = time.perf_counter()
        with Tape() as tape:
            out = model.separate(mixture)
            loss, pit = pit_loss(out.estimates, targets)
            grads_list = tape.gradient(loss, params.values())
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDivergedError(step, loss_value)
        grads = dict(zip(params.keys(), grads_list))
        clip_gradients(grads, state.clip_norm)
        adam_step(params, grads, state)
        baseline = np.mean([si_snr_db(mixture, targets[j])
                            for j in pit.permutation])
        si_snri = pit.mean_db - float(baseline)
        wall_ms = (time.perf_counter() - t0) * 1e3
        rows.append(TraceRow(step, loss_value, state.lr, si_snri, wall_ms))
        if eval_every and (step + 1) % eval_every == 0:
            scheduler.update(si_snri)
    if trace_path is not None:
        write_trace(rows, trace_path)
    return rows
