"""Descent engines for integer code optimization, plus full-matrix orchestration.

All engines minimize the scaled loss

    L(q) = (q - z)' H (q - z),        z = (w - b) / a,

whose true counterpart is a^2 * L(q); the scale factor never changes which
candidate wins an argmin, so decisions are made on L directly. Each engine
maintains the gradient g = 2 H (q - z) incrementally: changing coordinate i
from q_i to r shifts the loss by exactly

    delta(i, r) = (r - q_i)^2 * H_ii + (r - q_i) * g_i

and shifts g by 2 (r - q_i) * H[:, i]. The block variant evaluates the same
expansion jointly over k coordinates,

    delta(B, r) = (r - q_B)' H_BB (r - q_B) + (r - q_B)' g_B,

for every value combination r in {0..2^c-1}^k of every block B of a fresh
random partition drawn each step.

Engines:

* greedy: per step, the single (coordinate, value) change with the largest
  loss reduction, over all d_in * 2^c candidates.
* block: per step, the best joint update of one random k-block over all
  2^(k*c) value combinations.
* cyclic: coordinates visited in fixed order 0..d_in-1, one best value per
  visit; the classic one-sweep baseline.

Determinism: argmin ties break to the lexicographically smallest
(coordinate, value) or (block, values); block partitions come from a
counter-based Philox stream; per-channel seeds are derived from the global
seed and the channel index, so full-matrix results do not depend on thread
count or scheduling.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .calibration import Hessian, ShapeMismatchError
from .quantcore import (ChannelProblem, DegenerateChannelError, QuantParams, QuantizedLayer,
                        minmax_quantize, objective, owc_quantize, zero_baseline)
from .tensorio import BenchRecord

#: Block enumeration guard: 2^(k*c) candidate combinations per block.
MAX_BLOCK_BITS = 20


class EnumerationGuardError(ValueError):
    """A requested exhaustive scan exceeds the configured size guard."""


@dataclass(frozen=True)
class DescentConfig:
    """Engine configuration.

    ``steps`` is the per-epoch step budget; None means d_in, so the default
    run is one epoch of d_in steps. The block engine enumerates
    2^(block_size*bits) combinations per block and is guarded by
    ``block_size * bits <= MAX_BLOCK_BITS``.
    """

    steps: Optional[int] = None
    epochs: int = 1
    block_size: int = 1
    seed: int = 0
    early_stop: bool = True

    def __post_init__(self):
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def total_steps(self, d_in: int) -> int:
        per_epoch = d_in if self.steps is None else self.steps
        return per_epoch * self.epochs


@dataclass(frozen=True)
class TraceStep:
    """One engine step. ``coords``/``values`` are empty for no-op steps."""

    index: int
    coords: tuple[int, ...]
    values: tuple[int, ...]
    predicted_delta: float
    loss_after: float
    accepted: bool


@dataclass
class DescentTrace:
    """Step-by-step record of one engine run on one channel.

    ``loss_after`` entries are recomputed from scratch, not accumulated, so
    the trace doubles as evidence that the predicted deltas are exact.
    ``final_gradient`` is the incrementally maintained g at termination.
    """

    initial_loss: float
    steps: list[TraceStep] = field(default_factory=list)
    final_loss: float = 0.0
    loss_scale: float = 1.0
    final_gradient: Optional[np.ndarray] = None

    @property
    def true_loss(self) -> float:
        return self.loss_scale * self.final_loss

    @property
    def accepted_steps(self) -> int:
        return sum(1 for s in self.steps if s.accepted)


def dump_trace(trace: DescentTrace, path: str | Path) -> None:
    """JSON-lines debug dump: one header object, then one object per step."""
    with open(path, "w") as f:
        header = {"initial_loss": trace.initial_loss, "final_loss": trace.final_loss,
                  "true_loss": trace.true_loss, "loss_scale": trace.loss_scale,
                  "steps": len(trace.steps)}
        f.write(json.dumps(header) + "\n")
        for s in trace.steps:
            f.write(json.dumps({"index": s.index, "coords": list(s.coords),
                                "values": list(s.values), "predicted_delta": s.predicted_delta,
                                "loss_after": s.loss_after, "accepted": s.accepted}) + "\n")


@dataclass
class GradientState:
    """Maintained codes and gradient of the scaled loss.

    ``codes`` is a float64 working copy of q (entries are exact small
    integers); ``gradient`` is kept equal to 2 H (q - z) by rank-1 (or
    rank-k) updates as codes change.
    """

    codes: np.ndarray
    gradient: np.ndarray

    @classmethod
    def init(cls, hmat: np.ndarray, q0: np.ndarray, z: np.ndarray) -> "GradientState":
        codes = np.asarray(q0, dtype=np.float64).copy()
        return cls(codes=codes, gradient=2.0 * (hmat @ (codes - z)))

    def recompute_gradient(self, hmat: np.ndarray, z: np.ndarray) -> np.ndarray:
        return 2.0 * (hmat @ (self.codes - z))

    def loss(self, hmat: np.ndarray, z: np.ndarray) -> float:
        err = self.codes - z
        return float(err @ (hmat @ err))


def _check_engine_inputs(prob: ChannelProblem, q0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if prob.params.scale == 0.0 or prob.target is None:
        raise DegenerateChannelError("constant weight vector: run the degenerate path, not descent")
    hmat = prob.hessian.matrix
    q0 = np.asarray(q0)
    if q0.shape[0] != hmat.shape[0]:
        raise ShapeMismatchError("initial codes do not match the Hessian dimension")
    if q0.size and int(q0.max(initial=0)) >= prob.params.levels:
        raise ValueError("initial code out of range for the configured bit width")
    return hmat, prob.target


def cd_quantize(prob: ChannelProblem, q0: np.ndarray,
                cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Greedy coordinate descent over (coordinate, value) candidates.

    Each step scans all d_in * 2^c single-coordinate changes and applies the
    one with the most negative predicted delta; ties break to the smallest
    (coordinate, value). When no candidate improves the loss the greedy
    state is a fixed point, so with ``early_stop`` the run terminates after
    recording one final no-op step.
    """
    hmat, z = _check_engine_inputs(prob, q0)
    state = GradientState.init(hmat, q0, z)
    hdiag = np.diag(hmat).copy()
    r_grid = np.arange(prob.params.levels, dtype=np.float64)

    trace = DescentTrace(initial_loss=state.loss(hmat, z),
                         loss_scale=prob.params.scale ** 2)
    loss = trace.initial_loss
    for step in range(cfg.total_steps(hmat.shape[0])):
        diff = r_grid[None, :] - state.codes[:, None]
        delta = diff * diff * hdiag[:, None] + diff * state.gradient[:, None]
        flat = int(np.argmin(delta))
        i, r = divmod(flat, r_grid.shape[0])
        best = float(delta.flat[flat])
        if best < 0.0:
            change = float(r) - state.codes[i]
            state.gradient += (2.0 * change) * hmat[:, i]
            state.codes[i] = float(r)
            loss = state.loss(hmat, z)
            trace.steps.append(TraceStep(step, (i,), (int(r),), best, loss, True))
        else:
            trace.steps.append(TraceStep(step, (), (), 0.0, loss, False))
            if cfg.early_stop:
                break
    trace.final_loss = loss
    trace.final_gradient = state.gradient.copy()
    return state.codes.astype(np.uint8), trace


def _value_combinations(levels: int, k: int) -> np.ndarray:
    """All value tuples of a k-block in lexicographic order, shape (levels^k, k)."""
    grids = np.meshgrid(*([np.arange(levels, dtype=np.float64)] * k), indexing="ij")
    return np.stack(grids, axis=-1).reshape(-1, k)


def bcd_quantize(prob: ChannelProblem, q0: np.ndarray,
                 cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Block coordinate descent over fresh random partitions.

    Every step shuffles the coordinates into d_in/k blocks of size k
    (canonicalized: coordinates sorted inside each block, blocks ordered by
    their first coordinate) and scans all blocks x 2^(k*c) joint updates.
    A non-improving step is recorded as a no-op and iteration continues,
    since the next partition may still improve; with k = 1 the partition is
    always the same, so the run reduces to greedy descent step for step and
    honors ``early_stop``.
    """
    hmat, z = _check_engine_inputs(prob, q0)
    d = hmat.shape[0]
    k = cfg.block_size
    bits = prob.params.bits
    if d % k:
        raise EnumerationGuardError(f"block size {k} does not divide d_in={d}")
    if k * bits > MAX_BLOCK_BITS:
        raise EnumerationGuardError(
            f"block enumeration needs 2^{k * bits} combinations; guard is 2^{MAX_BLOCK_BITS}")

    state = GradientState.init(hmat, q0, z)
    levels = prob.params.levels
    r_grid = np.arange(levels, dtype=np.float64)
    hdiag = np.diag(hmat).copy()
    if k > 1:
        combos = _value_combinations(levels, k)
        # Scores come from the expanded quadratic r'Hr - 2r'Hq + q'Hq + (r-q)'g,
        # a handful of small matrix products; the r'Hr table needs the combo
        # outer products, which only pay off while they fit comfortably.
        expanded = combos.shape[0] * k * k <= (1 << 22)
        combos_outer = (combos[:, :, None] * combos[:, None, :]).reshape(-1, k * k) \
            if expanded else None
        per_block = combos.shape[0] * (k * k if expanded else k)
        block_chunk = max(1, (1 << 22) // per_block)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))

    trace = DescentTrace(initial_loss=state.loss(hmat, z),
                         loss_scale=prob.params.scale ** 2)
    loss = trace.initial_loss
    n_blocks = d // k
    for step in range(cfg.total_steps(d)):
        if k == 1:
            # Singleton partition: identical candidate set regardless of the
            # shuffle, so skip the draw and use the greedy scan directly.
            diff = r_grid[None, :] - state.codes[:, None]
            delta = diff * diff * hdiag[:, None] + diff * state.gradient[:, None]
            flat = int(np.argmin(delta))
            bi, vi = divmod(flat, levels)
            best = float(delta.flat[flat])
            best_coords = np.array([bi])
            best_values = np.array([float(vi)])
        else:
            perm = rng.permutation(d)
            blocks = np.sort(perm.reshape(n_blocks, k), axis=1)
            blocks = blocks[np.argsort(blocks[:, 0])]
            # Blocks are scanned in canonical order and chunked to bound the
            # score matrix; tracking the running minimum with a strict < keeps
            # the global argmin lexicographic in (block, values).
            best = np.inf
            best_block = best_combo = -1
            for lo in range(0, n_blocks, block_chunk):
                chunk = blocks[lo:lo + block_chunk]
                hblk = hmat[chunk[:, :, None], chunk[:, None, :]]
                qblk = state.codes[chunk]
                gblk = state.gradient[chunk]
                if expanded:
                    hq = np.matmul(hblk, qblk[:, :, None])                       # (b, k, 1)
                    r_h_r = combos_outer @ hblk.reshape(chunk.shape[0], -1).T    # (v, b)
                    r_h_q = np.matmul(combos[None, :, :], hq)[:, :, 0]           # (b, v)
                    q_h_q = np.matmul(qblk[:, None, :], hq)[:, 0, 0]             # (b,)
                    r_g = combos @ gblk.T                                        # (v, b)
                    q_g = (qblk * gblk).sum(axis=1)                              # (b,)
                    delta = r_h_r.T - 2.0 * r_h_q + (q_h_q - q_g)[:, None] + r_g.T
                else:
                    diff = combos[None, :, :] - qblk[:, None, :]
                    delta = ((np.matmul(diff, hblk) * diff).sum(axis=2)
                             + (diff * gblk[:, None, :]).sum(axis=2))
                flat = int(np.argmin(delta))
                if float(delta.flat[flat]) < best:
                    bi, vi = divmod(flat, combos.shape[0])
                    best = float(delta.flat[flat])
                    best_block, best_combo = lo + bi, vi
            best_coords = blocks[best_block]
            best_values = combos[best_combo]
            # Re-derive the winner's delta from the factored form: it is exact
            # (a keep-current candidate scores exactly zero), so round-off in
            # the expanded scores can never turn a no-op into a step.
            dvec = best_values - state.codes[best_coords]
            hwin = hmat[best_coords[:, None], best_coords[None, :]]
            best = float(dvec @ hwin @ dvec + dvec @ state.gradient[best_coords])

        if best < 0.0:
            change = best_values - state.codes[best_coords]
            state.gradient += 2.0 * (hmat[:, best_coords] @ change)
            state.codes[best_coords] = best_values
            loss = state.loss(hmat, z)
            trace.steps.append(TraceStep(step, tuple(int(c) for c in best_coords),
                                         tuple(int(v) for v in best_values), best, loss, True))
        else:
            trace.steps.append(TraceStep(step, (), (), 0.0, loss, False))
            if k == 1 and cfg.early_stop:
                break
    trace.final_loss = loss
    trace.final_gradient = state.gradient.copy()
    return state.codes.astype(np.uint8), trace


def cyclic_cd_quantize(prob: ChannelProblem, q0: np.ndarray,
                       cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Cyclic coordinate descent baseline: one best-value update per visit.

    Coordinates are visited in fixed order 0..d_in-1, ``epochs`` times. A
    visit keeps the current code when no value strictly improves the loss
    (a zero delta counts as keep-current). Gradient maintenance is identical
    to the greedy engine.
    """
    hmat, z = _check_engine_inputs(prob, q0)
    d = hmat.shape[0]
    state = GradientState.init(hmat, q0, z)
    hdiag = np.diag(hmat).copy()
    r_grid = np.arange(prob.params.levels, dtype=np.float64)

    trace = DescentTrace(initial_loss=state.loss(hmat, z),
                         loss_scale=prob.params.scale ** 2)
    loss = trace.initial_loss
    step = 0
    for _ in range(cfg.epochs):
        for i in range(d):
            diff = r_grid - state.codes[i]
            delta = diff * diff * hdiag[i] + diff * state.gradient[i]
            r = int(np.argmin(delta))
            best = float(delta[r])
            if best < 0.0:
                change = float(r) - state.codes[i]
                state.gradient += (2.0 * change) * hmat[:, i]
                state.codes[i] = float(r)
                loss = state.loss(hmat, z)
                trace.steps.append(TraceStep(step, (i,), (r,), best, loss, True))
            else:
                trace.steps.append(TraceStep(step, (), (), 0.0, loss, False))
            step += 1
    trace.final_loss = loss
    trace.final_gradient = state.gradient.copy()
    return state.codes.astype(np.uint8), trace


METHODS = ("rtn", "owc", "cyclic", "cd", "bcd")


def channel_seed(seed: int, channel: int) -> int:
    """Stable per-channel seed so results are independent of scheduling."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(channel,))
    return int(ss.generate_state(1, np.uint64)[0])


def _quantize_channel(w: np.ndarray, hessian: Hessian, method: str, bits: int,
                      cfg: DescentConfig, grid_size: int) -> tuple[QuantParams, np.ndarray, int]:
    """Per-channel pipeline: affine init, then the selected engine.

    The block engine is always warm-started from the greedy result. Returns
    (params, codes, steps_taken).
    """
    if method == "rtn":
        params, codes = minmax_quantize(w, bits)
        return params, codes, 0
    params, codes = owc_quantize(w, hessian, bits, grid_size)
    if method == "owc" or params.scale == 0.0:
        return params, codes, 0

    prob = ChannelProblem.build(w, hessian, params)
    if method == "cd":
        codes, trace = cd_quantize(prob, codes, cfg)
        return params, codes, len(trace.steps)
    if method == "cyclic":
        codes, trace = cyclic_cd_quantize(prob, codes, cfg)
        return params, codes, len(trace.steps)
    if method == "bcd":
        codes, cd_trace = cd_quantize(prob, codes, cfg)
        codes, bcd_trace = bcd_quantize(prob, codes, cfg)
        return params, codes, len(cd_trace.steps) + len(bcd_trace.steps)
    raise ValueError(f"unknown method {method!r}")


def quantize_matrix(weights: np.ndarray, hessian: Hessian, method: str, *,
                    bits: int, group_size: int = 0, cfg: Optional[DescentConfig] = None,
                    grid_size: int = 50, owc_cd_refine: bool = False, threads: int = 1,
                    collect_timing: bool = True,
                    extra_meta: Optional[dict] = None) -> tuple[QuantizedLayer, list[BenchRecord]]:
    """Quantize a (d_in, d_out) weight matrix column by column.

    Channels are independent problems sharing the read-only Hessian; they
    are dispatched to a thread pool and reassembled by index, so the layer
    is identical for any worker count. Group quantization (group_size > 0)
    routes through the sub-channel pipeline; ``owc_cd_refine`` additionally
    runs the clip-strength coordinate descent before the code engines.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise ShapeMismatchError("weights must be a (d_in, d_out) matrix")
    d_in, d_out = weights.shape
    if d_in != hessian.dim:
        raise ShapeMismatchError(
            f"weights have d_in={d_in} but the Hessian is {hessian.dim}x{hessian.dim}")
    if group_size:
        if group_size < 0 or d_in % group_size:
            raise ValueError("group_size must divide d_in")
    cfg = cfg or DescentConfig()
    if not np.isfinite(weights).all():
        raise ValueError("weights hold non-finite values")

    w64 = weights.astype(np.float64)
    n_groups = 1 if group_size == 0 else d_in // group_size

    def run_channel(j: int):
        from . import groupquant  # deferred: groupquant imports this module's engines

        start = time.perf_counter()
        ccfg = replace(cfg, seed=channel_seed(cfg.seed, j))
        w = w64[:, j]
        if group_size == 0:
            params, codes, steps = _quantize_channel(w, hessian, method, bits, ccfg, grid_size)
            scales = np.array([params.scale], dtype=np.float32)
            biases = np.array([params.bias], dtype=np.float32)
            gammas = np.array([params.gamma], dtype=np.float32)
            err = w - (params.scale * codes.astype(np.float64) + params.bias)
        else:
            scheme, codes, steps = groupquant.quantize_channel_grouped(
                w, hessian, method, bits, group_size, ccfg, grid_size, owc_cd_refine)
            scales = np.array([p.scale for p in scheme.params], dtype=np.float32)
            biases = np.array([p.bias for p in scheme.params], dtype=np.float32)
            gammas = np.array([p.gamma for p in scheme.params], dtype=np.float32)
            avec, bvec = groupquant.expand_scheme(scheme)
            err = w - (avec * codes.astype(np.float64) + bvec)

        obj = float(err @ (hessian.matrix @ err))
        base = zero_baseline(w, hessian)
        rel = obj / base if base > 0.0 else 0.0
        wall = (time.perf_counter() - start) * 1e3 if collect_timing else 0.0
        record = BenchRecord(method=method, bits=bits, group_size=group_size,
                             block_size=cfg.block_size if method == "bcd" else 0,
                             epochs=cfg.epochs, column=j, objective=obj,
                             relative_objective=rel, steps=steps, wall_millis=wall)
        return scales, biases, gammas, codes, record

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_channel, range(d_out)))
    else:
        results = [run_channel(j) for j in range(d_out)]

    layer = QuantizedLayer(
        d_in=d_in, d_out=d_out, bits=bits, group_size=group_size,
        scales=np.stack([r[0] for r in results]).reshape(d_out, n_groups),
        biases=np.stack([r[1] for r in results]).reshape(d_out, n_groups),
        gammas=np.stack([r[2] for r in results]).reshape(d_out, n_groups),
        codes=np.stack([r[3] for r in results]).reshape(d_out, d_in).astype(np.uint8),
        meta={"method": method, "grid_size": grid_size, "seed": cfg.seed,
              "epochs": cfg.epochs, "block_size": cfg.block_size,
              "owc_cd_refine": bool(owc_cd_refine), **(extra_meta or {})},
    )
    layer.validate()
    return layer, [r[4] for r in results]
