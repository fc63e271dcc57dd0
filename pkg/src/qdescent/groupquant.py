"""Sub-channel (grouped) quantization via a change of variables.

Splitting a channel's d_in inputs into groups of size g, each with its own
affine parameters (a_i, b_i), the reconstruction loss can be rewritten in
scaled coordinates. With per-coordinate vectors a, b (each group's values
repeated over its coordinates) and D = diag(a):

    || X (w - a*q - b) ||^2  =  || (X D) (D^-1 w - q - D^-1 b) ||^2
                             =  (q - z~)' H~ (q - z~),

    H~ = D H D    (row/column scaling, X is never touched again),
    z~ = (w - b) / a   elementwise.

So grouped code optimization is exactly the per-channel engines run on
(H~, z~) with unit scale; the trace's scaled loss already equals the true
loss. Degenerate groups (constant weights, zero scale) contribute zero
rows/columns to H~, which makes every candidate change at their coordinates
a zero-delta move that the engines never accept, so their codes stay 0.

Clip strengths themselves are optimized by a greedy coordinate descent over
groups: residuals D(i, beta) = w_i - a_i(beta) q_i(beta) - b_i are
precomputed for every group i and grid value beta, and with the maintained
vector v = -2 H e (e the current full residual) the exact loss change of
swapping group i's strength to beta is

    d' H_ii d - v_i' d,      d = D(i, beta) - D(i, current).

Applying a swap updates v by the rank-g correction -2 H[:, group] d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import Hessian, ShapeMismatchError
from .quantcore import ChannelProblem, QuantParams, _fit_affine, _owc_search
from .descent import DescentConfig, DescentTrace, bcd_quantize, cd_quantize, cyclic_cd_quantize


@dataclass(frozen=True)
class GroupScheme:
    """Per-group affine parameters of one channel."""

    group_size: int
    params: tuple[QuantParams, ...]

    @property
    def n_groups(self) -> int:
        return len(self.params)

    @property
    def d_in(self) -> int:
        return self.group_size * len(self.params)

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(p.gamma for p in self.params)

    @property
    def bits(self) -> int:
        return self.params[0].bits


@dataclass(frozen=True)
class TildeProblem:
    """Grouped problem mapped onto per-channel form: H~ = D H D, z~ = (w-b)/a."""

    h_tilde: np.ndarray
    z_tilde: np.ndarray
    scale_vec: np.ndarray
    bias_vec: np.ndarray
    scheme: GroupScheme

    def as_channel_problem(self, damping: float = 0.0) -> ChannelProblem:
        params = QuantParams(scale=1.0, bias=0.0, bits=self.scheme.bits, gamma=1.0)
        return ChannelProblem(weights=self.z_tilde, hessian=Hessian(self.h_tilde, damping),
                              params=params, target=self.z_tilde)


def expand_scheme(scheme: GroupScheme) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate (scale, bias) float64 vectors."""
    a = np.repeat(np.array([p.scale for p in scheme.params], dtype=np.float64), scheme.group_size)
    b = np.repeat(np.array([p.bias for p in scheme.params], dtype=np.float64), scheme.group_size)
    return a, b


def _check_grouping(d_in: int, group_size: int) -> int:
    if group_size < 1 or d_in % group_size:
        raise ValueError(f"group size {group_size} does not divide d_in={d_in}")
    return d_in // group_size


def tilde_transform(w: np.ndarray, hessian: Hessian, scheme: GroupScheme) -> TildeProblem:
    """Build (H~, z~) by row/column scaling of H; no activation matrix needed.

    A zero group scale is only legal for a constant group (the degenerate
    path); anything else means the scheme is inconsistent with the weights.
    """
    w = np.asarray(w, dtype=np.float64)
    g = scheme.group_size
    n_groups = _check_grouping(w.shape[0], g)
    if n_groups != scheme.n_groups:
        raise ShapeMismatchError("scheme group count disagrees with the weight length")
    if hessian.dim != w.shape[0]:
        raise ShapeMismatchError("Hessian dimension disagrees with the weight length")

    avec, bvec = expand_scheme(scheme)
    for i, p in enumerate(scheme.params):
        grp = w[i * g:(i + 1) * g]
        if p.scale == 0.0 and float(grp.max() - grp.min()) != 0.0:
            raise ValueError(f"zero scale for non-constant group {i}")

    h_tilde = hessian.matrix * avec[:, None] * avec[None, :]
    active = avec > 0.0
    z_tilde = np.zeros_like(w)
    z_tilde[active] = (w[active] - bvec[active]) / avec[active]
    return TildeProblem(h_tilde=h_tilde, z_tilde=z_tilde, scale_vec=avec, bias_vec=bvec,
                        scheme=scheme)


def group_cd_quantize(w: np.ndarray, hessian: Hessian, scheme: GroupScheme, q0: np.ndarray,
                      cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Greedy coordinate descent on the scaled grouped problem."""
    tp = tilde_transform(w, hessian, scheme)
    return cd_quantize(tp.as_channel_problem(hessian.damping), q0, cfg)


def group_bcd_quantize(w: np.ndarray, hessian: Hessian, scheme: GroupScheme, q0: np.ndarray,
                       cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Block coordinate descent on the scaled grouped problem."""
    tp = tilde_transform(w, hessian, scheme)
    return bcd_quantize(tp.as_channel_problem(hessian.damping), q0, cfg)


def group_cyclic_quantize(w: np.ndarray, hessian: Hessian, scheme: GroupScheme, q0: np.ndarray,
                          cfg: DescentConfig) -> tuple[np.ndarray, DescentTrace]:
    """Cyclic baseline on the scaled grouped problem."""
    tp = tilde_transform(w, hessian, scheme)
    return cyclic_cd_quantize(tp.as_channel_problem(hessian.damping), q0, cfg)


def minmax_group_init(w: np.ndarray, bits: int,
                      group_size: int) -> tuple[GroupScheme, np.ndarray]:
    """Independent per-group min-max fit (clip strength 1)."""
    w = np.asarray(w, dtype=np.float64)
    n_groups = _check_grouping(w.shape[0], group_size)
    params, codes = [], np.empty(w.shape[0], dtype=np.uint8)
    for i in range(n_groups):
        sl = slice(i * group_size, (i + 1) * group_size)
        p, q = _fit_affine(w[sl], bits, gamma=1.0)
        params.append(p)
        codes[sl] = q
    return GroupScheme(group_size=group_size, params=tuple(params)), codes


def owc_group_init(w: np.ndarray, hessian: Hessian, bits: int, group_size: int,
                   grid_size: int = 50) -> tuple[GroupScheme, np.ndarray]:
    """Per-group clip-strength grid search against the group's own H block.

    Cross-group coupling is ignored here (block-diagonal approximation);
    the clip-strength coordinate descent below is what accounts for it.
    """
    w = np.asarray(w, dtype=np.float64)
    n_groups = _check_grouping(w.shape[0], group_size)
    if hessian.dim != w.shape[0]:
        raise ShapeMismatchError("Hessian dimension disagrees with the weight length")
    params, codes = [], np.empty(w.shape[0], dtype=np.uint8)
    for i in range(n_groups):
        sl = slice(i * group_size, (i + 1) * group_size)
        p, q = _owc_search(w[sl], hessian.matrix[sl, sl], bits, grid_size)
        params.append(p)
        codes[sl] = q
    return GroupScheme(group_size=group_size, params=tuple(params)), codes


def default_gamma_grid(grid_size: int = 50) -> np.ndarray:
    """The clip-strength grid {j/grid_size : j=1..grid_size}; excludes 0, includes 1."""
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    return np.arange(1, grid_size + 1, dtype=np.float64) / grid_size


@dataclass
class OwcCdResult:
    """Outcome of the clip-strength coordinate descent."""

    scheme: GroupScheme
    codes: np.ndarray
    swaps: list[tuple[int, float, float, float]] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    final_v: Optional[np.ndarray] = None


def owc_cd(w: np.ndarray, hessian: Hessian, scheme: GroupScheme,
           gamma_grid: Optional[np.ndarray] = None,
           steps: Optional[int] = None) -> OwcCdResult:
    """Greedy coordinate descent over per-group clip strengths.

    Residuals for every (group, grid value) pair are precomputed once; each
    step applies the single swap with the most negative exact loss change
    (ties to the smallest (group, grid index)) and stops early at a fixed
    point, which cannot change the outcome because the candidate table is
    static. Default step budget is one pass, d_in / group_size.
    """
    w = np.asarray(w, dtype=np.float64)
    g = scheme.group_size
    n_groups = _check_grouping(w.shape[0], g)
    if hessian.dim != w.shape[0]:
        raise ShapeMismatchError("Hessian dimension disagrees with the weight length")
    gamma_grid = default_gamma_grid() if gamma_grid is None else np.asarray(gamma_grid, dtype=np.float64)
    if gamma_grid.size == 0:
        raise ValueError("empty clip-strength grid")
    if steps is None:
        steps = n_groups
    if steps < 0:
        raise ValueError("steps must be >= 0")
    hmat = hessian.matrix
    bits = scheme.bits
    n_grid = gamma_grid.shape[0]

    # Residual and code tables over (group, grid value).
    resid_table = np.empty((n_groups, n_grid, g))
    codes_table = np.empty((n_groups, n_grid, g), dtype=np.uint8)
    params_table: list[list[QuantParams]] = []
    for i in range(n_groups):
        grp = w[i * g:(i + 1) * g]
        row = []
        for v, beta in enumerate(gamma_grid):
            p, q = _fit_affine(grp, bits, gamma=float(beta))
            row.append(p)
            codes_table[i, v] = q
            resid_table[i, v] = grp - (p.scale * q.astype(np.float64) + p.bias)
        params_table.append(row)

    # Current state from the scheme as passed in (its gammas need not be on the grid).
    cur_params = list(scheme.params)
    cur_codes = np.empty(w.shape[0], dtype=np.uint8)
    cur_resid = np.empty((n_groups, g))
    for i, p in enumerate(cur_params):
        sl = slice(i * g, (i + 1) * g)
        grp = w[sl]
        if p.scale == 0.0:
            q = np.zeros(g, dtype=np.uint8)
        else:
            _, q = _fit_affine(grp, bits, gamma=p.gamma)
        cur_codes[sl] = q
        cur_resid[i] = grp - (p.scale * q.astype(np.float64) + p.bias)

    hblocks = hmat.reshape(n_groups, g, n_groups, g)[np.arange(n_groups), :, np.arange(n_groups), :]
    err = cur_resid.ravel()
    v = -2.0 * (hmat @ err)
    loss = float(err @ (hmat @ err))
    result = OwcCdResult(scheme=scheme, codes=cur_codes, initial_loss=loss, final_loss=loss)

    for _ in range(steps):
        diff = resid_table - cur_resid[:, None, :]
        change = (np.einsum("nvg,ngh,nvh->nv", diff, hblocks, diff)
                  - np.einsum("nvg,ng->nv", diff, v.reshape(n_groups, g)))
        flat = int(np.argmin(change))
        i_star, v_star = divmod(flat, n_grid)
        best = float(change.flat[flat])
        if best >= 0.0:
            break
        sl = slice(i_star * g, (i_star + 1) * g)
        delta = resid_table[i_star, v_star] - cur_resid[i_star]
        v -= 2.0 * (hmat[:, sl] @ delta)
        cur_resid[i_star] = resid_table[i_star, v_star]
        cur_codes[sl] = codes_table[i_star, v_star]
        cur_params[i_star] = params_table[i_star][v_star]
        err = cur_resid.ravel()
        loss = float(err @ (hmat @ err))
        result.swaps.append((i_star, float(gamma_grid[v_star]), best, loss))

    result.scheme = GroupScheme(group_size=g, params=tuple(cur_params))
    result.codes = cur_codes
    result.final_loss = loss
    result.final_v = v.copy()
    return result


def quantize_channel_grouped(w: np.ndarray, hessian: Hessian, method: str, bits: int,
                             group_size: int, cfg: DescentConfig, grid_size: int,
                             owc_cd_refine: bool) -> tuple[GroupScheme, np.ndarray, int]:
    """Grouped counterpart of the per-channel pipeline.

    Initialization is the per-group grid search (optionally refined by the
    clip-strength descent); code engines run on the scaled problem, the
    block engine warm-started from the greedy result.
    """
    if method == "rtn":
        scheme, codes = minmax_group_init(w, bits, group_size)
        return scheme, codes, 0
    scheme, codes = owc_group_init(w, hessian, bits, group_size, grid_size)
    steps = 0
    if owc_cd_refine:
        refined = owc_cd(w, hessian, scheme, default_gamma_grid(grid_size))
        scheme, codes = refined.scheme, refined.codes
        steps += len(refined.swaps)
    if method == "owc":
        return scheme, codes, steps

    tp = tilde_transform(w, hessian, scheme)
    prob = tp.as_channel_problem(hessian.damping)
    if method == "cd":
        codes, trace = cd_quantize(prob, codes, cfg)
        steps += len(trace.steps)
    elif method == "cyclic":
        codes, trace = cyclic_cd_quantize(prob, codes, cfg)
        steps += len(trace.steps)
    elif method == "bcd":
        codes, cd_trace = cd_quantize(prob, codes, cfg)
        steps += len(cd_trace.steps)
        codes, bcd_trace = bcd_quantize(prob, codes, cfg)
        steps += len(bcd_trace.steps)
    else:
        raise ValueError(f"unknown method {method!r}")
    return scheme, codes, steps
