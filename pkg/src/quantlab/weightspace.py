"""Weight-space analyses: anisotropy of the quantized solution space and
null-space joint feasibility.

The anisotropy sweep interpolates between the forward-fit solution and the
gradient-preserving solution and scores each point by how well it preserves
the layer's forward outputs and backward gradients.  The feasibility checker
tests the rank condition rank(X) + rank(G) < min(d_in, d_out) and, when it
holds, constructs an explicit rank-one witness dW = u v^T with v orthogonal
to the columns of X and u orthogonal to the columns of G, so dW X = 0 and
dW^T G = 0 simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gptq import CalibrationRecord, build_hessian, gptq_backward, gptq_quantize
from .quant import QuantSpec


@dataclass
class AnisotropyPoint:
    alpha: float
    cos_fwd: float
    cos_bwd: float
    bits: int


@dataclass
class FeasibilityReport:
    rank_x: int
    rank_g: int
    d_in: int
    d_out: int
    condition_holds: bool
    witness: np.ndarray | None
    residual_fwd: float
    residual_bwd: float
    borderline: bool = False


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1)
    b = b.reshape(-1)
    if np.array_equal(a, b):
        return 1.0
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def preservation_scores(W, What, X, G) -> tuple[float, float]:
    """Cosine similarity of flattened forward outputs and backward gradients."""
    return _cosine(W @ X, What @ X), _cosine(W.T @ G, What.T @ G)


def anisotropy_sweep(
    W: np.ndarray,
    X: np.ndarray,
    G: np.ndarray,
    spec: QuantSpec,
    alpha_grid=None,
) -> list[AnisotropyPoint]:
    """Scores along What = (1 - alpha) * What_a + alpha * What_s.

    Endpoints use the solver outputs exactly; interior points are generally
    off the quantization grid.
    """
    if alpha_grid is None:
        alpha_grid = np.round(np.arange(0.0, 1.0001, 0.1), 10)
    W = np.asarray(W, dtype=np.float64)
    wa = gptq_quantize(W, build_hessian(X), spec).dequantize()
    ws = gptq_backward(W, G, spec).dequantize()

    points = []
    for alpha in alpha_grid:
        a = float(alpha)
        if a == 0.0:
            what = wa
        elif a == 1.0:
            what = ws
        else:
            what = (1.0 - a) * wa + a * ws
        cf, cb = preservation_scores(W, what, X, G)
        points.append(AnisotropyPoint(alpha=a, cos_fwd=cf, cos_bwd=cb, bits=spec.bits))
    return points


def numerical_rank(M: np.ndarray, tol: float | None = None):
    """Rank from singular values; returns (rank, borderline flag, tolerance)."""
    if M.size == 0 or not np.any(M):
        return 0, False, 0.0
    s = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = s[0] * max(M.shape) * np.finfo(np.float64).eps * 64
    rank = int(np.sum(s > tol))
    near = np.abs(s - tol) < 10 * tol
    return rank, bool(np.any(near)), float(tol)


def nullspace_feasibility(X: np.ndarray, G: np.ndarray, d_in: int, d_out: int) -> FeasibilityReport:
    """Rank-condition check with an explicit witness when it holds."""
    X = np.asarray(X, dtype=np.float64).reshape(d_in, -1)
    G = np.asarray(G, dtype=np.float64).reshape(d_out, -1)
    rank_x, bx, _ = numerical_rank(X)
    rank_g, bg, _ = numerical_rank(G)
    holds = rank_x + rank_g < min(d_in, d_out)

    witness = None
    res_f = res_b = np.nan
    if holds:
        v = _null_direction(X, rank_x, d_in)
        u = _null_direction(G, rank_g, d_out)
        witness = np.outer(u, v)
        res_f = float(np.linalg.norm(witness @ X))
        res_b = float(np.linalg.norm(witness.T @ G))
    return FeasibilityReport(
        rank_x=rank_x,
        rank_g=rank_g,
        d_in=d_in,
        d_out=d_out,
        condition_holds=holds,
        witness=witness,
        residual_fwd=res_f,
        residual_bwd=res_b,
        borderline=bx or bg,
    )


def _null_direction(M: np.ndarray, rank: int, dim: int) -> np.ndarray:
    """A unit vector orthogonal to the column space of M."""
    if rank == 0:
        e = np.zeros(dim)
        e[0] = 1.0
        return e
    u, _, _ = np.linalg.svd(M, full_matrices=True)
    return u[:, rank]


def rank_profile(model, records: dict[str, CalibrationRecord]):
    """Per-layer ranks of calibration activations/gradients and the
    feasibility verdicts (reported, not asserted: the paper's sparsity claim
    is about full-scale models)."""
    rows = []
    for name, rec in sorted(records.items()):
        d_in, d_out = rec.X.shape[0], rec.G.shape[0]
        rep = nullspace_feasibility(rec.X, rec.G, d_in, d_out)
        rows.append(
            {
                "layer": name,
                "rank_x": rep.rank_x,
                "rank_g": rep.rank_g,
                "d_in": d_in,
                "d_out": d_out,
                "condition_holds": rep.condition_holds,
            }
        )
    return rows
