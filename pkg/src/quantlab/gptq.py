"""Hessian-based layer-wise weight reconstruction.

``gptq_quantize`` solves the forward-fit objective ||(W - What) X||_F by
quantizing columns left to right and compensating the induced error on the
remaining columns through the Cholesky factor of the inverse Hessian.
``gptq_backward`` solves the transposed, gradient-preserving objective
||(W - What)^T G||_F by running the same solver on W^T against G G^T; its
grouping necessarily runs along the output dimension.

Group scales and zero-points are computed once from the original weights
(static groups), which keeps the solver comparable to plain rounding and to
the exhaustive oracle used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import QuantParams, QuantSpec, QuantizedLinear, _group_bounds, _params_for_group


@dataclass
class CalibrationRecord:
    layer_name: str
    X: np.ndarray  # (d_in, n_samples) input activations
    G: np.ndarray  # (d_out, n_samples) output gradients


@dataclass
class HessianEst:
    H: np.ndarray
    damping: float
    degenerate: bool = False


def build_hessian(X: np.ndarray, damping_frac: float = 0.01) -> HessianEst:
    """H = X X^T + damping * mean(diag) * I, escalating damping on failure."""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("build_hessian: X is empty")
    d = X.shape[0]
    H0 = X @ X.T
    mean_diag = float(np.mean(np.diag(H0)))
    if mean_diag == 0.0:
        H = damping_frac * 1e-8 * np.eye(d)
        return HessianEst(H=H, damping=damping_frac, degenerate=True)

    damp = damping_frac
    for _ in range(4):
        H = H0 + damp * mean_diag * np.eye(d)
        try:
            np.linalg.cholesky(H)
            return HessianEst(H=H, damping=damp)
        except np.linalg.LinAlgError:
            damp *= 10.0
    raise np.linalg.LinAlgError("Hessian not positive definite after damping escalation")


def _static_params(W: np.ndarray, spec: QuantSpec) -> QuantParams:
    d_out, d_in = W.shape
    bounds = _group_bounds(d_in, spec.group_size)
    h = np.empty((d_out, len(bounds)), dtype=np.float32)
    z = np.empty((d_out, len(bounds)), dtype=np.int32)
    for r in range(d_out):
        for gi, (lo, hi) in enumerate(bounds):
            hg, zg = _params_for_group(W[r, lo:hi], spec.bits, 1.0, 1.0)
            h[r, gi] = np.float32(hg)
            z[r, gi] = zg
    return QuantParams(h, z)


def _column_group(bounds, j: int) -> int:
    for gi, (lo, hi) in enumerate(bounds):
        if lo <= j < hi:
            return gi
    raise IndexError(j)


def gptq_quantize(
    W: np.ndarray,
    H: HessianEst,
    spec: QuantSpec,
    act_order: bool = False,
) -> QuantizedLinear:
    """Error-compensated quantization of W against calibration Hessian H."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"gptq_quantize expects a matrix, got shape {W.shape}")
    d_out, d_in = W.shape
    if H.H.shape != (d_in, d_in):
        raise ValueError(f"Hessian shape {H.H.shape} does not match d_in {d_in}")

    params = _static_params(W, spec)
    bounds = _group_bounds(d_in, spec.group_size)
    levels = spec.n_levels

    perm = np.argsort(-np.diag(H.H), kind="stable") if act_order else np.arange(d_in)
    Hp = H.H[np.ix_(perm, perm)]

    damp = H.damping
    for _ in range(4):
        try:
            L = np.linalg.cholesky(Hp)
            break
        except np.linalg.LinAlgError:
            damp *= 10.0
            Hp = Hp + damp * float(np.mean(np.diag(Hp))) * np.eye(d_in)
    else:
        raise np.linalg.LinAlgError("Cholesky failed after damping escalation")
    Hinv = np.linalg.inv(Hp)
    # upper factor U with Hinv = U^T U drives the compensation updates
    U = np.linalg.cholesky(Hinv).T

    Wwork = W[:, perm].copy()
    codes = np.empty((d_out, d_in), dtype=np.uint8)
    h64 = params.h.astype(np.float64)
    z64 = params.z.astype(np.float64)

    for jp in range(d_in):
        j = int(perm[jp])
        gi = _column_group(bounds, j)
        hj = h64[:, gi]
        zj = z64[:, gi]
        col = Wwork[:, jp]
        cj = np.clip(np.rint(col / hj) + zj, 0, levels)
        codes[:, j] = cj.astype(np.uint8)
        qj = hj * (cj - zj)
        dinv = U[jp, jp]
        err = (col - qj) / dinv
        if jp + 1 < d_in:
            Wwork[:, jp + 1 :] -= np.outer(err, U[jp, jp + 1 :])

    return QuantizedLinear(codes=codes, params=params, shape=(d_out, d_in), spec=spec)


def gptq_backward(W: np.ndarray, G: np.ndarray, spec: QuantSpec) -> QuantizedLinear:
    """Quantize for gradient preservation: minimize ||(W - What)^T G||_F.

    Identical solver structure with rows and columns swapped; the result is
    grouped along the output dimension.
    """
    W = np.asarray(W, dtype=np.float64)
    H = build_hessian(np.asarray(G, dtype=np.float64))
    qt = gptq_quantize(W.T, H, spec)
    return QuantizedLinear(
        codes=qt.codes,
        params=qt.params,
        shape=W.shape,
        spec=spec,
        group_axis="output",
    )


@dataclass
class MixedPrecisionLayer:
    columns: np.ndarray  # indices restored to full precision
    weight: np.ndarray   # quantized weight with selected columns replaced


def select_important_columns(
    W: np.ndarray,
    What: np.ndarray,
    X: np.ndarray,
    G: np.ndarray,
    budget: float,
    criterion: str = "grad_magnitude",
) -> MixedPrecisionLayer:
    """Restore the most important input channels to full precision.

    ``activation_error`` scores a column by the magnitude of its rank-one
    contribution to the output error; ``grad_magnitude`` scores it by the
    norm of its input-gradient row (W^T G).
    """
    W = np.asarray(W, dtype=np.float64)
    What = np.asarray(What, dtype=np.float64)
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    d_in = W.shape[1]

    if criterion == "activation_error":
        scores = np.linalg.norm(W - What, axis=0) * np.linalg.norm(X, axis=1)
    elif criterion == "grad_magnitude":
        scores = np.linalg.norm(W.T @ G, axis=1)
    else:
        raise ValueError(f"unknown criterion {criterion!r}")

    k = int(np.ceil(budget * d_in))
    idx = np.sort(np.argsort(-scores, kind="stable")[:k])
    mixed = What.copy()
    mixed[:, idx] = W[:, idx]
    return MixedPrecisionLayer(columns=idx, weight=mixed)


def capture_calibration(model, batches) -> dict[str, CalibrationRecord]:
    """Per-linear input activations X and output gradients G from reference
    forward/backward passes over the given token batches."""
    from . import engine as E
    from .model import build_forward

    if not batches:
        raise ValueError("capture_calibration: batch list is empty")

    xs: dict[str, list[np.ndarray]] = {}
    gs: dict[str, list[np.ndarray]] = {}
    for batch in batches:
        fg = build_forward(model, batch, record_linears=True)
        outputs = [out for (_, out) in fg.linears.values()]
        grads = E.backward(fg.loss, outputs)
        for (layer, proj), (alias, out) in fg.linears.items():
            name = f"layers.{layer}.{proj}"
            d_in = alias.shape[-1]
            d_out = out.shape[-1]
            xs.setdefault(name, []).append(alias.data.reshape(-1, d_in).T)
            gs.setdefault(name, []).append(grads[out].data.reshape(-1, d_out).T)

    records = {}
    for name in xs:
        records[name] = CalibrationRecord(
            layer_name=name,
            X=np.concatenate(xs[name], axis=1),
            G=np.concatenate(gs[name], axis=1),
        )
    return records
