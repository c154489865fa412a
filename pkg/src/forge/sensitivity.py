"""Gradient-based layer sensitivity: per-layer nuclear norms of the
Q/K/V gradient matrices over a probe dataset.

The nuclear norm is computed from scratch via cyclic Jacobi rotations on
the Gram matrix (singular values = sqrt of its eigenvalues); the test
suite checks it against an independent full-SVD oracle.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteInput
from .tinylm import Batch, ModelParams, loss_and_backward

_JACOBI_MAX_SWEEPS = 60
_JACOBI_REL_TOL = 1e-14


def _jacobi_eigenvalues(sym: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    Deterministic: fixed sweep order, fixed convergence rule."""
    a = np.array(sym, dtype=np.float64, copy=True)
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    frob = math.sqrt(float(np.sum(a * a)))
    if frob == 0.0:
        return np.zeros(n)
    threshold = _JACOBI_REL_TOL * frob
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = math.sqrt(max(float(np.sum(a * a) - np.sum(a.diagonal() ** 2)), 0.0))
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= threshold / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
    return a.diagonal().copy()


def nuclear_norm(matrix: np.ndarray) -> float:
    """Sum of singular values via Jacobi eigendecomposition of the Gram
    matrix (the smaller of G G^T and G^T G)."""
    g = np.asarray(matrix, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("nuclear_norm expects a 2-D matrix")
    if not np.all(np.isfinite(g)):
        raise NonFiniteInput("matrix contains NaN or infinity")
    gram = g @ g.T if g.shape[0] <= g.shape[1] else g.T @ g
    eigenvalues = _jacobi_eigenvalues(gram)
    # squaring halves the usable precision: eigenvalues below the noise
    # floor of the Gram matrix are exact zeros, not tiny singular values
    floor = gram.shape[0] * np.finfo(np.float64).eps * max(float(eigenvalues.max()), 0.0)
    eigenvalues = np.where(eigenvalues > floor, eigenvalues, 0.0)
    return float(np.sum(np.sqrt(eigenvalues)))


@dataclass(frozen=True)
class ProbeSpec:
    dataset_id: str
    batch_count: int
    seed: int


@dataclass
class LayerNorms:
    layer: int
    q_norm: float
    k_norm: float
    v_norm: float


@dataclass
class GradientReport:
    probe: ProbeSpec
    rows: list[LayerNorms] = field(default_factory=list)


def layer_gradient_report(params: ModelParams, batches: list[Batch],
                          dataset_id: str = "", seed: int = 0,
                          accumulate: bool = True,
                          loss_scale: float = 1.0) -> GradientReport:
    """Per-layer nuclear norms of the Q/K/V gradients over the probe.
    No parameter is updated. With accumulate=True (default) gradients
    are summed across batches before norming; otherwise the report
    carries the mean of per-batch norms."""
    config = params.config
    names = ("W_Q", "W_K", "W_V")
    if accumulate:
        acc: dict = {}
        for batch in batches:
            _, grads = loss_and_backward(params, batch, loss_scale=loss_scale)
            for layer in range(config.n_layers):
                for name in names:
                    key = (layer, name)
                    if key in acc:
                        acc[key] += grads[key]
                    else:
                        acc[key] = grads[key]
        norms = {key: nuclear_norm(acc[key]) for key in acc}
    else:
        sums: dict = {(layer, name): 0.0
                      for layer in range(config.n_layers) for name in names}
        for batch in batches:
            _, grads = loss_and_backward(params, batch, loss_scale=loss_scale)
            for key in sums:
                sums[key] += nuclear_norm(grads[key])
        norms = {key: total / len(batches) for key, total in sums.items()}
    report = GradientReport(
        probe=ProbeSpec(dataset_id=dataset_id, batch_count=len(batches), seed=seed))
    for layer in range(config.n_layers):
        report.rows.append(LayerNorms(
            layer=layer,
            q_norm=norms[(layer, "W_Q")],
            k_norm=norms[(layer, "W_K")],
            v_norm=norms[(layer, "W_V")],
        ))
    return report


# ---------------------------------------------------------------------------
# Rendering

def report_to_csv(report: GradientReport) -> str:
    out = io.StringIO()
    out.write(f"# dataset={report.probe.dataset_id}\n")
    out.write(f"# batches={report.probe.batch_count}\n")
    out.write(f"# seed={report.probe.seed}\n")
    out.write("layer,q_norm,k_norm,v_norm\n")
    for row in report.rows:
        out.write(f"{row.layer},{row.q_norm!r},{row.k_norm!r},{row.v_norm!r}\n")
    return out.getvalue()


def report_from_csv(text: str) -> GradientReport:
    dataset_id = ""
    batch_count = 0
    seed = 0
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "dataset":
                dataset_id = value
            elif key == "batches":
                batch_count = int(value)
            elif key == "seed":
                seed = int(value)
            continue
        if line.startswith("layer,"):
            continue
        layer_s, q, k, v = line.split(",")
        rows.append(LayerNorms(int(layer_s), float(q), float(k), float(v)))
    return GradientReport(
        probe=ProbeSpec(dataset_id=dataset_id, batch_count=batch_count, seed=seed),
        rows=rows)


def ascii_bars(report: GradientReport, width: int = 48) -> str:
    """One bar chart per matrix kind for eyeballing the layer profile."""
    lines = []
    for label, getter in (("Q", lambda r: r.q_norm), ("K", lambda r: r.k_norm),
                          ("V", lambda r: r.v_norm)):
        values = [getter(r) for r in report.rows]
        peak = max(values) if values else 0.0
        lines.append(f"nuclear norm of grad {label} per layer")
        for row, value in zip(report.rows, values):
            n_chars = int(round(width * value / peak)) if peak > 0 else 0
            lines.append(f"  L{row.layer:02d} |{'#' * n_chars} {value:.6g}")
        lines.append("")
    return "\n".join(lines)
