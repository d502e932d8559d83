"""Finite-difference oracle for the analytic gradients.

The checker only ever touches the model through its public loss function:
perturb one entry, re-evaluate, central difference. It shares no code with
the manual backward pass, which is the point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError
from .model import Model
from .numerics import make_rng

DEFAULT_H = 1e-5
REL_FLOOR = 1e-8
WORST_ENTRIES = 2  # largest-|analytic| entries always get checked


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def numeric_grad(loss_fn: Callable[[], float], tensor: np.ndarray, entry: tuple, h: float = DEFAULT_H) -> float:
    """Central difference d loss / d tensor[entry]. Restores the entry."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    orig = tensor[entry]
    tensor[entry] = orig + h
    up = loss_fn()
    tensor[entry] = orig - h
    down = loss_fn()
    tensor[entry] = orig
    if not (np.isfinite(up) and np.isfinite(down)):
        raise NumericError(f"loss went non-finite while perturbing entry {entry}")
    return (up - down) / (2.0 * h)


@dataclass
class TensorCheck:
    name: str
    max_rel: float
    mean_rel: float
    worst_entry: tuple
    worst_analytic: float
    worst_numeric: float
    n_checked: int


@dataclass
class GradReport:
    threshold: float
    rows: list[TensorCheck]

    @property
    def ok(self) -> bool:
        return all(r.max_rel <= self.threshold for r in self.rows)

    @property
    def max_rel(self) -> float:
        return max((r.max_rel for r in self.rows), default=0.0)

    def worst(self) -> TensorCheck | None:
        return max(self.rows, key=lambda r: r.max_rel, default=None)


MEASURABLE_FRACTION = 0.01  # sampled entries must carry >= 1% of the tensor's max |grad|


def _pick_entries(g: np.ndarray, samples: int, rng: np.random.Generator) -> list[int]:
    """Largest-|analytic| entries plus a random sample of measurable ones.

    Central differences at h = 1e-5 carry roundoff of about eps*|loss|/h
    (~1e-11 here), so entries far below the tensor's own gradient scale
    compare noise against noise; the random sample skips them. A tensor
    whose gradient is identically zero is still sampled everywhere: if the
    true gradient is nonzero the mismatch is order 1 and cannot hide.
    """
    flat = np.abs(g.reshape(-1))
    worst = list(np.argsort(flat)[::-1][:WORST_ENTRIES])
    picked = {int(i) for i in worst}
    if samples > 0:
        cutoff = MEASURABLE_FRACTION * flat.max()
        eligible = np.nonzero(flat >= cutoff)[0] if cutoff > 0 else np.arange(flat.size)
        if len(eligible):
            extra = rng.choice(eligible, size=min(samples, len(eligible)), replace=False)
            picked.update(int(i) for i in extra)
    return sorted(picked)


def check_gradients(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    threshold: float = 1e-4,
    samples: int = 4,
    h: float = DEFAULT_H,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients against central differences on a sample of
    entries per tensor (always including the largest-magnitude ones).
    An empty parameter set passes vacuously."""
    rng = make_rng(seed)
    rows = []
    for name in sorted(params):
        p = params[name]
        g = analytic[name]
        if g.shape != p.shape:
            raise NumericError(f"analytic gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        max_rel = 0.0
        rel_sum = 0.0
        worst_entry = ()
        worst_a = worst_n = 0.0
        entries = _pick_entries(g, samples, rng)
        for flat_idx in entries:
            entry = np.unravel_index(flat_idx, p.shape)
            n = numeric_grad(loss_fn, p, entry, h)
            a = float(g[entry])
            r = rel_error(a, n)
            rel_sum += r
            if r >= max_rel:
                max_rel, worst_entry, worst_a, worst_n = r, entry, a, n
        rows.append(
            TensorCheck(
                name=name,
                max_rel=max_rel,
                mean_rel=rel_sum / len(entries) if entries else 0.0,
                worst_entry=tuple(int(i) for i in worst_entry),
                worst_analytic=worst_a,
                worst_numeric=worst_n,
                n_checked=len(entries),
            )
        )
    return GradReport(threshold=threshold, rows=rows)


def randomize_params(model: Model, seed: int, scale: float = 1.0) -> None:
    """Move every parameter tensor to a generic random point (uniform +-scale).

    Fresh initializations sit near a symmetric point: mixing starts at the
    identity, so channels compute nearly identical states and the attention
    gradients are ~1e-8, beneath finite-difference resolution. Checks run at
    a generic point instead, where every code path carries measurable signal.
    """
    rng = make_rng((seed, 7001))
    for _, arr, _ in model.named_params():
        arr += rng.uniform(-scale, scale, arr.shape)


def check_model(
    model: Model,
    batch,
    threshold: float = 1e-4,
    samples: int = 4,
    h: float = DEFAULT_H,
    seed: int = 0,
    workers: int = 1,
) -> GradReport:
    """Certify every parameter tensor of a model on one batch. Runs in eval
    mode, so dropout is off and the loss is deterministic."""

    def loss_fn() -> float:
        return model.forward_loss(batch, mode="eval", workers=workers)[0]

    _, tape = model.forward_loss(batch, mode="eval", workers=workers)
    analytic = model.backward(tape, workers=workers)
    params = {name: arr for name, arr, _ in model.named_params()}
    return check_gradients(loss_fn, params, analytic, threshold, samples, h, seed)


def render_report(report: GradReport) -> str:
    lines = [
        f"gradient check vs central differences (threshold {report.threshold:g})",
        f"{'tensor':<24} {'max rel':>12} {'mean rel':>12} {'checked':>8}  worst entry",
    ]
    for r in report.rows:
        lines.append(
            f"{r.name:<24} {r.max_rel:>12.3e} {r.mean_rel:>12.3e} {r.n_checked:>8}  "
            f"{r.worst_entry} a={r.worst_analytic:.6e} n={r.worst_numeric:.6e}"
        )
    lines.append(f"result: {'PASS' if report.ok else 'FAIL'} (max {report.max_rel:.3e})")
    return "\n".join(lines)


def report_to_csv(report: GradReport) -> str:
    lines = ["tensor,max_rel,mean_rel,n_checked,worst_entry,worst_analytic,worst_numeric,pass"]
    for r in report.rows:
        entry = ";".join(str(i) for i in r.worst_entry)
        lines.append(
            f"{r.name},{r.max_rel:.6e},{r.mean_rel:.6e},{r.n_checked},"
            f"{entry},{r.worst_analytic:.12e},{r.worst_numeric:.12e},"
            f"{int(r.max_rel <= report.threshold)}"
        )
    return "\n".join(lines) + "\n"
