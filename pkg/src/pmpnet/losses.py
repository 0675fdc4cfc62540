"""Training objectives: Chamfer distance, earth mover's distance (exact and
auction-approximated) and the point-moving-distance regulariser."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import kernels
from .geom import ContractError, _xyz, nearest
from .tensor import as_tensor, mean, norm, sum_, take

EXACT_EMD_CAP = 512
DEFAULT_PMD_WEIGHT = 1e-2


@dataclass(frozen=True)
class Assignment:
    mapping: np.ndarray  # source index -> target index
    cost: float  # mean matched distance

    def is_bijection(self):
        n = len(self.mapping)
        return np.array_equal(np.sort(self.mapping), np.arange(n))


def chamfer(x, y, norm_kind="l1"):
    """Per-point Chamfer distance, differentiable in both clouds.

    ``"l1"`` averages Euclidean nearest-neighbour distances, ``"l2"`` averages
    squared ones; the two directional means are added.
    """
    x, y = as_tensor(x), as_tensor(y)
    if _xyz(x).shape[0] == 0 or _xyz(y).shape[0] == 0:
        raise ContractError("chamfer distance of an empty cloud")
    d_xy = x - take(y, nearest(x, y))
    d_yx = y - take(x, nearest(y, x))
    if norm_kind == "l1":
        return mean(norm(d_xy)) + mean(norm(d_yx))
    if norm_kind == "l2":
        return mean(sum_(d_xy * d_xy, axis=1)) + mean(sum_(d_yx * d_yx, axis=1))
    raise ValueError(f"unknown chamfer norm {norm_kind!r}")


def _check_pair(x, y):
    a, b = _xyz(x), _xyz(y)
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"EMD needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        raise ContractError("EMD of empty clouds")
    return a, b


def _assignment(cost, mapping):
    return Assignment(mapping=mapping, cost=float(cost[np.arange(len(mapping)), mapping].mean()))


def emd_exact(x, y):
    """Optimal bijection under Euclidean cost (Hungarian / LAPJV solver)."""
    a, b = _check_pair(x, y)
    if a.shape[0] > EXACT_EMD_CAP:
        raise ContractError(f"exact EMD limited to {EXACT_EMD_CAP} points, got {a.shape[0]}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    mapping = np.empty(len(rows), dtype=np.int64)
    mapping[rows] = cols
    return _assignment(cost, mapping)


def eps_schedule(max_cost, n):
    """Epsilon-scaling phases: from ``max_cost/4`` down by 4x until below ``1/(4n)``."""
    floor = 1.0 / (4 * n)
    eps = max_cost / 4.0
    if eps <= 0:
        return np.array([floor / 2])
    out = [eps]
    while eps >= floor:
        eps /= 4.0
        out.append(eps)
    return np.array(out)


def emd_approx(x, y, iterations=50):
    """Auction assignment with epsilon scaling.

    ``iterations`` caps the bidding sweeps per epsilon phase; persons still
    unassigned when the cap is hit are matched greedily, so the result is
    always a bijection.
    """
    a, b = _check_pair(x, y)
    cost = cdist(a, b)
    sched = eps_schedule(float(cost.max()), a.shape[0])
    mapping = kernels.auction(cost, sched, max(int(iterations), 1))
    return _assignment(cost, mapping)


def emd_loss(x, y, assignment):
    """Mean matched distance for a fixed assignment; differentiable in both clouds."""
    x, y = as_tensor(x), as_tensor(y)
    return mean(norm(x - take(y, assignment.mapping)))


def _displacements(traces):
    return [getattr(t, "displacement", t) for t in traces]


def pmd(traces):
    """Sum of Euclidean lengths of every per-step, per-point displacement."""
    disp = _displacements(traces)
    if not disp:
        raise ContractError("point-moving distance of an empty trace list")
    n = disp[0].shape[0]
    total = None
    for d in disp:
        if d.shape[0] != n:
            raise ContractError("all steps must move the same number of points")
        term = sum_(norm(as_tensor(d)))
        total = term if total is None else total + term
    return total


def loss_terms(traces, target, pmd_weight=DEFAULT_PMD_WEIGHT, emd_weight=0.0, emd_iterations=50):
    """Per-term breakdown of the training loss; ``terms["loss"]`` is the total."""
    target = as_tensor(target)
    n = _xyz(target).shape[0]
    cd = None
    for t in traces:
        if t.output.shape[0] != n:
            raise ContractError(f"step output has {t.output.shape[0]} points, target has {n}")
        c = chamfer(t.output, target, "l1")
        cd = c if cd is None else cd + c
    move = pmd(traces)
    loss = cd + pmd_weight * move if pmd_weight else cd
    terms = {"cd": cd, "pmd": move}
    if emd_weight:
        last = traces[-1].output
        e = emd_loss(last, target, emd_approx(last, target, emd_iterations))
        terms["emd"] = e
        loss = loss + emd_weight * e
    terms["loss"] = loss
    return terms


def total_loss(traces, target, pmd_weight=DEFAULT_PMD_WEIGHT, **kw):
    """Summed per-step L1 Chamfer distance plus weighted point-moving distance."""
    return loss_terms(traces, target, pmd_weight, **kw)["loss"]
