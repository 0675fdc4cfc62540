"""Geometric building blocks of the set-abstraction encoder and the
feature-propagation decoder.

Index selection (sampling, ball query, nearest neighbours) is not
differentiable and runs on plain arrays through :mod:`pmpnet.kernels`.
Gathering and interpolation are built from tensor ops, so gradients reach
both the features and the point coordinates.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, concat, reshape, sum_, take

INTERP_EPS = 1e-8


class ContractError(ValueError):
    """An input violates an operation's precondition."""


def _xyz(cloud):
    arr = cloud.data if isinstance(cloud, Tensor) else np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractError(f"expected an N x 3 point array, got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float64)


@dataclass(frozen=True)
class NeighborIndex:
    """Ball-query result: ``neighbors[s]`` lists up to M points near ``centers[s]``.

    Slots past the last in-radius point repeat the first neighbour and are
    ``False`` in ``mask``.
    """

    centers: np.ndarray
    neighbors: np.ndarray
    mask: np.ndarray

    @property
    def counts(self):
        return self.mask.sum(axis=1)


def farthest_point_sample(cloud, s):
    """Greedy max-min sampling of ``s`` indices, seeded at index 0."""
    pts = _xyz(cloud)
    n = pts.shape[0]
    if not 1 <= s <= n:
        raise ContractError(f"cannot sample {s} points from a cloud of {n}")
    return kernels.fps(pts, int(s))


def ball_query(cloud, centers, radius, m):
    """Up to ``m`` points (in index order) strictly within ``radius`` of each center.

    ``centers`` are indices into ``cloud``.
    """
    if radius <= 0 or m < 1:
        raise ContractError(f"ball_query needs radius > 0 and m >= 1, got {radius}, {m}")
    pts = _xyz(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    idx, count = kernels.ball_query(pts, np.ascontiguousarray(pts[centers]), float(radius) ** 2, int(m))
    mask = np.arange(m)[None, :] < count[:, None]
    return NeighborIndex(centers=centers, neighbors=idx, mask=mask)


def knn(query, ref, k):
    """Indices of the ``k`` nearest ``ref`` points for every query point."""
    q, r = _xyz(query), _xyz(ref)
    if not 1 <= k <= r.shape[0]:
        raise ContractError(f"k={k} out of range for {r.shape[0]} reference points")
    return kernels.knn(q, r, int(k))


def nearest(query, ref):
    return knn(query, ref, 1)[:, 0]


def group(cloud, features, index):
    """Gather neighbourhoods as ``S x M x (3 + C)`` tensors.

    Coordinates are expressed relative to each group's center.  ``features``
    may be ``None`` (coordinates only).
    """
    xyz = as_tensor(cloud)
    grouped = take(xyz, index.neighbors)
    center = reshape(take(xyz, index.centers), (len(index.centers), 1, 3))
    rel = grouped - center
    if features is None:
        return rel
    return concat([rel, take(features, index.neighbors)], axis=-1)


def interpolation_weights(coarse, fine):
    """Three-nearest-neighbour indices and normalised ``1/(d^2+eps)`` weights.

    Returns ``(idx, weights)`` where ``weights`` is a ``F x k`` tensor,
    ``k = min(3, len(coarse))``.
    """
    c, f = as_tensor(coarse), as_tensor(fine)
    nc = _xyz(c).shape[0]
    if nc < 1:
        raise ContractError("coarse cloud is empty")
    k = min(3, nc)
    idx = knn(f, c, k)
    nf = f.shape[0]
    diff = take(c, idx) - reshape(f, (nf, 1, 3))
    inv = 1.0 / (sum_(diff * diff, axis=2) + INTERP_EPS)
    w = inv / reshape(sum_(inv, axis=1), (nf, 1))
    return idx, w


def three_nn_interpolate(coarse, fine, features):
    """Inverse-squared-distance average of the 3 nearest coarse feature rows."""
    features = as_tensor(features)
    if features.shape[0] != _xyz(coarse).shape[0]:
        raise ContractError(
            f"{features.shape[0]} feature rows for {_xyz(coarse).shape[0]} coarse points"
        )
    idx, w = interpolation_weights(coarse, fine)
    nf, k = idx.shape
    return sum_(take(features, idx) * reshape(w, (nf, k, 1)), axis=1)
