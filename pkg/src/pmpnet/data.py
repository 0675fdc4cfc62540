"""Synthetic shape pairs, occlusion, resampling and point-cloud file I/O."""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import ContractError

KINDS = ("plane-slab", "sphere", "cylinder", "box", "l-bracket")
SCALE = 0.9
BINARY_MAGIC = b"PMPC"


class CloudFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ShapePair:
    partial: np.ndarray
    complete: np.ndarray
    category: str
    id: str


# ---------------------------------------------------------------- primitives


def _sample_boxes(boxes, n, rng, skip=()):
    """Area-weighted uniform samples on the faces of axis-aligned boxes.

    ``boxes`` is a list of ``(lo, hi)`` corners; ``skip`` holds
    ``(box, axis, side)`` faces to leave out.
    """
    faces = []
    for b, (lo, hi) in enumerate(boxes):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            area = (hi[u] - lo[u]) * (hi[v] - lo[v])
            for side in (0, 1):
                if (b, axis, side) not in skip:
                    faces.append((lo, hi, axis, side, area))
    areas = np.array([f[4] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for fi, (lo, hi, axis, side, _) in enumerate(faces):
        sel = which == fi
        pts[sel] = lo + rng.random((sel.sum(), 3)) * (hi - lo)
        pts[sel, axis] = hi[axis] if side else lo[axis]
    return pts, which


def _unit_sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cylinder(n, rng, radius, height):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    # caps: sqrt for uniform area density on a disc
    rr = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n), np.where(part == 1, height / 2, -height / 2))
    return np.stack([rr * np.cos(theta), rr * np.sin(theta), z], axis=1)


def _normalise(pts, lo, hi):
    """Center the analytic bounding box at the origin, fit it in the unit cube, scale by 0.9."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return (pts - (lo + hi) / 2) / (hi - lo).max() * SCALE


def synth_shape(kind, n, rng):
    """``n`` points sampled uniformly on the surface of a primitive ``kind``."""
    if n < 8:
        raise ContractError(f"need at least 8 points, got {n}")
    if kind == "sphere":
        return _normalise(_unit_sphere(n, rng), [-1] * 3, [1] * 3)
    if kind == "cylinder":
        r, h = rng.uniform(0.3, 0.5), rng.uniform(0.8, 1.0)
        return _normalise(_cylinder(n, rng, r, h), [-r, -r, -h / 2], [r, r, h / 2])
    if kind == "box":
        hi = rng.uniform(0.4, 1.0, 3)
        return _normalise(_sample_boxes([(np.zeros(3), hi)], n, rng)[0], np.zeros(3), hi)
    if kind == "plane-slab":
        hi = np.array([1.0, rng.uniform(0.6, 1.0), rng.uniform(0.05, 0.1)])
        return _normalise(_sample_boxes([(np.zeros(3), hi)], n, rng)[0], np.zeros(3), hi)
    if kind == "l-bracket":
        t, w = rng.uniform(0.15, 0.25), rng.uniform(0.4, 0.6)
        base = ([0, 0, 0], [1, t, w])
        upright = ([0, t, 0], [t, 1, w])
        # the upright's bottom face sits on the base
        pts, _ = _sample_boxes([base, upright], n, rng, skip={(1, 1, 0)})
        return _normalise(pts, [0, 0, 0], [1, 1, w])
    raise ValueError(f"unknown shape kind {kind!r}; choose from {KINDS}")


def occlude(cloud, direction, keep_fraction):
    """Drop the points furthest along ``direction``, keeping ``round(keep*N)``.

    Survivors keep their original order.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cloud) == 0:
        raise ContractError("cannot occlude an empty cloud")
    if not 0.0 < keep_fraction < 1.0:
        raise ContractError(f"keep fraction must lie in (0, 1), got {keep_fraction}")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    keep = max(1, int(round(keep_fraction * len(cloud))))
    order = np.argsort(cloud @ d, kind="stable")
    return cloud[np.sort(order[:keep])]


def resample(cloud, n, rng):
    """Random subset (too many points) or originals plus random copies (too few)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    m = len(cloud)
    if m == 0:
        raise ContractError("cannot resample an empty cloud")
    if m == n:
        return cloud.copy()
    if m > n:
        return cloud[rng.choice(m, size=n, replace=False)]
    extra = rng.integers(0, m, size=n - m)
    return cloud[np.concatenate([np.arange(m), extra])]


def make_pair(kind, n, rng, keep_fraction=0.6, ident=None):
    complete = synth_shape(kind, n, rng)
    partial = occlude(complete, _unit_sphere(1, rng)[0], keep_fraction)
    # shuffle so point order carries no occlusion structure
    partial = resample(partial, n, rng)[rng.permutation(n)]
    return ShapePair(partial=partial, complete=complete, category=kind, id=ident or kind)


def generate(count, n, rng, kinds=KINDS, keep_fraction=0.6):
    """``count`` pairs, assigned to ``kinds`` round-robin."""
    return [
        make_pair(kinds[i % len(kinds)], n, rng, keep_fraction, f"{kinds[i % len(kinds)]}-{i:04d}")
        for i in range(count)
    ]


def is_validation(ident, fraction=0.2):
    """Deterministic split on a hash of the pair id."""
    h = int.from_bytes(hashlib.sha1(ident.encode()).digest()[:8], "little")
    return h / 2 ** 64 < fraction


# ---------------------------------------------------------------- file formats


def write_cloud(cloud, path, fmt=None):
    """Write ``xyz`` text (17 significant digits) or ``bin`` (PMPC + float32)."""
    cloud = np.asarray(cloud, dtype=np.float64)
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix in (".bin", ".pmpc") else "xyz")
    if fmt == "xyz":
        with open(path, "w") as fh:
            fh.writelines(f"{x!r} {y!r} {z!r}\n" for x, y, z in cloud.tolist())
    elif fmt == "bin":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC + struct.pack("<I", len(cloud)))
            fh.write(np.ascontiguousarray(cloud, dtype="<f4").tobytes())
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")


def _read_binary(path, blob):
    if len(blob) < 8:
        raise CloudFormatError(f"{path}: truncated header at byte {len(blob)}")
    (n,) = struct.unpack_from("<I", blob, 4)
    need = 8 + 12 * n
    if len(blob) < need:
        raise CloudFormatError(f"{path}: expected {need} bytes for {n} points, file ends at byte {len(blob)}")
    if n == 0:
        raise CloudFormatError(f"{path}: cloud has no points")
    return np.frombuffer(blob, dtype="<f4", count=3 * n, offset=8).reshape(n, 3).astype(np.float64)


def read_cloud(path):
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == BINARY_MAGIC:
        return _read_binary(path, blob)
    rows = []
    for lineno, line in enumerate(blob.decode().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise CloudFormatError(f"{path}:{lineno}: not a number in {line.strip()!r}") from None
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    return np.array(rows)


def save_dataset(pairs, root):
    root = Path(root)
    for p in pairs:
        d = root / p.category
        d.mkdir(parents=True, exist_ok=True)
        write_cloud(p.partial, d / f"{p.id}.partial.xyz", "xyz")
        write_cloud(p.complete, d / f"{p.id}.complete.xyz", "xyz")


def load_dataset(root):
    """Read ``<root>/<category>/<id>.{partial,complete}.xyz`` pairs, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    pairs = []
    for part in sorted(root.glob("*/*.partial.xyz")):
        ident = part.name[: -len(".partial.xyz")]
        comp = part.with_name(f"{ident}.complete.xyz")
        if not comp.exists():
            raise FileNotFoundError(f"{comp} missing for {part}")
        pairs.append(ShapePair(read_cloud(part), read_cloud(comp), part.parent.name, ident))
    return sorted(pairs, key=lambda p: p.id)
