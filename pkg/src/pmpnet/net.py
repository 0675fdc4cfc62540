"""The point-moving network.

Each step encodes the current cloud with a three-level set-abstraction
encoder, propagates the global feature back to every point through three
feature-propagation levels (each followed by a recurrent path-aggregation
cell that mixes in the previous step's features), and predicts a bounded
per-point displacement.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geom import ContractError, _xyz, ball_query, farthest_point_sample, group, three_nn_interpolate
from .tensor import ShapeError, Tensor, as_tensor, concat, matmul, max_, relu, reshape, sigmoid, take, tanh

RPA_VARIANTS = ("rpa", "gru", "add", "nopath")
DEFAULT_RADII = (1.0, 0.1, 0.01)


class ConfigError(ValueError):
    pass


def _tuple(x):
    return tuple(_tuple(v) for v in x) if isinstance(x, (list, tuple)) else x


@dataclass
class NetConfig:
    """Architecture and sampling configuration.

    The defaults are the desk-scale variant (256 points, 64/16 centers);
    :meth:`full` gives the full 2048-point layout.
    """

    n_points: int = 256
    sa_centers: tuple = (64, 16)
    sa_radii: tuple = (0.2, 0.4)
    sa_samples: tuple = (32, 32)
    sa_mlps: tuple = ((64, 64, 128), (128, 128, 256), (256, 512, 1024))
    fp_mlps: tuple = ((256, 256), (256, 128), (128, 128, 128))
    rpa_widths: tuple = None
    head_mlp: tuple = (128, 64)
    noise_dim: int = 32
    noise_std: float = 1.0
    steps: int = 3
    radii: tuple = DEFAULT_RADII
    rpa_variant: str = "rpa"
    share_weights: bool = True
    resample_noise: bool = False

    def __post_init__(self):
        for f in fields(self):
            value = _tuple(getattr(self, f.name))
            # a one-element list read from a config file arrives as a scalar
            if f.type is tuple and isinstance(value, (int, float)):
                value = (value,)
            setattr(self, f.name, value)
        if self.rpa_widths is None:
            self.rpa_widths = tuple(m[-1] for m in self.fp_mlps)
        self.validate()

    @classmethod
    def full(cls, **overrides):
        base = dict(n_points=2048, sa_centers=(512, 128))
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.steps < 1 or len(self.radii) != self.steps:
            raise ConfigError(f"radius schedule {self.radii} does not match steps={self.steps}")
        if any(r <= 0 for r in self.radii):
            raise ConfigError("radii must be positive")
        if self.rpa_variant not in RPA_VARIANTS:
            raise ConfigError(f"unknown rpa variant {self.rpa_variant!r}")
        if len(self.sa_centers) != 2 or len(self.sa_mlps) != 3 or len(self.fp_mlps) != 3:
            raise ConfigError("the encoder has two sampled levels plus a global level, and three FP levels")
        if not self.n_points >= self.sa_centers[0] >= self.sa_centers[1] >= 1:
            raise ConfigError(f"need n_points >= centers, got {self.n_points} and {self.sa_centers}")
        if self.noise_dim < 0 or self.noise_std < 0:
            raise ConfigError("noise dimension and stddev must be non-negative")
        if len(self.rpa_widths) != 3:
            raise ConfigError("one RPA width per feature-propagation level")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepTrace:
    step: int
    input: Tensor
    displacement: Tensor
    output: Tensor
    radius: float
    gates: dict = field(default_factory=dict, repr=False)

    @property
    def path_length(self):
        return np.linalg.norm(self.displacement.data, axis=1)


# ---------------------------------------------------------------- parameters


def _prefix(cfg, k):
    return "" if cfg.share_weights else f"step{k}."


def _rpa_prefix(k, level):
    return f"rpa.step{k}.level{level}."


def param_shapes(cfg):
    """Ordered mapping of parameter name to shape for ``cfg``."""
    shapes = OrderedDict()

    def mlp(prefix, c_in, widths):
        for i, w in enumerate(widths):
            shapes[f"{prefix}{i}.weight"] = (c_in, w)
            shapes[f"{prefix}{i}.bias"] = (w,)
            c_in = w

    sa_out = [m[-1] for m in cfg.sa_mlps]
    fp_out = [m[-1] for m in cfg.fp_mlps]
    fp_in = [sa_out[2] + sa_out[1], cfg.rpa_widths[0] + sa_out[0], cfg.rpa_widths[1] + 3]
    blocks = range(1, cfg.steps + 1) if not cfg.share_weights else [1]
    for k in blocks:
        p = _prefix(cfg, k)
        mlp(f"{p}sa1.", 3, cfg.sa_mlps[0])
        mlp(f"{p}sa2.", 3 + sa_out[0], cfg.sa_mlps[1])
        mlp(f"{p}sa3.", 3 + sa_out[1], cfg.sa_mlps[2])
        for lvl in range(3):
            mlp(f"{p}fp{lvl + 1}.", fp_in[lvl], cfg.fp_mlps[lvl])
        mlp(f"{p}head.", cfg.rpa_widths[2] + cfg.noise_dim, tuple(cfg.head_mlp) + (3,))
    for k in range(1, cfg.steps + 1):
        for lvl in range(3):
            c_in, c = fp_out[lvl], cfg.rpa_widths[lvl]
            p = _rpa_prefix(k, lvl + 1)
            if cfg.rpa_variant in ("rpa", "gru"):
                for gate in ("z", "r"):
                    shapes[f"{p}W_{gate}"] = (c_in + c, c)
                    shapes[f"{p}b_{gate}"] = (c,)
                shapes[f"{p}W_h"] = (c + c_in, c)
                shapes[f"{p}b_h"] = (c,)
            if c_in != c:
                shapes[f"{p}W_proj"] = (c_in, c)
    return shapes


class NetworkParams(OrderedDict):
    """Named, tracked parameter tensors."""

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def num_values(self):
        return sum(t.data.size for t in self.values())

    def copy(self):
        return NetworkParams((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def detached(self):
        """Untracked views sharing the same arrays, for inference without a graph."""
        return NetworkParams((k, Tensor(v.data)) for k, v in self.items())

    def arrays(self):
        return OrderedDict((k, v.data) for k, v in self.items())

    @classmethod
    def from_arrays(cls, arrays):
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True)) for k, v in arrays.items())


def init_params(cfg, rng, scheme="he"):
    """Random initial weights; biases start at zero.

    ``"he"`` draws weights from N(0, 2/fan_in), which keeps activation scale
    through the un-normalised relu stacks.  ``"uniform"`` draws weights and
    biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    params = NetworkParams()
    fan_in = 1
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            fan_in = shape[0]
        if scheme == "he":
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape) if len(shape) == 2 else np.zeros(shape)
        elif scheme == "uniform":
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        else:
            raise ConfigError(f"unknown init scheme {scheme!r}")
        params[name] = Tensor(value, requires_grad=True)
    return params


def zero_params(cfg):
    return NetworkParams((k, Tensor(np.zeros(s), requires_grad=True)) for k, s in param_shapes(cfg).items())


# ---------------------------------------------------------------- layers


def _mlp(x, params, prefix, final_relu=True):
    """Shared per-point MLP over the last axis of ``x``."""
    lead = x.shape[:-1]
    h = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    i = 0
    while f"{prefix}{i}.weight" in params:
        h = matmul(h, params[f"{prefix}{i}.weight"]) + params[f"{prefix}{i}.bias"]
        i += 1
        if final_relu or f"{prefix}{i}.weight" in params:
            h = relu(h)
    if i == 0:
        raise ConfigError(f"no parameters under {prefix!r}")
    return reshape(h, lead + (h.shape[-1],)) if len(lead) != 1 else h


@dataclass
class Encoding:
    xyz: list  # level 0 (input), 1, 2 coordinate tensors
    features: list  # level 1 and 2 per-center features
    global_feature: Tensor  # 1 x C


def encode(cloud, params, cfg, step=1):
    """Set-abstraction encoder: two sampled/grouped levels and a global level."""
    xyz0 = as_tensor(cloud)
    n = _xyz(xyz0).shape[0]
    if n < cfg.sa_centers[0]:
        raise ContractError(f"cloud of {n} points is smaller than the first level ({cfg.sa_centers[0]})")
    p = _prefix(cfg, step)
    xyz, feats = [xyz0], []
    prev_feat = None
    for lvl in range(2):
        src = xyz[-1]
        centers = farthest_point_sample(src, cfg.sa_centers[lvl])
        nb = ball_query(src, centers, cfg.sa_radii[lvl], cfg.sa_samples[lvl])
        grouped = group(src, prev_feat, nb)
        prev_feat = max_(_mlp(grouped, params, f"{p}sa{lvl + 1}."), axis=1)
        xyz.append(take(src, centers))
        feats.append(prev_feat)
    pooled = _mlp(concat([xyz[2], prev_feat]), params, f"{p}sa3.")
    return Encoding(xyz=xyz, features=feats, global_feature=reshape(max_(pooled, axis=0), (1, -1)))


def rpa_cell(f, h_prev, params, prefix, variant="rpa", gates=None):
    """Recurrent path aggregation for one (step, level).

    ``rpa``: z, r = sigmoid(W[f:h] + b); h_hat = relu(W_h[r*h : f] + b_h);
    out = z*h_hat + (1-z)*f'.  ``f'`` is ``f`` projected to the state width
    when the widths differ.  ``gru`` keeps the previous state instead of
    ``f'`` and uses a tanh candidate; ``add`` and ``nopath`` are the
    ablation baselines.
    """
    f, h_prev = as_tensor(f), as_tensor(h_prev)
    if f.ndim != 2 or h_prev.ndim != 2 or f.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"rpa_cell: incompatible input {f.shape} and state {h_prev.shape}")
    proj = params.get(f"{prefix}W_proj")
    fp = matmul(f, proj) if proj is not None else f
    if fp.shape[1] != h_prev.shape[1]:
        raise ShapeError(f"rpa_cell: input width {f.shape[1]} vs state width {h_prev.shape[1]}")
    if variant == "nopath":
        return fp
    if variant == "add":
        return fp + h_prev
    fh = concat([f, h_prev])
    z = sigmoid(matmul(fh, params[f"{prefix}W_z"]) + params[f"{prefix}b_z"])
    r = sigmoid(matmul(fh, params[f"{prefix}W_r"]) + params[f"{prefix}b_r"])
    pre = matmul(concat([r * h_prev, f]), params[f"{prefix}W_h"]) + params[f"{prefix}b_h"]
    if gates is not None:
        gates["z"], gates["r"] = z.data, r.data
    if variant == "gru":
        return z * tanh(pre) + (1.0 - z) * h_prev
    return z * relu(pre) + (1.0 - z) * fp


def initial_state(cfg, n_points):
    sizes = (cfg.sa_centers[1], cfg.sa_centers[0], n_points)
    return [Tensor(np.zeros((s, w))) for s, w in zip(sizes, cfg.rpa_widths)]


def propagate(enc, states, params, cfg, step, gates=None):
    """Three feature-propagation levels, coarse to fine, each followed by an RPA cell.

    Returns the final per-point feature and the new per-level states.
    """
    p = _prefix(cfg, step)
    origin = Tensor(np.zeros((1, 3)))
    coarse_xyz = [origin, enc.xyz[2], enc.xyz[1]]
    fine_xyz = [enc.xyz[2], enc.xyz[1], enc.xyz[0]]
    skips = [enc.features[1], enc.features[0], enc.xyz[0]]
    h = enc.global_feature
    new_states = []
    for lvl in range(3):
        up = three_nn_interpolate(coarse_xyz[lvl], fine_xyz[lvl], h)
        f = _mlp(concat([up, skips[lvl]]), params, f"{p}fp{lvl + 1}.")
        g = {} if gates is not None else None
        h = rpa_cell(f, states[lvl], params, _rpa_prefix(step, lvl + 1), cfg.rpa_variant, g)
        if gates is not None:
            gates[lvl + 1] = g
        new_states.append(h)
    return h, new_states


def displacement_head(h, noise, params, cfg, step):
    """``radius_k * tanh(MLP([h : noise]))``, so each component is below ``radius_k``."""
    if not 1 <= step <= cfg.steps:
        raise ContractError(f"step {step} outside 1..{cfg.steps}")
    x = concat([h, noise]) if noise is not None and noise.shape[1] > 0 else h
    raw = tanh(_mlp(x, params, f"{_prefix(cfg, step)}head.", final_relu=False))
    # tanh rounds to exactly 1.0 once saturated; scaling by the next double
    # below the radius keeps the bound strict
    return raw * float(np.nextafter(cfg.radii[step - 1], 0.0))


def sample_noise(n, dim=32, stddev=1.0, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    if dim < 0:
        raise ContractError("noise dimension must be >= 0")
    return Tensor(rng.normal(0.0, stddev, size=(n, dim)) if dim else np.zeros((n, 0)))


def forward(cloud, params, cfg, rng=None, noise=None, record_gates=False):
    """Run all steps; returns one :class:`StepTrace` per step.

    ``noise`` may be one ``N x D`` array (shared by all steps) or a list with
    one per step.  When omitted it is drawn from ``rng``: once per call, or
    once per step if ``cfg.resample_noise``.
    """
    cur = as_tensor(cloud)
    n = _xyz(cur).shape[0]
    if noise is None:
        draws = cfg.steps if cfg.resample_noise else 1
        noise = [sample_noise(n, cfg.noise_dim, cfg.noise_std, rng) for _ in range(draws)]
    elif not isinstance(noise, (list, tuple)):
        noise = [noise]
    noise = [as_tensor(z) for z in noise]
    states = initial_state(cfg, n)
    traces = []
    for k in range(1, cfg.steps + 1):
        gates = {} if record_gates else None
        enc = encode(cur, params, cfg, k)
        h, states = propagate(enc, states, params, cfg, k, gates)
        disp = displacement_head(h, noise[(k - 1) % len(noise)], params, cfg, k)
        out = cur + disp
        traces.append(StepTrace(k, cur, disp, out, cfg.radii[k - 1], gates or {}))
        cur = out
    return traces


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"PMPNCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg, params, meta=None):
    """Binary little-endian container plus a ``.manifest.txt`` listing."""
    path = Path(path)
    header = json.dumps({"config": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    lines = [f"# pmpnet checkpoint v{CHECKPOINT_VERSION}", f"# values {params.num_values()}"]
    lines += [f"{name}\t{'x'.join(map(str, t.shape))}" for name, t in params.items()]
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns ``(cfg, params, meta)``; raises :class:`ConfigError` on layout mismatch."""
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a pmpnet checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(blob[off:off + hlen])
    off += hlen
    cfg = NetConfig.from_dict(header["config"])
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        name = blob[off + 2:off + 2 + nlen].decode()
        off += 2 + nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        shape = struct.unpack_from(f"<{ndim}I", blob, off + 1)
        off += 1 + 4 * ndim
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    expected = param_shapes(cfg)
    got = OrderedDict((k, v.shape) for k, v in arrays.items())
    if dict(got) != {k: tuple(v) for k, v in expected.items()}:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ConfigError(f"{path}: parameters do not match the stored architecture (missing {missing[:3]}, extra {extra[:3]})")
    return cfg, NetworkParams.from_arrays(arrays), header.get("meta", {})
