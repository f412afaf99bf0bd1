"""The six coordinate-network architectures and their checkpoint format.

Kinds:
    siren        sine trunk on raw coordinates
    pe_mlp       Fourier features -> relu trunk
    diner        full-resolution key table -> relu trunk
    ngp          multi-resolution hash grid -> relu trunk
    rhino_diner  [table keys, T(x)] -> relu trunk
    rhino_ngp    [hash grid features, T(x)] -> relu trunk

T(x) is a small continuous network (Fourier features, one hidden relu layer,
output width d_in) giving the trunk a differentiable path back to x.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from .diffcore import (
    Activation,
    ConfigError,
    Dense,
    Linear,
    Parameter,
    Sequential,
    UsageError,
    concat_backward,
    concat_forward,
)
from .encodings import FullResTable, MultiResHashGrid, PositionalEncoding, check_unit_cube

KINDS = ("siren", "pe_mlp", "diner", "ngp", "rhino_diner", "rhino_ngp")
TRANSFORMS = ("pe_mlp", "identity", "off")


@dataclass
class ModelConfig:
    kind: str
    hidden_layers: int = 2
    hidden_width: int = 64
    pe_freqs: int = 10
    siren_w0: float = 30.0
    # None: one node per sample of the task grid
    table_resolution: list[int] | None = None
    feature_width: int = 2
    hash_levels: int = 8
    log2_table_size: int = 14
    base_resolution: int = 16
    growth_factor: float = 1.5
    transform: str = "pe_mlp"
    transform_width: int = 64
    transform_freqs: int = 10

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"model.kind: unknown kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        if self.transform not in TRANSFORMS:
            problems.append(f"model.transform: expected one of {', '.join(TRANSFORMS)}")
        for name in ("hidden_layers", "hidden_width", "pe_freqs", "feature_width", "hash_levels",
                     "transform_width", "transform_freqs"):
            if getattr(self, name) < 1:
                problems.append(f"model.{name}: must be >= 1")
        if self.siren_w0 <= 0:
            problems.append("model.siren_w0: must be > 0")
        return problems


def _relu_bound(d_in: int) -> float:
    return float(np.sqrt(6.0 / d_in))


def _bias_bound(d_in: int) -> float:
    return float(1.0 / np.sqrt(d_in))


def relu_mlp(name, d_in, widths, d_out, rng, final_activation="identity"):
    relu = Activation("relu")
    layers, prev = [], d_in
    for i, w in enumerate(widths):
        layers.append(Dense(Linear.create(f"{name}.{i}", prev, w, rng, _relu_bound(prev), _bias_bound(prev)), relu))
        prev = w
    out = Linear.create(f"{name}.{len(widths)}", prev, d_out, rng, _relu_bound(prev), _bias_bound(prev))
    layers.append(Dense(out, Activation(final_activation)))
    return Sequential(layers)


def siren_mlp(name, d_in, widths, d_out, rng, w0):
    sine = Activation("sine", w0)
    layers, prev = [], d_in
    for i, w in enumerate(widths):
        bound = 1.0 / prev if i == 0 else _relu_bound(prev) / w0
        layers.append(Dense(Linear.create(f"{name}.{i}", prev, w, rng, bound, _bias_bound(prev)), sine))
        prev = w
    out = Linear.create(f"{name}.{len(widths)}", prev, d_out, rng, _relu_bound(prev) / w0, _bias_bound(prev))
    layers.append(Dense(out, Activation("identity")))
    return Sequential(layers)


class TransformNet:
    """T(x): Fourier features, one hidden relu layer, linear map back to d_in.

    ``mode="identity"`` returns x itself; ``mode="off"`` returns detached zeros
    of the same width (negative control).
    """

    def __init__(self, d_in: int, rng: np.random.Generator, mode: str = "pe_mlp",
                 width: int = 64, num_freqs: int = 10):
        if mode not in TRANSFORMS:
            raise ConfigError(f"unknown transform mode {mode!r}")
        self.d_in = d_in
        self.mode = mode
        self.pe = PositionalEncoding(d_in, num_freqs)
        self.net = relu_mlp("transform", self.pe.out_width, [width], d_in, rng) if mode == "pe_mlp" else None

    @property
    def out_width(self) -> int:
        return self.d_in

    def parameters(self) -> list[Parameter]:
        return self.net.parameters() if self.net is not None else []

    def forward(self, x):
        if self.mode == "identity":
            return np.array(x, dtype=float), None
        if self.mode == "off":
            return np.zeros((len(x), self.d_in)), None
        z, pe_cache = self.pe.forward(x)
        t, net_cache = self.net.forward(z)
        return t, (pe_cache, net_cache)

    def backward(self, cache, upstream):
        if self.mode == "identity":
            return upstream
        if self.mode == "off":
            return np.zeros_like(upstream)
        pe_cache, net_cache = cache
        return self.pe.backward(pe_cache, self.net.backward(net_cache, upstream))


class Model:
    """Encoder (optional) + optional T branch + trunk, with explicit backward.

    ``forward(coords, record=True)`` keeps the context needed by ``backward``;
    plain ``predict`` leaves the model untouched.
    """

    def __init__(self, kind, d_in, d_out, encoder, transform, trunk, config):
        self.kind = kind
        self.d_in = d_in
        self.d_out = d_out
        self.encoder = encoder
        self.transform = transform
        self.trunk = trunk
        self.config = config
        self._cache = None

    @property
    def trunk_in_width(self) -> int:
        return self.trunk.layers[0].linear.d_in

    @property
    def has_coord_path(self) -> bool:
        """Whether backward returns a gradient w.r.t. the coordinates."""
        return self.encoder is None or self.encoder.coord_gradient or self.transform is not None

    def parameters(self) -> list[Parameter]:
        params = []
        if self.encoder is not None:
            params += self.encoder.parameters()
        if self.transform is not None:
            params += self.transform.parameters()
        return params + self.trunk.parameters()

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grads()

    def trunk_input(self, coords):
        """Trunk input (hash features then T(x), or encoded x) and its cache."""
        coords = check_unit_cube(coords, self.d_in)
        if self.encoder is None:
            return coords, None
        feats, enc_cache = self.encoder.forward(coords)
        if self.transform is None:
            return feats, (enc_cache, None, None)
        t, t_cache = self.transform.forward(coords)
        z, split = concat_forward(feats, t)
        return z, (enc_cache, t_cache, split)

    def forward(self, coords, record: bool = False):
        z, in_cache = self.trunk_input(coords)
        out, trunk_cache = self.trunk.forward(z)
        if record:
            self._cache = (in_cache, trunk_cache)
        return out

    def predict(self, coords, chunk: int = 65536):
        coords = np.asarray(coords, dtype=float)
        if len(coords) <= chunk:
            return self.forward(coords)
        return np.concatenate([self.forward(coords[i:i + chunk]) for i in range(0, len(coords), chunk)])

    def backward(self, loss_grad):
        """Accumulate parameter gradients; return d(loss)/d(coords) or None when
        no path reaches the coordinates (pure table models)."""
        if self._cache is None:
            raise UsageError("backward called without a recorded forward pass")
        in_cache, trunk_cache = self._cache
        self._cache = None
        dz = self.trunk.backward(trunk_cache, np.asarray(loss_grad, dtype=float))
        if self.encoder is None:
            return dz
        enc_cache, t_cache, split = in_cache
        if self.transform is None:
            return self.encoder.backward(enc_cache, dz)
        d_feat, d_t = concat_backward(split, dz)
        dx_enc = self.encoder.backward(enc_cache, d_feat)
        if self.transform.mode == "off":
            return dx_enc
        dx = self.transform.backward(t_cache, d_t)
        return dx if dx_enc is None else dx + dx_enc

    def trunk_predict(self, z):
        out, _ = self.trunk.forward(z)
        return out


def build_model(kind: str, d_in: int, d_out: int, config: ModelConfig | None = None,
                rng: np.random.Generator | int | None = None, key_lattice=None) -> Model:
    """Construct a model.

    ``key_lattice`` is ``(shape, extent)`` of the task's training lattice; the
    key table gets one node per training coordinate from it when
    ``config.table_resolution`` is unset.
    """
    config = config or ModelConfig(kind=kind)
    if kind != config.kind:
        config = ModelConfig(**{**config.__dict__, "kind": kind})
    problems = config.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    widths = [config.hidden_width] * config.hidden_layers

    encoder = None
    if kind == "pe_mlp":
        encoder = PositionalEncoding(d_in, config.pe_freqs)
    elif kind in ("diner", "rhino_diner"):
        if config.table_resolution is not None:
            res, extent = list(config.table_resolution), 1.0
        elif key_lattice is not None:
            res, extent = list(key_lattice[0]), key_lattice[1]
        else:
            raise ConfigError("diner needs table_resolution or a task training lattice")
        if len(res) != d_in:
            raise ConfigError(f"table_resolution has {len(res)} dims, coordinates have {d_in}")
        encoder = FullResTable(res, config.feature_width, rng, extent=extent)
    elif kind in ("ngp", "rhino_ngp"):
        encoder = MultiResHashGrid(d_in, config.hash_levels, config.log2_table_size, config.feature_width,
                                   config.base_resolution, config.growth_factor, rng)

    transform = None
    if kind.startswith("rhino_"):
        transform = TransformNet(d_in, rng, config.transform, config.transform_width, config.transform_freqs)

    trunk_in = d_in if encoder is None else encoder.out_width
    if transform is not None:
        trunk_in += transform.out_width
    if kind == "siren":
        trunk = siren_mlp("trunk", trunk_in, widths, d_out, rng, config.siren_w0)
    else:
        trunk = relu_mlp("trunk", trunk_in, widths, d_out, rng)
    return Model(kind, d_in, d_out, encoder, transform, trunk, config)


def _snapshot_grads(model):
    return [p.grads.copy() for p in model.parameters()]


def _restore_grads(model, saved):
    for p, g in zip(model.parameters(), saved):
        p.grads[...] = g


def analytic_coord_jacobian(model: Model, x) -> np.ndarray | None:
    """d(output)/dx from the model's own backward pass, shape (n, d_out, d_in).

    Parameter gradients are left as they were. None for models without a
    coordinate path.
    """
    if not model.has_coord_path:
        return None
    x = np.atleast_2d(np.asarray(x, dtype=float))
    saved = _snapshot_grads(model)
    jac = np.zeros((len(x), model.d_out, model.d_in))
    for j in range(model.d_out):
        model.forward(x, record=True)
        seed = np.zeros((len(x), model.d_out))
        seed[:, j] = 1.0
        jac[:, j, :] = model.backward(seed)
    _restore_grads(model, saved)
    return jac


def fd_coord_jacobian(fn, x, d_out: int, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` (n x d_in -> n x d_out)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jac = np.zeros((len(x), d_out, x.shape[1]))
    for k in range(x.shape[1]):
        step = np.zeros_like(x)
        step[:, k] = h
        jac[:, :, k] = (fn(x + step) - fn(x - step)) / (2 * h)
    return jac


def coord_jacobian_norm(model: Model, x, h: float = 1e-4) -> float:
    """Frobenius norm of the full-model coordinate Jacobian at one point, by
    central differences (so table interpolation slopes are included)."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(np.linalg.norm(fd_coord_jacobian(model.forward, x, model.d_out, h)))


# --- checkpoint format -------------------------------------------------------
# magic, u32 count, then per parameter: u32 name length, utf-8 name,
# u32 rows, u32 cols, rows*cols little-endian float64 values.
CHECKPOINT_MAGIC = b"INRCKPT1"


def save_checkpoint(model: Model, path) -> None:
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<II", *p.shape))
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        values = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += 8 * rows * cols
        out[name] = values.astype(np.float64)
    return out


def load_checkpoint(model: Model, path) -> None:
    stored = read_checkpoint(path)
    for p in model.parameters():
        if p.name not in stored:
            raise ValueError(f"checkpoint lacks parameter {p.name!r}")
        if stored[p.name].shape != p.shape:
            raise ValueError(f"{p.name}: checkpoint shape {stored[p.name].shape} != {p.shape}")
        p.values[...] = stored[p.name]


def config_fields() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
