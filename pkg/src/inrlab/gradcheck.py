"""Central finite-difference checks for every differentiable piece.

Each ``check_*`` function builds one random double-precision configuration,
compares analytic gradients against central differences and returns the
worst violation ratio ``|a - n| / (atol + rtol * max(|a|, |n|))``; a
configuration passes when that ratio is at most 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Activation, Dense, Linear, concat_backward, concat_forward, mse_loss
from .encodings import FullResTable, MultiResHashGrid, PositionalEncoding
from .models import KINDS, ModelConfig, TransformNet, build_model

H = 1e-5
RTOL = 1e-5
ATOL = 1e-8


def violation(analytic, numeric, rtol=RTOL, atol=ATOL) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / scale, initial=0.0))


def fd_entries(objective, array, positions, h=H):
    """d objective / d array[pos] for each flat position, perturbing in place.

    Central differences at steps h and h/2 combined by Richardson
    extrapolation; plain O(h^2) differences are too coarse for the top
    Fourier frequencies (2^9 pi) at h = 1e-5.
    """
    flat = array.reshape(-1)
    out = np.empty(len(positions))

    def central(pos, step):
        orig = flat[pos]
        flat[pos] = orig + step
        up = objective()
        flat[pos] = orig - step
        down = objective()
        flat[pos] = orig
        return (up - down) / (2 * step)

    for i, pos in enumerate(positions):
        out[i] = (4.0 * central(pos, h / 2) - central(pos, h)) / 3.0
    return out


def _pick(rng, size, k):
    return rng.choice(size, size=min(k, size), replace=False)


def _check_layer(rng, forward, backward, x, params, per_param=None):
    """Project the output with a random matrix R; objective sum(R * y)."""
    y, cache = forward(x)
    R = rng.normal(size=y.shape)
    for p in params:
        p.zero_grads()
    dx = backward(cache, R)

    def objective():
        return float(np.sum(R * forward(x)[0]))

    worst = 0.0
    if dx is not None:
        pos = np.arange(x.size)
        worst = max(worst, violation(dx.reshape(-1), fd_entries(objective, x, pos)))
    for p in params:
        pos = np.arange(p.size) if per_param is None else _pick(rng, p.size, per_param)
        worst = max(worst, violation(p.grads.reshape(-1)[pos], fd_entries(objective, p.values, pos)))
    return worst


def check_linear(rng):
    n, d_in, d_out = rng.integers(1, 6, size=3)
    lin = Linear.create("lin", d_in, d_out, rng, 1.0)
    x = rng.normal(size=(n, d_in))
    return _check_layer(rng, lin.forward, lin.backward, x, lin.parameters())


def check_activation(rng, kind):
    act = Activation(kind, w0=float(rng.uniform(1.0, 30.0)))
    x = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    if kind == "relu":
        # keep clear of the kink so central differences are valid
        x = np.where(np.abs(x) < 1e-3, x + np.sign(x + 1e-12) * 1e-2, x)
    return _check_layer(rng, act.forward, act.backward, x, [])


def check_dense_sine(rng):
    n, d_in, d_out = rng.integers(1, 6, size=3)
    layer = Dense(Linear.create("sine", d_in, d_out, rng, 1.0 / d_in), Activation("sine", 30.0))
    x = rng.uniform(-1, 1, size=(n, d_in))
    return _check_layer(rng, layer.forward, layer.backward, x, layer.parameters())


def check_concat(rng):
    n, p, q = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(0, 4))
    a = rng.normal(size=(n, p))
    b = rng.normal(size=(n, q))
    out, split = concat_forward(a, b)
    R = rng.normal(size=out.shape)
    da, db = concat_backward(split, R)
    worst = violation(da.reshape(-1), fd_entries(lambda: float(np.sum(R * concat_forward(a, b)[0])), a, np.arange(a.size)))
    if q:
        worst = max(worst, violation(db.reshape(-1), fd_entries(lambda: float(np.sum(R * concat_forward(a, b)[0])), b, np.arange(b.size))))
    return worst


def check_mse(rng):
    shape = tuple(rng.integers(1, 5, size=2))
    pred = rng.normal(size=shape)
    target = rng.normal(size=shape)
    _, grad = mse_loss(pred, target)
    num = fd_entries(lambda: mse_loss(pred, target)[0], pred, np.arange(pred.size))
    return violation(grad.reshape(-1), num, rtol=1e-6)


def check_positional(rng):
    d = int(rng.integers(1, 4))
    pe = PositionalEncoding(d, int(rng.integers(1, 11)))
    x = rng.uniform(0, 1, size=(int(rng.integers(1, 5)), d))
    return _check_layer(rng, pe.forward, pe.backward, x, [])


def check_fullres(rng):
    d = int(rng.integers(1, 4))
    res = rng.integers(2, 6, size=d)
    table = FullResTable(res, int(rng.integers(1, 4)), rng)
    table.entries.values[...] = rng.normal(size=table.entries.shape)
    x = rng.uniform(0, 1, size=(int(rng.integers(1, 6)), d))
    return _check_layer(rng, table.forward, table.backward, x, table.parameters())


def check_hashgrid(rng):
    d = int(rng.integers(1, 4))
    grid = MultiResHashGrid(d, num_levels=int(rng.integers(1, 4)), log2_table_size=int(rng.integers(3, 7)),
                            feature_width=int(rng.integers(1, 3)), base_resolution=int(rng.integers(2, 6)),
                            growth_factor=float(rng.uniform(1.2, 2.0)), rng=rng)
    for p in grid.parameters():
        p.values[...] = rng.normal(size=p.shape)
    x = rng.uniform(0, 1, size=(int(rng.integers(1, 6)), d))
    return _check_layer(rng, grid.forward, grid.backward, x, grid.parameters(), per_param=12)


def straddles_kink(preact, x, h=H) -> bool:
    """True when moving any single entry of x by +-h flips a relu pre-activation
    sign; central differences are meaningless across the kink."""
    base = preact(x) > 0
    flat = x.reshape(-1)
    for pos in range(flat.size):
        for step in (h, -h):
            orig = flat[pos]
            flat[pos] = orig + step
            flipped = np.any((preact(x) > 0) != base)
            flat[pos] = orig
            if flipped:
                return True
    return False


def check_transform(rng):
    d = int(rng.integers(1, 4))
    t = TransformNet(d, rng, width=int(rng.integers(2, 9)), num_freqs=int(rng.integers(1, 11)))
    hidden = t.net.layers[0].linear

    def preact(x):
        return hidden.forward(t.pe.forward(x)[0])[0]

    n = int(rng.integers(1, 5))
    x = rng.uniform(0, 1, size=(n, d))
    while straddles_kink(preact, x):
        x = rng.uniform(0, 1, size=(n, d))
    return _check_layer(rng, t.forward, t.backward, x, t.parameters(), per_param=10)


def small_model(kind, rng, d_in=None, d_out=None):
    """A randomly sized instance of ``kind`` that is cheap to difference."""
    d_in = d_in or int(rng.integers(1, 4))
    d_out = d_out or int(rng.integers(1, 4))
    cfg = ModelConfig(kind=kind, hidden_layers=int(rng.integers(1, 3)), hidden_width=int(rng.integers(3, 9)),
                      pe_freqs=int(rng.integers(1, 5)), table_resolution=list(rng.integers(2, 5, size=d_in)),
                      feature_width=int(rng.integers(1, 3)), hash_levels=int(rng.integers(1, 3)),
                      log2_table_size=int(rng.integers(3, 7)), base_resolution=int(rng.integers(2, 5)),
                      transform_width=int(rng.integers(3, 9)), transform_freqs=int(rng.integers(1, 5)))
    model = build_model(kind, d_in, d_out, cfg, rng)
    for p in model.parameters():
        if p.group == "table":
            p.values[...] = rng.normal(size=p.shape)
    return model


def t_path_function(model, x0):
    """The model with its table features frozen at their values for ``x0``:
    x -> trunk([H(x0), T(x)]). Its derivative is the coordinate gradient the
    backward pass is supposed to produce for rhino kinds."""
    feats, _ = model.encoder.forward(x0)

    def fn(x):
        t, _ = model.transform.forward(x)
        return model.trunk_predict(np.concatenate([feats, t], axis=1))

    return fn


def check_model(rng, kind, per_param=6):
    """Loss gradient w.r.t. sampled entries of every parameter and, where a
    coordinate path exists, w.r.t. the coordinates."""
    model = small_model(kind, rng)
    n = int(rng.integers(1, 6))
    x = rng.uniform(0.05, 0.95, size=(n, model.d_in))
    target = rng.normal(size=(n, model.d_out))
    model.zero_grads()
    _, g = mse_loss(model.forward(x, record=True), target)
    dx = model.backward(g)

    def objective():
        return mse_loss(model.forward(x), target)[0]

    worst = 0.0
    for p in model.parameters():
        touched = np.flatnonzero(p.grads.reshape(-1))
        pos = np.union1d(_pick(rng, p.size, per_param), touched[:per_param])
        worst = max(worst, violation(p.grads.reshape(-1)[pos], fd_entries(objective, p.values, pos)))
    if dx is not None:
        if model.encoder is not None and not model.encoder.coord_gradient:
            fn = t_path_function(model, x)
        else:
            fn = model.forward
        num = fd_entries(lambda: mse_loss(fn(x), target)[0], x, np.arange(x.size))
        worst = max(worst, violation(dx.reshape(-1), num))
    return worst


OP_CHECKS = {
    "linear": check_linear,
    "relu": lambda rng: check_activation(rng, "relu"),
    "sine": lambda rng: check_activation(rng, "sine"),
    "identity": lambda rng: check_activation(rng, "identity"),
    "sine_layer": check_dense_sine,
    "concat": check_concat,
    "mse": check_mse,
    "positional_encoding": check_positional,
    "fullres_lookup": check_fullres,
    "hashgrid_encode": check_hashgrid,
    "transform": check_transform,
}


@dataclass
class GradCheckResult:
    name: str
    configs: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst <= 1.0


def run_gradcheck(n_configs: int = 100, seed: int = 0, names=None) -> list[GradCheckResult]:
    checks = dict(OP_CHECKS)
    checks.update({f"model:{k}": (lambda rng, k=k: check_model(rng, k)) for k in KINDS})
    results = []
    for i, (name, fn) in enumerate(checks.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        worst = max(fn(rng) for _ in range(n_configs))
        results.append(GradCheckResult(name, n_configs, worst))
    return results
