"""Datasets, metrics and the training loop.

Three supervised coordinate tasks share one interface (``train_coords``,
``train_attrs``, ``sample_batch``, ``evaluate``):

* :class:`StripeTask` - 1-D piecewise-constant colour bands, alternate points held out
* :class:`ImageTask`  - 2-D RGB image, every second row and column used for training
* :class:`SdfTask`    - analytic 3-D signed distance, scored by occupancy IoU
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import ConfigError, NonFiniteError, UsageError, mse_loss
from .optim import Adam

PSNR_CAP = 100.0


def psnr(pred, gt, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB on ``pred`` clamped to [0, peak]."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ConfigError(f"psnr shape mismatch: {pred.shape} vs {gt.shape}")
    err = np.mean((np.clip(pred, 0.0, peak) - gt) ** 2)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / err)))


def iou(pred_sdf, gt_sdf) -> float:
    """Intersection over union of the occupied sets {sdf <= 0}."""
    pred_sdf = np.asarray(pred_sdf)
    gt_sdf = np.asarray(gt_sdf)
    if pred_sdf.shape != gt_sdf.shape:
        raise ConfigError(f"iou shape mismatch: {pred_sdf.shape} vs {gt_sdf.shape}")
    a, b = pred_sdf <= 0, gt_sdf <= 0
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def lattice(shape) -> np.ndarray:
    """Node coordinates i / (n - 1) of a regular grid, row-major, shape (prod, d)."""
    axes = [np.arange(n) / (n - 1) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


STRIPE_PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.95, 0.60, 0.05],
    [0.95, 0.95, 0.20],
    [0.20, 0.80, 0.20],
    [0.10, 0.70, 0.85],
    [0.15, 0.25, 0.90],
    [0.55, 0.15, 0.75],
    [0.10, 0.10, 0.10],
])


class _GridTask:
    """Shared logic for tasks sampled on a regular lattice with a fixed split."""

    coords: np.ndarray
    attrs: np.ndarray
    train_mask: np.ndarray  # flat, one entry per lattice node

    def _finish_split(self):
        self.train_index = np.flatnonzero(self.train_mask)
        self.heldout_index = np.flatnonzero(~self.train_mask)
        self.train_coords = self.coords[self.train_index]
        self.train_attrs = self.attrs[self.train_index]

    @property
    def d_in(self) -> int:
        return self.coords.shape[1]

    @property
    def d_out(self) -> int:
        return self.attrs.shape[1]

    def sample_batch(self, rng: np.random.Generator, iteration: int, batch_size: int | None):
        if batch_size is None or batch_size >= len(self.train_index):
            idx = self.train_index
        else:
            idx = np.sort(rng.choice(self.train_index, size=batch_size, replace=False))
        if not np.all(self.train_mask[idx]):
            raise UsageError("held-out coordinate in a training batch")
        return self.coords[idx], self.attrs[idx]

    def evaluate(self, model) -> dict:
        pred = model.predict(self.coords)
        tr, ho = self.train_index, self.heldout_index
        clipped = np.clip(pred, 0.0, 1.0)
        out = {
            "train_mse": float(np.mean((clipped[tr] - self.attrs[tr]) ** 2)),
            "train_psnr": psnr(pred[tr], self.attrs[tr]),
        }
        if len(ho):
            out["heldout_mse"] = float(np.mean((clipped[ho] - self.attrs[ho]) ** 2))
            out["heldout_psnr"] = psnr(pred[ho], self.attrs[ho])
        out["all_psnr"] = psnr(pred, self.attrs)
        return out


class StripeTask(_GridTask):
    """``n_points`` samples of ``n_bands`` equal-width colour bands on [0, 1].

    With ``band_width=1`` every odd position is held out, so each held-out point
    sits between two trained neighbours; larger values hold out runs.
    """

    kind = "stripe"
    metric_names = ("train_psnr", "heldout_psnr", "heldout_mse")

    def __init__(self, n_points: int = 256, n_bands: int = 8, band_width: int = 1):
        if n_bands > len(STRIPE_PALETTE):
            raise ConfigError(f"at most {len(STRIPE_PALETTE)} bands")
        if band_width < 1 or n_points < 3:
            raise ConfigError("stripe needs n_points >= 3 and band_width >= 1")
        self.n_points = n_points
        self.n_bands = n_bands
        self.palette = STRIPE_PALETTE[:n_bands]
        pos = np.arange(n_points)
        self.band = pos * n_bands // n_points
        self.coords = lattice((n_points,))
        self.attrs = self.palette[self.band]
        self.train_mask = (pos // band_width) % 2 == 0
        self.train_mask[-1] = True  # last point needs a trained neighbour on each side
        if band_width == 1:
            # keys on the even positions; the final point reads the last key
            n_keys = (n_points + 1) // 2
            self.key_lattice = ((n_keys,), 2 * (n_keys - 1) / (n_points - 1))
        else:
            self.key_lattice = ((n_points,), 1.0)
        self._finish_split()

    def nearest_band(self, colors) -> np.ndarray:
        d = ((np.asarray(colors)[:, None, :] - self.palette[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def procedural_image(size: int = 64) -> np.ndarray:
    """Deterministic RGB test image in [0, 1]: smooth shading, oriented waves,
    hard-edged disks and a checker patch. Shape (size, size, 3)."""
    y, x = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.empty((size, size, 3))
    img[..., 0] = 0.5 + 0.3 * np.sin(2 * np.pi * (1.5 * x + 0.8 * y)) + 0.1 * np.cos(2 * np.pi * 5 * y)
    img[..., 1] = 0.45 + 0.3 * np.cos(2 * np.pi * (2.2 * x - 1.1 * y)) * (0.6 + 0.4 * y)
    img[..., 2] = 0.35 + 0.4 * x * y + 0.15 * np.sin(2 * np.pi * 4.5 * (x + y))
    disks = [((0.30, 0.35), 0.16, (0.95, 0.85, 0.20)),
             ((0.68, 0.62), 0.20, (0.15, 0.35, 0.85)),
             ((0.78, 0.22), 0.11, (0.85, 0.20, 0.30))]
    for (cy, cx), r, color in disks:
        inside = (y - cy) ** 2 + (x - cx) ** 2 <= r * r
        img[inside] = 0.7 * np.array(color) + 0.3 * img[inside]
    checker = ((np.floor(x * 16) + np.floor(y * 16)) % 2).astype(bool)
    patch = (x > 0.08) & (x < 0.38) & (y > 0.62) & (y < 0.92)
    img[patch & checker] = 0.85
    img[patch & ~checker] = 0.15
    return np.clip(img, 0.0, 1.0)


class ImageTask(_GridTask):
    """RGB image regression; ``sampling_factor`` 4 keeps every second row and
    column for training (a regular 2x stride) and holds out the rest."""

    kind = "image"
    metric_names = ("train_psnr", "heldout_psnr", "all_psnr")

    def __init__(self, pixels: np.ndarray | None = None, size: int = 64, sampling_factor: int = 4):
        pixels = procedural_image(size) if pixels is None else np.asarray(pixels, dtype=float)
        if pixels.ndim != 3:
            raise ConfigError("image pixels must be H x W x C")
        stride = int(round(math.sqrt(sampling_factor)))
        if stride * stride != sampling_factor:
            raise ConfigError("sampling_factor must be a perfect square (1, 4, 9, ...)")
        self.pixels = pixels
        h, w, c = pixels.shape
        self.stride = stride
        keys = [(n + stride - 1) // stride for n in (h, w)]
        self.key_lattice = (tuple(keys), [stride * (k - 1) / (n - 1) for k, n in zip(keys, (h, w))])
        self.coords = lattice((h, w))
        self.attrs = pixels.reshape(-1, c)
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        self.mask2d = (rows % stride == 0) & (cols % stride == 0)
        self.train_mask = self.mask2d.reshape(-1)
        self._finish_split()

    def render(self, model) -> np.ndarray:
        return model.predict(self.coords).reshape(self.pixels.shape)


def sphere_sdf(center=(0.5, 0.5, 0.5), radius: float = 0.3):
    c = np.asarray(center, dtype=float)

    def sdf(p):
        return np.linalg.norm(p - c, axis=-1) - radius

    def surface(rng, n):
        v = rng.normal(size=(n, 3))
        return c + radius * v / np.linalg.norm(v, axis=1, keepdims=True)

    return sdf, surface


def torus_sdf(center=(0.5, 0.5, 0.5), major: float = 0.25, minor: float = 0.1):
    c = np.asarray(center, dtype=float)

    def sdf(p):
        q = p - c
        ring = np.linalg.norm(q[..., :2], axis=-1) - major
        return np.sqrt(ring ** 2 + q[..., 2] ** 2) - minor

    def surface(rng, n):
        u, v = rng.uniform(0, 2 * np.pi, size=(2, n))
        r = major + minor * np.cos(v)
        return c + np.stack([r * np.cos(u), r * np.sin(u), minor * np.sin(v)], axis=1)

    return sdf, surface


class SdfTask:
    """Analytic SDF fitting. Each iteration draws a fresh batch that depends only
    on (seed, iteration): half uniform in the cube, half near the surface."""

    kind = "sdf"
    metric_names = ("iou",)
    d_in = 3
    d_out = 1

    def __init__(self, shape: str = "sphere", eval_resolution: int = 64, surface_sigma: float = 0.02,
                 radius: float = 0.3):
        if shape == "sphere":
            self.sdf, self._surface = sphere_sdf(radius=radius)
        elif shape == "torus":
            self.sdf, self._surface = torus_sdf()
        else:
            raise ConfigError(f"unknown sdf shape {shape!r}")
        self.shape = shape
        self.surface_sigma = surface_sigma
        self.eval_resolution = eval_resolution
        self.grid_shape = (eval_resolution,) * 3
        self.key_lattice = (self.grid_shape, 1.0)
        self.eval_coords = lattice(self.grid_shape)
        self.eval_sdf = self.sdf(self.eval_coords)

    def points(self, seed: int, iteration: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([seed, iteration])
        n_uniform = n // 2
        uniform = rng.uniform(0.0, 1.0, size=(n_uniform, 3))
        near = self._surface(rng, n - n_uniform) + rng.normal(0.0, self.surface_sigma, size=(n - n_uniform, 3))
        return np.clip(np.concatenate([uniform, near]), 0.0, 1.0)

    def sample_batch(self, rng, iteration: int, batch_size: int | None, seed: int = 0):
        pts = self.points(seed, iteration, batch_size or 10_000)
        return pts, self.sdf(pts)[:, None]

    def evaluate(self, model) -> dict:
        pred = model.predict(self.eval_coords)[:, 0]
        return {"iou": iou(pred, self.eval_sdf)}


@dataclass
class RunRecord:
    config: dict
    seed: int
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iteration, metrics dict)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None

    def metrics_csv(self, metric_names) -> str:
        """One row per iteration; metric columns are filled where evaluated."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "loss", *metric_names])
        evals = dict(self.evals)
        for i, loss in enumerate(self.losses, start=1):
            m = evals.get(i, {})
            writer.writerow([i, repr(loss), *(repr(m[k]) if k in m else "" for k in metric_names)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "status": self.status,
            "error": self.error,
            "seed": self.seed,
            "iterations": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "final": self.final,
            "wall_time": self.wall_time,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def fit(task, model, iters: int, batch_size: int | None = None, seed: int = 0, lr: float = 1e-3,
        table_lr: float = 1e-2, eval_interval: int | None = None, cosine: bool = False,
        config: dict | None = None) -> RunRecord:
    """Seeded minibatch Adam on the MSE between model output and task targets.

    Evaluates every ``eval_interval`` iterations (and always at the end). A
    non-finite loss or gradient stops training; the partial record is returned
    with ``status="nonfinite"``.
    """
    if (model.d_in, model.d_out) != (task.d_in, task.d_out):
        raise ConfigError(
            f"model maps {model.d_in}->{model.d_out}, task needs {task.d_in}->{task.d_out}")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, lr=lr, group_lrs={"table": table_lr}, cosine=cosine, total_steps=iters)
    eval_interval = eval_interval or iters
    record = RunRecord(config=dict(config or {}), seed=seed)
    start = time.perf_counter()
    model.zero_grads()
    try:
        for it in range(1, iters + 1):
            if isinstance(task, SdfTask):
                xb, yb = task.sample_batch(rng, it, batch_size, seed=seed)
            else:
                xb, yb = task.sample_batch(rng, it, batch_size)
            pred = model.forward(xb, record=True)
            loss, grad = mse_loss(pred, yb)
            model.backward(grad)
            opt.step()
            model.zero_grads()
            record.losses.append(loss)
            if it % eval_interval == 0 or it == iters:
                record.evals.append((it, task.evaluate(model)))
    except NonFiniteError as exc:
        record.status = "nonfinite"
        record.error = str(exc)
        model.zero_grads()
    record.final = record.evals[-1][1] if record.evals else {}
    record.wall_time = time.perf_counter() - start
    return record


def continuity_profile(model, x_a, x_b, samples: int = 256) -> np.ndarray:
    """|f(x_{k+1}) - f(x_k)| / step along the segment from x_a to x_b."""
    x_a = np.asarray(x_a, dtype=float).reshape(-1)
    x_b = np.asarray(x_b, dtype=float).reshape(-1)
    t = np.linspace(0.0, 1.0, samples)[:, None]
    pts = x_a + t * (x_b - x_a)
    f = model.predict(pts)
    step = np.linalg.norm(x_b - x_a) / (samples - 1)
    return np.linalg.norm(np.diff(f, axis=0), axis=1) / step


def profile_csv(slopes) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "slope"])
    for k, s in enumerate(slopes):
        writer.writerow([k, repr(float(s))])
    return buf.getvalue()


@dataclass
class SliceExport:
    h_axis: np.ndarray
    t_axis: np.ndarray
    raster: np.ndarray  # (len(t_axis), len(h_axis), d_out)
    train_points: np.ndarray  # (n, 2) trunk-input locations
    heldout_points: np.ndarray
    axes: tuple[int, int]


def export_slices(model, task, m: int = 128, axes: tuple[int, int] | None = None,
                  fixed: dict[int, float] | None = None, margin: float = 0.05) -> SliceExport:
    """Sweep the trunk on an m x m lattice over two of its input columns.

    The lattice spans the observed range of those columns over the task's
    coordinates. A trunk with one input is swept along that column only; wider
    than two requires ``axes`` plus ``fixed`` values for the remaining columns.
    """
    width = model.trunk_in_width
    if width > 2 and (axes is None or fixed is None or len(fixed) != width - 2):
        raise ConfigError(
            f"trunk takes {width} inputs; give axes=(i, j) and fixed values for the other {width - 2}")
    if axes is None:
        axes = (0, 1) if width == 2 else (0, 0)
    fixed = dict(fixed or {})
    z, _ = model.trunk_input(task.coords)
    lo, hi = z.min(axis=0), z.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-6)
    lo, hi = lo - pad, hi + pad
    h_axis = np.linspace(lo[axes[0]], hi[axes[0]], m)
    t_axis = np.linspace(lo[axes[1]], hi[axes[1]], m) if width >= 2 else np.zeros(1)
    H, T = np.meshgrid(h_axis, t_axis, indexing="xy")
    grid = np.zeros((H.size, width))
    for col, val in fixed.items():
        grid[:, col] = val
    grid[:, axes[0]] = H.reshape(-1)
    if width >= 2:
        grid[:, axes[1]] = T.reshape(-1)
    raster = model.trunk_predict(grid).reshape(len(t_axis), len(h_axis), -1)
    pick = list(axes) if width >= 2 else [axes[0], axes[0]]
    return SliceExport(h_axis, t_axis, raster,
                       z[task.train_index][:, pick], z[task.heldout_index][:, pick], tuple(axes))


def band_agreement(model, task: StripeTask) -> int:
    """Number of held-out stripe points whose prediction is closest to the
    correct band colour."""
    pred = model.predict(task.coords[task.heldout_index])
    return int(np.count_nonzero(task.nearest_band(pred) == task.band[task.heldout_index]))
