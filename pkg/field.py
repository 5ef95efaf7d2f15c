"""
Grid-sampled fields over (time knot, space cell) and the binned conditional means that fill them
"""
import csv
import itertools
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from constants import MIN_SAMPLES
from diffusion import TimeGrid


class EmptyFieldError(Exception):
    """
    No cell of an estimated field reached the sample threshold
    """


class MaskCoverageError(Exception):
    """
    Too little probability weight lies on valid cells
    """


class DegenerateESSError(Exception):
    """
    Effective sample size is below the configured floor, overall or in every cell
    """


class SpaceBox:
    """
    Axis-aligned box with a regular per-axis cell partition
    """

    def __init__(self, lo, hi, cells):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.cells = np.atleast_1d(np.asarray(cells, dtype=int))
        if not self.lo.shape == self.hi.shape == self.cells.shape:
            raise ValueError("Box bounds and cell counts must have one entry per axis.")
        if np.any(self.hi <= self.lo) or np.any(self.cells < 1):
            raise ValueError(f"Bad box: lo={self.lo}, hi={self.hi}, cells={self.cells}.")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / self.cells

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    def axis_centers(self) -> list:
        return [self.lo[axis] + (np.arange(self.cells[axis]) + 0.5) * self.widths[axis]
                for axis in range(self.dim)]

    def centers(self) -> np.ndarray:
        """
        Cell centers in C order, shape (C, n)
        """
        mesh = np.meshgrid(*self.axis_centers(), indexing="ij")
        return np.stack([axis.ravel() for axis in mesh], axis=-1)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """
        Flat cell index of every point, -1 outside the box
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        with np.errstate(invalid="ignore"):
            position = np.floor((x - self.lo) / self.widths)
        inside = np.all((position >= 0) & (position < self.cells), axis=1) & np.all(np.isfinite(x), axis=1)
        index = np.full(x.shape[0], -1, dtype=int)
        if np.any(inside):
            index[inside] = np.ravel_multi_index(position[inside].astype(int).T, tuple(self.cells))
        return index

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "cells": self.cells.tolist()}


def multilinear(box: SpaceBox, values: np.ndarray, valid: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multilinear interpolation on cell centers.
    Corners with zero weight are ignored; a point is resolved only when every
    corner carrying weight is valid and the point lies in the box.
    """
    x = np.asarray(x, dtype=float).reshape(-1, box.dim)
    values = np.asarray(values, dtype=float)
    tail = values.shape[1:]
    position = (x - box.lo) / box.widths - 0.5
    # snap round-off so cell centers hit a single corner
    nearest = np.round(position)
    position = np.where(np.abs(position - nearest) < 1e-9, nearest, position)
    upper = np.maximum(box.cells - 2, 0)
    base = np.clip(np.floor(position), 0, upper).astype(int)
    frac = np.clip(position - base, 0.0, 1.0)
    frac = np.where(box.cells > 1, frac, 0.0)

    out = np.zeros((x.shape[0],) + tail)
    ok = box.cell_index(x) >= 0
    grid_shape = tuple(box.cells)
    for corner in itertools.product((0, 1), repeat=box.dim):
        shift = np.asarray(corner)
        weight = np.prod(np.where(shift == 1, frac, 1.0 - frac), axis=1)
        index = np.minimum(base + shift, box.cells - 1)
        flat = np.ravel_multi_index(index.T, grid_shape)
        used = weight > 0
        ok &= ~used | valid[flat]
        corner_values = values[flat]
        weight = weight.reshape((-1,) + (1,) * len(tail))
        with np.errstate(invalid="ignore"):
            out += np.where(weight > 0, weight * corner_values, 0.0)
    out[~ok] = np.nan
    return out, ok


def conditional_mean(cells: np.ndarray, values: np.ndarray, n_cells: int, weights: Optional[np.ndarray] = None,
                     min_samples: int = MIN_SAMPLES):
    """
    Histogram regression of values on cell indices (negative index = outside).
    Returns mean, standard error, sample counts and validity mask per cell.
    Weighted means use the effective count of the cell for the sample threshold.
    """
    keep = (cells >= 0) & np.isfinite(values)
    if weights is not None:
        keep &= weights > 0
    cells = cells[keep]
    values = values[keep]
    counts = np.bincount(cells, minlength=n_cells)

    if weights is None:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.bincount(cells, weights=values, minlength=n_cells) / counts
            spread = np.bincount(cells, weights=(values - mean[cells]) ** 2, minlength=n_cells)
            stderr = np.sqrt(spread / np.maximum(counts - 1, 1) / counts)
        effective = counts.astype(float)
    else:
        weights = weights[keep]
        with np.errstate(invalid="ignore", divide="ignore"):
            total = np.bincount(cells, weights=weights, minlength=n_cells)
            squares = np.bincount(cells, weights=weights ** 2, minlength=n_cells)
            mean = np.bincount(cells, weights=weights * values, minlength=n_cells) / total
            spread = np.bincount(cells, weights=weights ** 2 * (values - mean[cells]) ** 2, minlength=n_cells)
            stderr = np.sqrt(spread) / total
            effective = np.where(squares > 0, total ** 2 / squares, 0.0)

    mask = (counts >= min_samples) & (effective >= min_samples) & np.isfinite(mean)
    return mean, stderr, counts, mask


def cell_masses(cells: np.ndarray, n_cells: int, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Share of total (weighted) mass falling in each cell
    """
    weights = np.ones(cells.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    inside = cells >= 0
    mass = np.bincount(cells[inside], weights=weights[inside], minlength=n_cells)
    total = np.sum(weights)
    return mass / total if total > 0 else mass


class FieldSlice:
    """
    One time knot of a scalar field
    """

    def __init__(self, box: SpaceBox, values: np.ndarray, mask: np.ndarray, t: float = 0.0,
                 stderr: Optional[np.ndarray] = None, samples: Optional[np.ndarray] = None,
                 meta: Optional[dict] = None):
        self.box = box
        self.values = np.asarray(values, dtype=float)
        self.mask = np.asarray(mask, dtype=bool) & np.isfinite(self.values)
        self.t = t
        self.stderr = np.zeros(box.n_cells) if stderr is None else np.asarray(stderr, dtype=float)
        self.samples = np.zeros(box.n_cells, dtype=int) if samples is None else np.asarray(samples)
        self.meta = dict(meta or {})

    def interpolate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return multilinear(self.box, self.values, self.mask, x)


class ScalarField:
    """
    Values on (M+1) knots by C cells with validity mask, standard errors and visit counts
    """

    def __init__(self, grid: TimeGrid, box: SpaceBox, values: np.ndarray, mask: np.ndarray,
                 samples: Optional[np.ndarray] = None, stderr: Optional[np.ndarray] = None,
                 meta: Optional[dict] = None):
        shape = (grid.steps + 1, box.n_cells)
        values = np.asarray(values, dtype=float).reshape(shape)
        mask = np.asarray(mask, dtype=bool).reshape(shape) & np.isfinite(values)
        self.grid = grid
        self.box = box
        self.values = values
        self.mask = mask
        self.samples = np.zeros(shape, dtype=int) if samples is None else np.asarray(samples).reshape(shape)
        self.stderr = np.zeros(shape) if stderr is None else np.asarray(stderr, dtype=float).reshape(shape)
        self.meta = dict(meta or {})

    @classmethod
    def from_function(cls, grid: TimeGrid, box: SpaceBox, func: Callable, meta: Optional[dict] = None):
        """
        Samples func(t, x) on every cell center; all finite cells valid
        """
        centers = box.centers()
        values = np.stack([np.asarray(func(t, centers), dtype=float) * np.ones(box.n_cells) for t in grid.times])
        return cls(grid, box, values, np.isfinite(values), meta=meta)

    def replace(self, values=None, mask=None, stderr=None, meta=None) -> "ScalarField":
        return ScalarField(self.grid, self.box,
                           self.values if values is None else values,
                           self.mask if mask is None else mask,
                           self.samples,
                           self.stderr if stderr is None else stderr,
                           {**self.meta, **(meta or {})})

    def slice(self, k: int) -> FieldSlice:
        return FieldSlice(self.box, self.values[k], self.mask[k], float(self.grid.times[k]),
                          self.stderr[k], self.samples[k])

    def thin(self, factor: int) -> "ScalarField":
        return ScalarField(self.grid.thin(factor), self.box, self.values[::factor], self.mask[::factor],
                           self.samples[::factor], self.stderr[::factor], self.meta)

    def interpolate(self, k: int, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return multilinear(self.box, self.values[k], self.mask[k], x)

    def as_function(self) -> Callable:
        """
        Callable (t, x) interpolating multilinearly in space and linearly in time; NaN off the valid region
        """
        times = self.grid.times

        def evaluate(t, x):
            k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1))
            if k == len(times) - 1 or np.isclose(t, times[k], rtol=0, atol=1e-12):
                return self.interpolate(k, x)[0]
            share = (t - times[k]) / (times[k + 1] - times[k])
            left, _ = self.interpolate(k, x)
            right, _ = self.interpolate(k + 1, x)
            return (1 - share) * left + share * right

        return evaluate

    @property
    def valid_fraction(self) -> float:
        return float(np.mean(self.mask))

    def to_csv(self, path: str) -> None:
        centers = self.box.centers()
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["t"] + [f"x{axis + 1}" for axis in range(self.box.dim)] +
                            ["value", "std_error", "samples", "valid"])
            for k, t in enumerate(self.grid.times):
                for cell, center in enumerate(centers):
                    writer.writerow([repr(float(t))] + [repr(float(c)) for c in center] +
                                    [repr(float(self.values[k, cell])), repr(float(self.stderr[k, cell])),
                                     int(self.samples[k, cell]), int(self.mask[k, cell])])

    def save_binary(self, path: str) -> None:
        """
        Header n, M+1, C and the knots, then box bounds and cell counts, then values, stderr, samples, mask
        """
        box = self.box
        header = np.array([box.dim, self.grid.steps + 1, box.n_cells], dtype=float)
        body = np.concatenate([header, self.grid.times, box.lo, box.hi, box.cells.astype(float),
                               self.values.ravel(), self.stderr.ravel(), self.samples.ravel().astype(float),
                               self.mask.ravel().astype(float)])
        body.astype("<f8").tofile(path)

    @classmethod
    def load_binary(cls, path: str) -> "ScalarField":
        raw = np.fromfile(path, dtype="<f8")
        dim, knots, n_cells = (int(value) for value in raw[:3])
        cursor = 3
        chunks = []
        for size in (knots, dim, dim, dim):
            chunks.append(raw[cursor:cursor + size])
            cursor += size
        times, lo, hi, cells = chunks
        block = knots * n_cells
        values, stderr, samples, mask = (raw[cursor + i * block:cursor + (i + 1) * block] for i in range(4))
        box = SpaceBox(lo, hi, cells.astype(int))
        return cls(TimeGrid(times), box, values, mask.astype(bool), samples.astype(int), stderr)


class VectorFieldEstimate:
    """
    Vector values on (M+1) knots by C cells with per-component standard errors
    """

    def __init__(self, grid: TimeGrid, box: SpaceBox, values: np.ndarray, stderr: np.ndarray,
                 samples: np.ndarray, mask: np.ndarray, meta: Optional[dict] = None):
        self.grid = grid
        self.box = box
        self.values = np.asarray(values, dtype=float)
        self.stderr = np.asarray(stderr, dtype=float)
        self.samples = np.asarray(samples)
        self.mask = np.asarray(mask, dtype=bool) & np.all(np.isfinite(self.values), axis=-1)
        self.meta = dict(meta or {})

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def component(self, axis: int) -> ScalarField:
        return ScalarField(self.grid, self.box, self.values[..., axis], self.mask, self.samples,
                           self.stderr[..., axis], self.meta)

    def interpolate(self, k: int, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return multilinear(self.box, self.values[k], self.mask[k], x)

    def to_csv(self, path: str) -> None:
        centers = self.box.centers()
        dims = range(self.dim)
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["t"] + [f"x{axis + 1}" for axis in range(self.box.dim)] +
                            [f"v{axis + 1}" for axis in dims] + [f"std_error{axis + 1}" for axis in dims] +
                            ["samples", "valid"])
            for k, t in enumerate(self.grid.times):
                for cell, center in enumerate(centers):
                    writer.writerow([repr(float(t))] + [repr(float(c)) for c in center] +
                                    [repr(float(v)) for v in self.values[k, cell]] +
                                    [repr(float(s)) for s in self.stderr[k, cell]] +
                                    [int(self.samples[k, cell]), int(self.mask[k, cell])])


class SampledFunction:
    """
    Time-independent function given by values on the centers of a box; points outside are clamped to the box
    """

    def __init__(self, box: SpaceBox, values: Sequence[float]):
        self.box = box
        self.values = np.asarray(values, dtype=float).reshape(box.n_cells)
        self._valid = np.ones(box.n_cells, dtype=bool)

    def __call__(self, *args):
        x = np.asarray(args[-1], dtype=float)
        inner = self.box.widths * 1e-9
        clamped = np.clip(x, self.box.lo + inner, self.box.hi - inner)
        return multilinear(self.box, self.values, self._valid, clamped)[0]
