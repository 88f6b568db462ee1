"""Pyramid construction timings: per-scale vs patchwork vs power-law approximation."""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from .convnet import ConvBackend
from .pyramid import DEFAULT_CANVAS, DEFAULT_PAD, PowerLawModel, build_pyramid, make_scale_grid
from .synthetic import smooth_image

__all__ = ["time_call", "pyramid_benchmark", "rows_to_csv"]

MODES = ("exact", "patchwork", "approx", "approx+patchwork")


def time_call(fn, repeats=1):
    """Best wall time of ``repeats`` calls, and the last result."""
    best, out = np.inf, None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _fixed_input(backend, canvas):
    if isinstance(backend, ConvBackend) and backend.input_size is None:
        return ConvBackend(backend.spec, backend.pad, input_size=canvas)
    return backend


def pyramid_benchmark(
    backend, size=(480, 640), per_octave=6, window=(128, 64), repeats=1, seed=0, plm=None,
    canvas=DEFAULT_CANVAS, pad=DEFAULT_PAD, free_size_baseline=True,
):
    """Time every pyramid mode on one seeded ``size`` image.

    A conv backend runs per-scale levels on a fixed ``canvas``-sized input
    (one forward pass per scale, as a fixed-input network would); with
    ``free_size_baseline`` an extra ``exact-free`` row times per-scale passes
    sized to each level. Speedups are relative to the ``exact`` row. Without
    ``plm`` the approximation uses zero exponents, which costs the same.
    """
    img = smooth_image(size[0], size[1], seed=seed, cell=32)
    grid = make_scale_grid(size, per_octave, window, 1, backend.shrink)
    if plm is None:
        plm = PowerLawModel(np.zeros(backend.n_maps), np.zeros(backend.n_maps))
    runs = [("exact", _fixed_input(backend, canvas), "exact")]
    if free_size_baseline and _fixed_input(backend, canvas) is not backend:
        runs.append(("exact-free", backend, "exact"))
    runs += [
        ("patchwork", backend, "patchwork"),
        ("approx", _fixed_input(backend, canvas), "approx"),
        ("approx+patchwork", backend, "approx+patchwork"),
    ]
    rows = []
    for name, b, mode in runs:
        secs, pyr = time_call(lambda: build_pyramid(img, b, grid, mode, plm, canvas, pad), repeats)
        n_computed = sum(p != "approximated" for p in pyr.provenance)
        rows.append({"mode": name, "seconds": secs, "levels": len(pyr), "computed_levels": n_computed})
    base = rows[0]["seconds"]
    for r in rows:
        r["speedup"] = base / r["seconds"]
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["mode", "seconds", "speedup", "levels", "computed_levels"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "seconds": f"{r['seconds']:.4f}", "speedup": f"{r['speedup']:.3f}"})
    return buf.getvalue()
