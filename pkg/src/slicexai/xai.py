"""Attention maps: per-plane weights -> 3D maps -> binary heatmaps -> overlays.

The 3D map is the outer product of the sagittal, coronal and axial slice
distributions, placed on the volume grid at the sliced index ranges. A GradCAM
variant stacks per-slice saliency maps into one volume per plane and
multiplies the three volumes voxelwise.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySubset, ShapeMismatch, TooFewFolds
from .evaluation import nearest_rank
from .model import AttentionWeights
from .volume import Plane, Volume3D, resize_bilinear


@dataclass(frozen=True)
class AttentionMap3D:
    data: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class BinaryHeatmap:
    data: np.ndarray
    threshold_value: float
    percentile: float

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class SaliencyStack:
    sagittal: np.ndarray
    coronal: np.ndarray
    axial: np.ndarray


def mean_attention(weights: Sequence[AttentionWeights]) -> AttentionWeights:
    """Average per-sample slice distributions of one plane."""
    weights = list(weights)
    if not weights:
        raise EmptySubset("cannot average attention over an empty subset")
    first = weights[0]
    if any(len(w) != len(first) or w.plane != first.plane for w in weights):
        raise ShapeMismatch("attention weights must share plane and length")
    mean = np.mean([w.alphas for w in weights], axis=0)
    return AttentionWeights(mean / mean.sum(), first.plane, first.start_index)


def synthesize_map(alpha_s: AttentionWeights, alpha_c: AttentionWeights,
                   alpha_a: AttentionWeights, grid_shape: Optional[Tuple[int, int, int]] = None
                   ) -> AttentionMap3D:
    """``A[i, j, k] = alpha_s[i] * alpha_c[j] * alpha_a[k]``.

    Without ``grid_shape`` the result has shape ``(N_s, N_c, N_a)``. With it,
    the product is written at each plane's ``start_index`` and the rest of the
    grid is zero.
    """
    s, c, a = (np.asarray(w.alphas, dtype=np.float64) for w in (alpha_s, alpha_c, alpha_a))
    core = np.einsum("i,j,k->ijk", s, c, a)
    if grid_shape is None:
        return AttentionMap3D(core)
    grid = np.zeros(tuple(grid_shape), dtype=np.float64)
    starts = [w.start_index for w in (alpha_s, alpha_c, alpha_a)]
    for dim, start, n in zip(grid.shape, starts, core.shape):
        if start < 0 or start + n > dim:
            raise ShapeMismatch(f"slice range [{start}, {start + n}) exceeds grid dimension {dim}")
    grid[tuple(slice(st, st + n) for st, n in zip(starts, core.shape))] = core
    return AttentionMap3D(grid)


def minmax_normalize(m) -> AttentionMap3D:
    data = np.asarray(getattr(m, "data", m), dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return AttentionMap3D(np.zeros_like(data), normalized=True)
    return AttentionMap3D((data - lo) / (hi - lo), normalized=True)


def binarize(m, percentile: float = 99.9) -> BinaryHeatmap:
    """Select voxels strictly above the nearest-rank percentile of the whole grid."""
    data = np.asarray(getattr(m, "data", m), dtype=np.float64)
    theta = nearest_rank(data, percentile)
    return BinaryHeatmap((data > theta).astype(np.uint8), theta, percentile)


def overlay(i_norm: Volume3D, h, delta: float = 10.0) -> Volume3D:
    hb = np.asarray(getattr(h, "data", h), dtype=np.float64)
    if hb.shape != i_norm.shape:
        raise ShapeMismatch(f"heatmap shape {hb.shape} != volume shape {i_norm.shape}")
    return i_norm.with_data(i_norm.data + hb * delta)


def enhance(m, factor: float = 10.0) -> AttentionMap3D:
    """Scale a map for display (kept separate from the overlay amplification)."""
    data = np.asarray(getattr(m, "data", m), dtype=np.float64)
    return AttentionMap3D(data * factor, normalized=False)


# -- GradCAM stacks --------------------------------------------------------------

def stack_plane(maps_2d: np.ndarray, plane, start_index: int,
                volume_shape: Tuple[int, int, int]) -> np.ndarray:
    """Place per-slice 2D maps ``(N, h, w)`` into a volume along ``plane``.

    Maps are bilinearly resized to the in-plane shape; slices outside the
    sliced range stay zero.
    """
    plane = Plane.coerce(plane)
    maps_2d = np.asarray(maps_2d, dtype=np.float64)
    in_plane = [d for ax, d in enumerate(volume_shape) if ax != plane.axis]
    n = maps_2d.shape[0]
    if start_index < 0 or start_index + n > volume_shape[plane.axis]:
        raise ShapeMismatch("slice range exceeds the volume along the stacking axis")
    resized = resize_bilinear(maps_2d, *in_plane)
    out = np.zeros(volume_shape, dtype=np.float64)
    block = np.moveaxis(out, plane.axis, 0)
    block[start_index:start_index + n] = resized
    return out


def combine_gradcam(stack: SaliencyStack) -> AttentionMap3D:
    """``M = S * C * A`` voxelwise, then min-max normalized."""
    s, c, a = (np.asarray(x, dtype=np.float64) for x in (stack.sagittal, stack.coronal, stack.axial))
    if not s.shape == c.shape == a.shape:
        raise ShapeMismatch(f"stack shapes differ: {s.shape}, {c.shape}, {a.shape}")
    return minmax_normalize(s * c * a)


# -- consistency across folds ---------------------------------------------------------

def total_variation(p, q) -> float:
    p = np.asarray(getattr(p, "alphas", p), dtype=np.float64)
    q = np.asarray(getattr(q, "alphas", q), dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"distributions differ in length: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class ConsistencyReport:
    per_fold: Dict[str, List[np.ndarray]]
    distances: Dict[str, np.ndarray]
    starts: Dict[str, int] = field(default_factory=dict)

    def max_distance(self, plane: str) -> float:
        d = self.distances[plane]
        return float(d.max()) if d.size else 0.0

    def argmax_indices(self, plane: str) -> List[int]:
        """Volume index of each fold's most-attended slice."""
        start = self.starts.get(plane, 0)
        return [start + int(np.argmax(a)) for a in self.per_fold[plane]]

    def to_text(self) -> str:
        lines = []
        for plane, folds in self.per_fold.items():
            lines.append(f"# plane={plane} folds={len(folds)} max_tv={self.max_distance(plane):.6f}")
            d = self.distances[plane]
            for i, j in itertools.combinations(range(len(folds)), 2):
                lines.append(f"tv\t{plane}\t{i}\t{j}\t{d[i, j]:.9f}")
        return "\n".join(lines) + "\n"

    def write(self, directory, plots: bool = True) -> List[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "consistency.txt"]
        written[0].write_text(self.to_text())
        for plane, folds in self.per_fold.items():
            table = directory / f"histogram_{plane}.tsv"
            start = self.starts.get(plane, 0)
            header = "slice\t" + "\t".join(f"fold{i}" for i in range(len(folds)))
            rows = [f"{start + k}\t" + "\t".join(f"{f[k]:.9e}" for f in folds)
                    for k in range(len(folds[0]))]
            table.write_text(header + "\n" + "\n".join(rows) + "\n")
            written.append(table)
            if plots:
                written.append(_plot_histograms(directory / f"histogram_{plane}.png", plane,
                                                folds, start))
        return written


def _plot_histograms(path: Path, plane: str, folds, start: int) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(folds), figsize=(2.6 * len(folds), 2.4), sharey=True)
    for i, (ax, a) in enumerate(zip(np.atleast_1d(axes), folds)):
        ax.bar(np.arange(start, start + len(a)), a, width=1.0)
        ax.set_title(f"{plane} fold {i}", fontsize=8)
        ax.set_xlabel("slice", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def consistency_report(per_fold_means: Dict[str, Sequence[AttentionWeights]]) -> ConsistencyReport:
    """Pairwise total-variation distances between fold-mean distributions, per plane."""
    per_fold, distances, starts = {}, {}, {}
    for plane, weights in per_fold_means.items():
        weights = list(weights)
        if len(weights) < 2:
            raise TooFewFolds(f"plane {plane}: need at least 2 folds, got {len(weights)}")
        key = Plane.coerce(plane).value
        arrays = [np.asarray(getattr(w, "alphas", w), dtype=np.float64) for w in weights]
        d = np.zeros((len(arrays), len(arrays)))
        for i, j in itertools.combinations(range(len(arrays)), 2):
            d[i, j] = d[j, i] = total_variation(arrays[i], arrays[j])
        per_fold[key] = arrays
        distances[key] = d
        starts[key] = getattr(weights[0], "start_index", 0)
    return ConsistencyReport(per_fold, distances, starts)


# -- attention-weight export files ---------------------------------------------------------

def write_attention(weights: AttentionWeights, path) -> None:
    """Text export: plane, N, start index, then one weight per line (17 significant digits)."""
    lines = [f"plane={weights.plane.value}", f"n={len(weights)}", f"start={weights.start_index}"]
    lines += [f"{a:.17g}" for a in weights.alphas]
    Path(path).write_text("\n".join(lines) + "\n")


def read_attention(path) -> AttentionWeights:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    meta = dict(ln.split("=", 1) for ln in lines[:3])
    values = np.array([float(v) for v in lines[3:]])
    if values.size != int(meta["n"]):
        raise ShapeMismatch(f"{path}: header says n={meta['n']}, found {values.size} values")
    return AttentionWeights(values, Plane.coerce(meta["plane"]), int(meta["start"]))
