"""Atlas-based quantification of which regions a binary heatmap lands in."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import IoFailure, MalformedHeader, ShapeMismatch
from .volume import Volume3D, load_volume, save_volume


@dataclass(frozen=True)
class AtlasVolume:
    labels: np.ndarray
    names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeMismatch(f"atlas must be 3D, got shape {labels.shape}")
        if np.any(labels < 0) or not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("atlas labels must be nonnegative integers")
        labels = labels.astype(np.int64)
        missing = sorted(set(np.unique(labels).tolist()) - {0} - set(self.names))
        if missing:
            raise ValueError(f"atlas labels without a name: {missing}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", {int(k): str(v) for k, v in self.names.items()})

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def region_size(self, region_id: int) -> int:
        return int(np.count_nonzero(self.labels == region_id))


def save_atlas(atlas: AtlasVolume, path) -> Path:
    """Write the label volume and its ``id<TAB>name`` sidecar (``<path>.tsv``)."""
    path = Path(path)
    save_volume(Volume3D(atlas.labels.astype(np.float64)), path)
    sidecar = atlas_sidecar(path)
    try:
        sidecar.write_text("".join(f"{k}\t{v}\n" for k, v in sorted(atlas.names.items())))
    except OSError as exc:
        raise IoFailure(f"cannot write {sidecar}: {exc}") from exc
    return sidecar


def atlas_sidecar(path) -> Path:
    name = Path(path).name
    for ext in (".nii.gz", ".nii", ".raw"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return Path(path).with_name(name + ".tsv")


def load_atlas(path) -> AtlasVolume:
    path = Path(path)
    labels = load_volume(path).data
    sidecar = atlas_sidecar(path)
    if not sidecar.exists():
        raise IoFailure(f"missing atlas name table {sidecar}")
    names = {}
    for line in sidecar.read_text().splitlines():
        if not line.strip():
            continue
        try:
            key, name = line.split("\t", 1)
            names[int(key)] = name
        except ValueError as exc:
            raise MalformedHeader(f"{sidecar}: bad line {line!r}") from exc
    return AtlasVolume(np.rint(labels).astype(np.int64), names)


@dataclass(frozen=True)
class RegionStats:
    region_id: int
    region_name: str
    v_r: int
    mu_r: float
    sigma_r: float
    a_max_r: float
    a_min_r: float
    p_r: float


def _heatmap_array(h) -> np.ndarray:
    return np.asarray(getattr(h, "data", h))


def region_overlap(h, atlas: AtlasVolume) -> Dict[int, np.ndarray]:
    """Voxels of each atlas label (background ``0`` included) selected by ``h``.

    Returns ``{region_id: (V_r, 3) array of voxel indices}`` for every label
    present in the atlas.
    """
    hb = _heatmap_array(h)
    if hb.shape != atlas.shape:
        raise ShapeMismatch(f"heatmap shape {hb.shape} != atlas shape {atlas.shape}")
    selected = hb > 0
    return {
        int(r): np.argwhere(selected & (atlas.labels == r))
        for r in np.unique(atlas.labels)
    }


def region_stats(attention_map, h, atlas: AtlasVolume) -> List[RegionStats]:
    """Per-region statistics of ``attention_map`` over the heatmap overlap.

    Background and regions with no selected voxel are left out. Rows are
    sorted by overlap volume, then mean, both descending, then by region id.
    """
    values = np.asarray(getattr(attention_map, "data", attention_map), dtype=np.float64)
    hb = _heatmap_array(h)
    if values.shape != atlas.shape or hb.shape != atlas.shape:
        raise ShapeMismatch(
            f"map {values.shape}, heatmap {hb.shape} and atlas {atlas.shape} must agree"
        )
    selected = hb > 0
    rows = []
    for r in np.unique(atlas.labels):
        r = int(r)
        if r == 0:
            continue
        in_region = atlas.labels == r
        overlap = values[selected & in_region]
        v_r = overlap.size
        if v_r == 0:
            continue
        mu = float(overlap.mean())
        sigma = float(overlap.std(ddof=1)) if v_r >= 2 else 0.0
        rows.append(RegionStats(
            region_id=r,
            region_name=atlas.names.get(r, str(r)),
            v_r=int(v_r),
            mu_r=mu,
            sigma_r=sigma,
            a_max_r=float(overlap.max()),
            a_min_r=float(overlap.min()),
            p_r=v_r / int(np.count_nonzero(in_region)),
        ))
    rows.sort(key=lambda s: (-s.v_r, -s.mu_r, s.region_id))
    return rows


_COLUMNS = ("region_id", "region_name", "v_r", "mu_r", "sigma_r", "a_max_r", "a_min_r", "p_r")
_HEADERS = ("id", "Region", "V_r", "mu_r", "sigma_r", "A_max_r", "A_min_r", "P_r")


@dataclass
class RankReport:
    rows: List[RegionStats]

    def table(self) -> List[dict]:
        return [asdict(r) for r in self.rows]

    def to_text(self) -> str:
        cells = [list(_HEADERS)]
        for r in self.rows:
            cells.append([
                str(r.region_id), r.region_name, str(r.v_r),
                f"{r.mu_r:.3f}", f"{r.sigma_r:.3f}", f"{r.a_max_r:.3f}",
                f"{r.a_min_r:.3f}", f"{r.p_r:.3f}",
            ])
        widths = [max(len(row[i]) for row in cells) for i in range(len(_HEADERS))]
        lines = []
        for row in cells:
            parts = [row[1].ljust(widths[1]) if i == 1 else row[i].rjust(widths[i])
                     for i in range(len(row))]
            lines.append("  ".join(parts).rstrip())
        return "\n".join(lines) + "\n"

    def write(self, text_path, table_path: Optional[Path] = None) -> None:
        Path(text_path).write_text(self.to_text())
        if table_path is not None:
            with open(table_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=_COLUMNS, delimiter="\t")
                writer.writeheader()
                for row in self.table():
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                     for k, v in row.items()})


def rank_report(stats: List[RegionStats], top_n: int = 20) -> RankReport:
    ordered = sorted(stats, key=lambda s: (-s.v_r, -s.mu_r, s.region_id))
    return RankReport(ordered[: max(int(top_n), 0)])


def read_rank_table(path) -> List[RegionStats]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return [RegionStats(
            region_id=int(row["region_id"]), region_name=row["region_name"],
            v_r=int(row["v_r"]), mu_r=float(row["mu_r"]), sigma_r=float(row["sigma_r"]),
            a_max_r=float(row["a_max_r"]), a_min_r=float(row["a_min_r"]), p_r=float(row["p_r"]),
        ) for row in reader]
