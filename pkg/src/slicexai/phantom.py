"""Synthetic labelled volumes with a planted class-discriminative sphere.

Every volume is a smooth radial gradient plus Gaussian noise. Positive-class
scans lose ``lesion_delta`` intensity inside the lesion sphere (a stand-in
for atrophy); a second sphere of identical size, the distractor, carries no
class signal. The atlas labels the lesion ``1`` and the distractor ``2``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InvalidSpec, MalformedHeader
from .regions import AtlasVolume, load_atlas, save_atlas
from .volume import Volume3D, load_volume, save_volume

POSITIVE = 1
NEGATIVE = 0

LESION = 1
DISTRACTOR = 2
ATLAS_NAMES = {LESION: "lesion", DISTRACTOR: "distractor"}


@dataclass(frozen=True)
class PhantomSpec:
    volume_shape: Tuple[int, int, int] = (32, 32, 32)
    n_subjects: int = 20
    scans_per_subject: int = 1
    lesion_center: Tuple[int, int, int] = (12, 12, 12)
    lesion_radius: float = 5.0
    lesion_delta: float = 0.5
    noise_sigma: float = 1.0
    seed: int = 0
    # defaults to the lesion centre mirrored through the volume centre
    distractor_center: Optional[Tuple[int, int, int]] = None
    gradient_amplitude: float = 1.0
    subject_prefix: str = "sub"

    def resolved_distractor(self) -> Tuple[int, int, int]:
        if self.distractor_center is not None:
            return tuple(int(c) for c in self.distractor_center)
        return tuple(int(d - 1 - c) for d, c in zip(self.volume_shape, self.lesion_center))

    def validate(self) -> None:
        shape = tuple(self.volume_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise InvalidSpec(f"volume_shape must be three positive integers, got {shape}")
        if self.n_subjects < 2:
            raise InvalidSpec(f"n_subjects must be at least 2, got {self.n_subjects}")
        if not 1 <= self.scans_per_subject <= 3:
            raise InvalidSpec(f"scans_per_subject must be in 1..3, got {self.scans_per_subject}")
        if self.lesion_radius <= 0:
            raise InvalidSpec(f"lesion_radius must be positive, got {self.lesion_radius}")
        if self.noise_sigma < 0:
            raise InvalidSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name, center in (("lesion", self.lesion_center),
                             ("distractor", self.resolved_distractor())):
            if len(center) != 3:
                raise InvalidSpec(f"{name} centre must have three coordinates")
            for c, d in zip(center, shape):
                if c - self.lesion_radius < 0 or c + self.lesion_radius > d - 1:
                    raise InvalidSpec(
                        f"{name} sphere (centre {tuple(center)}, radius {self.lesion_radius}) "
                        f"does not lie inside volume {shape}"
                    )
        gap = math.dist(self.lesion_center, self.resolved_distractor())
        if gap <= 2 * self.lesion_radius:
            raise InvalidSpec(f"lesion and distractor spheres overlap (centre distance {gap:.2f})")


@dataclass
class PhantomDataset:
    samples: List[Tuple[Volume3D, int]]
    subjects: Dict[str, List[int]]
    atlas: AtlasVolume
    spec: Optional[PhantomSpec] = None

    def labels_by_subject(self) -> Dict[str, int]:
        return {sid: self.samples[idx[0]][1] for sid, idx in self.subjects.items()}

    def select(self, subject_ids) -> List[Tuple[Volume3D, int]]:
        return [self.samples[i] for sid in sorted(subject_ids) for i in self.subjects[sid]]


def sphere_mask(shape, center, radius) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)
    return ((grid - c) ** 2).sum(axis=0) <= radius ** 2


def radial_gradient(shape, amplitude: float = 1.0) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64)
    centre = (np.asarray(shape, dtype=np.float64) - 1.0).reshape(3, 1, 1, 1) / 2.0
    r = np.sqrt(((grid - centre) ** 2).sum(axis=0))
    return amplitude * (1.0 - r / (min(shape) / 2.0))


def phantom_atlas(spec: PhantomSpec) -> AtlasVolume:
    labels = np.zeros(spec.volume_shape, dtype=np.int64)
    labels[sphere_mask(spec.volume_shape, spec.lesion_center, spec.lesion_radius)] = 1
    labels[sphere_mask(spec.volume_shape, spec.resolved_distractor(), spec.lesion_radius)] = 2
    return AtlasVolume(labels, dict(ATLAS_NAMES))


def generate_phantom_dataset(spec: PhantomSpec) -> PhantomDataset:
    spec.validate()
    shape = tuple(spec.volume_shape)
    base = radial_gradient(shape, spec.gradient_amplitude)
    lesion = sphere_mask(shape, spec.lesion_center, spec.lesion_radius)

    rng = np.random.default_rng(spec.seed)
    labels = np.array([POSITIVE] * (spec.n_subjects // 2)
                      + [NEGATIVE] * (spec.n_subjects - spec.n_subjects // 2))
    rng.shuffle(labels)

    width = len(str(spec.n_subjects - 1))
    samples, subjects = [], {}
    for s, label in enumerate(labels):
        sid = f"{spec.subject_prefix}{s:0{width}d}"
        subjects[sid] = []
        for scan in range(spec.scans_per_subject):
            index = len(samples)
            # per-sample stream, independent of generation order
            noise_rng = np.random.default_rng([spec.seed, index])
            data = base + spec.noise_sigma * noise_rng.standard_normal(shape) \
                if spec.noise_sigma > 0 else base.copy()
            if label == POSITIVE:
                data = data - spec.lesion_delta * lesion
            subjects[sid].append(index)
            samples.append((Volume3D(data, subject_id=sid, scan_id=str(scan)), int(label)))
    return PhantomDataset(samples, subjects, phantom_atlas(spec), spec)


MANIFEST_NAME = "manifest.txt"
ATLAS_NAME = "atlas.nii.gz"


def format_record(**fields) -> str:
    return "\t".join(f"{k}={v}" for k, v in fields.items())


def parse_record(line: str) -> dict:
    record = {}
    for part in line.rstrip("\n").split("\t"):
        key, sep, value = part.partition("=")
        if not sep:
            raise MalformedHeader(f"manifest field without '=': {part!r}")
        record[key] = value
    return record


def write_dataset(ds: PhantomDataset, directory) -> Path:
    """Write volumes, atlas and a line-oriented manifest under ``directory``."""
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    lines = []
    for vol, label in ds.samples:
        rel = Path("volumes") / f"{vol.subject_id}_{vol.scan_id}.nii.gz"
        save_volume(vol, directory / rel)
        lines.append(format_record(path=rel.as_posix(), subject_id=vol.subject_id,
                                   scan_id=vol.scan_id, label=label))
    save_atlas(ds.atlas, directory / ATLAS_NAME)
    manifest = directory / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_dataset(directory) -> PhantomDataset:
    directory = Path(directory)
    samples, subjects = [], {}
    for line in (directory / MANIFEST_NAME).read_text().splitlines():
        if not line.strip():
            continue
        rec = parse_record(line)
        vol = load_volume(directory / rec["path"], subject_id=rec["subject_id"],
                          scan_id=rec.get("scan_id", "0"))
        subjects.setdefault(rec["subject_id"], []).append(len(samples))
        samples.append((vol, int(rec["label"])))
    atlas = load_atlas(directory / ATLAS_NAME) if (directory / ATLAS_NAME).exists() else None
    return PhantomDataset(samples, subjects, atlas)


def spec_from_dict(d: dict) -> PhantomSpec:
    known = set(PhantomSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise InvalidSpec(f"unknown phantom fields: {sorted(unknown)}")
    d = dict(d)
    for key in ("volume_shape", "lesion_center", "distractor_center"):
        if d.get(key) is not None:
            d[key] = tuple(int(x) for x in d[key])
    return PhantomSpec(**d)


def spec_to_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
