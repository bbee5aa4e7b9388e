"""Sample metadata, age labels, subject-exclusive splits and the synthetic eye renderer."""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import (InsufficientSubjects, IoError, ManifestParseError, OutOfStudyRange,
                     SchemaError)

MIN_AGE, MAX_AGE = 4, 16
MANIFEST_COLUMNS = ("subject_id", "birth_year", "capture_year", "sensor", "eye_side",
                    "modality", "image_path")


class Sensor(enum.Enum):
    A = "A"
    B = "B"


class EyeSide(enum.Enum):
    L = "L"
    R = "R"


class Modality(enum.Enum):
    EYE = "eye"
    IRIS = "iris"


class AgeGroup(enum.IntEnum):
    YOUNG = 0  # 4-9
    OLD = 1    # 10-16


def compute_age(birth_year: int, capture_year: int) -> int:
    if capture_year < birth_year:
        raise OutOfStudyRange(f"capture year {capture_year} precedes birth year {birth_year}")
    age = capture_year - birth_year
    if not MIN_AGE <= age <= MAX_AGE:
        raise OutOfStudyRange(f"age {age} outside {MIN_AGE}..{MAX_AGE}")
    return age


def assign_age_group(age: int) -> AgeGroup:
    if not MIN_AGE <= age <= MAX_AGE:
        raise OutOfStudyRange(f"age {age} outside {MIN_AGE}..{MAX_AGE}")
    return AgeGroup.YOUNG if age <= 9 else AgeGroup.OLD


@dataclass(frozen=True)
class SampleRecord:
    subject_id: str
    birth_year: int
    capture_year: int
    sensor: Sensor = Sensor.A
    eye_side: EyeSide = EyeSide.L
    modality: Modality = Modality.EYE
    image_path: str = ""

    def __post_init__(self):
        compute_age(self.birth_year, self.capture_year)

    @property
    def age(self) -> int:
        return self.capture_year - self.birth_year

    @property
    def age_group(self) -> AgeGroup:
        return assign_age_group(self.age)

    @property
    def sample_id(self) -> str:
        return Path(self.image_path).stem


# -- manifest ---------------------------------------------------------------

def write_manifest(path, records: list[SampleRecord]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in records:
                w.writerow([r.subject_id, r.birth_year, r.capture_year, r.sensor.value,
                            r.eye_side.value, r.modality.value, r.image_path])
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> list[SampleRecord]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise ManifestParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty manifest, no header")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    col = {name: header.index(name) for name in MANIFEST_COLUMNS}
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            rec = SampleRecord(
                subject_id=row[col["subject_id"]],
                birth_year=int(row[col["birth_year"]]),
                capture_year=int(row[col["capture_year"]]),
                sensor=Sensor(row[col["sensor"]]),
                eye_side=EyeSide(row[col["eye_side"]]),
                modality=Modality(row[col["modality"]]),
                image_path=row[col["image_path"]],
            )
        except (ValueError, OutOfStudyRange) as exc:
            raise ManifestParseError(str(exc), lineno) from exc
        records.append(rec)
    return records


def validate_manifest(records: list[SampleRecord], root) -> None:
    root = Path(root)
    for i, r in enumerate(records, start=2):
        if not (root / r.image_path).is_file():
            raise ManifestParseError(f"image {r.image_path} not found under {root}", i)


# -- subject-exclusive splitting -------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset

    def sets(self):
        return (self.train, self.val, self.test)

    def split_of(self, subject_id: str) -> str | None:
        for name, s in zip(SPLIT_NAMES, self.sets()):
            if subject_id in s:
                return name
        return None

    def to_json(self) -> dict:
        return {name: sorted(s) for name, s in zip(SPLIT_NAMES, self.sets())}

    @classmethod
    def from_json(cls, data: dict) -> "SplitAssignment":
        return cls(*(frozenset(data[name]) for name in SPLIT_NAMES))


def subject_exclusive_split(manifest: list[SampleRecord], ratios=(0.8, 0.1, 0.1),
                            seed: int = 42) -> SplitAssignment:
    """Assign whole subjects to train/val/test.

    Subjects are shuffled with ``seed`` and then taken largest first (stable,
    so the shuffle breaks ties); each goes to the split furthest below its
    target image count. Splits left empty are filled from the final
    subjects, and a swap pass then tries to put both age groups in every
    split.
    """
    if not manifest:
        raise InsufficientSubjects("empty manifest")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative fractions summing to 1")
    counts = Counter(r.subject_id for r in manifest)
    groups: dict[str, Counter] = defaultdict(Counter)
    for r in manifest:
        groups[r.subject_id][r.age_group] += 1
    subjects = sorted(counts)
    if len(subjects) < 3:
        raise InsufficientSubjects(f"need at least 3 subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    order.sort(key=lambda s: -counts[s])

    total = sum(counts.values())
    targets = [f * total for f in ratios]
    members: list[list[str]] = [[], [], []]
    filled = [0, 0, 0]
    for idx, s in enumerate(order):
        empty = [k for k in range(3) if not members[k]]
        remaining = len(order) - idx
        candidates = empty if empty and remaining <= len(empty) else range(3)
        k = max(candidates, key=lambda k: (targets[k] - filled[k], -k))
        members[k].append(s)
        filled[k] += counts[s]

    _balance_age_groups(members, counts, groups, targets)
    return SplitAssignment(*(frozenset(m) for m in members))


def _balance_age_groups(members, counts, groups, targets):
    present = set().union(*(set(g) for g in groups.values()))

    def covered(m):
        return sum(1 for g in present if any(groups[s][g] for s in m)) if m else len(present)

    def violations(ms):
        return sum(len(present) - covered(m) for m in ms)

    def error(ms):
        return sum(abs(targets[k] - sum(counts[s] for s in ms[k])) for k in range(3))

    current = violations(members)
    while current:
        best = None
        for k in range(3):
            for j in range(3):
                if j == k:
                    continue
                for a in members[k]:
                    for b in members[j]:
                        trial = [list(m) for m in members]
                        trial[k][trial[k].index(a)] = b
                        trial[j][trial[j].index(b)] = a
                        v = violations(trial)
                        if v < current:
                            key = (v, error(trial), k, j, a, b)
                            if best is None or key < best[0]:
                                best = (key, trial)
        if best is None:
            break
        members[:] = best[1]
        current = best[0][0]
    _polish(members, counts, covered, targets)


def _polish(members, counts, covered, targets):
    """Greedy moves and swaps that shrink the image-count error.

    A step never empties a split and never loses age-group coverage, so
    it cannot undo the repair above.
    """
    filled = [sum(counts[s] for s in m) for m in members]
    cover = [covered(m) for m in members]
    while True:
        base = sum(abs(t - f) for t, f in zip(targets, filled))
        best = None
        for k in range(3):
            for j in range(3):
                if j == k:
                    continue
                # move a from k to j (b is None) or swap a with b
                for a in members[k]:
                    for b in [None, *members[j]]:
                        delta = counts[a] - (counts[b] if b is not None else 0)
                        new = list(filled)
                        new[k] -= delta
                        new[j] += delta
                        err = sum(abs(t - f) for t, f in zip(targets, new))
                        if err >= base - 1e-9 or (best is not None and err >= best[0] - 1e-9):
                            continue
                        mk = [s for s in members[k] if s != a] + ([b] if b is not None else [])
                        mj = [s for s in members[j] if s != b] + [a]
                        if not mk or covered(mk) < cover[k] or covered(mj) < cover[j]:
                            continue
                        best = (err, k, j, mk, mj, new)
        if best is None:
            return
        _, k, j, mk, mj, filled = best
        members[k], members[j] = mk, mj
        cover[k], cover[j] = covered(mk), covered(mj)


# -- synthetic eyes ---------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    subject_count: int = 120
    sessions_per_subject: int = 8
    image_size: tuple = (640, 480)
    age_range: tuple = (MIN_AGE, MAX_AGE)
    cue_strength: float = 1.0
    seed: int = 42
    eyes_per_session: int = 1
    sensor_b_fraction: float = 0.0
    first_capture_year: int = 2016

    def __post_init__(self):
        if self.subject_count < 1:
            raise ValueError("subject_count must be >= 1")
        if self.sessions_per_subject < 1:
            raise ValueError("sessions_per_subject must be >= 1")
        if not 0.0 <= self.cue_strength <= 1.0:
            raise ValueError("cue_strength must lie in [0, 1]")
        if self.eyes_per_session not in (1, 2):
            raise ValueError("eyes_per_session must be 1 or 2")
        if not 0.0 <= self.sensor_b_fraction <= 1.0:
            raise ValueError("sensor_b_fraction must lie in [0, 1]")
        lo, hi = self.age_range
        if not (MIN_AGE <= lo <= hi <= MAX_AGE):
            raise ValueError(f"age_range must lie within {MIN_AGE}..{MAX_AGE}")
        if self.sessions_per_subject // 2 > hi - lo:
            raise ValueError("too many biannual sessions for the age range")


@dataclass(frozen=True)
class EyeGeometry:
    """Ground-truth anatomy of one rendered eye, in output-image pixels."""

    pupil_center: tuple
    pupil_radius: float
    iris_center: tuple
    iris_radius: float
    lid_center_x: float
    lid_mid_y: float
    lid_half_width: float
    upper_aperture: float
    lower_aperture: float

    def upper_lid_y(self, x: float) -> float:
        t = (x - self.lid_center_x) / self.lid_half_width
        return self.lid_mid_y - self.upper_aperture * (1.0 - t * t)

    def lower_lid_y(self, x: float) -> float:
        t = (x - self.lid_center_x) / self.lid_half_width
        return self.lid_mid_y + self.lower_aperture * (1.0 - t * t)

    def scaled(self, f: float) -> "EyeGeometry":
        return EyeGeometry((self.pupil_center[0] * f, self.pupil_center[1] * f),
                           self.pupil_radius * f,
                           (self.iris_center[0] * f, self.iris_center[1] * f),
                           self.iris_radius * f, self.lid_center_x * f, self.lid_mid_y * f,
                           self.lid_half_width * f, self.upper_aperture * f,
                           self.lower_aperture * f)


@dataclass(frozen=True)
class IrisTexture:
    """Per-subject polar texture: integer angular and real radial frequencies."""

    angular: tuple
    radial: tuple
    phase: tuple
    amplitude: tuple


def _age_fraction(age: float) -> float:
    return (age - MIN_AGE) / (MAX_AGE - MIN_AGE)


def _subject_texture(rng: np.random.Generator, n: int = 12) -> IrisTexture:
    return IrisTexture(tuple(rng.uniform(14.0, 34.0, n)), tuple(rng.uniform(1.0, 3.5, n)),
                       tuple(rng.uniform(0, 2 * np.pi, n)), tuple(rng.uniform(0.5, 1.0, n)))


def render_eye(geom: EyeGeometry, texture: IrisTexture, size=(640, 480), *,
               texture_scale: float = 1.0, skin: float = 0.62, sclera: float = 0.82,
               iris_level: float = 0.36, pupil_level: float = 0.06,
               noise: float = 0.01, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize one NIR-like eye with anti-aliased pupil, iris, sclera and eyelids."""
    w, h = size
    rng = rng if rng is not None else np.random.default_rng(0)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    shade = 1.0 - 0.12 * (((xx - w / 2) / w) ** 2 + ((yy - h / 2) / h) ** 2)
    img = skin * shade + gaussian_filter(rng.normal(0.0, 0.03, (h // 8, w // 8)), 2.0).repeat(8, 0).repeat(8, 1)[:h, :w]

    t = (xx - geom.lid_center_x) / geom.lid_half_width
    bulge = np.clip(1.0 - t * t, 0.0, None)
    upper = geom.lid_mid_y - geom.upper_aperture * bulge
    lower = geom.lid_mid_y + geom.lower_aperture * bulge
    opening = np.clip(np.minimum(yy - upper, lower - yy), 0, 1)

    icx, icy = geom.iris_center
    pcx, pcy = geom.pupil_center
    d_iris = np.hypot(xx - icx, yy - icy)
    d_pupil = np.hypot(xx - pcx, yy - pcy)
    in_iris = np.clip(geom.iris_radius - d_iris + 0.5, 0, 1)
    in_pupil = np.clip(geom.pupil_radius - d_pupil + 0.5, 0, 1)

    eye = np.full_like(img, sclera) - 0.05 * (d_iris / geom.lid_half_width)
    # iris texture only where the iris disc has coverage
    r0 = int(max(0, icy - geom.iris_radius - 2)), int(min(h, icy + geom.iris_radius + 3))
    c0 = int(max(0, icx - geom.iris_radius - 2)), int(min(w, icx + geom.iris_radius + 3))
    sub = (slice(*r0), slice(*c0))
    theta = np.arctan2(yy[sub] - icy, xx[sub] - icx)
    rho = np.clip((d_iris[sub] - geom.pupil_radius) / (geom.iris_radius - geom.pupil_radius), 0, 1)
    tex = np.zeros_like(theta)
    for k, q, ph, a in zip(texture.angular, texture.radial, texture.phase, texture.amplitude):
        tex += a * np.cos(round(k * texture_scale) * theta + 2 * np.pi * q * texture_scale * rho + ph)
    tex /= math.sqrt(len(texture.angular) / 2.0)
    iris = np.full_like(img, iris_level)
    iris[sub] = iris_level + 0.07 * tex - 0.06 * rho
    eye = eye * (1 - in_iris) + iris * in_iris
    eye = eye * (1 - in_pupil) + pupil_level * in_pupil

    img = img * (1 - opening) + eye * opening
    if noise:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sample_geometry(rng, age, cue, subject, side: EyeSide, size) -> EyeGeometry:
    w, h = size
    f = w / 640.0
    u = _age_fraction(age) - 0.5
    cx = w / 2 + rng.normal(0.0, 10.0 * f)
    cy = h / 2 + rng.normal(0.0, 8.0 * f)
    iris_r = (112.0 + cue * 26.0 * u) * f + subject["iris_offset"] * f
    pupil_r = rng.uniform(34.0, 46.0) * f
    pcx = cx + float(np.clip(rng.normal(0.0, 1.5), -4, 4)) * f
    pcy = cy + float(np.clip(rng.normal(0.0, 1.5), -4, 4)) * f
    shift = 14.0 * f if side is EyeSide.R else -14.0 * f
    return EyeGeometry(
        pupil_center=(pcx, pcy), pupil_radius=pupil_r, iris_center=(cx, cy), iris_radius=iris_r,
        lid_center_x=cx + shift, lid_mid_y=cy + 6.0 * f, lid_half_width=subject["half_width"] * f,
        upper_aperture=(98.0 + cue * 44.0 * u + subject["upper_offset"] + rng.normal(0, 3.0)) * f,
        lower_aperture=(82.0 + cue * 22.0 * u + subject["lower_offset"] + rng.normal(0, 2.0)) * f,
    )


def iter_synth(params: SynthParams, render: bool = True
               ) -> Iterator[tuple[np.ndarray | None, SampleRecord, EyeGeometry]]:
    """Yield ``(image, record, geometry)`` per subject-session-eye, in a fixed order.

    With ``render=False`` the image slot is None; records and geometry are
    unchanged.

    Sessions are biannual; each subject keeps one birth year, so integer ages
    never decrease across its sessions. Age acts on iris radius, eyelid
    aperture and texture frequency, each scaled by ``cue_strength``.
    """
    root = np.random.SeedSequence(params.seed)
    lo, hi = params.age_range
    span = params.sessions_per_subject // 2
    n_b = int(round(params.sensor_b_fraction * params.subject_count))
    for s_idx, s_seq in enumerate(root.spawn(params.subject_count)):
        srng = np.random.default_rng(s_seq)
        start_age = int(srng.integers(lo, hi - span + 1))
        start_half = int(srng.integers(0, 2))
        birth_year = params.first_capture_year - start_age
        subject = {
            "iris_offset": srng.normal(0.0, 3.0),
            "upper_offset": srng.normal(0.0, 5.0),
            "lower_offset": srng.normal(0.0, 3.0),
            "half_width": srng.uniform(235.0, 265.0),
            "texture": _subject_texture(srng),
        }
        if params.eyes_per_session == 2:
            sides = (EyeSide.L, EyeSide.R)
        else:
            sides = ((EyeSide.L, EyeSide.R)[int(srng.integers(0, 2))],)
        sensor = Sensor.B if s_idx >= params.subject_count - n_b else Sensor.A
        sid = f"S{s_idx:04d}"
        for k in range(params.sessions_per_subject):
            capture_year = params.first_capture_year + (start_half + k) // 2
            age = capture_year - birth_year
            for side in sides:
                irng = np.random.default_rng(np.random.SeedSequence(
                    [params.seed, s_idx, k, 0 if side is EyeSide.L else 1]))
                geom = _sample_geometry(irng, age, params.cue_strength, subject, side,
                                        params.image_size)
                tscale = 1.0 + 0.6 * params.cue_strength * (_age_fraction(age) - 0.5)
                img = render_eye(geom, subject["texture"], params.image_size,
                                 texture_scale=tscale, rng=irng) if render else None
                rec = SampleRecord(sid, birth_year, capture_year, sensor, side, Modality.EYE,
                                   f"images/{sid}_t{k:02d}_{side.value}.png")
                yield img, rec, geom


def synth_generate(params: SynthParams, with_geometry: bool = False):
    images, records, geoms = [], [], []
    for img, rec, geom in iter_synth(params):
        images.append(img)
        records.append(rec)
        geoms.append(geom)
    if with_geometry:
        return images, records, geoms
    return images, records


def apply_sensor_model(image: np.ndarray, sensor: Sensor, seed: int,
                       noise_sigma: float = 0.02, gain: float = 1.15) -> np.ndarray:
    """Sensor A is the identity; sensor B applies gain, a 3x3 box blur, noise and a clamp."""
    img = np.asarray(image, dtype=np.float32)
    if sensor is Sensor.A or sensor == "A":
        return img.copy()
    out = uniform_filter(img.astype(np.float64) * gain, size=3, mode="nearest")
    if noise_sigma:
        out = out + np.random.default_rng(seed).normal(0.0, noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def save_split(path, split: SplitAssignment, extra: dict | None = None) -> None:
    data = split.to_json()
    if extra:
        data.update(extra)
    try:
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))
    except OSError as exc:
        raise IoError(f"cannot write split file {path}: {exc}") from exc
