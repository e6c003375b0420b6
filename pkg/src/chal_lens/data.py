"""Hierarchical challenge data model: patients -> images -> instances, plus outcomes.

Tables are plain UTF-8 CSV with a header row and ``true``/``false`` flag literals.
Label masks are 16-bit binary PGM files (``P5``, maxval 65535).
"""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

GLOBAL_FLAGS = ("img_too_bright", "img_too_dark", "img_dirty_lens")
BACKGROUND_FLAGS = (
    "bg_blood",
    "bg_smoke",
    "bg_motion",
    "bg_reflections",
    "bg_other_object",
)
INSTRUMENT_FLAGS = (
    "in_blood",
    "in_smoke",
    "in_tissue",
    "in_motion",
    "in_reflections",
    "in_covered_by_instrument",
    "in_other_object",
    "in_too_bright",
    "in_too_dark",
)
# Fixed-effect column order used throughout: instrument, background, global.
CHARACTERISTICS = INSTRUMENT_FLAGS + BACKGROUND_FLAGS + GLOBAL_FLAGS

IMAGE_COLUMNS = ("image_id", "patient_id") + GLOBAL_FLAGS + BACKGROUND_FLAGS
INSTANCE_COLUMNS = ("image_id", "instance_id") + INSTRUMENT_FLAGS
OUTCOME_COLUMNS = ("image_id", "instance_id", "algorithm_id", "tp", "fp", "fn")
OPTIONAL_OUTCOME_COLUMNS = ("tn", "score")

COVERED_FLAG = "in_covered_by_instrument"
MAX_LABEL = 2**16


class DataError(ValueError):
    """Base class for dataset validation failures."""


class SchemaError(DataError):
    pass


class MissingFlagError(SchemaError):
    pass


class DanglingReferenceError(DataError):
    pass


class DuplicateKeyError(DataError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: str
    instrument_flags: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.instrument_flags) != len(INSTRUMENT_FLAGS):
            raise MissingFlagError(
                f"instance {self.instance_id!r}: expected {len(INSTRUMENT_FLAGS)} "
                f"instrument flags, got {len(self.instrument_flags)}"
            )

    def flag(self, name: str) -> bool:
        return self.instrument_flags[INSTRUMENT_FLAGS.index(name)]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    global_flags: Tuple[bool, ...]
    background_flags: Tuple[bool, ...]
    instances: Tuple[InstanceRecord, ...] = ()

    def __post_init__(self):
        if len(self.global_flags) != len(GLOBAL_FLAGS):
            raise MissingFlagError(
                f"image {self.image_id!r}: expected {len(GLOBAL_FLAGS)} global flags, "
                f"got {len(self.global_flags)}"
            )
        if len(self.background_flags) != len(BACKGROUND_FLAGS):
            raise MissingFlagError(
                f"image {self.image_id!r}: expected {len(BACKGROUND_FLAGS)} background "
                f"flags, got {len(self.background_flags)}"
            )

    def flag(self, name: str) -> bool:
        if name in GLOBAL_FLAGS:
            return self.global_flags[GLOBAL_FLAGS.index(name)]
        return self.background_flags[BACKGROUND_FLAGS.index(name)]


@dataclass(frozen=True)
class InstanceOutcome:
    image_id: str
    instance_id: str
    algorithm_id: str
    tp: int
    fp: int
    fn: int
    tn: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise SchemaError(f"{self.key}: {name} must be >= 0, got {v}")
        if self.tp + self.fn <= 0:
            raise SchemaError(f"{self.key}: reference instance is empty (tp+fn = 0)")

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.image_id, self.instance_id, self.algorithm_id)


@dataclass(frozen=True)
class LabelMask:
    """2-D grid of instance labels; 0 is background, k >= 1 is instance k."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise SchemaError(f"label mask must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if np.issubdtype(arr.dtype, np.bool_):
                arr = arr.astype(np.uint16)
            else:
                raise SchemaError(f"label mask must be integer-valued, got {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() >= MAX_LABEL):
            raise SchemaError("label values must lie in [0, 65535]")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ChallengeDataset:
    patients: Tuple[PatientRecord, ...]
    algorithms: Tuple[str, ...]
    images: Tuple[ImageRecord, ...]
    outcomes: Tuple[InstanceOutcome, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        validate(self)

    @cached_property
    def outcome_index(self) -> Dict[Tuple[str, str, str], InstanceOutcome]:
        return {o.key: o for o in self.outcomes}

    @property
    def n_instances(self) -> int:
        return sum(len(im.instances) for im in self.images)

    def image(self, image_id: str) -> ImageRecord:
        return self._image_index[image_id]

    @cached_property
    def _image_index(self) -> Dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def subset(self, images: Iterable[ImageRecord]) -> "ChallengeDataset":
        """Dataset restricted to ``images`` (and the patients/outcomes they reference)."""
        images = tuple(images)
        keep_img = {im.image_id for im in images}
        keep_pat = {im.patient_id for im in images}
        patients = [p for p in self.patients if p.patient_id in keep_pat]
        outcomes = [o for o in self.outcomes if o.image_id in keep_img]
        return ChallengeDataset(patients, self.algorithms, images, outcomes)


def validate(ds: ChallengeDataset) -> None:
    """Check referential integrity of ``ds``; raises a :class:`DataError` subclass."""
    pat_ids = [p.patient_id for p in ds.patients]
    _no_duplicates(pat_ids, "patient_id")
    _no_duplicates(list(ds.algorithms), "algorithm_id")
    known_pat = set(pat_ids)
    _no_duplicates([im.image_id for im in ds.images], "image_id")
    instance_keys = set()
    for im in ds.images:
        if im.patient_id not in known_pat:
            raise DanglingReferenceError(
                f"image {im.image_id!r} references unknown patient {im.patient_id!r}"
            )
        ids = [inst.instance_id for inst in im.instances]
        _no_duplicates(ids, f"instance_id within image {im.image_id!r}")
        if len(ids) < 2:
            for inst in im.instances:
                if inst.flag(COVERED_FLAG):
                    raise SchemaError(
                        f"image {im.image_id!r}, instance {inst.instance_id!r}: "
                        f"{COVERED_FLAG} requires at least 2 instances in the image"
                    )
        instance_keys.update((im.image_id, i) for i in ids)
    known_alg = set(ds.algorithms)
    seen = set()
    for o in ds.outcomes:
        if (o.image_id, o.instance_id) not in instance_keys:
            raise DanglingReferenceError(
                f"outcome references unknown instance ({o.image_id!r}, {o.instance_id!r})"
            )
        if o.algorithm_id not in known_alg:
            raise DanglingReferenceError(f"outcome references unknown algorithm {o.algorithm_id!r}")
        if o.key in seen:
            raise DuplicateKeyError(f"duplicate outcome for {o.key}")
        seen.add(o.key)


def _no_duplicates(values: Sequence[str], what: str) -> None:
    dup = [v for v, c in Counter(values).items() if c > 1]
    if dup:
        raise DuplicateKeyError(f"duplicate {what}: {dup[0]!r}")


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_bool(value: Optional[str], where: str) -> bool:
    if value == "true":
        return True
    if value == "false":
        return False
    if value is None or value == "":
        raise MissingFlagError(f"{where}: missing flag value")
    raise SchemaError(f"{where}: expected 'true' or 'false', got {value!r}")


def _parse_count(value: Optional[str], where: str) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected a non-negative integer, got {value!r}") from None
    if v < 0:
        raise SchemaError(f"{where}: expected a non-negative integer, got {v}")
    return v


def _read_table(path, required: Sequence[str]) -> Tuple[List[str], List[Tuple[int, dict]]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            kind = MissingFlagError if any(c.startswith(("in_", "bg_", "img_")) for c in missing) else SchemaError
            raise kind(f"{path.name}: missing column(s) {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row:
                raise SchemaError(f"{path.name} line {lineno}: too many fields")
            rows.append((lineno, row))
    return header, rows


def read_images(path) -> List[ImageRecord]:
    """Images without instances, in file order."""
    name = Path(path).name
    _, rows = _read_table(path, IMAGE_COLUMNS)
    out = []
    for lineno, row in rows:
        where = f"{name} line {lineno}"
        if not row["image_id"] or not row["patient_id"]:
            raise SchemaError(f"{where}: image_id and patient_id must be non-empty")
        g = tuple(_parse_bool(row[c], f"{where}, column {c}") for c in GLOBAL_FLAGS)
        b = tuple(_parse_bool(row[c], f"{where}, column {c}") for c in BACKGROUND_FLAGS)
        out.append(ImageRecord(row["image_id"], row["patient_id"], g, b))
    return out


def read_instances(path) -> List[Tuple[str, InstanceRecord]]:
    name = Path(path).name
    _, rows = _read_table(path, INSTANCE_COLUMNS)
    out = []
    for lineno, row in rows:
        where = f"{name} line {lineno}"
        if not row["instance_id"]:
            raise SchemaError(f"{where}: instance_id must be non-empty")
        f = tuple(_parse_bool(row[c], f"{where}, column {c}") for c in INSTRUMENT_FLAGS)
        out.append((row["image_id"], InstanceRecord(row["instance_id"], f)))
    return out


def read_outcomes(path) -> List[InstanceOutcome]:
    name = Path(path).name
    header, rows = _read_table(path, OUTCOME_COLUMNS)
    has_tn = "tn" in header
    has_score = "score" in header
    out = []
    for lineno, row in rows:
        where = f"{name} line {lineno}"
        counts = {c: _parse_count(row[c], f"{where}, column {c}") for c in ("tp", "fp", "fn")}
        tn = _parse_count(row["tn"], f"{where}, column tn") if has_tn and row["tn"] != "" else None
        score = None
        if has_score and row["score"] != "":
            try:
                score = float(row["score"])
            except ValueError:
                raise SchemaError(f"{where}, column score: not a number {row['score']!r}") from None
        try:
            out.append(
                InstanceOutcome(row["image_id"], row["instance_id"], row["algorithm_id"], tn=tn, score=score, **counts)
            )
        except SchemaError as exc:
            raise SchemaError(f"{where}: {exc}") from None
    return out


def assemble(
    images: Sequence[ImageRecord],
    instances: Sequence[Tuple[str, InstanceRecord]],
    outcomes: Sequence[InstanceOutcome] = (),
    algorithms: Optional[Sequence[str]] = None,
) -> ChallengeDataset:
    """Attach instances to images, derive patients, and validate."""
    by_image: Dict[str, List[InstanceRecord]] = {im.image_id: [] for im in images}
    if len(by_image) != len(images):
        _no_duplicates([im.image_id for im in images], "image_id")
    for image_id, inst in instances:
        if image_id not in by_image:
            raise DanglingReferenceError(
                f"instance {inst.instance_id!r} references unknown image_id {image_id!r}"
            )
        by_image[image_id].append(inst)
    patients = list(dict.fromkeys(im.patient_id for im in images))
    if algorithms is None:
        algorithms = list(dict.fromkeys(o.algorithm_id for o in outcomes))
    full = [
        ImageRecord(im.image_id, im.patient_id, im.global_flags, im.background_flags, tuple(by_image[im.image_id]))
        for im in images
    ]
    return ChallengeDataset([PatientRecord(p) for p in patients], algorithms, full, outcomes)


def load_dataset(images_file, instances_file, outcomes_or_mask_dir=None, algorithms=None) -> ChallengeDataset:
    """Read and validate a dataset.

    ``outcomes_or_mask_dir`` is either an ``outcomes.csv`` file or a directory holding
    ``ref/<image_id>.pgm`` and ``pred/<algorithm_id>/<image_id>.pgm``; in the latter case
    outcomes are computed by instance matching. Reference label ``k`` corresponds to
    ``instance_id == str(k)``.
    """
    images = read_images(images_file)
    instances = read_instances(instances_file)
    outcomes: List[InstanceOutcome] = []
    if outcomes_or_mask_dir is not None:
        src = Path(outcomes_or_mask_dir)
        if src.is_dir():
            from .metrics import outcomes_from_masks

            skeleton = assemble(images, instances, (), algorithms or ())
            if algorithms is None:
                pred_dir = src / "pred"
                algorithms = sorted(p.name for p in pred_dir.iterdir() if p.is_dir()) if pred_dir.is_dir() else []
                skeleton = assemble(images, instances, (), algorithms)
            outcomes = outcomes_from_masks(skeleton, src)
        elif src.is_file():
            outcomes = read_outcomes(src)
        else:
            raise FileNotFoundError(str(src))
    return assemble(images, instances, outcomes, algorithms)


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def save_dataset(ds: ChallengeDataset, directory) -> Dict[str, Path]:
    """Write ``images.csv``, ``instances.csv`` and ``outcomes.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.csv" for k in ("images", "instances", "outcomes")}
    with open(paths["images"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMAGE_COLUMNS)
        for im in ds.images:
            w.writerow([im.image_id, im.patient_id] + [_fmt_bool(v) for v in im.global_flags + im.background_flags])
    with open(paths["instances"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INSTANCE_COLUMNS)
        for im in ds.images:
            for inst in im.instances:
                w.writerow([im.image_id, inst.instance_id] + [_fmt_bool(v) for v in inst.instrument_flags])
    write_outcomes(ds.outcomes, paths["outcomes"])
    return paths


def write_outcomes(outcomes: Sequence[InstanceOutcome], path) -> None:
    has_tn = any(o.tn is not None for o in outcomes)
    has_score = any(o.score is not None for o in outcomes)
    cols = list(OUTCOME_COLUMNS) + (["tn"] if has_tn else []) + (["score"] if has_score else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for o in outcomes:
            row = [o.image_id, o.instance_id, o.algorithm_id, o.tp, o.fp, o.fn]
            if has_tn:
                row.append("" if o.tn is None else o.tn)
            if has_score:
                row.append("" if o.score is None else format(o.score, ".17g"))
            w.writerow(row)


# ---------------------------------------------------------------------------
# PGM masks


def read_pgm(path) -> LabelMask:
    """Read a binary (P5) PGM; 8- and 16-bit samples are accepted."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SchemaError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise SchemaError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SchemaError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < MAX_LABEL:
        raise SchemaError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    body = raw[pos : pos + need]
    if len(body) != need:
        raise SchemaError(f"{path}: expected {need} bytes of pixel data, got {len(body)}")
    labels = np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.uint16)
    return LabelMask(labels)


def write_pgm(mask: LabelMask, path) -> None:
    """Write ``mask`` as 16-bit P5 PGM with maxval 65535."""
    m = mask if isinstance(mask, LabelMask) else LabelMask(np.asarray(mask))
    header = f"P5\n{m.width} {m.height}\n65535\n".encode("ascii")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.labels.astype(">u2").tobytes())


# ---------------------------------------------------------------------------
# Summaries


@dataclass(frozen=True)
class AuditReport:
    image_related_count: int
    instance_count: int
    total: int

    def __add__(self, other: "AuditReport") -> "AuditReport":
        return AuditReport(
            self.image_related_count + other.image_related_count,
            self.instance_count + other.instance_count,
            self.total + other.total,
        )

    def to_dict(self) -> dict:
        return {
            "image_related_count": self.image_related_count,
            "instance_count": self.instance_count,
            "total": self.total,
        }


def audit_annotation_counts(ds: ChallengeDataset) -> AuditReport:
    """Number of meta-data annotations: 8 per image and 9 per instrument instance."""
    image_related = (len(BACKGROUND_FLAGS) + len(GLOBAL_FLAGS)) * len(ds.images)
    instance = len(INSTRUMENT_FLAGS) * ds.n_instances
    return AuditReport(image_related, instance, image_related + instance)


@dataclass
class FrequencyTable:
    proportions: Dict[str, float]
    entity: Dict[str, str]
    n_entities: Dict[str, int]
    instrument_count_histogram: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "proportions": dict(self.proportions),
            "entity": dict(self.entity),
            "n_entities": dict(self.n_entities),
            "instrument_count_histogram": {str(k): v for k, v in self.instrument_count_histogram.items()},
        }


def summarize_characteristics(ds: ChallengeDataset) -> FrequencyTable:
    """Share of entities for which each characteristic holds."""
    n_img = len(ds.images)
    insts = [inst for im in ds.images for inst in im.instances]
    n_inst = len(insts)
    props: Dict[str, float] = {}
    entity: Dict[str, str] = {}
    for name in INSTRUMENT_FLAGS:
        props[name] = sum(i.flag(name) for i in insts) / n_inst if n_inst else 0.0
        entity[name] = "instance"
    for name in BACKGROUND_FLAGS:
        props[name] = sum(im.flag(name) for im in ds.images) / n_img if n_img else 0.0
        entity[name] = "background"
    for name in GLOBAL_FLAGS:
        props[name] = sum(im.flag(name) for im in ds.images) / n_img if n_img else 0.0
        entity[name] = "image"
    counts = Counter(len(im.instances) for im in ds.images)
    hist = {k: counts[k] / n_img for k in sorted(counts)} if n_img else {}
    return FrequencyTable(
        props,
        entity,
        {"image": n_img, "background": n_img, "instance": n_inst},
        hist,
    )
