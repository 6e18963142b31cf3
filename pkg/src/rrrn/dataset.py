"""Sample metadata, manifest I/O, and the AU-combination objective-class lookup.

Manifests are UTF-8 text, one record per line, tab-separated, in the field
order of :class:`AnnotationRecord`. Lines starting with ``#`` are headers and
lines that are all whitespace are ignored. Everything here is immutable after
parsing and safe to share across threads.
"""

from __future__ import annotations

import enum
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional


class Database(enum.Enum):
    CASME2 = "CASME2"
    SAMM = "SAMM"
    SYNTHETIC = "SYNTHETIC"


class ObjectiveClass(enum.Enum):
    """MEGC 2018 objective classes I-V. ``value`` is the training label index."""

    I = 0
    II = 1
    III = 2
    IV = 3
    V = 4


#: Serialized occlusion tags. RANDOM_p covers p in 5%..50% in 5% steps.
OCCLUSION_TAGS = ("NONE", "MASK", "GLASS") + tuple(
    f"RANDOM_{p:02d}" for p in range(5, 55, 5)
)

_SAMPLE_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
_AU_NUM_RE = re.compile(r"^AU(\d+)$")
_LATERALITY_RE = re.compile(r"\([^)]*\)\s*$")

_MANIFEST_FIELDS = (
    "sample_id",
    "database_id",
    "subject_id",
    "frames_dir",
    "onset_idx",
    "apex_idx",
    "offset_idx",
    "au_code",
    "objective_class",
    "occlusion_tag",
)


class ManifestError(Exception):
    """Base class for manifest problems."""


class MalformedLineError(ManifestError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateSampleIdError(ManifestError):
    def __init__(self, line_no: int, sample_id: str):
        super().__init__(f"line {line_no}: duplicate sample_id {sample_id!r}")
        self.line_no = line_no
        self.sample_id = sample_id


class ManifestFormatError(ManifestError):
    """Aggregates every bad line so a single parse reports all problems."""

    def __init__(self, problems: list[ManifestError]):
        lines = "; ".join(str(p) for p in problems)
        super().__init__(f"{len(problems)} bad manifest line(s): {lines}")
        self.problems = problems


class UnmappedRecordError(ManifestError):
    def __init__(self, sample_ids: list[str]):
        super().__init__(
            f"{len(sample_ids)} record(s) have no objective class: "
            + ", ".join(sample_ids[:5])
            + ("..." if len(sample_ids) > 5 else "")
        )
        self.sample_ids = sample_ids


def normalize_au_code(code: str) -> str:
    """Canonicalize an AU combination string for lookup.

    Tokens are split on "+", stripped, uppercased, laterality suffixes like
    "(R)" removed, deduplicated, and sorted by AU number. Idempotent.
    """
    tokens = []
    for raw in code.split("+"):
        tok = _LATERALITY_RE.sub("", raw.strip().upper()).strip()
        if tok:
            tokens.append(tok)

    def sort_key(tok: str):
        m = _AU_NUM_RE.match(tok)
        return (0, int(m.group(1)), tok) if m else (1, 0, tok)

    return "+".join(sorted(set(tokens), key=sort_key))


def _build_class_table() -> dict[str, ObjectiveClass]:
    # 34 AU combinations across the five objective classes. The lone "A23"
    # annotation in circulation is a typo for AU23 and is stored corrected.
    rows: dict[ObjectiveClass, tuple[str, ...]] = {
        ObjectiveClass.I: (
            "AU6", "AU12", "AU6+AU12", "AU6+AU7+AU12", "AU7+AU12",
        ),
        ObjectiveClass.II: (
            "AU1+AU2", "AU5", "AU25", "AU1+AU2+AU25", "AU25+AU26", "AU5+AU24",
        ),
        ObjectiveClass.III: (
            "AU23", "AU4", "AU4+AU7", "AU4+AU5", "AU4+AU5+AU7",
            "AU17+AU24", "AU4+AU6+AU7", "AU4+AU38",
        ),
        ObjectiveClass.IV: (
            "AU10", "AU9", "AU4+AU9", "AU4+AU40", "AU4+AU5+AU40",
            "AU4+AU7+AU9", "AU4+AU9+AU17", "AU4+AU7+AU10",
            "AU4+AU5+AU7+AU9", "AU7+AU10",
        ),
        ObjectiveClass.V: (
            "AU1", "AU15", "AU1+AU4", "AU6+AU15", "AU15+AU17",
        ),
    }
    table: dict[str, ObjectiveClass] = {}
    for cls, combos in rows.items():
        for combo in combos:
            key = normalize_au_code(combo)
            if key in table:
                raise AssertionError(f"duplicate AU combination {combo!r}")
            table[key] = cls
    assert len(table) == 34
    return table


#: Normalized AU combination -> objective class (34 entries).
OBJECTIVE_CLASS_TABLE: dict[str, ObjectiveClass] = _build_class_table()


def map_aus_to_objective_class(au_code: str) -> Optional[ObjectiveClass]:
    """Return the objective class for an AU combination, or None if unmapped.

    Lookup is order-insensitive: the code is normalized (sorted tokens,
    laterality stripped) before the table lookup.
    """
    return OBJECTIVE_CLASS_TABLE.get(normalize_au_code(au_code))


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    database_id: Database
    subject_id: str
    frames_dir: Path
    onset_idx: int
    apex_idx: int
    offset_idx: int
    au_code: str
    objective_class: Optional[ObjectiveClass]
    occlusion_tag: str = "NONE"

    def __post_init__(self):
        if not _SAMPLE_ID_RE.match(self.sample_id):
            raise ValueError(f"unsafe sample_id {self.sample_id!r}")
        if not self.subject_id.strip():
            raise ValueError("empty subject_id")
        if not (self.onset_idx <= self.apex_idx <= self.offset_idx):
            raise ValueError(
                f"frame ordering violated: onset={self.onset_idx} "
                f"apex={self.apex_idx} offset={self.offset_idx}"
            )
        if self.onset_idx < 0:
            raise ValueError("negative frame index")
        if self.occlusion_tag not in OCCLUSION_TAGS:
            raise ValueError(f"unknown occlusion_tag {self.occlusion_tag!r}")
        mapped = map_aus_to_objective_class(self.au_code)
        if self.objective_class != mapped:
            raise ValueError(
                f"objective_class {self.objective_class} inconsistent with "
                f"au_code {self.au_code!r} (maps to {mapped})"
            )

    @property
    def subject_key(self) -> tuple[str, str]:
        """Subject identity scoped by database, so merged corpora cannot collide."""
        return (self.database_id.value, self.subject_id)

    @property
    def label(self) -> Optional[int]:
        return None if self.objective_class is None else self.objective_class.value


def make_record(
    sample_id: str,
    database_id: Database,
    subject_id: str,
    frames_dir: Path | str,
    onset_idx: int,
    apex_idx: int,
    offset_idx: int,
    au_code: str,
    occlusion_tag: str = "NONE",
) -> AnnotationRecord:
    """Build a record with the objective class derived from the AU code."""
    return AnnotationRecord(
        sample_id=sample_id,
        database_id=database_id,
        subject_id=subject_id,
        frames_dir=Path(frames_dir),
        onset_idx=onset_idx,
        apex_idx=apex_idx,
        offset_idx=offset_idx,
        au_code=au_code,
        objective_class=map_aus_to_objective_class(au_code),
        occlusion_tag=occlusion_tag,
    )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[AnnotationRecord, ...] = ()
    source_note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.sample_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateSampleIdError(-1, dupes[0])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[AnnotationRecord]:
        return iter(self.records)

    def get(self, sample_id: str) -> AnnotationRecord:
        for r in self.records:
            if r.sample_id == sample_id:
                return r
        raise KeyError(sample_id)

    def subjects(self) -> list[tuple[str, str]]:
        seen: dict[tuple[str, str], None] = {}
        for r in self.records:
            seen.setdefault(r.subject_key)
        return list(seen)

    def mapped_records(self) -> list[AnnotationRecord]:
        """Records with an objective class; unmapped ones stay in the manifest
        but are excluded from training/eval folds."""
        return [r for r in self.records if r.objective_class is not None]

    def with_records(self, records: Iterable[AnnotationRecord]) -> "DatasetManifest":
        return DatasetManifest(tuple(records), self.source_note)


def merge_manifests(*manifests: DatasetManifest, source_note: str = "") -> DatasetManifest:
    records: list[AnnotationRecord] = []
    for m in manifests:
        records.extend(m.records)
    return DatasetManifest(tuple(records), source_note)


def _parse_line(line_no: int, line: str) -> AnnotationRecord:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != len(_MANIFEST_FIELDS):
        raise MalformedLineError(
            line_no, f"expected {len(_MANIFEST_FIELDS)} fields, got {len(fields)}"
        )
    (sid, db, subj, frames, onset, apex, offset, au, cls, tag) = fields
    try:
        database = Database(db)
    except ValueError:
        raise MalformedLineError(line_no, f"unknown database_id {db!r}") from None
    try:
        onset_i, apex_i, offset_i = int(onset), int(apex), int(offset)
    except ValueError:
        raise MalformedLineError(line_no, "frame indices must be integers") from None
    if cls == "UNMAPPED":
        objective = None
    else:
        try:
            objective = ObjectiveClass[cls]
        except KeyError:
            raise MalformedLineError(line_no, f"unknown objective_class {cls!r}") from None
    try:
        return AnnotationRecord(
            sample_id=sid,
            database_id=database,
            subject_id=subj,
            frames_dir=Path(frames),
            onset_idx=onset_i,
            apex_idx=apex_i,
            offset_idx=offset_i,
            au_code=au,
            objective_class=objective,
            occlusion_tag=tag,
        )
    except ValueError as exc:
        raise MalformedLineError(line_no, str(exc)) from None


def parse_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest file.

    Raises FileNotFoundError for a missing file and ManifestFormatError
    carrying every malformed line / duplicate id found (bad lines are
    reported, never silently dropped).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    records: list[AnnotationRecord] = []
    seen: dict[str, int] = {}
    problems: list[ManifestError] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            try:
                rec = _parse_line(line_no, line)
            except MalformedLineError as exc:
                problems.append(exc)
                continue
            if rec.sample_id in seen:
                problems.append(DuplicateSampleIdError(line_no, rec.sample_id))
                continue
            seen[rec.sample_id] = line_no
            records.append(rec)
    if problems:
        raise ManifestFormatError(problems)
    return DatasetManifest(tuple(records), source_note=str(path))


def format_record(record: AnnotationRecord) -> str:
    cls = "UNMAPPED" if record.objective_class is None else record.objective_class.name
    return "\t".join(
        (
            record.sample_id,
            record.database_id.value,
            record.subject_id,
            str(record.frames_dir),
            str(record.onset_idx),
            str(record.apex_idx),
            str(record.offset_idx),
            record.au_code,
            cls,
            record.occlusion_tag,
        )
    )


def write_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# " + "\t".join(_MANIFEST_FIELDS) + "\n")
        for rec in manifest:
            fh.write(format_record(rec) + "\n")


@dataclass(frozen=True)
class ClassDistribution:
    counts: dict = field(default_factory=dict)  # ObjectiveClass -> int
    total: int = 0
    subject_count: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(self.counts.get(c, 0) for c in ObjectiveClass)


def class_distribution(manifest: DatasetManifest) -> ClassDistribution:
    """Per-class sample counts plus total and distinct-subject count.

    Requires every record to be class-mapped; raises UnmappedRecordError
    otherwise.
    """
    unmapped = [r.sample_id for r in manifest if r.objective_class is None]
    if unmapped:
        raise UnmappedRecordError(unmapped)
    counts = Counter(r.objective_class for r in manifest)
    return ClassDistribution(
        counts={c: counts.get(c, 0) for c in ObjectiveClass},
        total=len(manifest),
        subject_count=len(manifest.subjects()),
    )


def retag_records(manifest: DatasetManifest, occlusion_tag: str) -> DatasetManifest:
    return manifest.with_records(
        replace(r, occlusion_tag=occlusion_tag) for r in manifest
    )
