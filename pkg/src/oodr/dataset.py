"""Sample manifests, deterministic quartering, and scenario set assembly.

Every class in a manifest is split into four equal quarters as a pure
function of (manifest, seed); scenario specs then describe which
(class, quarter) combinations form the train/validation/test sets of each
cross-validation round, and reference groups of normals are sampled from
the training quarters.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

QUARTERS = (1, 2, 3, 4)


class ManifestError(Exception):
    """Base class for manifest problems."""


class ManifestParseError(ManifestError):
    def __init__(self, path: str, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class DuplicateIdError(ManifestError):
    pass


class UnknownLabelError(ManifestError):
    pass


class ClassTooSmallError(ValueError):
    """A class has too few samples (or patients) to form four quarters."""


class RoundError(ValueError):
    """Round index invalid for the scenario's rotation mode."""


class OverlapError(ValueError):
    """Resolved train/validation/test id sets share ids (malformed spec)."""


class UnknownGroupError(KeyError):
    """Reference group names a class absent from the training set."""


@dataclass(frozen=True)
class SampleRecord:
    """One manifest row. Augmented records point at their original."""

    id: str
    class_label: str
    source_path: str
    patient_id: str | None = None
    origin: str = "original"
    parent_id: str | None = None


@dataclass
class Manifest:
    labels: tuple[str, ...]
    records: list[SampleRecord]
    by_id: dict[str, SampleRecord] = field(default_factory=dict, repr=False)
    by_class: dict[str, list[SampleRecord]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self.by_id:
            for rec in self.records:
                if rec.id in self.by_id:
                    raise DuplicateIdError(f"duplicate id {rec.id!r}")
                self.by_id[rec.id] = rec
                self.by_class.setdefault(rec.class_label, []).append(rec)

    def class_of(self, sample_id: str) -> str:
        return self.by_id[sample_id].class_label

    def class_counts(self) -> dict[str, int]:
        return {label: len(recs) for label, recs in sorted(self.by_class.items())}


def is_normal_label(class_label: str) -> bool:
    """Classes named 'normal' or 'normal_*' count as normal; the rest are diseases."""
    return class_label == "normal" or class_label.startswith("normal_")


def load_manifest(path: str) -> Manifest:
    """Load a TSV manifest.

    First line is a header ``#labels: a,b,c`` declaring the label set.
    Each following line is ``id<TAB>class_label<TAB>source_path<TAB>patient_id``
    with ``-`` for a missing patient id; an optional fifth column holds the
    parent id of an augmented record.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#labels:"):
        raise ManifestParseError(path, 1, "missing '#labels:' header line")
    declared = tuple(
        lab.strip() for lab in lines[0][len("#labels:"):].split(",") if lab.strip()
    )
    if not declared:
        raise ManifestParseError(path, 1, "header declares no labels")

    records: list[SampleRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ManifestParseError(
                path, line_no, f"expected 4 or 5 tab-separated fields, got {len(fields)}"
            )
        sample_id, class_label, source_path, patient = fields[:4]
        if not sample_id:
            raise ManifestParseError(path, line_no, "empty id")
        if sample_id in seen:
            raise DuplicateIdError(f"{path}:{line_no}: duplicate id {sample_id!r}")
        seen.add(sample_id)
        if class_label not in declared:
            raise UnknownLabelError(
                f"{path}:{line_no}: label {class_label!r} not in declared set {declared}"
            )
        parent = fields[4] if len(fields) == 5 and fields[4] not in ("", "-") else None
        records.append(
            SampleRecord(
                id=sample_id,
                class_label=class_label,
                source_path=source_path,
                patient_id=None if patient in ("", "-") else patient,
                origin="augmented" if parent is not None else "original",
                parent_id=parent,
            )
        )
    return Manifest(labels=declared, records=records)


def write_manifest(path: str, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#labels: " + ",".join(manifest.labels) + "\n")
        for rec in manifest.records:
            fields = [rec.id, rec.class_label, rec.source_path, rec.patient_id or "-"]
            if rec.parent_id is not None:
                fields.append(rec.parent_id)
            fh.write("\t".join(fields) + "\n")


@dataclass(frozen=True)
class QuarterAssignment:
    sample_id: str
    quarter: int


@dataclass
class QuarterPlan:
    """Result of quartering: id -> quarter, plus dropped remainder ids."""

    manifest: Manifest
    quarter_of: dict[str, int]
    dropped: list[str]
    seed: int
    grouping: str

    def assignments(self) -> list[QuarterAssignment]:
        return [QuarterAssignment(sid, q) for sid, q in sorted(self.quarter_of.items())]

    def ids_in(self, class_label: str, quarters: frozenset[int]) -> list[str]:
        out = [
            rec.id
            for rec in self.manifest.by_class.get(class_label, [])
            if self.quarter_of.get(rec.id) in quarters
        ]
        out.sort()
        return out


def _class_rng(seed: int, class_label: str) -> np.random.Generator:
    # Stable per-class stream regardless of which other classes exist.
    digest = int.from_bytes(hashlib.sha256(class_label.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, digest]))


def partition_quarters(manifest: Manifest, seed: int, grouping: str = "by_image") -> QuarterPlan:
    """Split every class into four equal quarters.

    Samples (or patients, when ``grouping='by_patient'``) are shuffled by a
    seeded generator; the last ``count mod 4`` items of the shuffled order are
    dropped so quarters come out exactly equal, then consecutive chunks become
    quarters 1..4. In by_patient mode the patient counts are equalized and all
    of a patient's samples land in that patient's quarter.
    """
    if grouping not in ("by_image", "by_patient"):
        raise ValueError(f"grouping must be by_image or by_patient, got {grouping!r}")
    quarter_of: dict[str, int] = {}
    dropped: list[str] = []
    for class_label in sorted(manifest.by_class):
        recs = manifest.by_class[class_label]
        rng = _class_rng(seed, class_label)
        if grouping == "by_image":
            units: list[list[str]] = [[rec.id] for rec in sorted(recs, key=lambda r: r.id)]
        else:
            by_patient: dict[str, list[str]] = {}
            for rec in recs:
                if rec.patient_id is None:
                    raise ValueError(
                        f"by_patient grouping requires patient ids; {rec.id!r} has none"
                    )
                by_patient.setdefault(rec.patient_id, []).append(rec.id)
            units = [sorted(by_patient[p]) for p in sorted(by_patient)]
        if len(units) < 4:
            kind = "samples" if grouping == "by_image" else "patients"
            raise ClassTooSmallError(
                f"class {class_label!r} has {len(units)} {kind}, needs at least 4"
            )
        order = rng.permutation(len(units))
        remainder = len(units) % 4
        kept = order if remainder == 0 else order[: len(units) - remainder]
        for drop_idx in order[len(units) - remainder:]:
            dropped.extend(units[drop_idx])
        per_quarter = len(kept) // 4
        for pos, unit_idx in enumerate(kept):
            quarter = pos // per_quarter + 1
            for sid in units[unit_idx]:
                quarter_of[sid] = quarter
    if dropped:
        log.info("dropped %d remainder samples: %s", len(dropped), sorted(dropped)[:8])
    return QuarterPlan(
        manifest=manifest,
        quarter_of=quarter_of,
        dropped=sorted(dropped),
        seed=seed,
        grouping=grouping,
    )


def write_fold_assignments(path: str, plan: QuarterPlan) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for assignment in plan.assignments():
            fh.write(f"{assignment.sample_id}\t{assignment.quarter}\n")


@dataclass(frozen=True)
class ReferenceGroupSpec:
    name: str
    class_label: str
    count: int


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one experiment geometry.

    Each section lists (class_label, quarter set) pairs; ``fourfold`` rotation
    shifts every quarter cyclically per round so that across rounds 1..4 every
    quarter of every participating class is tested exactly once.
    """

    name: str
    train: tuple[tuple[str, frozenset[int]], ...]
    validation: tuple[tuple[str, frozenset[int]], ...]
    test: tuple[tuple[str, frozenset[int]], ...]
    reference_groups: tuple[ReferenceGroupSpec, ...]
    rotation: str = "fourfold"

    def __post_init__(self) -> None:
        if self.rotation not in ("fourfold", "fixed"):
            raise ValueError(f"rotation must be fourfold or fixed, got {self.rotation!r}")
        used: set[tuple[str, int]] = set()
        for section_name, section in (
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ):
            for class_label, quarters in section:
                if not quarters or not quarters <= set(QUARTERS):
                    raise ValueError(
                        f"{self.name}/{section_name}: quarter set {sorted(quarters)} invalid"
                    )
                for q in quarters:
                    key = (class_label, q)
                    if key in used:
                        raise ValueError(
                            f"{self.name}: ({class_label}, quarter {q}) appears in more "
                            "than one of train/validation/test"
                        )
                    used.add(key)
        train_classes = {c for c, _ in self.train}
        for group in self.reference_groups:
            if group.class_label not in train_classes:
                raise ValueError(
                    f"{self.name}: reference group {group.name!r} draws from "
                    f"{group.class_label!r} which is not a training class"
                )

    @property
    def rounds(self) -> int:
        return 4 if self.rotation == "fourfold" else 1

    def train_classes(self) -> list[str]:
        return sorted({c for c, _ in self.train})


def _rotate(quarters: frozenset[int], shift: int) -> frozenset[int]:
    return frozenset(((q - 1 + shift) % 4) + 1 for q in quarters)


def materialize_round(
    spec: ScenarioSpec, plan: QuarterPlan, round_index: int
) -> tuple[list[str], list[str], list[str]]:
    """Resolve one round's (train ids, validation ids, test ids).

    Quarter sets rotate cyclically by ``round_index - 1`` for fourfold specs;
    fixed specs admit only round 1. Augmented records whose parent fell in a
    different section are reported with a warning (fold leakage).
    """
    if spec.rotation == "fourfold":
        if round_index not in (1, 2, 3, 4):
            raise RoundError(f"fourfold round must be 1..4, got {round_index}")
    elif round_index != 1:
        raise RoundError(f"fixed scenario {spec.name!r} admits only round 1, got {round_index}")
    shift = round_index - 1

    def resolve(section: tuple[tuple[str, frozenset[int]], ...]) -> list[str]:
        ids: list[str] = []
        for class_label, quarters in section:
            ids.extend(plan.ids_in(class_label, _rotate(quarters, shift)))
        return ids

    train_ids = resolve(spec.train)
    val_ids = resolve(spec.validation)
    test_ids = resolve(spec.test)
    sets = {"train": set(train_ids), "validation": set(val_ids), "test": set(test_ids)}
    for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
        shared = sets[a] & sets[b]
        if shared:
            raise OverlapError(
                f"{spec.name} round {round_index}: {len(shared)} ids shared between "
                f"{a} and {b} (e.g. {sorted(shared)[0]!r})"
            )
    _warn_augmented_leakage(spec, plan, sets)
    return train_ids, val_ids, test_ids


def _warn_augmented_leakage(
    spec: ScenarioSpec, plan: QuarterPlan, sets: dict[str, set[str]]
) -> None:
    section_of = {sid: name for name, ids in sets.items() for sid in ids}
    leaks = 0
    for rec in plan.manifest.records:
        if rec.parent_id is None:
            continue
        child_section = section_of.get(rec.id)
        parent_section = section_of.get(rec.parent_id)
        if child_section and parent_section and child_section != parent_section:
            leaks += 1
    if leaks:
        warnings.warn(
            f"{spec.name}: {leaks} augmented records sit in a different fold section "
            "than their originals; augment within training quarters only",
            stacklevel=3,
        )


def sample_reference(
    manifest: Manifest,
    class_label: str,
    count: int,
    train_ids: list[str],
    seed: int,
    include_augmented: bool = True,
) -> list[str]:
    """Sample reference ids of one class uniformly without replacement.

    Returns min(count, available) distinct ids from the training set; a
    shortfall produces a warning rather than an error so small runs still work.
    """
    train_set = set(train_ids)
    candidates = sorted(
        rec.id
        for rec in manifest.by_class.get(class_label, [])
        if rec.id in train_set and (include_augmented or rec.origin == "original")
    )
    if not candidates:
        raise UnknownGroupError(
            f"reference class {class_label!r} has no candidates in the training set"
        )
    rng = _class_rng(seed, "ref:" + class_label)
    if count > len(candidates):
        warnings.warn(
            f"reference group {class_label!r}: requested {count}, "
            f"only {len(candidates)} available",
            stacklevel=2,
        )
        count = len(candidates)
    picked = rng.choice(len(candidates), size=count, replace=False)
    return [candidates[i] for i in picked]
