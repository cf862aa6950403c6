import warnings

import numpy as np
import pytest

from oodr.dataset import (
    ClassTooSmallError,
    DuplicateIdError,
    Manifest,
    ManifestParseError,
    ReferenceGroupSpec,
    RoundError,
    SampleRecord,
    ScenarioSpec,
    UnknownLabelError,
    load_manifest,
    materialize_round,
    partition_quarters,
    sample_reference,
    write_fold_assignments,
    write_manifest,
)


def _manifest(counts: dict[str, int], patients_per_class: int = 0) -> Manifest:
    records = []
    for label, count in counts.items():
        for i in range(count):
            patient = f"{label}_p{i % patients_per_class}" if patients_per_class else None
            records.append(
                SampleRecord(
                    id=f"{label}_{i:05d}",
                    class_label=label,
                    source_path=f"x/{label}/{i}.png",
                    patient_id=patient,
                )
            )
    return Manifest(labels=tuple(counts), records=records)


# ---------------------------------------------------------------- parsing


def test_load_manifest_happy_path(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text(
        "#labels: normal,cnv\n"
        "n1\tnormal\timg/n1.png\tp1\n"
        "n2\tnormal\timg/n2.png\t-\n"
        "c1\tcnv\timg/c1.png\tp2\n"
        "c1a\tcnv\taug/c1a.png\tp2\tc1\n"
    )
    m = load_manifest(str(path))
    assert m.labels == ("normal", "cnv")
    assert len(m.records) == 4
    assert m.by_id["n2"].patient_id is None
    assert m.by_id["n1"].patient_id == "p1"
    aug = m.by_id["c1a"]
    assert aug.origin == "augmented" and aug.parent_id == "c1"
    assert m.by_id["c1"].origin == "original"


def test_load_manifest_requires_header(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("n1\tnormal\timg.png\t-\n")
    with pytest.raises(ManifestParseError, match="labels"):
        load_manifest(str(path))


def test_load_manifest_reports_line_numbers(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("#labels: normal\nn1\tnormal\timg.png\t-\nbroken line\n")
    with pytest.raises(ManifestParseError, match=":3:"):
        load_manifest(str(path))


def test_load_manifest_rejects_duplicates_and_unknown_labels(tmp_path):
    dup = tmp_path / "dup.tsv"
    dup.write_text("#labels: normal\na\tnormal\ti.png\t-\na\tnormal\tj.png\t-\n")
    with pytest.raises(DuplicateIdError):
        load_manifest(str(dup))
    unk = tmp_path / "unk.tsv"
    unk.write_text("#labels: normal\na\tcnv\ti.png\t-\n")
    with pytest.raises(UnknownLabelError):
        load_manifest(str(unk))


def test_manifest_round_trip(tmp_path):
    m = _manifest({"normal": 5, "cnv": 4})
    path = str(tmp_path / "m.tsv")
    write_manifest(path, m)
    back = load_manifest(path)
    assert back.labels == m.labels
    assert [r.id for r in back.records] == [r.id for r in m.records]
    assert back.by_id["cnv_00001"].class_label == "cnv"


# ---------------------------------------------------------------- quartering


def test_quarters_equal_and_remainder_dropped():
    m = _manifest({"normal": 10, "cnv": 8})
    plan = partition_quarters(m, seed=1)
    sizes = {label: [0, 0, 0, 0] for label in ("normal", "cnv")}
    for sid, q in plan.quarter_of.items():
        sizes[m.class_of(sid)][q - 1] += 1
    assert sizes["normal"] == [2, 2, 2, 2]
    assert sizes["cnv"] == [2, 2, 2, 2]
    assert len(plan.dropped) == 2
    assert all(m.class_of(sid) == "normal" for sid in plan.dropped)


def test_quartering_deterministic_and_seed_sensitive():
    m = _manifest({"normal": 40})
    a = partition_quarters(m, seed=5)
    b = partition_quarters(m, seed=5)
    c = partition_quarters(m, seed=6)
    assert a.quarter_of == b.quarter_of
    assert a.quarter_of != c.quarter_of


def test_per_class_streams_independent():
    # dropping another class entirely must not reshuffle this one
    small = _manifest({"normal": 16})
    both = _manifest({"normal": 16, "cnv": 12})
    qa = partition_quarters(small, seed=3).quarter_of
    qb = partition_quarters(both, seed=3).quarter_of
    assert {k: v for k, v in qb.items() if k.startswith("normal")} == qa


def test_class_too_small():
    m = _manifest({"normal": 3, "cnv": 8})
    with pytest.raises(ClassTooSmallError, match="normal"):
        partition_quarters(m, seed=0)


def test_by_patient_keeps_patients_whole():
    m = _manifest({"normal": 40}, patients_per_class=8)
    plan = partition_quarters(m, seed=2, grouping="by_patient")
    seen: dict[str, int] = {}
    for rec in m.records:
        if rec.id not in plan.quarter_of:
            continue
        q = plan.quarter_of[rec.id]
        assert seen.setdefault(rec.patient_id, q) == q
    patient_quarters: dict[int, set] = {1: set(), 2: set(), 3: set(), 4: set()}
    for pid, q in seen.items():
        patient_quarters[q].add(pid)
    assert [len(v) for v in patient_quarters.values()] == [2, 2, 2, 2]


def test_by_patient_requires_patient_ids():
    m = _manifest({"normal": 8})
    with pytest.raises(ValueError, match="patient"):
        partition_quarters(m, seed=0, grouping="by_patient")


def test_by_patient_too_few_patients():
    m = _manifest({"normal": 30}, patients_per_class=3)
    with pytest.raises(ClassTooSmallError):
        partition_quarters(m, seed=0, grouping="by_patient")


def test_fold_export_format(tmp_path):
    m = _manifest({"normal": 8})
    plan = partition_quarters(m, seed=0)
    path = tmp_path / "folds.tsv"
    write_fold_assignments(str(path), plan)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    for line in lines:
        sid, q = line.split("\t")
        assert plan.quarter_of[sid] == int(q)
    assert lines == sorted(lines)


# ---------------------------------------------------------------- scenarios


def _simple_spec(rotation="fourfold") -> ScenarioSpec:
    return ScenarioSpec(
        name="toy",
        train=(("normal", frozenset({1, 2})), ("cnv", frozenset({1, 2}))),
        validation=(("normal", frozenset({3})), ("cnv", frozenset({3}))),
        test=(("normal", frozenset({4})), ("cnv", frozenset({4}))),
        reference_groups=(ReferenceGroupSpec("normal", "normal", 4),),
        rotation=rotation,
    )


def test_scenario_rejects_quarter_reuse():
    with pytest.raises(ValueError, match="more than one"):
        ScenarioSpec(
            name="bad",
            train=(("normal", frozenset({1, 2})),),
            validation=(("normal", frozenset({2})),),
            test=(("normal", frozenset({4})),),
            reference_groups=(),
        )


def test_scenario_rejects_reference_outside_training():
    with pytest.raises(ValueError, match="reference"):
        ScenarioSpec(
            name="bad",
            train=(("cnv", frozenset({1, 2})),),
            validation=(("cnv", frozenset({3})),),
            test=(("cnv", frozenset({4})),),
            reference_groups=(ReferenceGroupSpec("normal", "normal", 4),),
        )


def test_scenario_rejects_bad_quarters_and_rotation():
    with pytest.raises(ValueError):
        ScenarioSpec(
            name="bad",
            train=(("normal", frozenset({0, 1})),),
            validation=(),
            test=(),
            reference_groups=(),
        )
    with pytest.raises(ValueError):
        _simple_spec(rotation="fivefold")


def test_materialize_rotation_cycles_quarters():
    m = _manifest({"normal": 16, "cnv": 16})
    plan = partition_quarters(m, seed=0)
    spec = _simple_spec()
    test_sets = []
    for r in (1, 2, 3, 4):
        train, val, test = materialize_round(spec, plan, r)
        assert len(set(train) | set(val) | set(test)) == len(train) + len(val) + len(test)
        test_sets.append(set(test))
        # round r tests the quarter that started as 4, shifted cyclically
        expect_q = ((4 - 1 + r - 1) % 4) + 1
        assert all(plan.quarter_of[sid] == expect_q for sid in test)
    # across the four rounds every sample is tested exactly once
    union = set().union(*test_sets)
    assert union == set(plan.quarter_of)
    assert sum(len(s) for s in test_sets) == len(union)


def test_materialize_round_bounds():
    m = _manifest({"normal": 16, "cnv": 16})
    plan = partition_quarters(m, seed=0)
    with pytest.raises(RoundError):
        materialize_round(_simple_spec(), plan, 5)
    with pytest.raises(RoundError):
        materialize_round(_simple_spec(rotation="fixed"), plan, 2)


def test_materialize_warns_on_cross_fold_augment_leakage():
    records = []
    for i in range(8):
        records.append(SampleRecord(f"n{i}", "normal", f"{i}.png"))
    for i in range(8):
        records.append(SampleRecord(f"c{i}", "cnv", f"{i}.png"))
    # augmented child of a normal original
    records.append(SampleRecord("n0_aug", "normal", "a.png", origin="augmented", parent_id="n0"))
    m = Manifest(labels=("normal", "cnv"), records=records)
    plan = partition_quarters(m, seed=0)
    # force parent and child into different sections
    plan.quarter_of["n0"] = 1
    plan.quarter_of["n0_aug"] = 4
    with pytest.warns(UserWarning, match="augmented"):
        materialize_round(_simple_spec(), plan, 1)


def test_sections_disjoint_in_every_round():
    m = _manifest({"normal": 23, "cnv": 17})
    plan = partition_quarters(m, seed=11)
    spec = _simple_spec()
    for r in (1, 2, 3, 4):
        train, val, test = materialize_round(spec, plan, r)
        assert not (set(train) & set(val))
        assert not (set(train) & set(test))
        assert not (set(val) & set(test))
        # 23 -> 5 per quarter (3 dropped), 17 -> 4 per quarter (1 dropped)
        assert len(train) == 2 * (5 + 4)
        assert len(val) == 5 + 4
        assert len(test) == 5 + 4


# ---------------------------------------------------------------- references


def test_sample_reference_subset_and_deterministic():
    m = _manifest({"normal": 40, "cnv": 40})
    plan = partition_quarters(m, seed=0)
    train, _, _ = materialize_round(_simple_spec(), plan, 1)
    ids_a = sample_reference(m, "normal", 10, train, seed=9)
    ids_b = sample_reference(m, "normal", 10, train, seed=9)
    assert ids_a == ids_b
    assert len(ids_a) == len(set(ids_a)) == 10
    train_set = set(train)
    assert all(sid in train_set and m.class_of(sid) == "normal" for sid in ids_a)


def test_sample_reference_clamps_with_warning():
    m = _manifest({"normal": 40, "cnv": 40})
    plan = partition_quarters(m, seed=0)
    train, _, _ = materialize_round(_simple_spec(), plan, 1)
    with pytest.warns(UserWarning, match="requested"):
        ids = sample_reference(m, "normal", 10_000, train, seed=0)
    assert len(ids) == sum(1 for s in train if m.class_of(s) == "normal")


def test_sample_reference_can_exclude_augmented():
    records = [SampleRecord(f"n{i}", "normal", f"{i}.png") for i in range(12)]
    records += [
        SampleRecord(f"n{i}_aug", "normal", f"a{i}.png", origin="augmented", parent_id=f"n{i}")
        for i in range(12)
    ]
    m = Manifest(labels=("normal",), records=records)
    train = [r.id for r in records]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        only_orig = sample_reference(m, "normal", 24, train, seed=0, include_augmented=False)
    assert all("_aug" not in sid for sid in only_orig)
    both = sample_reference(m, "normal", 24, train, seed=0, include_augmented=True)
    assert any("_aug" in sid for sid in both)
