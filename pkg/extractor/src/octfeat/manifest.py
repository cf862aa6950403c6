"""Minimal reader for the screening pipeline's manifest TSV.

Only the columns the extractor needs: id, class label, source path. The
optional patient and parent columns are carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    id: str
    class_label: str
    source_path: str


def read_manifest(path: str) -> list[ManifestRow]:
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#labels:"):
        raise ManifestError(f"{path}: missing '#labels:' header")
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ManifestError(f"{path}:{line_no}: expected 4 or 5 fields, got {len(fields)}")
        sid = fields[0]
        if sid in seen:
            raise ManifestError(f"{path}:{line_no}: duplicate id {sid!r}")
        seen.add(sid)
        rows.append(ManifestRow(id=sid, class_label=fields[1], source_path=fields[2]))
    return rows
