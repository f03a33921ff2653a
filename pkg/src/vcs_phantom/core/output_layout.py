from __future__ import annotations

import re
from pathlib import Path

BODY_FILE = "body.vgf"
MANIFEST_FILE = "manifest.json"

_CASE_DIR_RE = re.compile(r"^case_\d{4,}$")


def case_id_for(index: int) -> str:
    return f"case_{index:04d}"


def case_dir_for(cohort_root: Path, case_id: str) -> Path:
    return cohort_root / case_id


def organ_file_for(organ: str) -> str:
    return f"organ_{organ}.vgf"


def iter_case_dirs(cohort_root: Path) -> list[Path]:
    """Diretorios case_XXXX em ordem lexicografica (= ordem de indice)."""
    if not cohort_root.is_dir():
        return []
    return sorted(p for p in cohort_root.iterdir() if p.is_dir() and _CASE_DIR_RE.match(p.name))
