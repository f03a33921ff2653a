from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from vcs_phantom.core.errors import DataError


def write_json_atomic(path: Path, data: Any) -> None:
    """Escrita atomica (tmp + replace), chaves ordenadas: mesmo conteudo -> mesmos bytes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_json(path: Path) -> Any:
    if not path.exists():
        raise DataError(f"arquivo ausente: {path.name} ({path})")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"JSON malformado em {path.name}: {e}") from e


@dataclass(frozen=True)
class CaseManifest:
    case_id: str
    organ_order: tuple[str, ...]
    dims: tuple[int, int, int]
    spacing: float
    true_volumes: dict[str, float]
    body_volume: float
    body_file: str
    organ_files: dict[str, str]

    def to_json(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "organ_order": list(self.organ_order),
            "dims": list(self.dims),
            "spacing": self.spacing,
            "true_volumes": dict(self.true_volumes),
            "body_volume": self.body_volume,
            "body_file": self.body_file,
            "organ_files": dict(self.organ_files),
        }

    @classmethod
    def from_json(cls, data: Any, source: str = "manifest.json") -> CaseManifest:
        try:
            order = tuple(str(o) for o in data["organ_order"])
            dims = tuple(int(d) for d in data["dims"])
            if len(dims) != 3:
                raise ValueError(f"dims com {len(dims)} eixos")
            organ_files = {str(k): str(v) for k, v in data["organ_files"].items()}
            missing = [o for o in order if o not in organ_files]
            if missing:
                raise ValueError(f"organ_files sem entrada para {missing}")
            return cls(
                case_id=str(data["case_id"]),
                organ_order=order,
                dims=(dims[0], dims[1], dims[2]),
                spacing=float(data["spacing"]),
                true_volumes={str(k): float(v) for k, v in data["true_volumes"].items()},
                body_volume=float(data.get("body_volume", 0.0)),
                body_file=str(data["body_file"]),
                organ_files=organ_files,
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DataError(f"{source}: manifest invalido ({e})") from e

    def save(self, path: Path) -> None:
        write_json_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: Path) -> CaseManifest:
        return cls.from_json(read_json(path), source=str(path))
