# src/vcs_phantom/shapes/voxel.py
"""
Grades 3D densas, SDF exato, ocupacao suave, volume e superficie.

Convencoes (contrato):
  - SDF positivo dentro do orgao, em unidades de voxel, distancia euclidiana
    entre centros de voxel, truncado em [-tau, +tau].
  - Arrays indexados como [x, y, z]; a ordem plana "x mais rapido" eh a ordem
    Fortran do numpy (usada na serializacao VGF).
  - Volumes em mL: voxels * spacing^3 / 1000 (spacing em mm, isotropico).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from vcs_phantom.core.errors import DataError, GridMismatchError, NonFiniteError

Dims = tuple[int, int, int]

# vizinhanca-6
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class SdfConfig:
    truncation: float = 10.0
    sharpness: float = 10.0

    def __post_init__(self) -> None:
        if not self.truncation > 0:
            raise ValueError(f"truncation (tau) deve ser > 0, veio {self.truncation}")
        if not self.sharpness > 0:
            raise ValueError(f"sharpness (k) deve ser > 0, veio {self.sharpness}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_dims(dims: Sequence[int]) -> Dims:
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise GridMismatchError(f"dims invalido: {tuple(dims)} (precisa de 3 inteiros positivos)")
    return (int(dims[0]), int(dims[1]), int(dims[2]))


@dataclass(frozen=True)
class ScalarGrid:
    """Campo escalar denso (SDF, ocupacao suave, ruido). Imutavel."""

    values: np.ndarray
    spacing: float
    dims: Dims = field(init=False)

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise GridMismatchError(f"ScalarGrid precisa de array 3D, veio shape={arr.shape}")
        if not self.spacing > 0:
            raise GridMismatchError(f"spacing deve ser > 0, veio {self.spacing}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("ScalarGrid com valores nao finitos")
        object.__setattr__(self, "values", _frozen(arr))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", _check_dims(arr.shape))

    @classmethod
    def full(cls, dims: Sequence[int], spacing: float, value: float) -> ScalarGrid:
        return cls(np.full(_check_dims(dims), float(value)), spacing)

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: Sequence[int], spacing: float) -> ScalarGrid:
        d = _check_dims(dims)
        flat = np.asarray(flat)
        if flat.size != d[0] * d[1] * d[2]:
            raise GridMismatchError(f"payload com {flat.size} valores, dims {d} exigem {d[0] * d[1] * d[2]}")
        return cls(flat.reshape(d, order="F"), spacing)

    def flat(self) -> np.ndarray:
        """Valores na ordem x mais rapido."""
        return self.values.ravel(order="F")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScalarGrid):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class BinaryMask:
    """Ocupacao booleana densa. Imutavel."""

    bits: np.ndarray
    spacing: float
    dims: Dims = field(init=False)

    def __post_init__(self) -> None:
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.ndim != 3:
            raise GridMismatchError(f"BinaryMask precisa de array 3D, veio shape={arr.shape}")
        if not self.spacing > 0:
            raise GridMismatchError(f"spacing deve ser > 0, veio {self.spacing}")
        object.__setattr__(self, "bits", _frozen(arr))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "dims", _check_dims(arr.shape))

    @classmethod
    def empty(cls, dims: Sequence[int], spacing: float) -> BinaryMask:
        return cls(np.zeros(_check_dims(dims), dtype=bool), spacing)

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: Sequence[int], spacing: float) -> BinaryMask:
        d = _check_dims(dims)
        flat = np.asarray(flat)
        if flat.size != d[0] * d[1] * d[2]:
            raise GridMismatchError(f"payload com {flat.size} valores, dims {d} exigem {d[0] * d[1] * d[2]}")
        return cls(flat.reshape(d, order="F").astype(bool), spacing)

    def flat(self) -> np.ndarray:
        return self.bits.ravel(order="F")

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def union(self, other: BinaryMask) -> BinaryMask:
        ensure_compatible(self, other)
        return BinaryMask(self.bits | other.bits, self.spacing)

    def intersection(self, other: BinaryMask) -> BinaryMask:
        ensure_compatible(self, other)
        return BinaryMask(self.bits & other.bits, self.spacing)

    def difference(self, other: BinaryMask) -> BinaryMask:
        ensure_compatible(self, other)
        return BinaryMask(self.bits & ~other.bits, self.spacing)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.bits, other.bits)


def ensure_compatible(a: ScalarGrid | BinaryMask, b: ScalarGrid | BinaryMask, what: str = "") -> None:
    if a.dims != b.dims or a.spacing != b.spacing:
        label = f" ({what})" if what else ""
        raise GridMismatchError(
            f"grades incompativeis{label}: dims {a.dims} vs {b.dims}, spacing {a.spacing} vs {b.spacing}"
        )


def signed_distance(mask: BinaryMask) -> np.ndarray:
    """
    SDF exato sem truncamento (float64). Usa a transformada euclidiana exata
    separavel do scipy nos dois sentidos: dentro mede ate o fundo, fora mede ate o objeto.
    Mascara uniforme nao tem fronteira: retorna +inf/-inf, quem chama trunca.
    """
    bits = mask.bits
    if bits.all():
        return np.full(mask.dims, np.inf)
    if not bits.any():
        return np.full(mask.dims, -np.inf)
    inside = ndimage.distance_transform_edt(bits)
    outside = ndimage.distance_transform_edt(~bits)
    return np.where(bits, inside, -outside)


def sdf_from_mask(mask: BinaryMask, cfg: SdfConfig = SdfConfig()) -> ScalarGrid:
    tau = cfg.truncation
    return ScalarGrid(np.clip(signed_distance(mask), -tau, tau), mask.spacing)


def empty_context(dims: Sequence[int], spacing: float, cfg: SdfConfig = SdfConfig()) -> ScalarGrid:
    return ScalarGrid.full(dims, spacing, -cfg.truncation)


def occupancy(sdf: ScalarGrid, cfg: SdfConfig = SdfConfig()) -> ScalarGrid:
    return ScalarGrid(special.expit(cfg.sharpness * sdf.values), sdf.spacing)


def threshold(sdf: ScalarGrid) -> BinaryMask:
    return BinaryMask(sdf.values >= 0.0, sdf.spacing)


def compose_context(
    sdfs: Sequence[ScalarGrid],
    cfg: SdfConfig = SdfConfig(),
    dims: Sequence[int] | None = None,
    spacing: float | None = None,
) -> ScalarGrid:
    """
    Contexto = maximo ponto a ponto dos SDFs anteriores (uniao sob a convencao positivo-dentro).
    Sequencia vazia: contexto vazio (-tau) na grade dada por dims/spacing.
    """
    if not sdfs:
        if dims is None or spacing is None:
            raise GridMismatchError("compose_context de sequencia vazia precisa de dims e spacing")
        return empty_context(dims, spacing, cfg)
    first = sdfs[0]
    ref_dims = first.dims if dims is None else tuple(dims)
    ref_spacing = first.spacing if spacing is None else float(spacing)
    for i, g in enumerate(sdfs):
        if g.dims != ref_dims or g.spacing != ref_spacing:
            raise GridMismatchError(
                f"compose_context: grade no indice {i} tem dims {g.dims} spacing {g.spacing}, "
                f"esperado dims {ref_dims} spacing {ref_spacing}"
            )
    return ScalarGrid(np.maximum.reduce([g.values for g in sdfs]), first.spacing)


def voxel_volume_ml(spacing: float) -> float:
    return spacing**3 / 1000.0


def volume_ml(mask: BinaryMask) -> float:
    return mask.count * voxel_volume_ml(mask.spacing)


def soft_volume_ml(occ: ScalarGrid) -> float:
    """Versao numpy. A versao diferenciavel (torch) fica em generation.losses."""
    return float(occ.values.sum()) * voxel_volume_ml(occ.spacing)


def surface_mask(mask: BinaryMask) -> np.ndarray:
    # border_value=0: voxel na borda da grade conta como superficie
    eroded = ndimage.binary_erosion(mask.bits, structure=_FACE_STRUCTURE, border_value=0)
    return mask.bits & ~eroded


def surface_points(mask: BinaryMask) -> np.ndarray:
    """Centros (mm) dos voxels de fronteira, shape (n, 3), ordem lexicografica de indice."""
    if not mask.bits.any():
        raise DataError("surface_points: mascara vazia")
    idx = np.argwhere(surface_mask(mask))
    return idx.astype(np.float64) * mask.spacing
