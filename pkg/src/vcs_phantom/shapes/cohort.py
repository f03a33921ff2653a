# src/vcs_phantom/shapes/cohort.py
"""
Coorte procedural de fantomas: corpo e orgaos como elipsoides posicionados,
com volume de orgao correlacionado ao volume do corpo (habitus).

Aleatoriedade: fluxos Philox (baseados em contador) chaveados por
(seed, caso, orgao, proposito, sub-seed). Rejeitar e regerar um caso nunca
altera os sorteios dos outros casos, entao gerar em paralelo == gerar em serie.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from vcs_phantom.core.errors import CohortGenerationError, DataError, VgfFormatError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.core.manifest import CaseManifest
from vcs_phantom.core.output_layout import (
    BODY_FILE,
    MANIFEST_FILE,
    case_dir_for,
    case_id_for,
    iter_case_dirs,
    organ_file_for,
)
from vcs_phantom.shapes.vgf import read_mask, write_vgf
from vcs_phantom.shapes.voxel import BinaryMask, voxel_volume_ml, volume_ml

log = logging.getLogger("vcs_phantom.cohort")

# propositos dos fluxos aleatorios
_BODY = 0
_VOLUME = 1
_SHAPE = 2
_PLACEMENT = 3


@dataclass(frozen=True)
class OrganSpec:
    """
    Especificacao sintetica de um orgao. Os defaults sao inventados para a coorte
    de bancada, nao estatisticas publicadas.

    placement_region: (x0, x1, y0, y1, z0, z1) em fracoes da caixa envolvente do corpo;
    o centro do orgao eh sorteado dentro dela.
    """

    name: str
    volume_slope: float = 0.1
    volume_intercept: float = 100.0
    residual_noise: float = 50.0
    eccentricity: tuple[float, float] = (0.7, 1.4)
    placement_region: tuple[float, float, float, float, float, float] = (0.3, 0.7, 0.3, 0.7, 0.3, 0.7)

    def __post_init__(self) -> None:
        if not self.name or not self.name.replace("_", "").isalnum():
            raise ValueError(f"nome de orgao invalido: {self.name!r}")
        if self.volume_slope < 0:
            raise ValueError(f"{self.name}: volume_slope deve ser >= 0")
        if self.residual_noise < 0:
            raise ValueError(f"{self.name}: residual_noise deve ser >= 0")
        lo, hi = self.eccentricity
        if not (0.2 <= lo <= hi <= 5.0):
            raise ValueError(f"{self.name}: eccentricity fora de [0.2, 5]: {self.eccentricity}")
        r = self.placement_region
        if len(r) != 6:
            raise ValueError(f"{self.name}: placement_region precisa de 6 valores")
        for axis in range(3):
            a, b = r[2 * axis], r[2 * axis + 1]
            if not (0.0 <= a <= b <= 1.0):
                raise ValueError(f"{self.name}: placement_region fora do cubo unitario: {r}")

    def expected_volume(self, body_volume_ml: float) -> float:
        return self.volume_slope * body_volume_ml + self.volume_intercept


def default_organ_specs() -> tuple[OrganSpec, ...]:
    # ordem = ordem de geracao (grandes primeiro)
    return (
        OrganSpec(
            name="liver",
            volume_slope=0.12,
            volume_intercept=300.0,
            residual_noise=120.0,
            eccentricity=(0.75, 1.35),
            placement_region=(0.3, 0.5, 0.35, 0.65, 0.35, 0.65),
        ),
        OrganSpec(
            name="spleen",
            volume_slope=0.02,
            volume_intercept=60.0,
            residual_noise=30.0,
            eccentricity=(0.6, 1.6),
            placement_region=(0.66, 0.8, 0.35, 0.65, 0.35, 0.65),
        ),
    )


@dataclass(frozen=True)
class BodySpec:
    median_ml: float = 8000.0
    log_sigma: float = 0.12
    axis_ratios: tuple[float, float, float] = (1.1, 1.0, 0.9)


@dataclass(frozen=True)
class PlacementPolicy:
    max_attempts: int = 500
    shrink_after: int = 50
    max_shrink: float = 0.2
    max_consecutive_rejections: int = 10

    def scale(self, attempt: int) -> float:
        """Fator linear de eixo: 1 ate shrink_after, depois ate 1 - max_shrink na ultima tentativa."""
        if attempt < self.shrink_after:
            return 1.0
        span = max(1, self.max_attempts - 1 - self.shrink_after)
        return 1.0 - self.max_shrink * min(1.0, (attempt - self.shrink_after) / span)


@dataclass(frozen=True)
class PhantomCase:
    case_id: str
    body: BinaryMask
    organs: dict[str, BinaryMask] = field(default_factory=dict)
    true_volumes: dict[str, float] = field(default_factory=dict)

    @property
    def organ_order(self) -> tuple[str, ...]:
        return tuple(self.organs)

    @property
    def body_volume(self) -> float:
        return volume_ml(self.body)

    def check_invariants(self) -> None:
        """Subconjunto do corpo, disjuncao par a par, volumes coerentes. DataError na violacao."""
        occupied = np.zeros(self.body.dims, dtype=bool)
        for name, mask in self.organs.items():
            if mask.dims != self.body.dims or mask.spacing != self.body.spacing:
                raise DataError(f"{self.case_id}/{name}: grade incompativel com o corpo")
            if (mask.bits & ~self.body.bits).any():
                raise DataError(f"{self.case_id}/{name}: orgao fora do corpo")
            if (mask.bits & occupied).any():
                raise DataError(f"{self.case_id}/{name}: sobreposicao com orgao anterior")
            occupied |= mask.bits
            if not np.isclose(self.true_volumes.get(name, np.nan), volume_ml(mask), rtol=0, atol=1e-9):
                raise DataError(f"{self.case_id}/{name}: true_volume diverge do volume da mascara")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhantomCase):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.body == other.body
            and list(self.organs) == list(other.organs)
            and all(self.organs[k] == other.organs[k] for k in self.organs)
            and self.true_volumes == other.true_volumes
        )


class _PlacementFailed(Exception):
    def __init__(self, organ: str, attempts: int) -> None:
        super().__init__(f"orgao {organ}: sem posicao valida apos {attempts} tentativas")
        self.organ = organ


def _stream(seed: int, case_index: int, slot: int, purpose: int, subseed: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, case_index, slot, purpose, subseed])
    return np.random.Generator(np.random.Philox(ss))


def _grid_coords(dims: tuple[int, int, int]) -> np.ndarray:
    # (n, 3) em ordem C de indice
    return np.indices(dims, dtype=np.float64).reshape(3, -1).T


def _n_smallest(rho: np.ndarray, n: int, dims: tuple[int, int, int]) -> np.ndarray:
    """Os n voxels de menor raio normalizado: volume exato, empates resolvidos pelo indice."""
    order = np.argsort(rho, kind="stable")
    bits = np.zeros(rho.size, dtype=bool)
    bits[order[:n]] = True
    return bits.reshape(dims)


def _voxel_count(volume: float, spacing: float, limit: int) -> int:
    return int(min(limit, max(1, round(volume / voxel_volume_ml(spacing)))))


def _make_body(
    rng: np.random.Generator,
    dims: tuple[int, int, int],
    spacing: float,
    body: BodySpec,
    coords: np.ndarray,
) -> BinaryMask:
    if body.log_sigma > 0:
        target = float(stats.lognorm(s=body.log_sigma, scale=body.median_ml).rvs(random_state=rng))
    else:
        target = body.median_ml
    n = _voxel_count(target, spacing, coords.shape[0])
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    rho = np.sqrt((((coords - center) / np.asarray(body.axis_ratios)) ** 2).sum(axis=1))
    return BinaryMask(_n_smallest(rho, n, dims), spacing)


def _place_organ(
    spec: OrganSpec,
    target_ml: float,
    body: BinaryMask,
    occupied: np.ndarray,
    shape_rng: np.random.Generator,
    place_rng: np.random.Generator,
    policy: PlacementPolicy,
    coords: np.ndarray,
) -> BinaryMask:
    dims = body.dims
    lo_e, hi_e = spec.eccentricity
    semi = np.array([1.0, shape_rng.uniform(lo_e, hi_e), shape_rng.uniform(lo_e, hi_e)])
    n_full = _voxel_count(target_ml, body.spacing, coords.shape[0])

    idx = np.argwhere(body.bits)
    bb_lo = idx.min(axis=0).astype(np.float64)
    bb_hi = idx.max(axis=0).astype(np.float64)
    region = np.asarray(spec.placement_region).reshape(3, 2)
    allowed = body.bits & ~occupied

    for attempt in range(policy.max_attempts):
        s = policy.scale(attempt)
        n = max(1, int(round(n_full * s**3)))
        frac = place_rng.uniform(region[:, 0], region[:, 1])
        center = bb_lo + frac * (bb_hi - bb_lo)
        q = place_rng.standard_normal(4)
        rot = Rotation.from_quat(q / np.linalg.norm(q))
        local = rot.inv().apply(coords - center) / semi
        rho = np.sqrt((local**2).sum(axis=1))
        bits = _n_smallest(rho, n, dims)
        if not (bits & ~allowed).any():
            if attempt >= policy.shrink_after:
                log.debug(kv(event="organ_shrunk", organ=spec.name, attempt=attempt, scale=s))
            return BinaryMask(bits, body.spacing)

    raise _PlacementFailed(spec.name, policy.max_attempts)


def generate_case(
    seed: int,
    case_index: int,
    grid_dims: Sequence[int],
    spacing: float,
    organ_specs: Sequence[OrganSpec],
    body_spec: BodySpec = BodySpec(),
    policy: PlacementPolicy = PlacementPolicy(),
) -> PhantomCase:
    dims = (int(grid_dims[0]), int(grid_dims[1]), int(grid_dims[2]))
    coords = _grid_coords(dims)
    case_id = case_id_for(case_index)

    last_err: _PlacementFailed | None = None
    for subseed in range(policy.max_consecutive_rejections + 1):
        body = _make_body(_stream(seed, case_index, 0, _BODY, subseed), dims, spacing, body_spec, coords)
        v_body = volume_ml(body)
        occupied = np.zeros(dims, dtype=bool)
        organs: dict[str, BinaryMask] = {}
        volumes: dict[str, float] = {}
        try:
            for slot, spec in enumerate(organ_specs, start=1):
                vol_rng = _stream(seed, case_index, slot, _VOLUME, subseed)
                target = spec.expected_volume(v_body) + spec.residual_noise * vol_rng.standard_normal()
                mask = _place_organ(
                    spec,
                    target,
                    body,
                    occupied,
                    _stream(seed, case_index, slot, _SHAPE, subseed),
                    _stream(seed, case_index, slot, _PLACEMENT, subseed),
                    policy,
                    coords,
                )
                occupied |= mask.bits
                organs[spec.name] = mask
                volumes[spec.name] = volume_ml(mask)
        except _PlacementFailed as e:
            last_err = e
            log.warning(kv(event="case_rejected", case_id=case_id, subseed=subseed, organ=e.organ))
            continue
        return PhantomCase(case_id=case_id, body=body, organs=organs, true_volumes=volumes)

    raise CohortGenerationError(
        f"{case_id}: abortado apos {policy.max_consecutive_rejections + 1} rejeicoes consecutivas "
        f"(ultimo erro: {last_err})"
    )


def generate_cohort(
    seed: int,
    n_cases: int,
    grid_dims: Sequence[int],
    spacing: float,
    organ_specs: Sequence[OrganSpec],
    body_spec: BodySpec = BodySpec(),
    policy: PlacementPolicy = PlacementPolicy(),
    threads: int = 1,
) -> list[PhantomCase]:
    """Gera n_cases casos. Deterministico dado seed; threads nao altera o resultado."""
    if n_cases < 1:
        raise CohortGenerationError("n_cases deve ser >= 1")
    if not organ_specs:
        raise CohortGenerationError("organ_specs vazio")

    def one(i: int) -> PhantomCase:
        return generate_case(seed, i, grid_dims, spacing, organ_specs, body_spec, policy)

    if threads <= 1:
        return [one(i) for i in range(n_cases)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(n_cases)))


def shift_cohort_volumes(specs: Sequence[OrganSpec], shift: float, organ: str) -> tuple[OrganSpec, ...]:
    names = [s.name for s in specs]
    if organ not in names:
        raise DataError(f"orgao desconhecido: {organ!r} (disponiveis: {names})")
    return tuple(
        replace(s, volume_intercept=s.volume_intercept + shift) if s.name == organ else s for s in specs
    )


def save_case(case: PhantomCase, cohort_root: Path) -> Path:
    case_dir = case_dir_for(cohort_root, case.case_id)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_vgf(case_dir / BODY_FILE, case.body)
    organ_files: dict[str, str] = {}
    for name, mask in case.organs.items():
        fname = organ_file_for(name)
        write_vgf(case_dir / fname, mask)
        organ_files[name] = fname
    CaseManifest(
        case_id=case.case_id,
        organ_order=case.organ_order,
        dims=case.body.dims,
        spacing=case.body.spacing,
        true_volumes=dict(case.true_volumes),
        body_volume=case.body_volume,
        body_file=BODY_FILE,
        organ_files=organ_files,
    ).save(case_dir / MANIFEST_FILE)
    return case_dir


def _read_checked(path: Path, manifest: CaseManifest) -> BinaryMask:
    if not path.exists():
        raise VgfFormatError(f"{manifest.case_id}: arquivo ausente {path.name}")
    mask = read_mask(path)
    if mask.dims != manifest.dims:
        raise DataError(f"{manifest.case_id}/{path.name}: dims do manifest {manifest.dims} != dims do VGF {mask.dims}")
    if mask.spacing != manifest.spacing:
        raise DataError(
            f"{manifest.case_id}/{path.name}: spacing do manifest {manifest.spacing} != spacing do VGF {mask.spacing}"
        )
    return mask


def load_case(case_dir: Path) -> PhantomCase:
    manifest = CaseManifest.load(case_dir / MANIFEST_FILE)
    body = _read_checked(case_dir / manifest.body_file, manifest)
    organs = {name: _read_checked(case_dir / manifest.organ_files[name], manifest) for name in manifest.organ_order}
    volumes = {name: manifest.true_volumes.get(name, volume_ml(organs[name])) for name in manifest.organ_order}
    return PhantomCase(case_id=manifest.case_id, body=body, organs=organs, true_volumes=volumes)


def save_cohort(cases: Sequence[PhantomCase], cohort_root: Path) -> list[Path]:
    return [save_case(c, cohort_root) for c in cases]


def load_cohort(cohort_root: Path) -> list[PhantomCase]:
    dirs = iter_case_dirs(cohort_root)
    if not dirs:
        raise DataError(f"nenhum case_XXXX em {cohort_root}")
    return [load_case(d) for d in dirs]


@dataclass(frozen=True)
class CohortSplit:
    train: list[PhantomCase]
    val: list[PhantomCase]
    test: list[PhantomCase]


def split_cohort(cases: Sequence[PhantomCase], val_fraction: float = 0.1, test_fraction: float = 0.2) -> CohortSplit:
    """Divisao por indice: treino no inicio, depois validacao, teste no fim. Treino nunca fica vazio."""
    n = len(cases)
    n_test = int(round(n * test_fraction))
    n_val = int(round(n * val_fraction))
    while n - n_test - n_val < 1 and (n_test or n_val):
        if n_test >= n_val and n_test:
            n_test -= 1
        else:
            n_val -= 1
    n_train = n - n_test - n_val
    cases = list(cases)
    return CohortSplit(
        train=cases[:n_train],
        val=cases[n_train : n_train + n_val],
        test=cases[n_train + n_val :],
    )


def organ_volumes(cases: Sequence[PhantomCase], organ: str) -> np.ndarray:
    try:
        return np.array([c.true_volumes[organ] for c in cases], dtype=np.float64)
    except KeyError as e:
        raise DataError(f"orgao {organ!r} ausente em algum caso") from e


def body_volumes(cases: Sequence[PhantomCase]) -> np.ndarray:
    return np.array([c.body_volume for c in cases], dtype=np.float64)


def cohort_summary(cases: Sequence[PhantomCase]) -> dict[str, dict[str, float]]:
    """Medias de volume e correlacao de Pearson corpo x orgao (nan se indefinida)."""
    bodies = body_volumes(cases)
    out: dict[str, dict[str, float]] = {"body": {"mean_ml": float(bodies.mean()), "std_ml": float(bodies.std())}}
    for organ in cases[0].organ_order:
        vols = organ_volumes(cases, organ)
        r = float("nan")
        if len(cases) >= 2 and np.ptp(bodies) > 0 and np.ptp(vols) > 0:
            r = float(stats.pearsonr(bodies, vols)[0])
        out[organ] = {"mean_ml": float(vols.mean()), "std_ml": float(vols.std()), "pearson_body": r}
    return out
