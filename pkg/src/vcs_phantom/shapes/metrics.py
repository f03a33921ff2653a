# src/vcs_phantom/shapes/metrics.py
"""
Metricas de fidelidade geometrica, realismo (vizinho de treino mais proximo),
diversidade e distancia de distribuicao de volumes.

Convencoes fixas (nao mudar em silencio):
  - HD95 agregado: um unico percentil (interpolacao linear) sobre as distancias
    dos dois sentidos juntas; simetrico por construcao.
  - Chamfer: media das duas medias direcionais, em mm (nao ao quadrado).
  - ASSD: media do conjunto agregado dos dois sentidos.
  - Alinhamento: centroide + eixos principais (autovalores decrescentes), sinal de
    cada eixo com terceiro momento >= 0, empates para +.
"""
from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from vcs_phantom.core.errors import DataError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.shapes.cohort import PhantomCase
from vcs_phantom.shapes.voxel import BinaryMask, ensure_compatible, surface_points

log = logging.getLogger("vcs_phantom.metrics")

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class AlignedCloud:
    points: np.ndarray
    centroid: np.ndarray
    axes: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class SurfaceDistances:
    assd_mm: float
    hd95_mm: float
    chamfer_mm: float


@dataclass(frozen=True)
class RealismEntry:
    index: int
    neighbor: int
    chamfer_mm: float
    hd95_mm: float


@dataclass(frozen=True)
class DiversityReport:
    n_pairs: int
    dice_mean: float
    dice_std: float
    chamfer_mean: float
    chamfer_std: float


@dataclass(frozen=True)
class MetricRow:
    case: str
    organ: str
    metric: str
    value: float


def dice(a: BinaryMask, b: BinaryMask) -> float:
    ensure_compatible(a, b, "dice")
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / (na + nb)


def _orient(v: np.ndarray, proj: np.ndarray) -> np.ndarray:
    m3 = float(np.mean(proj**3))
    scale = float(np.mean(np.abs(proj) ** 3))
    if abs(m3) <= _TIE_RTOL * max(scale, np.finfo(float).tiny):
        # simetrico ao longo do eixo: primeiro componente nao nulo positivo
        nz = np.flatnonzero(np.abs(v) > _TIE_RTOL)
        if nz.size and v[nz[0]] < 0:
            return -v
        return v
    return v if m3 > 0 else -v


def align(points: np.ndarray) -> AlignedCloud:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] < 1:
        raise DataError("align: nuvem vazia")
    centroid = p.mean(axis=0)
    c = p - centroid
    cov = c.T @ c / p.shape[0]
    evals, evecs = np.linalg.eigh(cov)

    vecs = [_orient(evecs[:, j], c @ evecs[:, j]) for j in range(3)]
    order = sorted(range(3), key=lambda j: -evals[j])
    # autovalores degenerados: desempate pelo autovetor, lexicograficamente maior primeiro
    tol = _TIE_RTOL * max(float(np.abs(evals).max()), np.finfo(float).tiny)
    for _ in range(2):
        for i in range(2):
            j, k = order[i], order[i + 1]
            if abs(evals[j] - evals[k]) <= tol and tuple(vecs[k]) > tuple(vecs[j]):
                order[i], order[i + 1] = k, j

    axes = np.stack([vecs[j] for j in order], axis=1)
    return AlignedCloud(
        points=c @ axes,
        centroid=centroid,
        axes=axes,
        eigenvalues=np.array([evals[j] for j in order]),
    )


def _as_points(cloud: AlignedCloud | np.ndarray) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, AlignedCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise DataError("surface_distances: nuvem vazia")
    return pts


def _distances(a: np.ndarray, b: np.ndarray, tree_a: cKDTree, tree_b: cKDTree, percentile: float) -> SurfaceDistances:
    d_ab = tree_b.query(a)[0]
    d_ba = tree_a.query(b)[0]
    pooled = np.concatenate([d_ab, d_ba])
    return SurfaceDistances(
        assd_mm=float(pooled.mean()),
        hd95_mm=float(np.percentile(pooled, percentile)),
        chamfer_mm=float((d_ab.mean() + d_ba.mean()) / 2.0),
    )


def surface_distances(
    a: AlignedCloud | np.ndarray,
    b: AlignedCloud | np.ndarray,
    percentile: float = 95.0,
) -> SurfaceDistances:
    """Nuvens cruas (ndarray) sao usadas como estao, sem alinhamento."""
    pa, pb = _as_points(a), _as_points(b)
    return _distances(pa, pb, cKDTree(pa), cKDTree(pb), percentile)


def mask_cloud(mask: BinaryMask, align_points: bool = True) -> AlignedCloud | np.ndarray:
    pts = surface_points(mask)
    return align(pts) if align_points else pts


def mask_distances(
    a: BinaryMask, b: BinaryMask, align_points: bool = True, percentile: float = 95.0
) -> SurfaceDistances:
    return surface_distances(mask_cloud(a, align_points), mask_cloud(b, align_points), percentile)


class _CloudSet:
    """Nuvens + KD-trees pre-computadas de uma lista de mascaras."""

    def __init__(self, masks: Sequence[BinaryMask], align_points: bool) -> None:
        self.points = [_as_points(mask_cloud(m, align_points)) for m in masks]
        self.trees = [cKDTree(p) for p in self.points]

    def distances(self, i: int, other: _CloudSet, j: int, percentile: float) -> SurfaceDistances:
        return _distances(self.points[i], other.points[j], self.trees[i], other.trees[j], percentile)


def nn_realism(
    generated: Sequence[BinaryMask],
    train: Sequence[BinaryMask],
    align_points: bool = True,
    percentile: float = 95.0,
    threads: int = 1,
) -> list[RealismEntry]:
    """
    Para cada mascara gerada, o vizinho de treino de menor Chamfer; o HD95
    reportado eh o desse mesmo vizinho. Empate: menor indice de treino.
    """
    if not generated or not train:
        raise DataError("nn_realism: sequencias vazias")
    gen = _CloudSet(generated, align_points)
    ref = _CloudSet(train, align_points)

    def one(i: int) -> RealismEntry:
        best: tuple[float, int, float] | None = None
        for j in range(len(train)):
            d = gen.distances(i, ref, j, percentile)
            if best is None or d.chamfer_mm < best[0]:
                best = (d.chamfer_mm, j, d.hd95_mm)
        assert best is not None
        return RealismEntry(index=i, neighbor=best[1], chamfer_mm=best[0], hd95_mm=best[2])

    if threads <= 1:
        return [one(i) for i in range(len(generated))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(generated))))


def pairwise_diversity(
    masks: Sequence[BinaryMask], align_points: bool = True, percentile: float = 95.0
) -> DiversityReport:
    if len(masks) < 2:
        raise DataError(f"pairwise_diversity: precisa de >= 2 mascaras, veio {len(masks)}")
    clouds = _CloudSet(masks, align_points)
    dices: list[float] = []
    chamfers: list[float] = []
    for i, j in itertools.combinations(range(len(masks)), 2):
        dices.append(dice(masks[i], masks[j]))
        chamfers.append(clouds.distances(i, clouds, j, percentile).chamfer_mm)
    d = np.asarray(dices)
    c = np.asarray(chamfers)
    return DiversityReport(
        n_pairs=len(dices),
        dice_mean=float(d.mean()),
        dice_std=float(d.std()),
        chamfer_mean=float(c.mean()),
        chamfer_std=float(c.std()),
    )


def wasserstein1(a: Sequence[float], b: Sequence[float]) -> float:
    """W1 exato entre CDFs empiricas (tamanhos podem diferir)."""
    xa = np.asarray(a, dtype=np.float64).ravel()
    xb = np.asarray(b, dtype=np.float64).ravel()
    if xa.size == 0 or xb.size == 0:
        raise DataError("wasserstein1: amostra vazia")
    return float(stats.wasserstein_distance(xa, xb))


def volume_density(samples: Sequence[float], grid: np.ndarray) -> np.ndarray:
    """KDE gaussiana (largura de Scott) dos volumes, avaliada em `grid`."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0:
        raise DataError("volume_density: precisa de >= 2 amostras distintas")
    return stats.gaussian_kde(x)(np.asarray(grid, dtype=np.float64))


def density_grid(*sample_sets: Sequence[float], points: int = 256, pad: float = 0.1) -> np.ndarray:
    allv = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in sample_sets])
    lo, hi = float(allv.min()), float(allv.max())
    margin = pad * max(hi - lo, 1.0)
    return np.linspace(lo - margin, hi + margin, points)


@dataclass(frozen=True)
class FidelityReport:
    case: str
    organ: str
    dice: float
    assd_mm: float
    hd95_mm: float
    chamfer_mm: float

    def rows(self) -> list[MetricRow]:
        return [
            MetricRow(self.case, self.organ, name, getattr(self, name))
            for name in ("dice", "assd_mm", "hd95_mm", "chamfer_mm")
        ]


def fidelity_entry(
    case_id: str,
    organ: str,
    generated: BinaryMask,
    reference: BinaryMask,
    align_points: bool = True,
    percentile: float = 95.0,
) -> FidelityReport:
    """Distancias de superficie ficam nan se alguma mascara estiver vazia."""
    nan = float("nan")
    d = SurfaceDistances(nan, nan, nan)
    if generated.count and reference.count:
        d = mask_distances(generated, reference, align_points, percentile)
    else:
        log.warning(kv(event="empty_mask", case=case_id, organ=organ))
    return FidelityReport(case_id, organ, dice(generated, reference), d.assd_mm, d.hd95_mm, d.chamfer_mm)


def fidelity_report(
    generated: Sequence[PhantomCase],
    reference: Sequence[PhantomCase],
    align_points: bool = True,
    percentile: float = 95.0,
) -> list[FidelityReport]:
    """Pareia casos por case_id e orgaos por nome, na ordem da referencia."""
    gen_by_id = {c.case_id: c for c in generated}
    missing = [c.case_id for c in reference if c.case_id not in gen_by_id]
    if missing:
        raise DataError(f"fidelity_report: casos sem gerado correspondente: {missing}")
    out: list[FidelityReport] = []
    for ref in reference:
        gen = gen_by_id[ref.case_id]
        for organ in ref.organ_order:
            if organ not in gen.organs:
                raise DataError(f"{ref.case_id}: orgao {organ!r} ausente no gerado")
            out.append(
                fidelity_entry(ref.case_id, organ, gen.organs[organ], ref.organs[organ], align_points, percentile)
            )
    return out


def realism_rows(label: str, organ: str, entries: Iterable[RealismEntry], case_ids: Sequence[str]) -> list[MetricRow]:
    rows: list[MetricRow] = []
    for e in entries:
        rows.append(MetricRow(case_ids[e.index], organ, f"{label}_nn_chamfer_mm", e.chamfer_mm))
        rows.append(MetricRow(case_ids[e.index], organ, f"{label}_nn_hd95_mm", e.hd95_mm))
    return rows


@dataclass(frozen=True)
class RealismReport:
    generated: list[RealismEntry]
    reference: list[RealismEntry]

    @staticmethod
    def _block(entries: Sequence[RealismEntry]) -> dict[str, float]:
        ch = np.array([e.chamfer_mm for e in entries])
        hd = np.array([e.hd95_mm for e in entries])
        return {
            "chamfer_mean": float(ch.mean()),
            "chamfer_std": float(ch.std()),
            "hd95_mean": float(hd.mean()),
            "hd95_std": float(hd.std()),
        }

    def summary(self) -> dict[str, dict[str, float]]:
        gen, ref = self._block(self.generated), self._block(self.reference)
        return {
            "generated": gen,
            "reference": ref,
            "gap": {k: gen[k] - ref[k] for k in ("chamfer_mean", "hd95_mean")},
        }


def realism_report(
    generated: Sequence[BinaryMask],
    reference: Sequence[BinaryMask],
    train: Sequence[BinaryMask],
    align_points: bool = True,
    percentile: float = 95.0,
    threads: int = 1,
) -> RealismReport:
    """
    Gen->treino vs Ref->treino. Gen muito abaixo de Ref sugere memorizacao;
    muito acima, amostras fora da variedade.
    """
    return RealismReport(
        generated=nn_realism(generated, train, align_points, percentile, threads),
        reference=nn_realism(reference, train, align_points, percentile, threads),
    )


def summarize(rows: Iterable[MetricRow]) -> dict[str, dict[str, dict[str, float]]]:
    """media +- desvio por orgao/metrica, ignorando nan."""
    acc: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r.organ, r.metric), []).append(r.value)
    out: dict[str, dict[str, dict[str, float]]] = {}
    for (organ, metric), vals in sorted(acc.items()):
        arr = np.asarray(vals, dtype=np.float64)
        arr = arr[np.isfinite(arr)]
        out.setdefault(organ, {})[metric] = {
            "mean": float(arr.mean()) if arr.size else float("nan"),
            "std": float(arr.std()) if arr.size else float("nan"),
            "n": int(arr.size),
        }
    return out


METRIC_CSV_HEADER = ("case", "organ", "metric", "value")


def write_metric_csv(rows: Iterable[MetricRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_CSV_HEADER)
        for r in rows:
            w.writerow([r.case, r.organ, r.metric, repr(float(r.value))])


def write_density_csv(grid: np.ndarray, densities: dict[str, np.ndarray], path: Path) -> None:
    """Colunas: volume_ml e uma densidade por serie, na ordem do dict."""
    names = list(densities)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["volume_ml", *names])
        for i, x in enumerate(grid):
            w.writerow([repr(float(x)), *(repr(float(densities[n][i])) for n in names)])
