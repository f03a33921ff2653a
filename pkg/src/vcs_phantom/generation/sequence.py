# src/vcs_phantom/generation/sequence.py
"""
Geracao autoregressiva multi-orgao e selecao de VCS em nivel de distribuicao.

Por caso: contexto comeca vazio (-tau); cada orgao, na ordem fixa, eh amostrado
condicionado em (SDF do corpo, contexto atual, v pedido), binarizado, limpo
(voxels sobre o contexto ou fora do corpo sao zerados) e somado ao contexto.
Casos sao independentes e vao em lote; dentro do caso a ordem eh estrita.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import stats

from vcs_phantom.core.errors import ConfigError, DataError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.generation.checkpoint import Checkpoint
from vcs_phantom.generation.diffusion import Conditioning, Denoiser, NoiseSchedule, ddim_sample_batch
from vcs_phantom.shapes.cohort import PhantomCase
from vcs_phantom.shapes.metrics import wasserstein1
from vcs_phantom.shapes.vcs import VcsModel, vcs_of
from vcs_phantom.shapes.voxel import (
    BinaryMask,
    ScalarGrid,
    SdfConfig,
    compose_context,
    empty_context,
    sdf_from_mask,
    threshold,
    volume_ml,
)

log = logging.getLogger("vcs_phantom.sequence")

SAMPLE_CHUNK = 8
CI_LEVEL = 0.95


@dataclass(frozen=True)
class OrganModel:
    denoiser: Denoiser
    vcs: VcsModel
    schedule: NoiseSchedule
    dtype: torch.dtype = torch.float32

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> OrganModel:
        model = ckpt.build_model()
        return cls(denoiser=model, vcs=ckpt.vcs, schedule=ckpt.schedule(), dtype=model.dtype)


@dataclass(frozen=True)
class GenerationPlan:
    order: tuple[str, ...]
    models: Mapping[str, OrganModel]
    vcs_requests: Mapping[str, float] = field(default_factory=dict)
    steps: int = 10
    sdf: SdfConfig = SdfConfig()
    degenerate_fraction: float = 0.5

    def __post_init__(self) -> None:
        if len(set(self.order)) != len(self.order):
            raise ConfigError(f"ordem de orgaos com duplicatas: {list(self.order)}")
        missing = [o for o in self.order if o not in self.models]
        if missing:
            raise ConfigError(f"sem checkpoint para: {missing}")
        unknown = sorted(set(self.vcs_requests) - set(self.order))
        if unknown:
            raise ConfigError(f"pedido de VCS para orgao fora do plano: {unknown}")
        if self.steps < 1:
            raise ConfigError("steps deve ser >= 1")

    def request(self, organ: str) -> float:
        return float(self.vcs_requests.get(organ, 0.0))

    def with_request(self, organ: str, v: float) -> GenerationPlan:
        return replace(self, vcs_requests={**self.vcs_requests, organ: float(v)})


@dataclass(frozen=True)
class GeneratedOrgan:
    name: str
    mask: BinaryMask
    sdf: ScalarGrid
    v_requested: float
    v_realized: float
    volume_ml: float
    cleared_fraction: float
    overlap_dice: float
    degenerate: bool


@dataclass(frozen=True)
class GeneratedAnatomy:
    body: BinaryMask
    organs: dict[str, GeneratedOrgan] = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return any(o.degenerate for o in self.organs.values())

    def to_case(self, case_id: str) -> PhantomCase:
        return PhantomCase(
            case_id=case_id,
            body=self.body,
            organs={k: o.mask for k, o in self.organs.items()},
            true_volumes={k: o.volume_ml for k, o in self.organs.items()},
        )

    def report(self) -> dict[str, Any]:
        return {
            "body_volume_ml": volume_ml(self.body),
            "degenerate": self.degenerate,
            "organs": {
                k: {
                    "v_requested": o.v_requested,
                    "v_realized": o.v_realized,
                    "volume_ml": o.volume_ml,
                    "cleared_fraction": o.cleared_fraction,
                    "overlap_dice": o.overlap_dice,
                    "degenerate": o.degenerate,
                }
                for k, o in self.organs.items()
            },
        }


def organ_seed(seed: int, case_index: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, case_index, slot]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _overlap_dice(raw: np.ndarray, ctx: np.ndarray) -> float:
    denom = int(raw.sum()) + int(ctx.sum())
    if denom == 0:
        return 0.0
    return 2.0 * int(np.count_nonzero(raw & ctx)) / denom


def _finish_organ(
    name: str,
    sampled: ScalarGrid,
    body: BinaryMask,
    occupied: np.ndarray,
    plan: GenerationPlan,
    v_body: float,
) -> GeneratedOrgan:
    raw = threshold(sampled).bits
    cleared = raw & (occupied | ~body.bits)
    kept = raw & ~cleared
    n_raw = int(raw.sum())
    frac = float(cleared.sum()) / n_raw if n_raw else 0.0
    mask = BinaryMask(kept, body.spacing)
    vol = volume_ml(mask)
    organ_model = plan.models[name]
    return GeneratedOrgan(
        name=name,
        mask=mask,
        sdf=sdf_from_mask(mask, plan.sdf),
        v_requested=plan.request(name),
        v_realized=vcs_of(vol, v_body, organ_model.vcs),
        volume_ml=vol,
        cleared_fraction=frac,
        overlap_dice=_overlap_dice(raw, occupied),
        degenerate=frac > plan.degenerate_fraction,
    )


def generate_anatomies(
    bodies: Sequence[BinaryMask],
    plan: GenerationPlan,
    seed: int,
    case_indices: Optional[Sequence[int]] = None,
) -> list[GeneratedAnatomy]:
    """
    Gera um lote de anatomias. O ruido de cada (caso, orgao) depende so de
    (seed, indice do caso, posicao do orgao), entao pedidos de VCS diferentes
    compartilham o mesmo ruido.
    """
    idx = list(range(len(bodies))) if case_indices is None else list(case_indices)
    if len(idx) != len(bodies):
        raise ValueError("case_indices precisa ter o mesmo tamanho de bodies")
    for i, b in enumerate(bodies):
        if b.count == 0:
            raise DataError(f"corpo vazio no item {i}")

    body_sdfs = [sdf_from_mask(b, plan.sdf) for b in bodies]
    body_vols = [volume_ml(b) for b in bodies]
    contexts = [empty_context(b.dims, b.spacing, plan.sdf) for b in bodies]
    occupied = [np.zeros(b.dims, dtype=bool) for b in bodies]
    organs: list[dict[str, GeneratedOrgan]] = [{} for _ in bodies]

    for slot, name in enumerate(plan.order):
        om = plan.models[name]
        v = plan.request(name)
        for start in range(0, len(bodies), SAMPLE_CHUNK):
            rows = range(start, min(start + SAMPLE_CHUNK, len(bodies)))
            conds = [Conditioning(body=body_sdfs[r], context=contexts[r], v=v) for r in rows]
            seeds = [organ_seed(seed, idx[r], slot) for r in rows]
            sampled = ddim_sample_batch(om.denoiser, conds, plan.steps, om.schedule, seeds, plan.sdf, om.dtype)
            for r, grid in zip(rows, sampled):
                g = _finish_organ(name, grid, bodies[r], occupied[r], plan, body_vols[r])
                if g.degenerate:
                    log.warning(
                        kv(event="degenerate_organ", case=idx[r], organ=name, cleared_fraction=g.cleared_fraction)
                    )
                organs[r][name] = g
                occupied[r] = occupied[r] | g.mask.bits
                contexts[r] = compose_context([contexts[r], g.sdf], plan.sdf)

    return [GeneratedAnatomy(body=b, organs=o) for b, o in zip(bodies, organs)]


def generate_anatomy(body: BinaryMask, plan: GenerationPlan, seed: int, case_index: int = 0) -> GeneratedAnatomy:
    return generate_anatomies([body], plan, seed, [case_index])[0]


def _t_ci(x: np.ndarray, level: float = CI_LEVEL) -> tuple[float, float]:
    """Intervalo t de Student da media; nan com menos de 2 valores."""
    x = x[np.isfinite(x)]
    if x.size < 2:
        return float("nan"), float("nan")
    m = float(x.mean())
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / np.sqrt(x.size))
    return m - half, m + half


def _delta_pct(vol: np.ndarray, base: np.ndarray, organ: str = "") -> np.ndarray:
    """Delta% por caso; base zero da 0 quando o volume tambem eh zero, nan caso contrario."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 100.0 * (vol - base) / base
    zero = base == 0
    out[zero & (vol == 0)] = 0.0
    undefined = zero & (vol != 0)
    out[undefined] = np.nan
    if undefined.any():
        log.warning(kv(event="delta_pct_undefined", organ=organ, n_cases=int(undefined.sum())))
    return out


def _nanmean(x: np.ndarray) -> float:
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


@dataclass(frozen=True)
class SweepPoint:
    v: float
    n: int
    mean_ml: float
    ci_low: float
    ci_high: float
    delta_pct: float
    delta_ci_low: float
    delta_ci_high: float
    v_hat_mean: float
    v_hat_abs_err: float
    others_mean_ml: dict[str, float] = field(default_factory=dict)
    others_delta_pct: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SweepResult:
    organ: str
    points: list[SweepPoint]
    spearman: float
    volumes: dict[float, np.ndarray] = field(default_factory=dict)


def _volumes(anatomies: Sequence[GeneratedAnatomy], organ: str) -> np.ndarray:
    return np.array([a.organs[organ].volume_ml for a in anatomies], dtype=np.float64)


def vcs_sweep(
    bodies: Sequence[BinaryMask],
    plan: GenerationPlan,
    organ: str,
    v_values: Sequence[float],
    seed: int,
) -> SweepResult:
    """
    Varre v do orgao com ruido fixo por caso. Delta% eh por caso contra v=0
    (gerado a parte se 0 nao estiver na lista). Os outros orgaos do plano sao
    auditados (media e Delta%) para checar independencia.
    """
    if organ not in plan.order:
        raise ConfigError(f"orgao {organ!r} fora do plano {list(plan.order)}")
    vs = [float(v) for v in v_values]
    if not vs:
        raise ConfigError("vcs_sweep: lista de v vazia")
    if vs != sorted(vs):
        raise ConfigError(f"vcs_sweep: valores de v precisam estar ordenados, veio {vs}")

    runs: dict[float, list[GeneratedAnatomy]] = {}
    for v in sorted(set(vs) | {0.0}):
        runs[v] = generate_anatomies(bodies, plan.with_request(organ, v), seed)
        log.info(kv(event="sweep_point", organ=organ, v=v, mean_ml=float(_volumes(runs[v], organ).mean())))

    others = [o for o in plan.order if o != organ]
    base = _volumes(runs[0.0], organ)
    base_others = {o: _volumes(runs[0.0], o) for o in others}

    points: list[SweepPoint] = []
    volumes: dict[float, np.ndarray] = {}
    for v in vs:
        anat = runs[v]
        vol = _volumes(anat, organ)
        volumes[v] = vol
        lo, hi = _t_ci(vol)
        delta = np.zeros_like(vol) if v == 0.0 else _delta_pct(vol, base, organ)
        dlo, dhi = _t_ci(delta)
        v_hat = np.array([a.organs[organ].v_realized for a in anat])
        points.append(
            SweepPoint(
                v=v,
                n=int(vol.size),
                mean_ml=float(vol.mean()),
                ci_low=lo,
                ci_high=hi,
                delta_pct=_nanmean(delta),
                delta_ci_low=dlo,
                delta_ci_high=dhi,
                v_hat_mean=float(v_hat.mean()),
                v_hat_abs_err=float(np.abs(v_hat - v).mean()),
                others_mean_ml={o: float(_volumes(anat, o).mean()) for o in others},
                others_delta_pct={o: _nanmean(_delta_pct(_volumes(anat, o), base_others[o], o)) for o in others},
            )
        )

    means = np.array([p.mean_ml for p in points])
    rho = float("nan")
    if len(points) >= 2 and np.ptp(means) > 0:
        rho = float(stats.spearmanr([p.v for p in points], means)[0])
    log.info(kv(event="sweep_done", organ=organ, n_points=len(points), spearman=rho))
    return SweepResult(organ=organ, points=points, spearman=rho, volumes=volumes)


def match_grid(v_min: float, v_max: float, step: float) -> list[float]:
    if step <= 0:
        raise ConfigError(f"step deve ser > 0, veio {step}")
    if v_max < v_min:
        raise ConfigError(f"v_max {v_max} < v_min {v_min}")
    n = int(np.floor((v_max - v_min) / step + 1e-9)) + 1
    return [float(np.round(v_min + k * step, 10)) for k in range(n)]


@dataclass(frozen=True)
class MatchResult:
    organ: str
    v_star: float
    w1_curve: list[tuple[float, float]]
    w1_before: float
    w1_after: float
    noise_floor: float
    flat_warning: bool
    mean_curve: list[tuple[float, float, float, float]]
    volumes_at_star: np.ndarray

    @property
    def reduction_pct(self) -> float:
        if self.w1_before == 0:
            return float("nan")
        return 100.0 * (self.w1_before - self.w1_after) / self.w1_before

    def to_json(self) -> dict[str, Any]:
        return {
            "organ": self.organ,
            "v_star": self.v_star,
            "w1_before": self.w1_before,
            "w1_after": self.w1_after,
            "reduction_pct": self.reduction_pct,
            "noise_floor": self.noise_floor,
            "flat_warning": self.flat_warning,
            "w1_curve": [{"v": v, "w1": w} for v, w in self.w1_curve],
        }


def match_cohort(
    target_volumes: Sequence[float],
    bodies: Sequence[BinaryMask],
    plan: GenerationPlan,
    organ: str,
    reference_volumes: Sequence[float],
    v_min: float = -3.0,
    v_max: float = 6.0,
    step: float = 0.25,
    seed: int = 0,
    noise_floor_factor: float = 2.0,
) -> MatchResult:
    """
    v* = argmin_v W1(volumes gerados em v, alvo); empate vai para o menor |v|.
    w1_before compara o alvo com os volumes de referencia (coorte de treino).
    Curva com amplitude abaixo de noise_floor_factor x erro padrao dos volumes gerados: aviso.
    """
    target = np.asarray(target_volumes, dtype=np.float64)
    if target.size == 0:
        raise DataError("match_cohort: alvo vazio")
    grid = match_grid(v_min, v_max, step)
    sweep = vcs_sweep(bodies, plan, organ, grid, seed)

    curve: list[tuple[float, float]] = []
    means: list[tuple[float, float, float, float]] = []
    sems: list[float] = []
    for p in sweep.points:
        vol = sweep.volumes[p.v]
        curve.append((p.v, wasserstein1(vol, target)))
        means.append((p.v, p.mean_ml, p.ci_low, p.ci_high))
        sems.append(float(vol.std(ddof=1) / np.sqrt(vol.size)) if vol.size > 1 else 0.0)

    v_star, w1_after = min(curve, key=lambda vw: (vw[1], abs(vw[0]), vw[0]))
    w1_before = wasserstein1(reference_volumes, target)
    floor = float(np.mean(sems))
    w1s = np.array([w for _, w in curve])
    flat = bool(np.ptp(w1s) <= noise_floor_factor * floor)
    if flat:
        log.warning(
            kv(
                event="match_flat_curve",
                organ=organ,
                curve_range=float(np.ptp(w1s)),
                noise_floor=floor,
                factor=noise_floor_factor,
            )
        )
    log.info(kv(event="match_done", organ=organ, v_star=v_star, w1_before=w1_before, w1_after=w1_after))
    return MatchResult(
        organ=organ,
        v_star=v_star,
        w1_curve=curve,
        w1_before=w1_before,
        w1_after=w1_after,
        noise_floor=floor,
        flat_warning=flat,
        mean_curve=means,
        volumes_at_star=sweep.volumes[v_star],
    )


def write_sweep_csv(result: SweepResult, path: Path) -> None:
    others = sorted(result.points[0].others_mean_ml) if result.points else []
    header = [
        "v", "n", "mean_ml", "ci_low", "ci_high", "delta_pct", "delta_ci_low", "delta_ci_high",
        "v_hat_mean", "v_hat_abs_err",
    ]
    header += [f"{o}_mean_ml" for o in others] + [f"{o}_delta_pct" for o in others]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in result.points:
            row: list[Any] = [
                repr(p.v), p.n, repr(p.mean_ml), repr(p.ci_low), repr(p.ci_high), repr(p.delta_pct),
                repr(p.delta_ci_low), repr(p.delta_ci_high), repr(p.v_hat_mean), repr(p.v_hat_abs_err),
            ]
            row += [repr(p.others_mean_ml[o]) for o in others] + [repr(p.others_delta_pct[o]) for o in others]
            w.writerow(row)


def write_match_csv(result: MatchResult, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["v", "mean_ml", "ci_low", "ci_high", "w1"])
        for (v, mean, lo, hi), (_, w1) in zip(result.mean_curve, result.w1_curve):
            w.writerow([repr(v), repr(mean), repr(lo), repr(hi), repr(w1)])
