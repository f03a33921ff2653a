# src/vcs_phantom/generation/training.py
"""
Laco de treino AdamW de um orgao.

Por lote: t ~ U{1..T}, ruido gaussiano, dropout de condicionamento (so no treino),
x_t = q_sample(S_ref), loss de 4 termos; L_vcs liga a partir de effective_warmup.
O contexto de treino vem das mascaras de referencia dos orgaos anteriores na ordem.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn

from vcs_phantom.core.config import ScheduleCfg, TrainCfg
from vcs_phantom.core.errors import DataError, NonFiniteError, TrainingDivergedError
from vcs_phantom.core.logging_utils import EventLogger, NullEventLogger, kv
from vcs_phantom.generation.checkpoint import save_checkpoint
from vcs_phantom.generation.denoiser import Denoiser
from vcs_phantom.generation.diffusion import (
    CondBatch,
    Conditioning,
    NoiseSchedule,
    drop_conditioning,
    make_schedule,
    q_sample,
)
from vcs_phantom.generation.losses import LossReport, TrainBatch, backward, compute_losses
from vcs_phantom.shapes.cohort import PhantomCase
from vcs_phantom.shapes.vcs import VcsModel, vcs_of
from vcs_phantom.shapes.voxel import BinaryMask, ScalarGrid, SdfConfig, compose_context, sdf_from_mask

log = logging.getLogger("vcs_phantom.training")

LAST_GOOD_DIR = "last_good"
HISTORY_COLUMNS = ("epoch", "l_sdf", "l_bce", "l_ov", "l_vcs", "total", "val_total")


@dataclass(frozen=True)
class Example:
    case_id: str
    body_sdf: ScalarGrid
    context_sdf: ScalarGrid
    ref_sdf: ScalarGrid
    ref_mask: BinaryMask
    ctx_mask: BinaryMask
    v: float
    v_body: float

    def conditioning(self) -> Conditioning:
        return Conditioning(body=self.body_sdf, context=self.context_sdf, v=self.v)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_sdf: float
    l_bce: float
    l_ov: float
    l_vcs: float
    total: float
    val_total: float

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in HISTORY_COLUMNS}


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    last_good_epoch: int = -1


def prepare_examples(
    cases: Sequence[PhantomCase], organ: str, vcs_model: VcsModel, sdf_cfg: SdfConfig
) -> list[Example]:
    out: list[Example] = []
    for case in cases:
        if organ not in case.organs:
            raise DataError(f"{case.case_id}: orgao {organ!r} ausente")
        prior = case.organ_order[: case.organ_order.index(organ)]
        ctx_bits = np.zeros(case.body.dims, dtype=bool)
        for name in prior:
            ctx_bits |= case.organs[name].bits
        context = compose_context(
            [sdf_from_mask(case.organs[name], sdf_cfg) for name in prior],
            sdf_cfg,
            dims=case.body.dims,
            spacing=case.body.spacing,
        )
        out.append(
            Example(
                case_id=case.case_id,
                body_sdf=sdf_from_mask(case.body, sdf_cfg),
                context_sdf=context,
                ref_sdf=sdf_from_mask(case.organs[organ], sdf_cfg),
                ref_mask=case.organs[organ],
                ctx_mask=BinaryMask(ctx_bits, case.body.spacing),
                v=vcs_of(case.true_volumes[organ], case.body_volume, vcs_model),
                v_body=case.body_volume,
            )
        )
    return out


def _stack(grids: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    return torch.stack([torch.from_numpy(np.ascontiguousarray(g)) for g in grids]).unsqueeze(1).to(dtype)


def make_batch(
    examples: Sequence[Example],
    t: np.ndarray,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    dtype: torch.dtype,
    conds: Optional[Sequence[Conditioning]] = None,
) -> TrainBatch:
    """conds=None usa o condicionamento completo (validacao)."""
    conds = [ex.conditioning() for ex in examples] if conds is None else conds
    t_vec = torch.as_tensor(np.asarray(t, dtype=np.int64))
    x0 = _stack([ex.ref_sdf.values for ex in examples], torch.float64)
    x_t = q_sample(x0, t_vec, noise, schedule)
    return TrainBatch(
        x_t=x_t.to(dtype),
        t=t_vec,
        cond=CondBatch.stack(conds, dtype=dtype),
        ref_sdf=x0.to(dtype),
        ref_mask=_stack([ex.ref_mask.bits.astype(np.float64) for ex in examples], dtype),
        ctx_mask=_stack([ex.ctx_mask.bits.astype(np.float64) for ex in examples], dtype),
        v_target=torch.tensor([ex.v for ex in examples], dtype=dtype),
        v_body=torch.tensor([ex.v_body for ex in examples], dtype=dtype),
        spacing=examples[0].body_sdf.spacing,
    )


def _noise(n: int, dims: tuple[int, int, int], gen: torch.Generator) -> torch.Tensor:
    return torch.randn((n, 1, *dims), generator=gen, dtype=torch.float64)


def _mean_reports(reports: Sequence[tuple[int, LossReport]]) -> dict[str, float]:
    n = sum(k for k, _ in reports)
    out = {}
    for key in ("l_sdf", "l_bce", "l_ov", "l_vcs", "total"):
        vals = [(k, r.as_row()[key]) for k, r in reports]
        out[key] = sum(k * v for k, v in vals) / n
    return out


def validation_loss(
    model: Denoiser,
    examples: Sequence[Example],
    vcs_model: VcsModel,
    schedule: NoiseSchedule,
    sdf_cfg: SdfConfig,
    cfg: TrainCfg,
    vcs_active: bool,
) -> float:
    """Loss total media na validacao; t e ruido fixos por seed, sem dropout."""
    if not examples:
        return float("nan")
    rng = np.random.default_rng([cfg.seed, 1])
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    dims = examples[0].body_sdf.dims
    reports: list[tuple[int, LossReport]] = []
    with torch.no_grad():
        for start in range(0, len(examples), cfg.batch_size):
            chunk = examples[start : start + cfg.batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(chunk))
            batch = make_batch(chunk, t, _noise(len(chunk), dims, gen), schedule, model.dtype)
            _, rep = compute_losses(model, batch, vcs_model, sdf_cfg, cfg.loss_weights, vcs_active)
            reports.append((len(chunk), rep))
    return _mean_reports(reports)["total"]


def write_history(history: Sequence[EpochRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            row = rec.as_row()
            w.writerow([rec.epoch] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def train(
    model: Denoiser,
    train_cases: Sequence[PhantomCase],
    organ: str,
    vcs_model: VcsModel,
    schedule_cfg: ScheduleCfg,
    cfg: TrainCfg,
    sdf_cfg: SdfConfig,
    val_cases: Sequence[PhantomCase] = (),
    checkpoint_dir: Optional[Path] = None,
    events: EventLogger | NullEventLogger = NullEventLogger(),
    show_progress: bool = False,
) -> TrainResult:
    """
    Treina `model` no lugar. Com checkpoint_dir, grava <checkpoint_dir>/last_good ao fim
    de cada epoca; em divergencia restaura os parametros bons e levanta TrainingDivergedError.
    """
    if not train_cases:
        raise DataError("train: nenhum caso de treino")
    schedule = make_schedule(schedule_cfg.steps, schedule_cfg.beta_start, schedule_cfg.beta_end)
    examples = prepare_examples(train_cases, organ, vcs_model, sdf_cfg)
    val_examples = prepare_examples(val_cases, organ, vcs_model, sdf_cfg)
    dims = examples[0].body_sdf.dims
    dtype = model.dtype

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng([cfg.seed, 0])
    gen = torch.Generator().manual_seed(cfg.seed)
    warmup = cfg.effective_warmup
    result = TrainResult()
    last_good = model.flat_parameters()

    log.info(
        kv(
            event="train_start",
            organ=organ,
            n_train=len(examples),
            n_val=len(val_examples),
            epochs=cfg.epochs,
            warmup=warmup,
        )
    )
    events.event("train_start", organ=organ, n_train=len(examples), n_val=len(val_examples), epochs=cfg.epochs)

    model.train()
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TimeElapsedColumn(),
        disable=not show_progress,
    ) as progress:
        task = progress.add_task(f"Treinando {organ}...", total=cfg.epochs)
        for epoch in range(cfg.epochs):
            vcs_active = epoch >= warmup
            order = rng.permutation(len(examples))
            reports: list[tuple[int, LossReport]] = []
            try:
                for start in range(0, len(order), cfg.batch_size):
                    chunk = [examples[i] for i in order[start : start + cfg.batch_size]]
                    t = rng.integers(1, schedule.T + 1, size=len(chunk))
                    conds = [drop_conditioning(ex.conditioning(), cfg.drop_prob, rng, sdf_cfg) for ex in chunk]
                    batch = make_batch(chunk, t, _noise(len(chunk), dims, gen), schedule, dtype, conds)
                    _, rep = backward(model, batch, vcs_model, sdf_cfg, cfg.loss_weights, vcs_active)
                    optimizer.step()
                    reports.append((len(chunk), rep))
            except NonFiniteError as e:
                model.load_flat(last_good)
                events.event("train_diverged", organ=organ, epoch=epoch, error=str(e))
                where = ""
                if checkpoint_dir is not None and result.last_good_epoch >= 0:
                    where = f" em {checkpoint_dir / LAST_GOOD_DIR}"
                raise TrainingDivergedError(
                    f"{organ}: treino divergiu na epoca {epoch} ({e}); "
                    f"ultimo checkpoint bom: epoca {result.last_good_epoch}{where}"
                ) from e

            means = _mean_reports(reports)
            val_total = float("nan")
            if val_examples and (epoch + 1) % cfg.val_every == 0:
                model.eval()
                val_total = validation_loss(model, val_examples, vcs_model, schedule, sdf_cfg, cfg, vcs_active)
                model.train()
            rec = EpochRecord(
                epoch=epoch,
                l_sdf=means["l_sdf"],
                l_bce=means["l_bce"],
                l_ov=means["l_ov"],
                l_vcs=means["l_vcs"] if vcs_active else float("nan"),
                total=means["total"],
                val_total=val_total,
            )
            result.history.append(rec)
            last_good = model.flat_parameters()
            result.last_good_epoch = epoch
            if checkpoint_dir is not None:
                save_checkpoint(
                    checkpoint_dir / LAST_GOOD_DIR,
                    model,
                    organ,
                    epoch,
                    schedule_cfg,
                    vcs_model,
                    [r.as_row() for r in result.history[-cfg.history_tail :]],
                )
            log.info(kv(event="epoch_end", organ=organ, **rec.as_row()))
            events.event("epoch_end", organ=organ, **rec.as_row())
            progress.advance(task)

    model.eval()
    log.info(kv(event="train_end", organ=organ, epochs=len(result.history)))
    return result

