# src/vcs_phantom/generation/losses.py
"""
Objetivo de treino: L = w_sdf L_SDF + w_bce L_BCE + w_ov L_ov + w_vcs L_vcs.

Todas as reducoes sao medias (por voxel, depois pelo lote).
L_ov penaliza sobreposicao: 2 sum(M_hat M_ctx) / (sum M_hat + sum M_ctx + eps).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch.nn.utils import parameters_to_vector

from vcs_phantom.core.config import LossWeightsCfg
from vcs_phantom.core.errors import NonFiniteError
from vcs_phantom.generation.diffusion import CondBatch
from vcs_phantom.generation.denoiser import Denoiser
from vcs_phantom.shapes.vcs import VcsModel
from vcs_phantom.shapes.voxel import SdfConfig, voxel_volume_ml

BCE_CLAMP = 1e-7
OVERLAP_EPS = 1e-6

_VOXEL_DIMS = (1, 2, 3, 4)


@dataclass(frozen=True)
class LossReport:
    l_sdf: float
    l_bce: float
    l_ov: float
    l_vcs: Optional[float]
    total: float

    def as_row(self) -> dict[str, float]:
        return {
            "l_sdf": self.l_sdf,
            "l_bce": self.l_bce,
            "l_ov": self.l_ov,
            "l_vcs": float("nan") if self.l_vcs is None else self.l_vcs,
            "total": self.total,
        }


@dataclass(frozen=True)
class TrainBatch:
    """Lote pronto para o denoiser; grades com shape (B, 1, X, Y, Z), escalares com shape (B,)."""

    x_t: torch.Tensor
    t: torch.Tensor
    cond: CondBatch
    ref_sdf: torch.Tensor
    ref_mask: torch.Tensor
    ctx_mask: torch.Tensor
    v_target: torch.Tensor
    v_body: torch.Tensor
    spacing: float


def occupancy_t(sdf: torch.Tensor, cfg: SdfConfig) -> torch.Tensor:
    return torch.sigmoid(cfg.sharpness * sdf)


def soft_volume_ml_t(occ: torch.Tensor, spacing: float) -> torch.Tensor:
    """Volume suave por item do lote, em mL."""
    return occ.sum(dim=_VOXEL_DIMS) * voxel_volume_ml(spacing)


def loss_sdf(pred: torch.Tensor, ref_sdf: torch.Tensor) -> torch.Tensor:
    # d|x|/dx em 0 eh 0 no torch
    return torch.mean(torch.abs(pred - ref_sdf))


def loss_bce(pred_occ: torch.Tensor, ref_mask: torch.Tensor) -> torch.Tensor:
    p = torch.clamp(pred_occ, BCE_CLAMP, 1.0 - BCE_CLAMP)
    m = ref_mask.to(p.dtype)
    return -torch.mean(m * torch.log(p) + (1.0 - m) * torch.log1p(-p))


def loss_overlap(pred_occ: torch.Tensor, ctx_mask: torch.Tensor) -> torch.Tensor:
    m = ctx_mask.to(pred_occ.dtype)
    num = 2.0 * (pred_occ * m).sum(dim=_VOXEL_DIMS)
    den = pred_occ.sum(dim=_VOXEL_DIMS) + m.sum(dim=_VOXEL_DIMS) + OVERLAP_EPS
    return torch.mean(num / den)


def vcs_hat_t(pred_occ: torch.Tensor, v_body: torch.Tensor, spacing: float, m: VcsModel) -> torch.Tensor:
    vol = soft_volume_ml_t(pred_occ, spacing)
    return ((vol - (m.a * v_body.to(vol.dtype) + m.b)) - m.mu) / m.sigma


def loss_vcs(
    pred_occ: torch.Tensor, v_target: torch.Tensor, v_body: torch.Tensor, spacing: float, m: VcsModel
) -> torch.Tensor:
    v_hat = vcs_hat_t(pred_occ, v_body, spacing, m)
    return torch.mean((v_hat - v_target.to(v_hat.dtype)) ** 2)


def compute_losses(
    model: Denoiser,
    batch: TrainBatch,
    vcs_model: VcsModel,
    sdf_cfg: SdfConfig,
    weights: LossWeightsCfg = LossWeightsCfg(),
    vcs_active: bool = True,
) -> tuple[torch.Tensor, LossReport]:
    pred = model(batch.x_t, batch.cond, batch.t)
    dt = pred.dtype
    occ = occupancy_t(pred, sdf_cfg)

    l_sdf = loss_sdf(pred, batch.ref_sdf.to(dt))
    l_bce = loss_bce(occ, batch.ref_mask)
    l_ov = loss_overlap(occ, batch.ctx_mask)
    total = weights.sdf * l_sdf + weights.bce * l_bce + weights.ov * l_ov
    l_vcs: Optional[torch.Tensor] = None
    if vcs_active:
        l_vcs = loss_vcs(occ, batch.v_target, batch.v_body, batch.spacing, vcs_model)
        total = total + weights.vcs * l_vcs

    report = LossReport(
        l_sdf=float(l_sdf.detach()),
        l_bce=float(l_bce.detach()),
        l_ov=float(l_ov.detach()),
        l_vcs=None if l_vcs is None else float(l_vcs.detach()),
        total=float(total.detach()),
    )
    return total, report


def backward(
    model: Denoiser,
    batch: TrainBatch,
    vcs_model: VcsModel,
    sdf_cfg: SdfConfig,
    weights: LossWeightsCfg = LossWeightsCfg(),
    vcs_active: bool = True,
) -> tuple[torch.Tensor, LossReport]:
    """
    Gradiente exato (autograd) da loss total como vetor plano, na ordem de
    model.parameters(). Deixa os .grad preenchidos para o otimizador.
    """
    model.zero_grad(set_to_none=False)
    total, report = compute_losses(model, batch, vcs_model, sdf_cfg, weights, vcs_active)
    if not torch.isfinite(total):
        raise NonFiniteError(f"loss total nao finita ({report.total})")
    total.backward()
    for name, p in model.named_parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"gradiente nao finito no bloco {name}")
    grad = parameters_to_vector([p.grad for p in model.parameters()]).detach().clone()
    return grad, report
