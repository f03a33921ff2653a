# src/vcs_phantom/generation/diffusion.py
"""
Schedule DDPM linear, forward noising, dropout de condicionamento e
amostrador DDIM deterministico (eta = 0) para denoisers que predizem x0.

Os tensores de trabalho sao torch float64 com shape (B, 1, X, Y, Z);
a fronteira publica aceita e devolve ScalarGrid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from vcs_phantom.core.errors import ConfigError, GridMismatchError
from vcs_phantom.shapes.voxel import ScalarGrid, SdfConfig, empty_context, ensure_compatible


@dataclass(frozen=True)
class NoiseSchedule:
    """beta[t-1] = beta_t; alpha_bar tem T+1 entradas com alpha_bar[0] = 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise ValueError(f"passo t={t} fora de [0, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule: T deve ser >= 1, veio {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"schedule: exige 0 < beta_start <= beta_end < 1, veio {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class Conditioning:
    body: ScalarGrid
    context: ScalarGrid
    v: float
    body_present: bool = True
    context_present: bool = True
    v_present: bool = True

    def __post_init__(self) -> None:
        ensure_compatible(self.body, self.context, "condicionamento corpo/contexto")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.body.dims


@dataclass(frozen=True)
class CondBatch:
    """Condicionamento empilhado para o denoiser."""

    body: torch.Tensor
    context: torch.Tensor
    v: torch.Tensor
    v_present: torch.Tensor

    @classmethod
    def stack(cls, conds: Sequence[Conditioning], dtype: torch.dtype = torch.float64) -> CondBatch:
        if not conds:
            raise ValueError("CondBatch.stack: lista vazia")
        body = torch.stack([torch.from_numpy(c.body.values.copy()) for c in conds]).unsqueeze(1)
        context = torch.stack([torch.from_numpy(c.context.values.copy()) for c in conds]).unsqueeze(1)
        return cls(
            body=body.to(dtype),
            context=context.to(dtype),
            v=torch.tensor([c.v if c.v_present else 0.0 for c in conds], dtype=dtype),
            v_present=torch.tensor([c.v_present for c in conds], dtype=torch.bool),
        )


# denoiser(x_t, cond, t) -> x0_hat, todos com shape (B, 1, X, Y, Z)
Denoiser = Callable[[torch.Tensor, CondBatch, torch.Tensor], torch.Tensor]


def _ab(s: NoiseSchedule, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    table = torch.as_tensor(s.alpha_bar, dtype=like.dtype)
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) > s.T):
            raise ValueError(f"passo t fora de [0, {s.T}]")
        return table[t].reshape(-1, *([1] * (like.dim() - 1)))
    s.check_step(int(t))
    return table[int(t)]


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, noise: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; t escalar ou um por amostra do lote."""
    if x0.shape != noise.shape:
        raise GridMismatchError(f"q_sample: shape de x0 {tuple(x0.shape)} != ruido {tuple(noise.shape)}")
    ab = _ab(s, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def q_sample_grid(x0: ScalarGrid, t: int, noise: ScalarGrid, s: NoiseSchedule) -> ScalarGrid:
    ensure_compatible(x0, noise, "q_sample")
    out = q_sample(torch.from_numpy(x0.values.copy()), t, torch.from_numpy(noise.values.copy()), s)
    return ScalarGrid(out.numpy(), x0.spacing)


def drop_conditioning(
    c: Conditioning, p: float, rng: np.random.Generator, cfg: SdfConfig = SdfConfig()
) -> Conditioning:
    """
    Cada sinal cai com probabilidade p, independente. Sempre consome 3 uniformes
    do rng (ordem: corpo, contexto, v). Grade descartada vira -tau uniforme.
    """
    if not 0 <= p < 1:
        raise ValueError(f"drop_conditioning: p deve ficar em [0, 1), veio {p}")
    u = rng.random(3)
    drop_body, drop_ctx, drop_v = (bool(x < p) for x in u)
    if not (drop_body or drop_ctx or drop_v):
        return c
    null = empty_context(c.dims, c.body.spacing, cfg)
    return replace(
        c,
        body=null if drop_body else c.body,
        body_present=c.body_present and not drop_body,
        context=null if drop_ctx else c.context,
        context_present=c.context_present and not drop_ctx,
        v=0.0 if drop_v else c.v,
        v_present=c.v_present and not drop_v,
    )


def ddim_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    t_prev: int,
    s: NoiseSchedule,
    clamp: float | None = None,
) -> torch.Tensor:
    if t_prev >= t:
        raise ValueError(f"ddim_step: exige t > t_prev, veio t={t} t_prev={t_prev}")
    s.check_step(t)
    s.check_step(t_prev)
    if clamp is not None:
        x0_hat = torch.clamp(x0_hat, -clamp, clamp)
    ab_t = float(s.alpha_bar[t])
    ab_prev = float(s.alpha_bar[t_prev])
    eps = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps


def timestep_ladder(T: int, steps: int) -> list[int]:
    """Subconjunto decrescente de {T..1}, sempre com T; pode ter menos que steps se steps > T."""
    if steps < 1:
        raise ValueError(f"steps deve ser >= 1, veio {steps}")
    raw = np.rint(np.linspace(T, 1, steps)).astype(np.int64)
    return sorted({int(x) for x in raw}, reverse=True)


def initial_noise(dims: Sequence[int], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(dims), generator=gen, dtype=torch.float64)


def ddim_sample_batch(
    denoiser: Denoiser,
    conds: Sequence[Conditioning],
    steps: int,
    s: NoiseSchedule,
    seeds: Sequence[int],
    cfg: SdfConfig = SdfConfig(),
    dtype: torch.dtype = torch.float32,
) -> list[ScalarGrid]:
    """Amostra um lote; o ruido inicial de cada item depende so da sua seed."""
    if len(conds) != len(seeds):
        raise ValueError(f"ddim_sample_batch: {len(conds)} condicionamentos para {len(seeds)} seeds")
    if not conds:
        return []
    dims = conds[0].dims
    for i, c in enumerate(conds):
        if c.dims != dims:
            raise GridMismatchError(f"ddim_sample_batch: item {i} tem dims {c.dims}, esperado {dims}")

    batch = CondBatch.stack(conds, dtype=dtype)
    x = torch.stack([initial_noise(dims, sd) for sd in seeds]).unsqueeze(1)
    ladder = timestep_ladder(s.T, steps)
    with torch.no_grad():
        for i, t in enumerate(ladder):
            t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
            t_vec = torch.full((len(conds),), t, dtype=torch.long)
            x0_hat = denoiser(x.to(dtype), batch, t_vec)
            if tuple(x0_hat.shape) != tuple(x.shape):
                raise GridMismatchError(
                    f"denoiser devolveu shape {tuple(x0_hat.shape)}, esperado {tuple(x.shape)}"
                )
            x = ddim_step(x, x0_hat.to(torch.float64), t, t_prev, s, clamp=cfg.truncation)

    spacing = conds[0].body.spacing
    return [ScalarGrid(x[b, 0].numpy(), spacing) for b in range(len(conds))]


def ddim_sample(
    denoiser: Denoiser,
    c: Conditioning,
    steps: int,
    s: NoiseSchedule,
    seed: int,
    cfg: SdfConfig = SdfConfig(),
    dtype: torch.dtype = torch.float32,
) -> ScalarGrid:
    return ddim_sample_batch(denoiser, [c], steps, s, [seed], cfg, dtype)[0]
