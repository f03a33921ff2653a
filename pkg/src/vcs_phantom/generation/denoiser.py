# src/vcs_phantom/generation/denoiser.py
"""
Denoiser 3D pequeno, condicionado por FiLM, parametrizacao x0.

Entrada: canais [x_t, SDF do corpo, SDF de contexto] / tau.
Escada: conv de entrada (resolucao cheia), convs stride 2 na descida,
upsample nearest + conv + skip na subida, conv de saida para 1 canal.
Cada estagio: conv -> FiLM (h = gamma * h + beta por canal) -> SiLU.

    gamma = 1 + head_t(emb_t) + [v_present] head_v(emb_v)
    beta  =     head_t(emb_t) + [v_present] head_v(emb_v)

Cabecas FiLM nascem zeradas; v ausente contribui exatamente zero.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from vcs_phantom.core.config import ModelCfg
from vcs_phantom.core.errors import GridMismatchError, NonFiniteError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.generation.diffusion import CondBatch, Conditioning
from vcs_phantom.shapes.voxel import ScalarGrid

log = logging.getLogger("vcs_phantom.denoiser")

_KERNEL = 3
_IN_CHANNELS = 3
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    return _DTYPES[name]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class FiLM(nn.Module):
    def __init__(self, channels: int, t_dim: int, v_dim: int) -> None:
        super().__init__()
        self.channels = channels
        self.head_t = nn.Linear(t_dim, 2 * channels)
        self.head_v = nn.Linear(v_dim, 2 * channels)
        for lin in (self.head_t, self.head_v):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(
        self, h: torch.Tensor, t_emb: torch.Tensor, v_emb: torch.Tensor, v_present: torch.Tensor
    ) -> torch.Tensor:
        mod_t = self.head_t(t_emb)
        mod_v = torch.where(v_present[:, None], self.head_v(v_emb), torch.zeros_like(mod_t))
        mod = mod_t + mod_v
        gamma = 1.0 + mod[:, : self.channels]
        beta = mod[:, self.channels :]
        return gamma[:, :, None, None, None] * h + beta[:, :, None, None, None]


def _conv(c_in: int, c_out: int, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(c_in, c_out, _KERNEL, stride=stride, padding=_KERNEL // 2)


class Denoiser(nn.Module):
    def __init__(self, cfg: ModelCfg) -> None:
        super().__init__()
        self.cfg = cfg
        self.tau = cfg.sdf.truncation
        w = list(cfg.widths)
        t_dim, v_dim = cfg.t_embed_dim, cfg.v_embed_dim

        self.v_mlp = nn.Sequential(nn.Linear(1, v_dim), nn.SiLU(), nn.Linear(v_dim, v_dim))
        self.conv_in = _conv(_IN_CHANNELS, w[0])
        self.film_in = FiLM(w[0], t_dim, v_dim)
        self.down = nn.ModuleList(_conv(w[i - 1], w[i], stride=2) for i in range(1, len(w)))
        self.film_down = nn.ModuleList(FiLM(w[i], t_dim, v_dim) for i in range(1, len(w)))
        self.up = nn.ModuleList(_conv(w[i], w[i - 1]) for i in range(len(w) - 1, 0, -1))
        self.film_up = nn.ModuleList(FiLM(w[i - 1], t_dim, v_dim) for i in range(len(w) - 1, 0, -1))
        self.conv_out = nn.Conv3d(w[0], 1, _KERNEL, padding=_KERNEL // 2)

    @property
    def depth(self) -> int:
        return len(self.cfg.widths)

    @property
    def dtype(self) -> torch.dtype:
        return self.conv_out.weight.dtype

    def _check(self, h: torch.Tensor, stage: str) -> torch.Tensor:
        if not torch.isfinite(h).all():
            raise NonFiniteError(f"denoiser: valor nao finito no estagio {stage}")
        return h

    def forward(self, x_t: torch.Tensor, cond: CondBatch, t: torch.Tensor) -> torch.Tensor:
        factor = 2 ** (self.depth - 1)
        dims = tuple(x_t.shape[2:])
        if any(d % factor for d in dims):
            raise GridMismatchError(f"denoiser: dims {dims} precisam ser divisiveis por {factor}")
        if tuple(cond.body.shape) != tuple(x_t.shape) or tuple(cond.context.shape) != tuple(x_t.shape):
            raise GridMismatchError(
                f"denoiser: x_t {tuple(x_t.shape)}, corpo {tuple(cond.body.shape)}, "
                f"contexto {tuple(cond.context.shape)}"
            )

        dt = self.dtype
        t_emb = timestep_embedding(t, self.cfg.t_embed_dim).to(dt)
        v_emb = self.v_mlp(cond.v.to(dt)[:, None])
        present = cond.v_present.to(x_t.device)

        x = torch.cat([x_t.to(dt), cond.body.to(dt), cond.context.to(dt)], dim=1) / self.tau
        h = F.silu(self.film_in(self.conv_in(x), t_emb, v_emb, present))
        h = self._check(h, "in")
        skips = [h]
        for i, (conv, film) in enumerate(zip(self.down, self.film_down), start=1):
            h = F.silu(film(conv(h), t_emb, v_emb, present))
            skips.append(self._check(h, f"down{i}"))
        skips.pop()
        for i, (conv, film) in enumerate(zip(self.up, self.film_up)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(film(conv(h) + skips.pop(), t_emb, v_emb, present))
            h = self._check(h, f"up{self.depth - 1 - i}")
        return self._check(self.conv_out(h), "out")

    def flat_parameters(self) -> torch.Tensor:
        return parameters_to_vector(self.parameters()).detach().clone()

    def load_flat(self, vec: torch.Tensor | np.ndarray) -> None:
        flat = torch.as_tensor(vec).to(self.dtype)
        n = parameter_count(self.cfg)
        if flat.numel() != n:
            raise GridMismatchError(f"vetor de parametros com {flat.numel()} entradas, modelo exige {n}")
        with torch.no_grad():
            vector_to_parameters(flat, self.parameters())

    def zero_v_pathway(self) -> None:
        with torch.no_grad():
            for film in [self.film_in, *self.film_down, *self.film_up]:
                film.head_v.weight.zero_()
                film.head_v.bias.zero_()


def _conv_count(c_in: int, c_out: int) -> int:
    return c_in * c_out * _KERNEL**3 + c_out


def _linear_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def parameter_count(cfg: ModelCfg) -> int:
    w = list(cfg.widths)
    n = _conv_count(_IN_CHANNELS, w[0]) + _conv_count(w[0], 1)
    n += _linear_count(1, cfg.v_embed_dim) + _linear_count(cfg.v_embed_dim, cfg.v_embed_dim)
    for i in range(1, len(w)):
        n += _conv_count(w[i - 1], w[i]) + _conv_count(w[i], w[i - 1])
    # estagios FiLM: entrada + descida (w) e subida (w sem o ultimo)
    film_channels = sum(w) + sum(w[:-1])
    n += film_channels * (_linear_count(cfg.t_embed_dim, 2) + _linear_count(cfg.v_embed_dim, 2))
    return n


@contextmanager
def _seeded(seed: int) -> Iterator[None]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_denoiser(cfg: ModelCfg, seed: int = 0) -> Denoiser:
    """Init deterministica por seed, sem tocar o RNG global."""
    with _seeded(seed):
        model = Denoiser(cfg)
    model = model.to(torch_dtype(cfg.dtype))
    log.info(kv(event="denoiser_built", widths=list(cfg.widths), params=parameter_count(cfg), dtype=cfg.dtype))
    return model


def predict(model: Denoiser, x_t: ScalarGrid, c: Conditioning, t: int) -> ScalarGrid:
    """Forward de um unico caso: ScalarGrid de entrada, SDF limpo predito de saida."""
    if x_t.dims != c.dims or x_t.spacing != c.body.spacing:
        raise GridMismatchError(f"predict: x_t dims {x_t.dims} vs condicionamento {c.dims}")
    dt = model.dtype
    x = torch.from_numpy(x_t.values.copy()).to(dt)[None, None]
    with torch.no_grad():
        out = model(x, CondBatch.stack([c], dtype=dt), torch.tensor([t], dtype=torch.long))
    return ScalarGrid(out[0, 0].to(torch.float64).numpy(), x_t.spacing)
