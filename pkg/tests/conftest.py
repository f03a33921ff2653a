from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from vcs_phantom.core.config import CohortCfg, ModelCfg, RunConfig
from vcs_phantom.generation.denoiser import build_denoiser
from vcs_phantom.generation.diffusion import make_schedule
from vcs_phantom.generation.sequence import GenerationPlan, OrganModel
from vcs_phantom.generation.training import train
from vcs_phantom.shapes.cohort import (
    CohortSplit,
    PhantomCase,
    body_volumes,
    generate_cohort,
    organ_volumes,
    split_cohort,
)
from vcs_phantom.shapes.vcs import fit
from vcs_phantom.shapes.voxel import BinaryMask, ScalarGrid


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread() -> None:
    torch.set_num_threads(1)


def cube_mask(dims: tuple[int, int, int], lo: tuple[int, int, int], size: int, spacing: float = 1.0) -> BinaryMask:
    bits = np.zeros(dims, dtype=bool)
    bits[lo[0] : lo[0] + size, lo[1] : lo[1] + size, lo[2] : lo[2] + size] = True
    return BinaryMask(bits, spacing)


def random_mask(
    rng: np.random.Generator, dims: tuple[int, int, int], p: float = 0.3, spacing: float = 1.0
) -> BinaryMask:
    return BinaryMask(rng.random(dims) < p, spacing)


def uniform_grid(dims: tuple[int, int, int], value: float, spacing: float = 1.0) -> ScalarGrid:
    return ScalarGrid.full(dims, spacing, value)


@pytest.fixture(scope="session")
def small_cohort_cfg() -> CohortCfg:
    # 16^3 com spacing 20 mm: 1 voxel = 8 mL, mesma anatomia do preset em 32^3
    return CohortCfg(n_cases=6, grid_dims=(16, 16, 16), spacing_mm=20.0)


@pytest.fixture(scope="session")
def small_cohort(small_cohort_cfg: CohortCfg) -> list[PhantomCase]:
    c = small_cohort_cfg
    return generate_cohort(
        c.seed, c.n_cases, c.grid_dims, c.spacing_mm, c.organs, c.body_spec(), c.placement_policy()
    )


@pytest.fixture
def tiny_model_cfg() -> ModelCfg:
    return ModelCfg(widths=(2, 4), t_embed_dim=4, v_embed_dim=3, dtype="float64")


@pytest.fixture
def logs_dir(tmp_path: Path) -> Path:
    return tmp_path / "logs"


@dataclass(frozen=True)
class DeskRun:
    cfg: RunConfig
    cases: list[PhantomCase]
    split: CohortSplit
    plan: GenerationPlan


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    """Figado e baco treinados no preset de bancada (64 casos, 32^3). So nos testes slow."""
    cfg = RunConfig()
    c = cfg.cohort
    cases = generate_cohort(c.seed, c.n_cases, c.grid_dims, c.spacing_mm, c.organs, c.body_spec(), c.placement_policy())
    split = split_cohort(cases, c.val_fraction, c.test_fraction)
    s = cfg.schedule
    models: dict[str, OrganModel] = {}
    for organ in c.organ_order:
        vcs = fit(body_volumes(split.train), organ_volumes(split.train, organ), organ=organ)
        net = build_denoiser(cfg.model, seed=cfg.train.seed)
        train(net, split.train, organ, vcs, s, cfg.train, cfg.model.sdf, val_cases=split.val)
        models[organ] = OrganModel(
            denoiser=net, vcs=vcs, schedule=make_schedule(s.steps, s.beta_start, s.beta_end), dtype=net.dtype
        )
    plan = GenerationPlan(order=c.organ_order, models=models, steps=cfg.sample.steps, sdf=cfg.model.sdf)
    return DeskRun(cfg=cfg, cases=cases, split=split, plan=plan)
