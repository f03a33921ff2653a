from __future__ import annotations

import json
import logging
import math

import numpy as np
import pytest
import torch

from vcs_phantom.core.errors import ConfigError, DataError
from vcs_phantom.generation.diffusion import CondBatch, make_schedule
from vcs_phantom.generation.sequence import (
    GenerationPlan,
    OrganModel,
    generate_anatomies,
    generate_anatomy,
    match_cohort,
    match_grid,
    organ_seed,
    vcs_sweep,
    write_match_csv,
    write_sweep_csv,
)
from vcs_phantom.shapes.cohort import generate_cohort, organ_volumes, shift_cohort_volumes
from vcs_phantom.shapes.metrics import dice
from vcs_phantom.shapes.vcs import VcsModel
from vcs_phantom.shapes.voxel import BinaryMask, ScalarGrid, sdf_from_mask, volume_ml

DIMS = (16, 16, 16)
SPACING = 10.0
CENTER = np.array([7.5, 7.5, 7.5])
_COORDS = np.stack(np.meshgrid(*(np.arange(d, dtype=np.float64) for d in DIMS), indexing="ij"), axis=-1)


def _dist(center) -> np.ndarray:
    return np.sqrt(((_COORDS - np.asarray(center)) ** 2).sum(axis=-1))


def _body(radius: float = 7.0) -> BinaryMask:
    return BinaryMask(_dist(CENTER) <= radius, SPACING)


def _bodies(n: int) -> list[BinaryMask]:
    radii = (5.0, 7.0, 5.5, 6.5, 6.0)
    return [_body(radii[i % len(radii)]) for i in range(n)]


class SphereDenoiser:
    """Devolve o SDF de uma esfera cujo raio cresce com v e, opcionalmente, com o tamanho do corpo."""

    def __init__(self, center, radius: float, v_gain: float = 0.5, body_gain: float = 0.0) -> None:
        self.dist = torch.from_numpy(_dist(center))
        self.radius = radius
        self.v_gain = v_gain
        self.body_gain = body_gain

    def __call__(self, x_t: torch.Tensor, cond: CondBatch, t: torch.Tensor) -> torch.Tensor:
        r = self.radius + self.v_gain * cond.v.to(torch.float64)
        r = r + self.body_gain * cond.body.to(torch.float64).amax(dim=(1, 2, 3, 4))
        out = r[:, None, None, None] - self.dist[None]
        return out[:, None].to(x_t.dtype)


def _vcs(organ: str) -> VcsModel:
    return VcsModel(organ=organ, a=0.0, b=100.0, mu=0.0, sigma=20.0, n_fit=3)


def _model(organ: str, denoiser) -> OrganModel:
    return OrganModel(denoiser=denoiser, vcs=_vcs(organ), schedule=make_schedule(100), dtype=torch.float64)


def _plan(**denoisers) -> GenerationPlan:
    return GenerationPlan(order=tuple(denoisers), models={k: _model(k, d) for k, d in denoisers.items()}, steps=3)


def test_plan_validation():
    a = _model("liver", SphereDenoiser(CENTER, 3.0))
    with pytest.raises(ConfigError, match="duplicatas"):
        GenerationPlan(order=("liver", "liver"), models={"liver": a})
    with pytest.raises(ConfigError, match="spleen"):
        GenerationPlan(order=("liver", "spleen"), models={"liver": a})
    with pytest.raises(ConfigError, match="fora do plano"):
        GenerationPlan(order=("liver",), models={"liver": a}, vcs_requests={"kidney": 1.0})
    plan = GenerationPlan(order=("liver",), models={"liver": a}, vcs_requests={"liver": 2.0})
    assert plan.request("liver") == 2.0
    assert plan.with_request("liver", -1.0).request("liver") == -1.0


def test_zero_organ_plan_returns_body_only():
    anat = generate_anatomy(_body(), GenerationPlan(order=(), models={}), seed=0)
    assert anat.organs == {}
    assert anat.body == _body()


def test_oracle_pass_through():
    ref_a = BinaryMask(_dist([5.5, 7.5, 7.5]) <= 2.5, SPACING)
    ref_b = BinaryMask(_dist([10.5, 7.5, 7.5]) <= 2.0, SPACING)
    assert not (ref_a.bits & ref_b.bits).any()
    plan = _plan(
        liver=SphereDenoiser([5.5, 7.5, 7.5], 2.5, v_gain=0.0),
        spleen=SphereDenoiser([10.5, 7.5, 7.5], 2.0, v_gain=0.0),
    )
    anat = generate_anatomy(_body(), plan, seed=1)
    assert anat.organs["liver"].mask == ref_a
    assert anat.organs["spleen"].mask == ref_b
    for organ in anat.organs.values():
        assert organ.cleared_fraction == 0.0
        assert organ.overlap_dice == 0.0
        assert organ.sdf == sdf_from_mask(organ.mask, plan.sdf)


def test_overlap_is_cleared_and_reported():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0), spleen=SphereDenoiser([10.5, 7.5, 7.5], 3.0))
    anat = generate_anatomy(_body(), plan, seed=0)
    liver, spleen = anat.organs["liver"], anat.organs["spleen"]
    assert not (liver.mask.bits & spleen.mask.bits).any()
    assert not (spleen.mask.bits & ~anat.body.bits).any()
    assert 0.0 < spleen.cleared_fraction < 0.5
    assert spleen.overlap_dice > 0.0
    assert not anat.degenerate
    case = anat.to_case("case_0000")
    case.check_invariants()


def test_outside_body_is_cleared():
    plan = _plan(liver=SphereDenoiser([1.0, 7.5, 7.5], 3.0, v_gain=0.0))
    anat = generate_anatomy(_body(), plan, seed=0)
    liver = anat.organs["liver"]
    assert liver.cleared_fraction > 0.0
    assert not (liver.mask.bits & ~anat.body.bits).any()


def test_fully_swallowed_organ_is_degenerate(caplog):
    plan = _plan(liver=SphereDenoiser(CENTER, 3.5), spleen=SphereDenoiser(CENTER, 2.0, v_gain=0.0))
    with caplog.at_level(logging.WARNING, logger="vcs_phantom.sequence"):
        anat = generate_anatomy(_body(), plan, seed=0)
    spleen = anat.organs["spleen"]
    assert spleen.cleared_fraction == 1.0
    assert spleen.mask.count == 0 and spleen.volume_ml == 0.0
    assert spleen.degenerate and anat.degenerate
    assert "degenerate_organ" in caplog.text
    assert anat.report()["organs"]["spleen"]["degenerate"] is True


def test_realized_volume_and_vcs():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0)).with_request("liver", 1.0)
    liver = generate_anatomy(_body(), plan, seed=0).organs["liver"]
    assert liver.v_requested == 1.0
    assert liver.volume_ml == volume_ml(liver.mask)
    assert liver.v_realized == pytest.approx((liver.volume_ml - 100.0) / 20.0)


def test_generation_is_deterministic_and_batch_invariant():
    plan = _plan(liver=SphereDenoiser(CENTER, 1.0, body_gain=0.4), spleen=SphereDenoiser([11.0, 7.5, 7.5], 2.0))
    bodies = _bodies(10)
    a = generate_anatomies(bodies, plan, seed=5)
    b = generate_anatomies(bodies, plan, seed=5)
    single = generate_anatomy(bodies[9], plan, seed=5, case_index=9)
    for x, y in zip(a, b):
        assert all(x.organs[k].mask == y.organs[k].mask for k in plan.order)
    assert all(a[9].organs[k].mask == single.organs[k].mask for k in plan.order)
    assert len({a[i].organs["liver"].mask.count for i in range(10)}) > 1


def test_organ_seed_is_keyed():
    assert organ_seed(0, 1, 2) == organ_seed(0, 1, 2)
    assert len({organ_seed(0, c, s) for c in range(3) for s in range(3)}) == 9
    assert 0 <= organ_seed(123, 4, 5) < 2**63


def test_empty_body_rejected():
    with pytest.raises(DataError, match="corpo vazio"):
        generate_anatomy(BinaryMask.empty(DIMS, SPACING), _plan(liver=SphereDenoiser(CENTER, 3.0)), seed=0)


def test_sweep_scales_with_v():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0), spleen=SphereDenoiser([12.5, 7.5, 7.5], 1.5, v_gain=0.0))
    result = vcs_sweep([_body()] * 3, plan, "liver", [-2, -1, 0, 1, 2], seed=0)
    means = [p.mean_ml for p in result.points]
    assert means == sorted(means) and len(set(means)) == 5
    assert result.spearman == pytest.approx(1.0)
    zero = next(p for p in result.points if p.v == 0.0)
    assert zero.delta_pct == 0.0
    assert result.points[-1].delta_pct > 0 > result.points[0].delta_pct
    spleen0 = result.points[0].others_mean_ml["spleen"]
    assert all(p.others_mean_ml["spleen"] == spleen0 for p in result.points)
    assert all(p.others_delta_pct["spleen"] == 0.0 for p in result.points)


def test_sweep_adds_zero_baseline_when_missing():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0))
    result = vcs_sweep([_body()] * 2, plan, "liver", [1.0, 2.0], seed=0)
    assert [p.v for p in result.points] == [1.0, 2.0]
    assert all(p.delta_pct > 0 for p in result.points)


def test_sweep_constant_denoiser_is_flat():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0, v_gain=0.0))
    result = vcs_sweep([_body()] * 3, plan, "liver", [-1, 0, 1], seed=0)
    assert len({p.mean_ml for p in result.points}) == 1
    assert all(p.delta_pct == 0.0 for p in result.points)
    assert math.isnan(result.spearman)


class EmptyDenoiser:
    """Sempre -tau: nenhum voxel dentro."""

    def __call__(self, x_t: torch.Tensor, cond: CondBatch, t: torch.Tensor) -> torch.Tensor:
        return torch.full_like(x_t, -10.0)


def test_sweep_empty_output_has_zero_delta():
    result = vcs_sweep([_body()] * 3, _plan(liver=EmptyDenoiser()), "liver", [-1, 0, 1], seed=0)
    assert all(p.mean_ml == 0.0 for p in result.points)
    assert all(p.delta_pct == 0.0 for p in result.points)
    zero = next(p for p in result.points if p.v == 0.0)
    assert zero.delta_ci_low == zero.delta_ci_high == 0.0


def test_sweep_zero_baseline_with_growth_is_undefined(caplog):
    # r = -0.5 + v: vazio em v=0, esfera de raio 1.5 em v=2
    plan = _plan(liver=SphereDenoiser(CENTER, -0.5, v_gain=1.0))
    with caplog.at_level(logging.WARNING, logger="vcs_phantom.sequence"):
        result = vcs_sweep([_body()] * 2, plan, "liver", [0.0, 2.0], seed=0)
    zero, two = result.points
    assert zero.mean_ml == 0.0 and zero.delta_pct == 0.0
    assert two.mean_ml > 0 and math.isnan(two.delta_pct)
    assert "delta_pct_undefined" in caplog.text


def test_sweep_rejects_bad_values():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0))
    with pytest.raises(ConfigError, match="ordenados"):
        vcs_sweep([_body()], plan, "liver", [1.0, 0.0], seed=0)
    with pytest.raises(ConfigError):
        vcs_sweep([_body()], plan, "liver", [], seed=0)
    with pytest.raises(ConfigError, match="fora do plano"):
        vcs_sweep([_body()], plan, "spleen", [0.0], seed=0)


def test_sweep_ci_brackets_mean():
    plan = _plan(liver=SphereDenoiser(CENTER, 1.0, body_gain=0.4))
    result = vcs_sweep(_bodies(6), plan, "liver", [0.0, 1.0], seed=2)
    for p in result.points:
        assert p.ci_low <= p.mean_ml <= p.ci_high
        assert p.n == 6


def test_match_grid():
    assert match_grid(-1.0, 1.0, 0.5) == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert match_grid(-3.0, 6.0, 0.25)[-1] == 6.0
    with pytest.raises(ConfigError):
        match_grid(0.0, 1.0, 0.0)


def test_match_self_target_picks_zero():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0))
    bodies = [_body()] * 3
    base = [a.organs["liver"].volume_ml for a in generate_anatomies(bodies, plan, seed=0)]
    result = match_cohort(base, bodies, plan, "liver", base, v_min=-2, v_max=2, step=0.5, seed=0)
    assert result.v_star == 0.0
    assert result.w1_after <= result.w1_before


def test_match_recovers_shift(tmp_path):
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0))
    bodies = [_body()] * 3
    reference = [a.organs["liver"].volume_ml for a in generate_anatomies(bodies, plan, seed=0)]
    target = [a.organs["liver"].volume_ml for a in generate_anatomies(bodies, plan.with_request("liver", 2.0), seed=0)]
    result = match_cohort(target, bodies, plan, "liver", reference, v_min=-1, v_max=3, step=0.5, seed=0)
    assert result.v_star == 2.0
    assert result.w1_after == 0.0
    assert result.reduction_pct == 100.0
    assert not result.flat_warning
    assert json.loads(json.dumps(result.to_json()))["v_star"] == 2.0

    write_match_csv(result, tmp_path / "match.csv")
    lines = (tmp_path / "match.csv").read_text().splitlines()
    assert lines[0] == "v,mean_ml,ci_low,ci_high,w1"
    assert len(lines) == 1 + len(match_grid(-1, 3, 0.5))


def test_match_flat_curve_warns(caplog):
    plan = _plan(liver=SphereDenoiser(CENTER, 1.0, v_gain=0.0, body_gain=0.4))
    bodies = _bodies(6)
    with caplog.at_level(logging.WARNING, logger="vcs_phantom.sequence"):
        result = match_cohort([500.0, 600.0], bodies, plan, "liver", [100.0], v_min=-1, v_max=1, step=0.5)
    assert result.flat_warning
    assert result.v_star == 0.0
    assert "match_flat_curve" in caplog.text


def test_match_identical_outputs_are_flat(caplog):
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0, v_gain=0.0))
    with caplog.at_level(logging.WARNING, logger="vcs_phantom.sequence"):
        result = match_cohort([500.0, 600.0], [_body()] * 3, plan, "liver", [100.0], v_min=-1, v_max=1, step=0.5)
    assert result.noise_floor == 0.0
    assert len({w for _, w in result.w1_curve}) == 1
    assert result.flat_warning
    assert result.v_star == 0.0
    assert "match_flat_curve" in caplog.text


def test_match_empty_target():
    with pytest.raises(DataError):
        match_cohort([], [_body()], _plan(liver=SphereDenoiser(CENTER, 3.0)), "liver", [1.0])


def test_write_sweep_csv(tmp_path):
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0), spleen=SphereDenoiser([12.5, 7.5, 7.5], 1.5, v_gain=0.0))
    result = vcs_sweep([_body()] * 2, plan, "liver", [0.0, 1.0], seed=0)
    write_sweep_csv(result, tmp_path / "sweep.csv")
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["v", "n", "mean_ml"]
    assert header[-2:] == ["spleen_mean_ml", "spleen_delta_pct"]


def test_anatomy_case_volumes_match_masks():
    plan = _plan(liver=SphereDenoiser(CENTER, 3.0), spleen=SphereDenoiser([12.5, 7.5, 7.5], 1.5))
    case = generate_anatomy(_body(), plan, seed=0).to_case("case_0003")
    assert case.case_id == "case_0003"
    for name, mask in case.organs.items():
        assert case.true_volumes[name] == volume_ml(mask)
    assert dice(case.organs["liver"], case.organs["liver"]) == 1.0


def test_sphere_sdf_helper_is_positive_inside():
    grid = ScalarGrid(3.0 - _dist(CENTER), SPACING)
    assert grid.values[7, 7, 7] > 0 and grid.values[0, 0, 0] < 0


@pytest.mark.slow
def test_desk_model_matches_shifted_cohort(desk_run):
    c = desk_run.cfg.cohort
    sigma = desk_run.plan.models["liver"].vcs.sigma
    shifted = shift_cohort_volumes(c.organs, 2.0 * sigma, "liver")
    target = generate_cohort(c.seed, c.n_cases, c.grid_dims, c.spacing_mm, shifted, c.body_spec(), c.placement_policy())
    m = desk_run.cfg.match
    result = match_cohort(
        organ_volumes(target, "liver"),
        [case.body for case in desk_run.split.train],
        desk_run.plan,
        "liver",
        organ_volumes(desk_run.split.train, "liver"),
        v_min=m.v_min,
        v_max=m.v_max,
        step=m.step,
        seed=0,
    )
    assert 1.5 <= result.v_star <= 2.5
    assert result.reduction_pct >= 70.0


@pytest.mark.slow
def test_desk_model_respects_context(desk_run):
    anatomies = generate_anatomies([c.body for c in desk_run.split.test], desk_run.plan, seed=0)
    for i, anat in enumerate(anatomies):
        anat.to_case(f"case_{i:04d}").check_invariants()
    assert np.mean([a.organs["spleen"].overlap_dice for a in anatomies]) <= 0.05
