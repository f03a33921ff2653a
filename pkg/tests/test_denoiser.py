from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import uniform_grid
from vcs_phantom.core.config import ModelCfg
from vcs_phantom.core.errors import GridMismatchError, NonFiniteError
from vcs_phantom.generation.denoiser import build_denoiser, parameter_count, predict, timestep_embedding
from vcs_phantom.generation.diffusion import CondBatch, Conditioning
from vcs_phantom.shapes.voxel import ScalarGrid

DIMS = (8, 8, 8)


def _inputs(rng: np.random.Generator, v_present: bool = True, v: float = 1.3):
    body = rng.uniform(-10, 10, size=DIMS)
    ctx = rng.uniform(-10, 10, size=DIMS)
    c = Conditioning(body=ScalarGrid(body, 1.0), context=ScalarGrid(ctx, 1.0), v=v, v_present=v_present)
    x = torch.from_numpy(rng.normal(size=(1, 1, *DIMS)))
    return x, c


def _randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.2) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def test_parameter_count_desk_config():
    cfg = ModelCfg()
    model = build_denoiser(cfg)
    assert parameter_count(cfg) == 47185
    assert sum(p.numel() for p in model.parameters()) == 47185


@pytest.mark.parametrize("widths", [(2, 4), (4, 4, 8), (32, 64, 64, 128, 256)])
def test_parameter_count_matches_modules(widths):
    cfg = ModelCfg(widths=widths, t_embed_dim=6, v_embed_dim=5)
    assert parameter_count(cfg) == sum(p.numel() for p in build_denoiser(cfg).parameters())


def test_zero_params_output_bias(tiny_model_cfg, rng):
    model = build_denoiser(tiny_model_cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.conv_out.bias.fill_(0.3)
    x, c = _inputs(rng)
    out = model(x, CondBatch.stack([c]), torch.tensor([500]))
    assert tuple(out.shape) == (1, 1, *DIMS)
    assert torch.all(out == 0.3)


def test_film_heads_start_at_identity(tiny_model_cfg):
    model = build_denoiser(tiny_model_cfg)
    for film in [model.film_in, *model.film_down, *model.film_up]:
        for lin in (film.head_t, film.head_v):
            assert torch.count_nonzero(lin.weight) == 0 and torch.count_nonzero(lin.bias) == 0


def test_absent_v_equals_zeroed_v_pathway(tiny_model_cfg, rng):
    model = build_denoiser(tiny_model_cfg)
    _randomize(model)
    x, c = _inputs(rng, v_present=False)
    t = torch.tensor([321])
    with torch.no_grad():
        dropped = model(x, CondBatch.stack([c]), t)
        model.zero_v_pathway()
        present = Conditioning(body=c.body, context=c.context, v=4.0)
        zeroed = model(x, CondBatch.stack([present]), t)
    assert torch.equal(dropped, zeroed)


def test_v_changes_output_when_present(tiny_model_cfg, rng):
    model = build_denoiser(tiny_model_cfg)
    _randomize(model)
    x, c = _inputs(rng)
    t = torch.tensor([10])
    other = Conditioning(body=c.body, context=c.context, v=-2.0)
    with torch.no_grad():
        a = model(x, CondBatch.stack([c]), t)
        b = model(x, CondBatch.stack([other]), t)
    assert not torch.equal(a, b)


def test_forward_is_deterministic_across_threads(tiny_model_cfg, rng):
    x, c = _inputs(rng)
    t = torch.tensor([77])
    outs = []
    for threads in (1, 2):
        torch.set_num_threads(threads)
        model = build_denoiser(tiny_model_cfg, seed=5)
        with torch.no_grad():
            outs.append(model(x, CondBatch.stack([c]), t))
    torch.set_num_threads(1)
    assert torch.equal(outs[0], outs[1])


def test_build_is_seeded_and_keeps_global_rng(tiny_model_cfg):
    torch.manual_seed(99)
    before = torch.rand(1)
    torch.manual_seed(99)
    a = build_denoiser(tiny_model_cfg, seed=1)
    after = torch.rand(1)
    b = build_denoiser(tiny_model_cfg, seed=1)
    c = build_denoiser(tiny_model_cfg, seed=2)
    assert torch.equal(before, after)
    assert torch.equal(a.flat_parameters(), b.flat_parameters())
    assert not torch.equal(a.flat_parameters(), c.flat_parameters())


def test_dims_must_be_divisible(rng):
    model = build_denoiser(ModelCfg(widths=(2, 4, 4), t_embed_dim=4, v_embed_dim=2, dtype="float64"))
    odd = (6, 8, 8)
    body = uniform_grid(odd, 1.0)
    c = Conditioning(body=body, context=body, v=0.0)
    with pytest.raises(GridMismatchError, match="divisiveis por 4"):
        model(torch.zeros((1, 1, *odd), dtype=torch.float64), CondBatch.stack([c]), torch.tensor([1]))


def test_non_finite_stage_is_named(tiny_model_cfg, rng):
    model = build_denoiser(tiny_model_cfg)
    with torch.no_grad():
        model.conv_in.bias.fill_(float("inf"))
    x, c = _inputs(rng)
    with pytest.raises(NonFiniteError, match="estagio in"):
        model(x, CondBatch.stack([c]), torch.tensor([1]))


def test_flat_round_trip(tiny_model_cfg):
    model = build_denoiser(tiny_model_cfg, seed=3)
    flat = model.flat_parameters()
    other = build_denoiser(tiny_model_cfg, seed=4)
    other.load_flat(flat)
    assert torch.equal(other.flat_parameters(), flat)
    with pytest.raises(GridMismatchError):
        other.load_flat(flat[:-1])


def test_predict_wraps_forward(tiny_model_cfg, rng):
    model = build_denoiser(tiny_model_cfg)
    _randomize(model)
    x, c = _inputs(rng)
    grid = ScalarGrid(x[0, 0].numpy(), 1.0)
    out = predict(model, grid, c, 42)
    with torch.no_grad():
        ref = model(x, CondBatch.stack([c], dtype=torch.float64), torch.tensor([42]))
    np.testing.assert_array_equal(out.values, ref[0, 0].numpy())


def test_timestep_embedding_shape_and_range():
    emb = timestep_embedding(torch.tensor([0, 1, 999]), 8)
    assert tuple(emb.shape) == (3, 8)
    assert torch.all(emb.abs() <= 1.0)
    np.testing.assert_array_equal(emb[0].numpy(), [0, 0, 0, 0, 1, 1, 1, 1])
