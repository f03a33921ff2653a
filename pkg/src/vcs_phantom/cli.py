# src/vcs_phantom/cli.py
from __future__ import annotations

import logging
import os
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterator, List, Optional

import numpy as np
import torch
import typer
from rich.console import Console
from rich.table import Table

from vcs_phantom.core.config import EFFECTIVE_CONFIG_FILE, RunConfig, dump_effective, load_config
from vcs_phantom.core.errors import ConfigError, DataError, exit_code_for
from vcs_phantom.core.logging_utils import EventLogger, kv, setup_logging
from vcs_phantom.core.manifest import read_json, write_json_atomic
from vcs_phantom.core.output_layout import BODY_FILE, MANIFEST_FILE, case_dir_for, case_id_for
from vcs_phantom.generation.checkpoint import load_checkpoint, save_checkpoint
from vcs_phantom.generation.denoiser import build_denoiser
from vcs_phantom.generation.sequence import (
    GenerationPlan,
    OrganModel,
    generate_anatomies,
    match_cohort,
    match_grid,
    vcs_sweep,
    write_match_csv,
    write_sweep_csv,
)
from vcs_phantom.generation.training import train as train_organ
from vcs_phantom.generation.training import write_history
from vcs_phantom.shapes import metrics
from vcs_phantom.shapes.cohort import (
    PhantomCase,
    body_volumes,
    cohort_summary,
    generate_cohort,
    load_cohort,
    organ_volumes,
    save_case,
    save_cohort,
    shift_cohort_volumes,
    split_cohort,
)
from vcs_phantom.shapes.vcs import VcsModel, fit
from vcs_phantom.shapes.vgf import read_mask
from vcs_phantom.shapes.voxel import BinaryMask

app = typer.Typer(add_completion=False, help="Geracao sequencial de orgaos 3D com controle de volume (VCS).")
log = logging.getLogger("vcs_phantom.cli")
console = Console(stderr=True)

ANATOMY_FILE = "anatomy.json"


@contextmanager
def _command(name: str, logs_dir: Path, **fields: Any) -> Iterator[EventLogger]:
    """
    Envelope comum: logging, eventos de inicio/fim e mapeamento de erro -> exit code
    (2 config, 3 dados, 4 numerico, 5 interno).
    """
    _, ev = setup_logging(logs_dir, level=logging.INFO, command=name)
    ev.event(f"cmd_{name}_start", **{k: str(v) for k, v in fields.items()})
    try:
        yield ev
        ev.event(f"cmd_{name}_end", ok=True)
    except typer.Exit:
        raise
    except Exception as e:
        code = exit_code_for(e)
        ev.event(f"cmd_{name}_end", ok=False, error=str(e), exit_code=code)
        if code == 5:
            log.exception(kv(event="cmd_failed", cmd=name, exit_code=code))
        else:
            log.error(kv(event="cmd_failed", cmd=name, exit_code=code, error=str(e)))
        console.print(f"[red]erro ({type(e).__name__}):[/red] {e}")
        raise typer.Exit(code=code) from e
    finally:
        ev.close()


def _threads(threads: Optional[int]) -> int:
    n = threads if threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError(f"--threads deve ser >= 1, veio {n}")
    torch.set_num_threads(n)
    return n


def _with(section: Any, **changes: Any) -> Any:
    try:
        return replace(section, **changes)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _guard_out(out: Path, *inputs: Optional[Path]) -> None:
    """
    Nenhum comando altera suas entradas: --out nao pode ser uma entrada, nem
    cair sobre o config efetivo ou sobre uma pasta case_XXXX dela.
    """
    ro = out.resolve()
    for p in inputs:
        if p is None:
            continue
        rp = p.resolve()
        if ro == rp:
            raise ConfigError(f"--out {out} coincide com a entrada {p}")
        if rp in ro.parents:
            rel = ro.relative_to(rp)
            if rel.parts[0].startswith("case_") or rel == Path(EFFECTIVE_CONFIG_FILE):
                raise ConfigError(f"--out {out} sobrescreveria arquivos da entrada {p}")


def _parse_assignments(items: List[str], flag: str) -> dict[str, float]:
    out: dict[str, float] = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"{flag} espera ORGAO=VALOR, veio {item!r}")
        try:
            out[name] = float(value)
        except ValueError as e:
            raise ConfigError(f"{flag} {item!r}: valor nao numerico") from e
    return out


def _parse_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    try:
        a, b = float(lo), float(hi)
    except ValueError as e:
        raise ConfigError(f"--range espera MIN:MAX, veio {text!r}") from e
    if not sep or b < a:
        raise ConfigError(f"--range espera MIN:MAX com MIN <= MAX, veio {text!r}")
    return a, b


def _load_plan(cfg: RunConfig, checkpoints: List[Path], steps: Optional[int]) -> GenerationPlan:
    if not checkpoints:
        raise ConfigError("pelo menos um --checkpoint eh obrigatorio")
    models: dict[str, OrganModel] = {}
    sdf = None
    for path in checkpoints:
        ckpt = load_checkpoint(path)
        if ckpt.organ in models:
            raise ConfigError(f"dois checkpoints para o orgao {ckpt.organ!r}")
        if sdf is not None and ckpt.model_cfg.sdf != sdf:
            raise ConfigError(f"{path}: tau/k diferentes entre checkpoints")
        sdf = ckpt.model_cfg.sdf
        models[ckpt.organ] = OrganModel.from_checkpoint(ckpt)
    # ordem fixa da coorte; orgaos fora dela vao no fim, na ordem dada
    known = [o for o in cfg.cohort.organ_order if o in models]
    order = tuple(known + [o for o in models if o not in known])
    assert sdf is not None
    return GenerationPlan(
        order=order,
        models=models,
        steps=steps if steps is not None else cfg.sample.steps,
        sdf=sdf,
        degenerate_fraction=cfg.sample.degenerate_fraction,
    )


def _load_bodies(path: Path) -> tuple[list[str], list[BinaryMask]]:
    """Aceita um .vgf de corpo, uma pasta de caso ou a raiz de uma coorte."""
    if path.is_file():
        return [case_id_for(0)], [read_mask(path)]
    if (path / MANIFEST_FILE).exists():
        return [path.name], [read_mask(path / BODY_FILE)]
    cases = load_cohort(path)
    return [c.case_id for c in cases], [c.body for c in cases]


def _load_volumes(path: Path, organ: str) -> np.ndarray:
    """Volumes alvo: pasta de coorte ou JSON (lista de mL)."""
    if path.is_dir():
        return organ_volumes(load_cohort(path), organ)
    raw = read_json(path)
    if not isinstance(raw, list) or not all(isinstance(x, (int, float)) for x in raw):
        raise DataError(f"{path}: esperado lista JSON de volumes em mL")
    return np.asarray(raw, dtype=np.float64)


def _print_summary(title: str, summary: dict[str, dict[str, float]]) -> None:
    table = Table(title=title)
    cols = sorted({k for row in summary.values() for k in row})
    table.add_column("")
    for c in cols:
        table.add_column(c, justify="right")
    for name, row in summary.items():
        table.add_row(name, *(f"{row[c]:.4g}" if c in row else "" for c in cols))
    Console().print(table)


ConfigOpt = typer.Option(
    None, "--config", exists=True, dir_okay=False, help="YAML/JSON de config. Sem ele: preset de bancada."
)
LogsOpt = typer.Option(Path("logs"), "--logs-dir", help="Pasta de logs (nunca dentro das saidas).")
ThreadsOpt = typer.Option(None, "--threads", help="Limite de threads (default: nucleos disponiveis).")
CheckpointOpt = typer.Option(..., "--checkpoint", exists=True, file_okay=False, help="Repetivel, um por orgao.")


@app.command("gen-cohort")
def gen_cohort(
    out: Path = typer.Option(..., "--out", help="Pasta de saida da coorte."),
    config: Optional[Path] = ConfigOpt,
    seed: Optional[int] = typer.Option(None, "--seed"),
    n: Optional[int] = typer.Option(None, "--n", help="Numero de casos."),
    shift: List[str] = typer.Option([], "--shift", help="ORGAO=ML, desloca o volume esperado (repetivel)."),
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Gera a coorte sintetica (corpo + orgaos disjuntos) no layout case_XXXX.
    """
    with _command("gen_cohort", logs_dir, out=out, seed=seed, n=n, shift=shift):
        n_threads = _threads(threads)
        cfg = load_config(config)
        cohort = cfg.cohort
        if seed is not None:
            cohort = _with(cohort, seed=seed)
        if n is not None:
            cohort = _with(cohort, n_cases=n)
        specs = cohort.organs
        for organ, ml in _parse_assignments(shift, "--shift").items():
            if organ not in cohort.organ_order:
                raise ConfigError(f"--shift: orgao {organ!r} fora de cohort.organs {list(cohort.organ_order)}")
            specs = shift_cohort_volumes(specs, ml, organ)
        cohort = _with(cohort, organs=specs)
        cfg = replace(cfg, cohort=cohort)

        cases = generate_cohort(
            cohort.seed,
            cohort.n_cases,
            cohort.grid_dims,
            cohort.spacing_mm,
            cohort.organs,
            cohort.body_spec(),
            cohort.placement_policy(),
            threads=n_threads,
        )
        save_cohort(cases, out)
        dump_effective(cfg, out)
        _print_summary(f"Coorte {out} ({len(cases)} casos)", cohort_summary(cases))


@app.command("fit-vcs")
def fit_vcs(
    cohort: Path = typer.Option(..., "--cohort", exists=True, file_okay=False),
    out: Path = typer.Option(..., "--out", help="JSON do VcsModel."),
    organ: Optional[str] = typer.Option(None, "--organ", help="Default: vcs.organ do config."),
    config: Optional[Path] = ConfigOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Ajusta o VCS (regressao volume do orgao ~ volume do corpo) em todos os casos da pasta.
    """
    with _command("fit_vcs", logs_dir, cohort=cohort, out=out, organ=organ):
        sidecar = out.with_name(f"{out.stem}.{EFFECTIVE_CONFIG_FILE}")
        _guard_out(out, cohort)
        _guard_out(sidecar, cohort)
        cfg = load_config(config)
        name = organ or cfg.vcs.organ
        cases = load_cohort(cohort)
        model = fit(body_volumes(cases), organ_volumes(cases, name), organ=name, min_sigma=cfg.vcs.min_sigma_ml)
        model.save(out)
        dump_effective(cfg, out.parent, sidecar.name)
        console.print(
            f"{name}: a={model.a:.6g} b={model.b:.6g} mu={model.mu:.3g} sigma={model.sigma:.6g} n={model.n_fit}"
        )


@app.command()
def train(
    cohort: Path = typer.Option(..., "--cohort", exists=True, file_okay=False),
    out: Path = typer.Option(..., "--out", help="Pasta de saida (checkpoint, historico, VCS)."),
    organ: Optional[str] = typer.Option(None, "--organ", help="Default: vcs.organ do config."),
    vcs: Optional[Path] = typer.Option(
        None, "--vcs", exists=True, dir_okay=False, help="VcsModel pronto; sem ele, ajusta no split de treino."
    ),
    config: Optional[Path] = ConfigOpt,
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
    progress: bool = typer.Option(True, "--progress/--no-progress"),
) -> None:
    """
    Treina o denoiser de um orgao no split de treino; valida no split de validacao.
    """
    with _command("train", logs_dir, cohort=cohort, out=out, organ=organ) as ev:
        _guard_out(out, cohort, vcs)
        _threads(threads)
        cfg = load_config(config)
        name = organ or cfg.vcs.organ
        cases = load_cohort(cohort)
        split = split_cohort(cases, cfg.cohort.val_fraction, cfg.cohort.test_fraction)
        vcs_model = (
            VcsModel.load(vcs)
            if vcs is not None
            else fit(
                body_volumes(split.train),
                organ_volumes(split.train, name),
                organ=name,
                min_sigma=cfg.vcs.min_sigma_ml,
            )
        )
        if vcs_model.organ != name:
            raise ConfigError(f"VcsModel eh de {vcs_model.organ!r}, treino pedido para {name!r}")

        model = build_denoiser(cfg.model, seed=cfg.train.seed)
        result = train_organ(
            model,
            split.train,
            name,
            vcs_model,
            cfg.schedule,
            cfg.train,
            cfg.model.sdf,
            val_cases=split.val,
            checkpoint_dir=out,
            events=ev,
            show_progress=progress,
        )
        save_checkpoint(
            out / "checkpoint",
            model,
            name,
            len(result.history) - 1,
            cfg.schedule,
            vcs_model,
            [r.as_row() for r in result.history[-cfg.train.history_tail :]],
        )
        write_history(result.history, out / "history.csv")
        vcs_model.save(out / "vcs.json")
        write_json_atomic(
            out / "split.json",
            {
                "train": [c.case_id for c in split.train],
                "val": [c.case_id for c in split.val],
                "test": [c.case_id for c in split.test],
            },
        )
        dump_effective(cfg, out)
        if result.history:
            last = result.history[-1]
            console.print(f"{name}: epocas={len(result.history)} total={last.total:.4g} val={last.val_total:.4g}")


@app.command()
def sample(
    checkpoint: List[Path] = CheckpointOpt,
    body: Path = typer.Option(..., "--body", exists=True, help="body.vgf, pasta de caso ou raiz de coorte."),
    out: Path = typer.Option(..., "--out"),
    vcs: List[str] = typer.Option([], "--vcs", help="V para todos os orgaos, ou ORGAO=V (repetivel)."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Passos DDIM (default: sample.steps)."),
    config: Optional[Path] = ConfigOpt,
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Gera anatomias sequencialmente para cada corpo; grava o layout de coorte + anatomy.json.
    """
    with _command("sample", logs_dir, checkpoint=checkpoint, body=body, out=out, vcs=vcs):
        _guard_out(out, body, *checkpoint)
        _threads(threads)
        cfg = load_config(config)
        plan = _load_plan(cfg, checkpoint, steps)
        requests: dict[str, float] = {}
        for item in vcs:
            if "=" in item:
                requests.update(_parse_assignments([item], "--vcs"))
            else:
                requests.update({o: _parse_assignments([f"{o}={item}"], "--vcs")[o] for o in plan.order})
        plan = replace(plan, vcs_requests=requests)

        case_ids, bodies = _load_bodies(body)
        anatomies = generate_anatomies(bodies, plan, cfg.sample.seed if seed is None else seed)
        for case_id, anat in zip(case_ids, anatomies):
            save_case(anat.to_case(case_id), out)
            write_json_atomic(case_dir_for(out, case_id) / ANATOMY_FILE, anat.report())
        dump_effective(cfg, out)
        n_deg = sum(a.degenerate for a in anatomies)
        if n_deg:
            console.print(
                f"[yellow]aviso:[/yellow] {n_deg} anatomia(s) degeneradas (limpeza > {plan.degenerate_fraction:.0%})"
            )
        console.print(f"{len(anatomies)} anatomia(s) em {out}")


def _masks(cases: List[PhantomCase], organ: str) -> list[BinaryMask]:
    return [c.organs[organ] for c in cases if organ in c.organs]


def _mask_ids(cases: List[PhantomCase], organ: str) -> list[str]:
    return [c.case_id for c in cases if organ in c.organs]


@app.command()
def evaluate(
    generated: Path = typer.Option(..., "--generated", exists=True, file_okay=False),
    reference: Path = typer.Option(..., "--reference", exists=True, file_okay=False),
    out: Path = typer.Option(..., "--out"),
    train_set: Optional[Path] = typer.Option(None, "--train-set", exists=True, file_okay=False),
    config: Optional[Path] = ConfigOpt,
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Fidelidade (Dice, ASSD, HD95, Chamfer), realismo contra o treino, diversidade e W1 de volumes.
    """
    with _command("evaluate", logs_dir, generated=generated, reference=reference, out=out, train_set=train_set):
        _guard_out(out, generated, reference, train_set)
        n_threads = _threads(threads)
        cfg = load_config(config)
        align, pct = cfg.metrics.align, cfg.metrics.hd_percentile
        gen_cases = load_cohort(generated)
        ref_cases = load_cohort(reference)

        rows = [r for rep in metrics.fidelity_report(gen_cases, ref_cases, align, pct) for r in rep.rows()]
        organs = list(ref_cases[0].organ_order)
        summary: dict[str, Any] = {"fidelity": metrics.summarize(rows), "volumes": {}, "diversity": {}, "realism": {}}

        train_cases = load_cohort(train_set) if train_set is not None else []
        for organ in organs:
            gen_vol = organ_volumes(gen_cases, organ)
            ref_vol = organ_volumes(ref_cases, organ)
            summary["volumes"][organ] = {
                "generated_mean_ml": float(gen_vol.mean()),
                "reference_mean_ml": float(ref_vol.mean()),
                "w1_ml": metrics.wasserstein1(gen_vol, ref_vol),
            }
            gen_masks = _masks(gen_cases, organ)
            if len(gen_masks) >= 2:
                div = metrics.pairwise_diversity(gen_masks, align, pct)
                summary["diversity"][organ] = {
                    "n_pairs": div.n_pairs,
                    "dice_mean": div.dice_mean,
                    "dice_std": div.dice_std,
                    "chamfer_mean": div.chamfer_mean,
                    "chamfer_std": div.chamfer_std,
                }
            if train_cases:
                rep = metrics.realism_report(
                    gen_masks, _masks(ref_cases, organ), _masks(train_cases, organ), align, pct, n_threads
                )
                summary["realism"][organ] = rep.summary()
                rows += metrics.realism_rows("generated", organ, rep.generated, _mask_ids(gen_cases, organ))
                rows += metrics.realism_rows("reference", organ, rep.reference, _mask_ids(ref_cases, organ))
            try:
                grid = metrics.density_grid(gen_vol, ref_vol, points=cfg.metrics.kde_points)
                metrics.write_density_csv(
                    grid,
                    {
                        "generated": metrics.volume_density(gen_vol, grid),
                        "reference": metrics.volume_density(ref_vol, grid),
                    },
                    out / f"density_{organ}.csv",
                )
            except DataError as e:
                log.warning(kv(event="density_skipped", organ=organ, reason=str(e)))

        metrics.write_metric_csv(rows, out / "metrics.csv")
        write_json_atomic(out / "summary.json", summary)
        dump_effective(cfg, out)
        _print_summary(
            "Fidelidade (media)",
            {o: {m: v["mean"] for m, v in ms.items()} for o, ms in summary["fidelity"].items()},
        )


@app.command()
def sweep(
    checkpoint: List[Path] = CheckpointOpt,
    cohort: Path = typer.Option(
        ..., "--cohort", exists=True, file_okay=False, help="Coorte cujos corpos condicionam a geracao."
    ),
    out: Path = typer.Option(..., "--out"),
    organ: Optional[str] = typer.Option(None, "--organ", help="Orgao varrido (default: do primeiro checkpoint)."),
    v_range: str = typer.Option("-3:3", "--range", help="MIN:MAX de v."),
    step: float = typer.Option(1.0, "--step"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    config: Optional[Path] = ConfigOpt,
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Varredura de VCS com ruido fixo por caso: volume medio +- IC95, Delta%, erro de v_hat e Spearman.
    """
    with _command("sweep", logs_dir, checkpoint=checkpoint, cohort=cohort, out=out, range=v_range, step=step):
        _guard_out(out, cohort, *checkpoint)
        _threads(threads)
        cfg = load_config(config)
        plan = _load_plan(cfg, checkpoint, None)
        name = organ or load_checkpoint(checkpoint[0]).organ
        lo, hi = _parse_range(v_range)
        grid = match_grid(lo, hi, step)
        _, bodies = _load_bodies(cohort)
        result = vcs_sweep(bodies, plan, name, grid, cfg.sample.seed if seed is None else seed)
        write_sweep_csv(result, out / "sweep.csv")
        write_json_atomic(
            out / "sweep.json",
            {
                "organ": result.organ,
                "spearman": result.spearman,
                "points": [
                    {
                        "v": p.v,
                        "mean_ml": p.mean_ml,
                        "ci_low": p.ci_low,
                        "ci_high": p.ci_high,
                        "delta_pct": p.delta_pct,
                        "v_hat_abs_err": p.v_hat_abs_err,
                        "others_mean_ml": p.others_mean_ml,
                    }
                    for p in result.points
                ],
            },
        )
        dump_effective(cfg, out)
        console.print(f"{name}: {len(result.points)} pontos, Spearman(v, volume) = {result.spearman:.4f}")


@app.command()
def match(
    checkpoint: List[Path] = CheckpointOpt,
    cohort: Path = typer.Option(
        ..., "--cohort", exists=True, file_okay=False, help="Coorte de treino: corpos e volumes 'antes'."
    ),
    target: Path = typer.Option(
        ..., "--target", exists=True, help="Pasta de coorte alvo ou JSON com lista de volumes (mL)."
    ),
    out: Path = typer.Option(..., "--out"),
    organ: Optional[str] = typer.Option(None, "--organ", help="Default: do primeiro checkpoint."),
    seed: Optional[int] = typer.Option(None, "--seed"),
    config: Optional[Path] = ConfigOpt,
    threads: Optional[int] = ThreadsOpt,
    logs_dir: Path = LogsOpt,
) -> None:
    """
    Escolhe v* que minimiza W1 entre volumes gerados e o alvo (grade match.v_min..v_max).
    """
    with _command("match", logs_dir, checkpoint=checkpoint, cohort=cohort, target=target, out=out):
        _guard_out(out, cohort, target, *checkpoint)
        _threads(threads)
        cfg = load_config(config)
        plan = _load_plan(cfg, checkpoint, None)
        name = organ or load_checkpoint(checkpoint[0]).organ
        cases = load_cohort(cohort)
        target_vol = _load_volumes(target, name)
        reference_vol = organ_volumes(cases, name)

        result = match_cohort(
            target_vol,
            [c.body for c in cases],
            plan,
            name,
            reference_vol,
            v_min=cfg.match.v_min,
            v_max=cfg.match.v_max,
            step=cfg.match.step,
            seed=cfg.sample.seed if seed is None else seed,
            noise_floor_factor=cfg.match.noise_floor_factor,
        )
        write_json_atomic(out / "match.json", result.to_json())
        write_match_csv(result, out / "match.csv")
        try:
            grid = metrics.density_grid(
                reference_vol, target_vol, result.volumes_at_star, points=cfg.metrics.kde_points
            )
            metrics.write_density_csv(
                grid,
                {
                    "reference": metrics.volume_density(reference_vol, grid),
                    "target": metrics.volume_density(target_vol, grid),
                    "matched": metrics.volume_density(result.volumes_at_star, grid),
                },
                out / "density.csv",
            )
        except DataError as e:
            log.warning(kv(event="density_skipped", organ=name, reason=str(e)))
        dump_effective(cfg, out)
        if result.flat_warning:
            console.print("[yellow]aviso:[/yellow] curva W1 abaixo do piso de ruido; v* pouco confiavel")
        console.print(
            f"{name}: v*={result.v_star:g} W1 antes={result.w1_before:.4g} depois={result.w1_after:.4g} "
            f"({result.reduction_pct:.1f}%)"
        )


def main() -> None:
    app()


if __name__ == "__main__":
    main()
