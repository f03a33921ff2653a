from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from vcs_phantom.core.errors import ConfigError
from vcs_phantom.shapes.cohort import BodySpec, OrganSpec, PlacementPolicy, default_organ_specs
from vcs_phantom.shapes.voxel import SdfConfig

EFFECTIVE_CONFIG_FILE = "config_effective.json"


@dataclass(frozen=True)
class CohortCfg:
    seed: int = 0
    n_cases: int = 64
    grid_dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: float = 10.0
    body_median_ml: float = 8000.0
    body_log_sigma: float = 0.12
    body_axis_ratios: tuple[float, float, float] = (1.1, 1.0, 0.9)
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    max_placement_attempts: int = 500
    shrink_after: int = 50
    max_shrink: float = 0.2
    max_consecutive_rejections: int = 10
    organs: tuple[OrganSpec, ...] = field(default_factory=default_organ_specs)

    def __post_init__(self) -> None:
        if self.n_cases < 1:
            raise ValueError("n_cases deve ser >= 1")
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 1:
            raise ValueError(f"grid_dims invalido: {self.grid_dims}")
        if self.spacing_mm <= 0:
            raise ValueError("spacing_mm deve ser > 0")
        if self.body_median_ml <= 0 or self.body_log_sigma < 0:
            raise ValueError("body_median_ml > 0 e body_log_sigma >= 0")
        if len(self.body_axis_ratios) != 3 or min(self.body_axis_ratios) <= 0:
            raise ValueError(f"body_axis_ratios invalido: {self.body_axis_ratios}")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction deve ficar em [0, 1)")
        if not 0 <= self.max_shrink < 1:
            raise ValueError("max_shrink deve ficar em [0, 1)")
        if self.shrink_after < 0 or self.max_placement_attempts <= self.shrink_after:
            raise ValueError("max_placement_attempts deve ser > shrink_after >= 0")
        if self.max_consecutive_rejections < 1:
            raise ValueError("max_consecutive_rejections deve ser >= 1")
        if not self.organs:
            raise ValueError("organs nao pode ser vazio")
        names = [o.name for o in self.organs]
        if len(set(names)) != len(names):
            raise ValueError(f"nomes de orgaos duplicados: {names}")

    @property
    def organ_order(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.organs)

    def body_spec(self) -> BodySpec:
        return BodySpec(
            median_ml=self.body_median_ml,
            log_sigma=self.body_log_sigma,
            axis_ratios=self.body_axis_ratios,
        )

    def placement_policy(self) -> PlacementPolicy:
        return PlacementPolicy(
            max_attempts=self.max_placement_attempts,
            shrink_after=self.shrink_after,
            max_shrink=self.max_shrink,
            max_consecutive_rejections=self.max_consecutive_rejections,
        )


@dataclass(frozen=True)
class VcsCfg:
    organ: str = "liver"
    min_sigma_ml: float = 1e-9


@dataclass(frozen=True)
class ScheduleCfg:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps deve ser >= 1")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("exige 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class ModelCfg:
    widths: tuple[int, ...] = (8, 16, 32)
    t_embed_dim: int = 32
    v_embed_dim: int = 32
    sdf_truncation: float = 10.0
    occupancy_sharpness: float = 10.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"widths invalido: {self.widths}")
        if self.t_embed_dim < 2 or self.t_embed_dim % 2:
            raise ValueError("t_embed_dim deve ser par e >= 2")
        if self.v_embed_dim < 1:
            raise ValueError("v_embed_dim deve ser >= 1")
        if self.dtype not in {"float32", "float64"}:
            raise ValueError(f"dtype nao suportado: {self.dtype}")
        # valida tau/k
        self.sdf

    @property
    def sdf(self) -> SdfConfig:
        return SdfConfig(truncation=self.sdf_truncation, sharpness=self.occupancy_sharpness)


@dataclass(frozen=True)
class LossWeightsCfg:
    sdf: float = 1.0
    bce: float = 1.0
    ov: float = 1.0
    vcs: float = 1.0

    def __post_init__(self) -> None:
        if min(self.sdf, self.bce, self.ov, self.vcs) < 0:
            raise ValueError("pesos de loss devem ser >= 0")


@dataclass(frozen=True)
class TrainCfg:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    drop_prob: float = 0.3
    warmup_epochs: Optional[int] = None
    seed: int = 0
    loss_weights: LossWeightsCfg = field(default_factory=LossWeightsCfg)
    val_every: int = 1
    history_tail: int = 20

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 e batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr e weight_decay devem ser >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("betas em [0, 1) e eps > 0")
        if not 0 <= self.drop_prob < 1:
            raise ValueError("drop_prob deve ficar em [0, 1)")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ValueError("warmup_epochs deve ser >= 0")
        if self.val_every < 1:
            raise ValueError("val_every deve ser >= 1")

    @property
    def effective_warmup(self) -> int:
        return self.epochs // 2 if self.warmup_epochs is None else self.warmup_epochs


@dataclass(frozen=True)
class SampleCfg:
    steps: int = 10
    seed: int = 0
    degenerate_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("sample.steps deve ser >= 1")


@dataclass(frozen=True)
class MetricsCfg:
    align: bool = True
    hd_percentile: float = 95.0
    kde_points: int = 256


@dataclass(frozen=True)
class MatchCfg:
    v_min: float = -3.0
    v_max: float = 6.0
    step: float = 0.25
    noise_floor_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError("match.step deve ser > 0")
        if self.v_max < self.v_min:
            raise ValueError("match.v_max < match.v_min")


@dataclass(frozen=True)
class RunConfig:
    cohort: CohortCfg = field(default_factory=CohortCfg)
    vcs: VcsCfg = field(default_factory=VcsCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    sample: SampleCfg = field(default_factory=SampleCfg)
    metrics: MetricsCfg = field(default_factory=MetricsCfg)
    match: MatchCfg = field(default_factory=MatchCfg)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce_scalar(value: Any, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("esperado bool")
            return value
        if isinstance(default, int) or default is None:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError("esperado inteiro")
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError("esperado numero")
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError("esperado texto")
            return value
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError("esperado lista")
            proto = default[0] if default else 0.0
            return tuple(_coerce_scalar(v, proto, where) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"valor invalido em {where}: {value!r} ({e})") from e
    raise ConfigError(f"tipo nao suportado em {where}")


def _section(cls: type, raw: Any, where: str, nested: dict[str, Callable[[Any, str], Any]] | None = None) -> Any:
    """
    Constroi um dataclass de secao a partir do dict cru.
    Chaves desconhecidas sao rejeitadas com o caminho pontuado (ex: train.learnig_rate).
    """
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: esperado objeto, veio {type(raw).__name__}")

    nested = nested or {}
    defaults = cls()
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"chave desconhecida: {where}.{unknown[0]}")

    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        path = f"{where}.{name}"
        if name in nested:
            kwargs[name] = nested[name](value, path)
        elif value is None and getattr(defaults, name) is None:
            kwargs[name] = None
        else:
            kwargs[name] = _coerce_scalar(value, getattr(defaults, name), path)

    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def _organs(raw: Any, where: str) -> tuple[OrganSpec, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{where}: esperado lista nao vazia de orgaos")
    out: list[OrganSpec] = []
    proto = OrganSpec(name="proto")
    allowed = {f.name for f in fields(OrganSpec)}
    for i, item in enumerate(raw):
        path = f"{where}[{i}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{path}: esperado objeto")
        unknown = sorted(set(item) - allowed)
        if unknown:
            raise ConfigError(f"chave desconhecida: {path}.{unknown[0]}")
        if "name" not in item:
            raise ConfigError(f"{path}.name ausente")
        kwargs = {k: _coerce_scalar(v, getattr(proto, k), f"{path}.{k}") for k, v in item.items()}
        try:
            out.append(OrganSpec(**kwargs))
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
    return tuple(out)


def _loss_weights(raw: Any, where: str) -> LossWeightsCfg:
    return _section(LossWeightsCfg, raw, where)


def _train(raw: Any, where: str) -> TrainCfg:
    return _section(TrainCfg, raw, where, nested={"loss_weights": _loss_weights})


def config_from_dict(raw: Any) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: esperado objeto na raiz")

    sections: dict[str, Callable[[Any, str], Any]] = {
        "cohort": lambda r, w: _section(CohortCfg, r, w, nested={"organs": _organs}),
        "vcs": lambda r, w: _section(VcsCfg, r, w),
        "schedule": lambda r, w: _section(ScheduleCfg, r, w),
        "model": lambda r, w: _section(ModelCfg, r, w),
        "train": _train,
        "sample": lambda r, w: _section(SampleCfg, r, w),
        "metrics": lambda r, w: _section(MetricsCfg, r, w),
        "match": lambda r, w: _section(MatchCfg, r, w),
    }
    unknown = sorted(set(raw) - set(sections))
    if unknown:
        raise ConfigError(f"secao desconhecida: {unknown[0]}")

    built = {name: build(raw.get(name), name) for name, build in sections.items()}
    cfg = RunConfig(**built)

    if cfg.vcs.organ not in cfg.cohort.organ_order:
        raise ConfigError(f"vcs.organ={cfg.vcs.organ!r} nao esta em cohort.organs {list(cfg.cohort.organ_order)}")
    return cfg


def load_config(config_path: Optional[Path] = None) -> RunConfig:
    """
    Le o RunConfig. `.json` vai pelo json, o resto pelo yaml.safe_load.
    Sem caminho: defaults do preset de bancada.
    """
    if config_path is None:
        return RunConfig()
    try:
        text = Path(config_path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"nao foi possivel ler config {config_path}: {e}") from e
    try:
        if Path(config_path).suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"config malformado {config_path}: {e}") from e
    return config_from_dict(raw)


def dump_effective(cfg: RunConfig, out_dir: Path, name: str = EFFECTIVE_CONFIG_FILE) -> Path:
    """Grava o config efetivo (defaults ja mesclados) ao lado das saidas."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def paper_preset() -> RunConfig:
    """Escala de producao (128^3, larguras [32,64,64,128,256]). Documentado, nao exercitado em teste."""
    base = RunConfig()
    return replace(
        base,
        cohort=replace(base.cohort, grid_dims=(128, 128, 128), spacing_mm=2.5, n_cases=556),
        model=replace(base.model, widths=(32, 64, 64, 128, 256)),
        train=replace(base.train, batch_size=1),
    )
