# src/vcs_phantom/shapes/vcs.py
"""
Volume Control Scalar: residuo padronizado do volume do orgao depois de
regredir o volume do corpo.

    r = V_ref - (a * V_body + b)
    v = (r - mu) / sigma

(a, b) por minimos quadrados; mu e sigma (amostral, n-1) dos residuos.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from vcs_phantom.core.errors import DataError, DegenerateFitError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.core.manifest import read_json, write_json_atomic

log = logging.getLogger("vcs_phantom.vcs")

MIN_SIGMA_ML = 1e-9


@dataclass(frozen=True)
class VcsModel:
    organ: str
    a: float
    b: float
    mu: float
    sigma: float
    n_fit: int

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise DegenerateFitError(f"{self.organ}: sigma deve ser > 0, veio {self.sigma}")
        if self.n_fit < 3:
            raise DegenerateFitError(f"{self.organ}: n_fit deve ser >= 3, veio {self.n_fit}")

    def expected(self, v_body: float) -> float:
        return self.a * v_body + self.b

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Any, source: str = "vcs.json") -> VcsModel:
        try:
            return cls(
                organ=str(data["organ"]),
                a=float(data["a"]),
                b=float(data["b"]),
                mu=float(data["mu"]),
                sigma=float(data["sigma"]),
                n_fit=int(data["n_fit"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{source}: modelo VCS invalido ({e})") from e

    def save(self, path: Path) -> None:
        write_json_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: Path) -> VcsModel:
        return cls.from_json(read_json(path), source=str(path))


def fit(
    body_volumes: Sequence[float],
    organ_volumes: Sequence[float],
    organ: str = "organ",
    min_sigma: float = MIN_SIGMA_ML,
) -> VcsModel:
    x = np.asarray(body_volumes, dtype=np.float64)
    y = np.asarray(organ_volumes, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DegenerateFitError(f"{organ}: tamanhos diferentes ({x.size} corpos, {y.size} orgaos)")
    if x.size < 3:
        raise DegenerateFitError(f"{organ}: precisa de >= 3 casos, veio {x.size}")
    if np.ptp(x) == 0:
        raise DegenerateFitError(f"{organ}: volume do corpo sem variancia")

    reg = stats.linregress(x, y)
    a, b = float(reg.slope), float(reg.intercept)
    r = y - (a * x + b)
    mu = float(r.mean())
    sigma = float(r.std(ddof=1))
    if sigma < min_sigma:
        raise DegenerateFitError(f"{organ}: sigma dos residuos {sigma:.3g} mL < {min_sigma:g} (ajuste degenerado)")

    model = VcsModel(organ=organ, a=a, b=b, mu=mu, sigma=sigma, n_fit=int(x.size))
    log.info(kv(event="vcs_fit", organ=organ, a=a, b=b, mu=mu, sigma=sigma, n=x.size, r=float(reg.rvalue)))
    return model


def vcs_of(v_ref: float, v_body: float, m: VcsModel) -> float:
    return ((v_ref - m.expected(v_body)) - m.mu) / m.sigma


def target_volume_of(v: float, v_body: float, m: VcsModel) -> float:
    vol = m.expected(v_body) + m.mu + v * m.sigma
    if vol < 0:
        log.warning(kv(event="vcs_target_clamped", organ=m.organ, v=v, v_body=v_body, requested_ml=vol))
        return 0.0
    return vol


def vcs_values(body_volumes: Sequence[float], organ_volumes: Sequence[float], m: VcsModel) -> np.ndarray:
    x = np.asarray(body_volumes, dtype=np.float64)
    y = np.asarray(organ_volumes, dtype=np.float64)
    return ((y - (m.a * x + m.b)) - m.mu) / m.sigma
