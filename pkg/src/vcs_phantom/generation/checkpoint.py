# src/vcs_phantom/generation/checkpoint.py
"""
Checkpoint = pasta com manifest JSON + blob de parametros.

    checkpoint.json  config do modelo e do schedule, orgao, epoca, VcsModel, cauda do historico
    params.bin       "DNP1" | u64 contagem | f32 little-endian, na ordem de model.parameters()

O tamanho do blob precisa bater com parameter_count(config).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from vcs_phantom.core.config import ModelCfg, ScheduleCfg
from vcs_phantom.core.errors import DataError
from vcs_phantom.core.logging_utils import kv
from vcs_phantom.core.manifest import read_json, write_json_atomic
from vcs_phantom.generation.denoiser import Denoiser, build_denoiser, parameter_count
from vcs_phantom.generation.diffusion import NoiseSchedule, make_schedule
from vcs_phantom.shapes.vcs import VcsModel

log = logging.getLogger("vcs_phantom.checkpoint")

CHECKPOINT_FILE = "checkpoint.json"
PARAMS_FILE = "params.bin"
FORMAT = "vcs-phantom-checkpoint/1"

BLOB_MAGIC = b"DNP1"
BLOB_HEADER = np.dtype([("magic", "S4"), ("count", "<u8")])


def encode_params(flat: np.ndarray) -> bytes:
    header = np.zeros((), dtype=BLOB_HEADER)
    header["magic"] = BLOB_MAGIC
    header["count"] = flat.size
    return header.tobytes() + np.asarray(flat, dtype="<f4").tobytes()


def decode_params(data: bytes, expected: int, source: str = PARAMS_FILE) -> np.ndarray:
    if len(data) < BLOB_HEADER.itemsize:
        raise DataError(f"{source}: blob curto demais ({len(data)} bytes)")
    header = np.frombuffer(data, dtype=BLOB_HEADER, count=1)[0]
    if bytes(header["magic"]) != BLOB_MAGIC:
        raise DataError(f"{source}: magic invalido {bytes(header['magic'])!r}")
    count = int(header["count"])
    if count != expected:
        raise DataError(f"{source}: blob declara {count} parametros, config exige {expected}")
    payload = data[BLOB_HEADER.itemsize :]
    if len(payload) != 4 * count:
        raise DataError(f"{source}: payload com {len(payload)} bytes, esperado {4 * count}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


@dataclass(frozen=True)
class Checkpoint:
    organ: str
    epoch: int
    model_cfg: ModelCfg
    schedule_cfg: ScheduleCfg
    vcs: VcsModel
    params: np.ndarray
    history_tail: list[dict[str, Any]] = field(default_factory=list)

    def build_model(self) -> Denoiser:
        model = build_denoiser(self.model_cfg)
        model.load_flat(self.params)
        model.eval()
        return model

    def schedule(self) -> NoiseSchedule:
        s = self.schedule_cfg
        return make_schedule(s.steps, s.beta_start, s.beta_end)


def _model_cfg(raw: Any, source: str) -> ModelCfg:
    try:
        return ModelCfg(**{**raw, "widths": tuple(raw["widths"])})
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{source}: config de modelo invalida ({e})") from e


def _schedule_cfg(raw: Any, source: str) -> ScheduleCfg:
    try:
        return ScheduleCfg(**raw)
    except (TypeError, ValueError) as e:
        raise DataError(f"{source}: config de schedule invalida ({e})") from e


def save_checkpoint(
    out_dir: Path,
    model: Denoiser,
    organ: str,
    epoch: int,
    schedule_cfg: ScheduleCfg,
    vcs_model: VcsModel,
    history_tail: Sequence[dict[str, Any]] = (),
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    flat = model.flat_parameters().to("cpu").numpy()
    tmp = out_dir / (PARAMS_FILE + ".tmp")
    tmp.write_bytes(encode_params(flat))
    tmp.replace(out_dir / PARAMS_FILE)
    write_json_atomic(
        out_dir / CHECKPOINT_FILE,
        {
            "format": FORMAT,
            "organ": organ,
            "epoch": int(epoch),
            "model": asdict(model.cfg),
            "schedule": asdict(schedule_cfg),
            "vcs": vcs_model.to_json(),
            "param_count": int(flat.size),
            "history_tail": list(history_tail),
        },
    )
    log.info(kv(event="checkpoint_saved", path=str(out_dir), organ=organ, epoch=epoch, params=flat.size))
    return out_dir


def load_checkpoint(ckpt_dir: Path) -> Checkpoint:
    meta_path = ckpt_dir / CHECKPOINT_FILE
    raw = read_json(meta_path)
    source = str(meta_path)
    if not isinstance(raw, dict) or raw.get("format") != FORMAT:
        raise DataError(f"{source}: formato de checkpoint desconhecido")
    try:
        organ = str(raw["organ"])
        epoch = int(raw["epoch"])
        model_raw, schedule_raw, vcs_raw = raw["model"], raw["schedule"], raw["vcs"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{source}: campo ausente ou invalido ({e})") from e

    model_cfg = _model_cfg(model_raw, source)
    blob_path = ckpt_dir / PARAMS_FILE
    if not blob_path.exists():
        raise DataError(f"blob de parametros ausente: {blob_path}")
    params = decode_params(blob_path.read_bytes(), parameter_count(model_cfg), source=str(blob_path))
    return Checkpoint(
        organ=organ,
        epoch=epoch,
        model_cfg=model_cfg,
        schedule_cfg=_schedule_cfg(schedule_raw, source),
        vcs=VcsModel.from_json(vcs_raw, source=source),
        params=params,
        history_tail=list(raw.get("history_tail", [])),
    )
