# src/vcs_phantom/core/logging_utils.py
from __future__ import annotations

import json
import logging
import os
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, Optional

import numpy as np
import torch
from rich.console import Console
from rich.logging import RichHandler

TEXT_FORMAT = "%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"


def kv(**fields: Any) -> str:
    """
    Formata campos como registro key=value (valores com espaco vao entre aspas).

    Uso:
      log.info(kv(event="epoch_end", epoch=3, total=0.125))
    """
    parts: list[str] = []
    for k, v in fields.items():
        s = f"{v:.6g}" if isinstance(v, float) else str(v)
        if " " in s or not s:
            s = json.dumps(s, ensure_ascii=False)
        parts.append(f"{k}={s}")
    return " ".join(parts)


def new_run_id(command: Optional[str] = None) -> str:
    """<comando>_<AAAAMMDD_HHMMSS>_<hex>; o hex separa execucoes no mesmo segundo."""
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    rid = f"{stamp}_{secrets.token_hex(3)}"
    return f"{command}_{rid}" if command else rid


@dataclass
class EventLogger:
    """
    Eventos JSONL de uma execucao (inicio/fim de comando, epocas, casos gravados).
    Cada linha leva ts_utc, run_id, cmd, seq (ordem dentro da execucao) e os campos do evento.

    Uso:
      ev.event("epoch_end", organ="liver", epoch=3, total=0.125)
    """

    path: Path
    run_id: str
    command: str = ""
    seq: int = 0
    _fh: Optional[IO[str]] = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a", encoding="utf-8")

    def event(self, name: str, **fields: Any) -> None:
        if self._fh is None:
            logging.getLogger("vcs_phantom.events").debug(kv(event="event_after_close", name=name))
            return
        self.seq += 1
        payload = {
            "ts_utc": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
            "run_id": self.run_id,
            "cmd": self.command,
            "seq": self.seq,
            "event": name,
            **fields,
        }
        # numpy e Path caem em str
        self._fh.write(json.dumps(payload, ensure_ascii=False, default=str) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> EventLogger:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


class NullEventLogger:
    """Usado pela biblioteca quando ninguem configurou eventos (testes, uso em notebook)."""

    run_id = "none"

    def event(self, name: str, **fields: Any) -> None:
        return None

    def close(self) -> None:
        return None


def _reset_root(root: logging.Logger) -> None:
    # handlers de captura do pytest ficam
    for h in list(root.handlers):
        if type(h).__name__.startswith("LogCapture"):
            continue
        h.close()
        root.removeHandler(h)


def setup_logging(
    logs_dir: Path, level: int = logging.INFO, command: Optional[str] = None
) -> tuple[str, EventLogger]:
    """
    Log de texto (key=value) em logs/run_<run_id>.log, console via rich no stderr
    e eventos em logs/events_<run_id>.jsonl.

    Os logs nunca vao para as pastas de saida: as saidas precisam ser byte a byte
    identicas entre execucoes com a mesma seed.
    """
    logs_dir.mkdir(parents=True, exist_ok=True)
    run_id = new_run_id(command)
    text_log_path = logs_dir / f"run_{run_id}.log"
    events_path = logs_dir / f"events_{run_id}.jsonl"

    root = logging.getLogger()
    root.setLevel(level)
    _reset_root(root)

    fh = logging.FileHandler(text_log_path, encoding="utf-8")
    fh.setLevel(level)
    fh.setFormatter(logging.Formatter(TEXT_FORMAT))
    root.addHandler(fh)

    console = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    console.setLevel(max(level, logging.WARNING))
    root.addHandler(console)

    boot = {
        "text_log": str(text_log_path),
        "events_log": str(events_path),
        "cwd": os.getcwd(),
        "pid": os.getpid(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "torch_threads": torch.get_num_threads(),
    }
    logging.getLogger("vcs_phantom").info(kv(event="run_boot", run_id=run_id, **boot))
    ev = EventLogger(path=events_path, run_id=run_id, command=command or "")
    ev.event("run_boot", **boot)
    return run_id, ev
