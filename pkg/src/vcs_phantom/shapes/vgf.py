from __future__ import annotations

from pathlib import Path

import numpy as np

from vcs_phantom.core.errors import VgfFormatError
from vcs_phantom.shapes.voxel import BinaryMask, ScalarGrid

MAGIC = b"VGF1"
DTYPE_F32 = 0
DTYPE_U8 = 1

# magic, dtype tag, dims (x, y, z), spacing em mm; tudo little-endian
HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("dtype", "<u4"),
        ("dims", "<u4", (3,)),
        ("spacing", "<f8"),
    ]
)


def encode(grid: ScalarGrid | BinaryMask) -> bytes:
    header = np.zeros((), dtype=HEADER)
    header["magic"] = MAGIC
    header["dims"] = grid.dims
    header["spacing"] = grid.spacing
    if isinstance(grid, BinaryMask):
        header["dtype"] = DTYPE_U8
        payload = grid.flat().astype("u1")
    else:
        header["dtype"] = DTYPE_F32
        payload = grid.flat().astype("<f4")
    return header.tobytes() + payload.tobytes()


def decode(data: bytes, source: str = "<bytes>") -> ScalarGrid | BinaryMask:
    if len(data) < HEADER.itemsize:
        raise VgfFormatError(f"{source}: arquivo curto demais para cabecalho VGF ({len(data)} bytes)")
    header = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise VgfFormatError(f"{source}: magic invalido {bytes(header['magic'])!r}")

    dims = tuple(int(d) for d in header["dims"])
    if min(dims) == 0:
        raise VgfFormatError(f"{source}: dims com zero {dims}")
    spacing = float(header["spacing"])
    if not spacing > 0:
        raise VgfFormatError(f"{source}: spacing invalido {spacing}")

    tag = int(header["dtype"])
    if tag == DTYPE_F32:
        item = np.dtype("<f4")
    elif tag == DTYPE_U8:
        item = np.dtype("u1")
    else:
        raise VgfFormatError(f"{source}: dtype tag desconhecido {tag}")

    n = dims[0] * dims[1] * dims[2]
    payload = data[HEADER.itemsize :]
    if len(payload) != n * item.itemsize:
        raise VgfFormatError(
            f"{source}: payload com {len(payload)} bytes, dims {dims} exigem {n * item.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=item)
    if tag == DTYPE_U8:
        return BinaryMask.from_flat(flat != 0, dims, spacing)
    return ScalarGrid.from_flat(flat.astype(np.float64), dims, spacing)


def write_vgf(path: Path, grid: ScalarGrid | BinaryMask) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(grid))
    tmp.replace(path)


def read_vgf(path: Path) -> ScalarGrid | BinaryMask:
    if not path.exists():
        raise VgfFormatError(f"arquivo VGF ausente: {path.name} ({path})")
    return decode(path.read_bytes(), source=path.name)


def read_mask(path: Path) -> BinaryMask:
    grid = read_vgf(path)
    if not isinstance(grid, BinaryMask):
        raise VgfFormatError(f"{path.name}: esperado mascara (u8), veio grade escalar")
    return grid


def read_scalar(path: Path) -> ScalarGrid:
    grid = read_vgf(path)
    if not isinstance(grid, ScalarGrid):
        raise VgfFormatError(f"{path.name}: esperado grade escalar (f32), veio mascara")
    return grid
