"""Flat-file formats for datasets, checkpoints, and metrics CSVs.

Dataset directory::

    header.txt            config echo plus ``split_sizes = n_train n_val n_test``
    train_00000.bin ...   one record per scene

Scene record, all little-endian float64: ``n_agents, grid, n_objects, seed``
followed by ``n_agents * grid * grid`` observation values (row-major) and
``n_objects * 4`` box corners ``x_min, y_min, x_max, y_max``.

Checkpoint: ASCII tag ``CCPCKPT1``, a little-endian uint32 byte count and
that many UTF-8 bytes of ``key = value`` estimator parameters, a uint32 block
count, then per block: uint32 name length, name bytes, uint32 ndim, ndim
uint64 extents, and the float64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np

from . import config as cfgmod
from .metrics import MetricsRow
from .scenegen import DatasetSplit, Split

CHECKPOINT_TAG = b"CCPCKPT1"
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets

def save_dataset(ds: DatasetSplit, out_dir, cfg: cfgmod.ExperimentConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full = cfg if cfg is not None else cfgmod.ExperimentConfig(dataset=ds.config)
    header = cfgmod.dumps(full) + "split_sizes = {} {} {}\n".format(*ds.sizes)
    (out / "header.txt").write_text(header)
    for split in (ds.train, ds.val, ds.test):
        for i in range(len(split)):
            _write_scene(out / f"{split.name}_{i:05d}.bin", split.observations[i], split.boxes[i], split.seeds[i])
    return out


def _write_scene(path: Path, obs: np.ndarray, boxes: np.ndarray, seed: int) -> None:
    n, g, _ = obs.shape
    head = np.array([n, g, len(boxes), seed], dtype=_F64)
    path.write_bytes(head.tobytes() + obs.astype(_F64).tobytes() + np.asarray(boxes, _F64).tobytes())


def _read_scene(path: Path):
    raw = np.frombuffer(path.read_bytes(), dtype=_F64)
    if raw.size < 4:
        raise FormatError(f"{path}: truncated header")
    n, g, h, seed = (int(v) for v in raw[:4])
    need = 4 + n * g * g + 4 * h
    if raw.size != need:
        raise FormatError(f"{path}: expected {need} values, found {raw.size}")
    obs = raw[4:4 + n * g * g].reshape(n, g, g).copy()
    boxes = raw[4 + n * g * g:].reshape(h, 4).copy()
    return obs, boxes, seed


def load_dataset(in_dir):
    """Returns ``(DatasetSplit, ExperimentConfig)``."""
    src = Path(in_dir)
    lines = (src / "header.txt").read_text().splitlines()
    sizes_line = [ln for ln in lines if ln.startswith("split_sizes")]
    if not sizes_line:
        raise FormatError("header.txt lacks split_sizes")
    sizes = [int(v) for v in sizes_line[0].split("=", 1)[1].split()]
    cfg = cfgmod.loads("\n".join(ln for ln in lines if not ln.startswith("split_sizes")))
    splits = []
    for name, n in zip(("train", "val", "test"), sizes):
        recs = [_read_scene(src / f"{name}_{i:05d}.bin") for i in range(n)]
        obs, boxes, seeds = zip(*recs)
        splits.append(Split(name, np.stack(obs), list(boxes), np.array(seeds, dtype=np.int64)))
    return DatasetSplit(*splits, config=cfg.dataset), cfg


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: Dict[str, np.ndarray], meta: Dict[str, object]) -> None:
    meta_bytes = "".join(f"{k} = {v}\n" for k, v in sorted(meta.items())).encode()
    chunks = [CHECKPOINT_TAG, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=_F64)
        key = name.encode()
        chunks.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Returns ``(params, meta)``; meta values are strings."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_TAG:
        raise FormatError(f"{path}: not a checkpoint (bad version tag)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n_meta,) = take("<I")
    meta_text = buf[pos:pos + n_meta].decode()
    pos += n_meta
    meta = dict(line.split(" = ", 1) for line in meta_text.splitlines() if line)
    (n_blocks,) = take("<I")
    params = {}
    for _ in range(n_blocks):
        (n_name,) = take("<I")
        name = buf[pos:pos + n_name].decode()
        pos += n_name
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype=_F64, count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, meta


# ---------------------------------------------------------------------------
# metrics CSV

def write_metrics(path, rows: Iterable[MetricsRow], append: bool = False) -> None:
    path = Path(path)
    if append and path.exists():
        first = path.read_text().splitlines()[:1]
        if first != [MetricsRow.CSV_HEADER]:
            raise FormatError(f"{path}: header mismatch, refusing to append")
        with path.open("a") as fh:
            fh.writelines(r.to_csv() + "\n" for r in rows)
        return
    path.write_text(MetricsRow.CSV_HEADER + "\n" + "".join(r.to_csv() + "\n" for r in rows))


def read_metrics(path) -> List[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MetricsRow.CSV_HEADER:
        raise FormatError(f"{path}: missing metrics header")
    return [MetricsRow.from_csv(ln) for ln in lines[1:] if ln.strip()]
