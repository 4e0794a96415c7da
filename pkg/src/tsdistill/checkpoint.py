"""Checkpoint container and the append-only metrics log.

A checkpoint is a UTF-8 text header followed by raw little-endian float32
arrays::

    TSDISTILL-CKPT 1
    meta <json>
    config <n_lines>
    <config text lines>
    array <name> <offset_bytes> <dim0,dim1,...>
    ...
    end
    <concatenated array bytes>
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .config import RunConfig
from .distill import TrainState, init_train_state
from .encoder import EncoderConfig

MAGIC = "TSDISTILL-CKPT"
VERSION = 1
PathLike = Union[str, Path]


class CheckpointError(ValueError):
    pass


def _state_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for prefix, enc in (("student", state.student), ("teacher", state.teacher)):
        for name, arr in enc.state_arrays().items():
            arrays[f"{prefix}.{name}"] = arr
    arrays["mask_embedding"] = state.mask_embedding.data
    for name, p in state.head.items():
        arrays[f"student.{name}"] = p.data
    for i, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        arrays[f"adam.m.{i}"] = m
        arrays[f"adam.v.{i}"] = v
    return arrays


def save_checkpoint(path: PathLike, state: TrainState, config: RunConfig, in_channels: int,
                    extra: Optional[dict] = None) -> str:
    """Write ``state`` to ``path``; returns the file's sha256 digest."""
    arrays = _state_arrays(state)
    meta = {
        "step": state.step,
        "total_steps": state.total_steps,
        "adam_step": state.adam.step,
        "in_channels": in_channels,
        "rng": state.rng.bit_generator.state,
        "extra": extra or {},
    }
    cfg_lines = config.to_text().splitlines()
    header = [f"{MAGIC} {VERSION}", "meta " + json.dumps(meta, sort_keys=True), f"config {len(cfg_lines)}"]
    header += cfg_lines
    blobs: List[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header.append(f"array {name} {offset} {','.join(str(d) for d in arr.shape)}")
        blobs.append(raw)
        offset += len(raw)
    header.append("end")
    payload = ("\n".join(header) + "\n").encode("utf-8") + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_checkpoint(path: PathLike) -> Tuple[dict, RunConfig, Dict[str, np.ndarray]]:
    """Parse a checkpoint into (meta, config, arrays)."""
    payload = Path(path).read_bytes()
    pos = 0

    def line() -> str:
        nonlocal pos
        end = payload.index(b"\n", pos)
        text = payload[pos:end].decode("utf-8")
        pos = end + 1
        return text

    try:
        magic, version = line().split()
        if magic != MAGIC or int(version) != VERSION:
            raise CheckpointError(f"{path}: not a version-{VERSION} checkpoint")
        kind, meta_json = line().split(" ", 1)
        meta = json.loads(meta_json)
        kind, n = line().split()
        config = RunConfig.from_text("\n".join(line() for _ in range(int(n))))
        entries = []
        while True:
            text = line()
            if text == "end":
                break
            _, name, off, dims = text.split(" ")
            shape = tuple(int(d) for d in dims.split(",") if d)
            entries.append((name, int(off), shape))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    arrays = {}
    for name, off, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        start = pos + off
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return meta, config, arrays


def load_train_state(path: PathLike) -> Tuple[TrainState, RunConfig, dict]:
    """Rebuild the exact TrainState stored at ``path``."""
    meta, config, arrays = read_checkpoint(path)
    enc_cfg = config.encoder_config(meta["in_channels"])
    state = init_train_state(enc_cfg, config.distill_config(), meta["total_steps"], seed=0)
    for prefix, enc in (("student", state.student), ("teacher", state.teacher)):
        enc.load_state_arrays({k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")})
    state.mask_embedding.data = arrays["mask_embedding"].copy()
    for name, p in state.head.items():
        p.data = arrays[f"student.{name}"].copy()
    state.adam.m = [arrays[f"adam.m.{i}"].copy() for i in range(len(state.adam.m))]
    state.adam.v = [arrays[f"adam.v.{i}"].copy() for i in range(len(state.adam.v))]
    state.adam.step = meta["adam_step"]
    state.step = meta["step"]
    state.rng.bit_generator.state = meta["rng"]
    return state, config, meta


def file_digest(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- metrics log --------------------------------------------------------------

METRIC_COLUMNS = ("step", "loss", "lr", "delta", "masked_frac", "collapse", "probe_score", "wall_ms")


def _data_lines(path: Path) -> List[str]:
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]


class MetricsLog:
    """Tab-separated, append-only log with a fixed header row.

    ``notes`` become ``# key=value`` lines above the header when the file is
    created (run flags such as whether inputs were normalized).
    """

    def __init__(self, path: PathLike, notes: Optional[Dict[str, object]] = None):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            pre = "".join(f"# {k}={v}\n" for k, v in (notes or {}).items())
            self.path.write_text(pre + "\t".join(METRIC_COLUMNS) + "\n")
        else:
            first = _data_lines(self.path)[0]
            if tuple(first.split("\t")) != METRIC_COLUMNS:
                raise ValueError(f"{path}: unexpected metrics header {first!r}")

    def append(self, record: dict) -> None:
        cells = []
        for col in METRIC_COLUMNS:
            value = record.get(col)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        with open(self.path, "a") as fh:
            fh.write("\t".join(cells) + "\n")


def read_metrics(path: PathLike) -> List[Dict[str, str]]:
    lines = _data_lines(Path(path))
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
