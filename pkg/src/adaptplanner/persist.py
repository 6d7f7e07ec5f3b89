"""Bit-stable persistence: checkpoints, data pools, trajectory JSON, and
phase reports.

Binary container layout: magic(4) | version(u32 LE) | header_len(u64 LE) |
header JSON | payload | sha256(32). The digest covers every byte before it.
All float arrays live in the payload as little-endian float64, never in JSON,
so round trips are exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import DenoiserArch, DenoiserParams
from .diffusion import NoiseSchedule, Normalizer, build_schedule
from .errors import DigestMismatch, IoError, SchemaMismatch, VersionUnsupported
from .evolve import DataPool, PoolEntry, Provenance, TrajectoryStats
from .maze import EnvConfig, MazeSpec, TaskSpec, parse_maze
from .trajectory import Trajectory

CHECKPOINT_MAGIC = b"ADPC"
POOL_MAGIC = b"ADPP"
CHECKPOINT_VERSION = 1
POOL_VERSION = 1
TRAJECTORY_FORMAT = "adaptplanner-trajectory/1"


def _pack(arrays: dict) -> tuple[list, bytes]:
    """Concatenate named float64 arrays; returns (manifest, payload bytes)."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def _unpack(manifest: list, payload: bytes) -> dict:
    arrays = {}
    for item in manifest:
        start, nbytes = item["offset"], item["nbytes"]
        if start + nbytes > len(payload):
            raise SchemaMismatch(f"array {item['name']!r} overruns the payload")
        flat = np.frombuffer(payload[start : start + nbytes], dtype="<f8")
        arrays[item["name"]] = flat.reshape(item["shape"]).astype(np.float64)
    return arrays


def _write_container(path: Path, magic: bytes, version: int, header: dict, payload: bytes) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<IQ", version, len(header_bytes)) + header_bytes + payload
    digest = hashlib.sha256(body).digest()
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(body + digest)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_container(path: Path, magic: bytes, max_version: int) -> tuple[int, dict, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 + 12 + 32:
        raise SchemaMismatch(f"{path} is too short to be a container file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatch(f"content digest mismatch in {path}")
    if body[:4] != magic:
        raise SchemaMismatch(f"{path} has magic {body[:4]!r}, expected {magic!r}")
    version, header_len = struct.unpack("<IQ", body[4:16])
    if version > max_version:
        raise VersionUnsupported(f"{path} is format version {version}; this build reads <= {max_version}")
    header_end = 16 + header_len
    if header_end > len(body):
        raise SchemaMismatch(f"{path} header overruns the file")
    try:
        header = json.loads(body[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"{path} header is not valid JSON: {exc}") from exc
    return version, header, body[header_end:]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to plan: weights, schedule, normalizer, config echo."""

    params: DenoiserParams
    sched: NoiseSchedule
    normalizer: Normalizer
    horizon: int
    maze_name: str = ""
    config_echo: dict | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {f"weights/{k}": v for k, v in ckpt.params.weights.items()}
    arrays["normalizer/mins"] = ckpt.normalizer.mins
    arrays["normalizer/maxs"] = ckpt.normalizer.maxs
    manifest, payload = _pack(arrays)
    header = {
        "kind": "checkpoint",
        "arch": ckpt.params.arch.to_dict(),
        "phase_tag": ckpt.params.phase_tag,
        "schedule": {"n_steps": ckpt.sched.n_steps, "kind": ckpt.sched.kind},
        "horizon": ckpt.horizon,
        "maze": ckpt.maze_name,
        "config_echo": ckpt.config_echo or {},
        "arrays": manifest,
    }
    _write_container(Path(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload)


def load_checkpoint(path) -> Checkpoint:
    _, header, payload = _read_container(Path(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    arrays = _unpack(header["arrays"], payload)
    arch = DenoiserArch(**header["arch"])
    weights = {}
    for name, arr in arrays.items():
        if name.startswith("weights/"):
            weights[name[len("weights/") :]] = arr
    params = DenoiserParams(arch=arch, weights=weights, phase_tag=int(header["phase_tag"]))
    sched = build_schedule(header["schedule"]["n_steps"], header["schedule"]["kind"])
    try:
        normalizer = Normalizer(arrays["normalizer/mins"], arrays["normalizer/maxs"])
    except KeyError as exc:
        raise SchemaMismatch(f"checkpoint missing normalizer arrays: {exc}") from exc
    return Checkpoint(
        params=params,
        sched=sched,
        normalizer=normalizer,
        horizon=int(header["horizon"]),
        maze_name=header.get("maze", ""),
        config_echo=header.get("config_echo", {}),
    )


# ---------------------------------------------------------------------------
# pools


def save_pool(path, pool: DataPool) -> None:
    arrays = {}
    entries_meta = []
    for idx, entry in enumerate(pool.entries):
        arrays[f"traj/{idx}"] = entry.trajectory.values
        entries_meta.append(
            {
                "provenance": {
                    "kind": entry.provenance.kind,
                    "phase": entry.provenance.phase,
                    "task_id": entry.provenance.task_id,
                },
                "stats": entry.stats.to_dict(),
            }
        )
    has_norm = pool.normalizer is not None
    if has_norm:
        arrays["normalizer/mins"] = pool.normalizer.mins
        arrays["normalizer/maxs"] = pool.normalizer.maxs
    manifest, payload = _pack(arrays)
    header = {
        "kind": "pool",
        "maze": {"name": pool.maze.name, "text": pool.maze.to_text()},
        "env": {
            "dt": pool.env.dt,
            "v_max": pool.env.v_max,
            "a_max": pool.env.a_max,
            "agent_radius": pool.env.agent_radius,
            "max_episode_steps": pool.env.max_episode_steps,
            "goal_radius": pool.env.goal_radius,
        },
        "has_normalizer": has_norm,
        "entries": entries_meta,
        "arrays": manifest,
    }
    _write_container(Path(path), POOL_MAGIC, POOL_VERSION, header, payload)


def load_pool(path, expect_width: int = 6) -> DataPool:
    _, header, payload = _read_container(Path(path), POOL_MAGIC, POOL_VERSION)
    arrays = _unpack(header["arrays"], payload)
    maze = parse_maze(header["maze"]["text"], name=header["maze"]["name"])
    env = EnvConfig(**header["env"])
    normalizer = None
    if header.get("has_normalizer"):
        normalizer = Normalizer(arrays["normalizer/mins"], arrays["normalizer/maxs"])
    pool = DataPool(maze, env, normalizer)
    for idx, meta in enumerate(header["entries"]):
        values = arrays.get(f"traj/{idx}")
        if values is None:
            raise SchemaMismatch(f"pool entry {idx} has no stored trajectory")
        if values.ndim != 2 or values.shape[1] != expect_width:
            raise SchemaMismatch(
                f"pool entry {idx} has shape {values.shape}, expected (rows, {expect_width})"
            )
        pool.entries.append(
            PoolEntry(
                Trajectory(values),
                Provenance(**meta["provenance"]),
                TrajectoryStats(**meta["stats"]),
            )
        )
    return pool


# ---------------------------------------------------------------------------
# trajectory JSON (the plan/render interchange format)


def trajectory_to_json(
    traj: Trajectory,
    maze: MazeSpec,
    task: TaskSpec | None = None,
    seed: int | None = None,
    alpha: float | None = None,
) -> dict:
    doc = {
        "format": TRAJECTORY_FORMAT,
        "maze": {"name": maze.name, "text": maze.to_text()},
        "horizon": traj.horizon,
        "columns": ["x", "y", "vx", "vy", "ax", "ay"],
        "values": traj.values.tolist(),
        "seed": seed,
        "alpha": alpha,
    }
    if task is not None:
        doc["task"] = {
            "start": task.start.tolist(),
            "goal": task.goal.tolist(),
            "coin": task.coin.tolist() if task.coin is not None else None,
            "coin_radius": task.coin_radius,
        }
    return doc


def save_trajectory_json(path, doc: dict) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_trajectory_json(path) -> tuple[Trajectory, MazeSpec, TaskSpec | None, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path} is not valid JSON: {exc}") from exc
    if doc.get("format") != TRAJECTORY_FORMAT:
        raise SchemaMismatch(f"{path} format {doc.get('format')!r} != {TRAJECTORY_FORMAT!r}")
    traj = Trajectory(np.array(doc["values"], dtype=np.float64))
    maze = parse_maze(doc["maze"]["text"], name=doc["maze"]["name"])
    task = None
    if "task" in doc:
        t = doc["task"]
        task = TaskSpec(
            start=np.array(t["start"]),
            goal=np.array(t["goal"]),
            coin=np.array(t["coin"]) if t.get("coin") is not None else None,
            coin_radius=t.get("coin_radius", 0.4),
        )
    return traj, maze, task, doc


def save_report_json(path, report: dict) -> None:
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
