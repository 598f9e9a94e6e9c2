"""Trajectory datasets: HDF5 split files, JSON metadata, splits and subsampling.

A dataset directory holds ``train.h5``, ``valid.h5``, ``test.h5`` and
``metadata.json``. Each split file maps zero-padded trajectory keys
(``"00000"``, ``"00001"``, ...) to a group with two datasets:

``position``
    float32, shape ``[T, N, dim]``
``particle_type``
    int32, shape ``[N]``; 0 fluid, 1 static wall, 2 moving wall
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import h5py
import jsonschema
import numpy as np

from .core import PARTICLE_TYPE_NAMES, CaseSpec, ContractError
from .kernel import H_OVER_DX

SPLIT_NAMES = ("train", "valid", "test")
METADATA_FILE = "metadata.json"
KEY_DIGITS = 5
POSITION_KEY = "position"
TYPE_KEY = "particle_type"
POSITION_DTYPE = np.float32
TYPE_DTYPE = np.int32
PROVENANCE_KEY = "sphbench"

_KEY_RE = re.compile(r"^\d{%d}$" % KEY_DIGITS)


class DatasetError(Exception):
    """Base class for dataset I/O problems."""


class MissingInputError(DatasetError, FileNotFoundError):
    pass


class MalformedFileError(DatasetError):
    pass


class MissingKeyError(DatasetError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ShapeMismatchError(DatasetError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Positions ``[T, N, dim]`` in single precision plus static types ``[N]``."""

    positions: np.ndarray
    types: np.ndarray
    frame_dt: Optional[float] = None
    case_id: Optional[str] = None

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 3:
            raise ShapeMismatchError(f"positions must be [T, N, dim], got shape {pos.shape}")
        if pos.shape[0] < 1:
            raise ShapeMismatchError("a trajectory needs at least one frame")
        if pos.dtype != POSITION_DTYPE:
            pos = pos.astype(POSITION_DTYPE)
        types = np.asarray(self.types)
        if types.shape != (pos.shape[1],):
            raise ShapeMismatchError(
                f"particle types have shape {types.shape}, expected ({pos.shape[1]},)"
            )
        if not np.issubdtype(types.dtype, np.integer):
            if not np.all(types == np.round(types)):
                raise ShapeMismatchError("particle types must be integral")
            types = types.astype(np.int64)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "types", types)

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def num_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def frames(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.positions[start:stop], self.types, self.frame_dt, self.case_id)

    def equal(self, other: "Trajectory") -> bool:
        """Bit-exact comparison of the stored arrays."""
        return (
            self.positions.shape == other.positions.shape
            and self.positions.tobytes() == other.positions.tobytes()
            and np.array_equal(self.types, other.types)
        )


def trajectory_key(index: int) -> str:
    if index < 0 or index >= 10**KEY_DIGITS:
        raise ContractError(f"trajectory index {index} out of range")
    return f"{index:0{KEY_DIGITS}d}"


# -- split files ---------------------------------------------------------------


def write_split(trajectories: Sequence[Trajectory], path) -> None:
    """Write trajectories to one HDF5 split file (replaced atomically)."""
    trajectories = list(trajectories)
    if trajectories:
        n, dim = trajectories[0].num_particles, trajectories[0].dim
        for i, tr in enumerate(trajectories):
            if (tr.num_particles, tr.dim) != (n, dim):
                raise ShapeMismatchError(
                    f"trajectory {trajectory_key(i)} has {tr.num_particles} particles in "
                    f"{tr.dim}D, expected {n} in {dim}D"
                )
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(suffix=".h5.tmp", dir=directory)
    os.close(fd)
    try:
        with h5py.File(tmp, "w") as f:
            for i, tr in enumerate(trajectories):
                g = f.create_group(trajectory_key(i))
                g.create_dataset(POSITION_KEY, data=tr.positions.astype(POSITION_DTYPE, copy=False))
                g.create_dataset(TYPE_KEY, data=tr.types.astype(TYPE_DTYPE))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_split(path, frame_dt: Optional[float] = None, case_id: Optional[str] = None):
    """Read every trajectory of a split file, in key order."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingInputError(f"split file not found: {path}")
    try:
        f = h5py.File(path, "r")
    except OSError as exc:
        raise MalformedFileError(f"{path} is not a readable HDF5 file: {exc}") from None
    out = []
    with f:
        keys = sorted(f.keys())
        bad = [k for k in keys if not _KEY_RE.match(k)]
        if bad:
            raise MalformedFileError(f"{path}: unexpected top-level keys {bad[:3]}")
        for i, key in enumerate(keys):
            if key != trajectory_key(i):
                raise MissingKeyError(f"{path}: trajectory key {trajectory_key(i)} missing")
            g = f[key]
            if not isinstance(g, h5py.Group):
                raise MalformedFileError(f"{path}: {key} is not a group")
            for name in (POSITION_KEY, TYPE_KEY):
                if name not in g:
                    raise MissingKeyError(f"{path}: {key}/{name} missing")
            pos, types = g[POSITION_KEY], g[TYPE_KEY]
            if pos.ndim != 3:
                raise ShapeMismatchError(
                    f"{path}: {key}/{POSITION_KEY} has shape {pos.shape}, expected rank 3"
                )
            if types.shape != (pos.shape[1],):
                raise ShapeMismatchError(
                    f"{path}: {key}/{TYPE_KEY} has shape {types.shape}, "
                    f"expected ({pos.shape[1]},)"
                )
            if pos.shape[0] < 1:
                raise ShapeMismatchError(f"{path}: {key}/{POSITION_KEY} has no frames")
            out.append(
                Trajectory(np.asarray(pos[()]), np.asarray(types[()]), frame_dt, case_id)
            )
    return out


# -- splits and subsampling ------------------------------------------------------


def split_sizes(total: int) -> tuple:
    """Sizes of a 2/1/1 split: first half, third quarter, last quarter."""
    train = total // 2
    valid = (total - train) // 2
    test = total - train - valid
    if min(train, valid, test) < 1:
        raise ContractError(f"cannot split {total} items 2/1/1 without an empty split")
    return train, valid, test


def make_splits(source, mode: Optional[str] = None) -> tuple:
    """Split into ``(train, valid, test)`` lists of trajectories.

    ``mode="stationary"`` cuts one long trajectory along time; ``"episodic"``
    assigns whole trajectories by index order. The mode is inferred from the
    input type when omitted.
    """
    if mode is None:
        mode = "stationary" if isinstance(source, Trajectory) else "episodic"
    if mode == "stationary":
        if not isinstance(source, Trajectory):
            seq = list(source)
            if len(seq) != 1:
                raise ContractError("stationary splitting expects one long trajectory")
            source = seq[0]
        a, b, _ = split_sizes(source.num_frames)
        return (
            [source.frames(0, a)],
            [source.frames(a, a + b)],
            [source.frames(a + b, source.num_frames)],
        )
    if mode == "episodic":
        seq = list(source)
        a, b, _ = split_sizes(len(seq))
        return seq[:a], seq[a : a + b], seq[a + b :]
    raise ContractError(f"unknown split mode {mode!r}")


def subsample(raw, every: int = 100, dt_solver: Optional[float] = None) -> Trajectory:
    """Keep frames ``0, every, 2*every, ...`` of a solver-rate record.

    ``raw`` is a :class:`Trajectory` whose ``frame_dt`` is the solver step,
    or a bare ``[S, N, dim]`` array together with ``dt_solver``.
    """
    if every < 1:
        raise ContractError("every must be >= 1")
    if isinstance(raw, Trajectory):
        base = raw
        dt = raw.frame_dt if dt_solver is None else dt_solver
    else:
        pos = np.asarray(raw)
        base = Trajectory(pos, np.zeros(pos.shape[1], dtype=np.int64))
        dt = dt_solver
    return Trajectory(
        base.positions[::every],
        base.types,
        None if dt is None else every * dt,
        base.case_id,
    )


# -- metadata --------------------------------------------------------------------

METADATA_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "case",
        "dim",
        "dx",
        "dt",
        "bounds",
        "periodic_boundary_conditions",
        "viscosity",
        "c0",
        "rho0",
        "p_bg",
        "num_particles_max",
        "sequence_length_train",
        "sequence_length_valid",
        "sequence_length_test",
        "num_trajs_train",
        "num_trajs_valid",
        "num_trajs_test",
        "split_mode",
        "particle_types",
        "default_connectivity_radius",
        PROVENANCE_KEY,
    ],
    "properties": {
        "case": {"type": "string"},
        "dim": {"enum": [2, 3]},
        "dx": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "t_end": {"type": "number", "minimum": 0},
        "bounds": {
            "type": "array",
            "items": {
                "type": "array",
                "items": {"type": "number"},
                "minItems": 2,
                "maxItems": 2,
            },
        },
        "periodic_boundary_conditions": {"type": "array", "items": {"type": "boolean"}},
        "viscosity": {"type": "number", "minimum": 0},
        "c0": {"type": "number", "exclusiveMinimum": 0},
        "rho0": {"type": "number", "exclusiveMinimum": 0},
        "p_bg": {"type": "number"},
        "g_ext_magnitude": {"type": "number", "minimum": 0},
        "reynolds": {"type": ["number", "null"]},
        "num_particles_max": {"type": "integer", "minimum": 1},
        "sequence_length_train": {"type": "integer", "minimum": 1},
        "sequence_length_valid": {"type": "integer", "minimum": 1},
        "sequence_length_test": {"type": "integer", "minimum": 1},
        "num_trajs_train": {"type": "integer", "minimum": 1},
        "num_trajs_valid": {"type": "integer", "minimum": 1},
        "num_trajs_test": {"type": "integer", "minimum": 1},
        "split_mode": {"enum": ["stationary", "episodic"]},
        "particle_types": {"type": "object", "additionalProperties": {"type": "string"}},
        "default_connectivity_radius": {"type": "number", "exclusiveMinimum": 0},
        "vel_mean": {"type": "array", "items": {"type": "number"}},
        "vel_std": {"type": "array", "items": {"type": "number"}},
        "acc_mean": {"type": "array", "items": {"type": "number"}},
        "acc_std": {"type": "array", "items": {"type": "number"}},
        PROVENANCE_KEY: {
            "type": "object",
            "required": [
                "kernel",
                "h_over_dx",
                "artificial_alpha",
                "density_mode",
                "dt_solver",
                "frames_between_samples",
            ],
            "properties": {
                "kernel": {"type": "string"},
                "h_over_dx": {"type": "number", "exclusiveMinimum": 0},
                "artificial_alpha": {"type": "number", "minimum": 0},
                "density_mode": {"enum": ["summation", "evolution"]},
                "density_diffusion": {"type": "string"},
                "transport_velocity": {"type": "boolean"},
                "transport_pressure": {"type": "number", "minimum": 0},
                "wall_hydrostatic": {"type": "boolean"},
                "dt_solver": {"type": "number", "exclusiveMinimum": 0},
                "frames_between_samples": {"type": "integer", "minimum": 1},
                "wall_layers_simulated": {"type": "integer", "minimum": 0},
                "wall_layers_stored": {"type": "integer", "minimum": 0},
                "lid_velocity": {"type": "number"},
                "seed": {"type": "integer"},
                "layout": {"type": "string"},
                "relax_steps": {"type": "integer", "minimum": 0},
                "warmup_frames": {"type": ["integer", "null"]},
            },
        },
    },
}


def validate_metadata(meta: dict) -> None:
    try:
        jsonschema.validate(meta, METADATA_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise MalformedFileError(f"metadata invalid at {path}: {exc.message}") from None


def _fd_stats(splits) -> dict:
    """Mean/std of finite-difference velocities and accelerations (train split)."""
    vels, accs = [], []
    for tr in splits:
        p = tr.positions.astype(np.float64)
        if len(p) >= 2:
            vels.append((p[1:] - p[:-1]).reshape(-1, tr.dim))
        if len(p) >= 3:
            accs.append((p[2:] - 2 * p[1:-1] + p[:-2]).reshape(-1, tr.dim))
    out = {}
    for name, arrs in (("vel", vels), ("acc", accs)):
        if arrs:
            a = np.concatenate(arrs)
            out[f"{name}_mean"] = a.mean(axis=0).tolist()
            out[f"{name}_std"] = a.std(axis=0).tolist()
    return out


def build_metadata(
    spec: CaseSpec,
    splits: dict,
    *,
    mode: str,
    provenance: Optional[dict] = None,
    domain=None,
) -> dict:
    """Metadata for a dataset with ``splits = {"train": [...], ...}``.

    Position statistics are finite differences of the stored frames with
    periodic jumps left in; they are informational. The solver provenance
    goes under its own key so that readers expecting only the common
    fields are unaffected.
    """
    dom = spec.domain if domain is None else domain
    n_max = max(tr.num_particles for s in splits.values() for tr in s)
    meta = {
        "case": spec.case_id,
        "dim": spec.dim,
        "dx": spec.dx,
        "dt": spec.frame_dt,
        "t_end": spec.frame_dt * (splits["train"][0].num_frames - 1),
        "bounds": [[0.0, L] for L in dom.extents],
        "periodic_boundary_conditions": list(dom.periodic),
        "viscosity": spec.viscosity,
        "c0": spec.c0,
        "rho0": spec.rho0,
        "p_bg": spec.p_bg,
        "g_ext_magnitude": spec.force_magnitude,
        "reynolds": spec.reynolds,
        "num_particles_max": int(n_max),
        "split_mode": mode,
        "particle_types": {str(k): v for k, v in PARTICLE_TYPE_NAMES.items()},
        "default_connectivity_radius": 1.5 * spec.dx,
    }
    for name in SPLIT_NAMES:
        meta[f"sequence_length_{name}"] = int(splits[name][0].num_frames)
        meta[f"num_trajs_{name}"] = len(splits[name])
    meta.update(_fd_stats(splits["train"]))
    tp = float(spec.extra.get("transport_pressure", spec.p_bg))
    prov = {
        "kernel": "quintic_spline",
        "h_over_dx": H_OVER_DX,
        "artificial_alpha": spec.artificial_alpha,
        "density_mode": spec.density_mode,
        "density_diffusion": "none",
        "transport_velocity": spec.p_bg > 0 or tp > 0,
        "transport_pressure": tp,
        "wall_hydrostatic": bool(spec.extra.get("wall_hydrostatic", False)),
        "dt_solver": spec.dt_solver,
        "frames_between_samples": spec.frames_between_samples,
        "wall_layers_simulated": 3,
        "wall_layers_stored": 1,
        "lid_velocity": spec.lid_velocity,
    }
    prov.update(provenance or {})
    meta[PROVENANCE_KEY] = prov
    validate_metadata(meta)
    return meta


def write_metadata(meta: dict, path) -> None:
    validate_metadata(meta)
    with open(path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_metadata(path) -> dict:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingInputError(f"metadata file not found: {path}")
    try:
        with open(path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path} is not valid JSON: {exc}") from None
    validate_metadata(meta)
    return meta


# -- whole datasets --------------------------------------------------------------


def write_dataset(directory, splits: dict, metadata: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    for name in SPLIT_NAMES:
        write_split(splits[name], os.path.join(directory, f"{name}.h5"))
    write_metadata(metadata, os.path.join(directory, METADATA_FILE))


def read_dataset(directory, names: Iterable[str] = SPLIT_NAMES) -> tuple:
    """Return ``(metadata, {split: [Trajectory, ...]})``."""
    if not os.path.isdir(directory):
        raise MissingInputError(f"dataset directory not found: {directory}")
    meta = read_metadata(os.path.join(directory, METADATA_FILE))
    splits = {}
    for name in names:
        trs = read_split(os.path.join(directory, f"{name}.h5"), meta["dt"], meta["case"])
        for i, tr in enumerate(trs):
            if tr.dim != meta["dim"]:
                raise ShapeMismatchError(
                    f"{name}.h5: {trajectory_key(i)}/{POSITION_KEY} is {tr.dim}D, "
                    f"metadata says {meta['dim']}D"
                )
        splits[name] = trs
    return meta, splits
