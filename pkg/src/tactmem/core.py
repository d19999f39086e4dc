"""Shared domain types for tactile trajectories.

A trajectory is a 50 Hz sequence of (sensor frame, action) pairs recorded
from a compliant peg-in-hole rig. Each sensor frame carries a 3x3 taxel
array (3D force per taxel), a 6D force/torque reading, and the arm and
gripper poses. Everything downstream (tokenization, training, the retrieval
database, the simulator) speaks these types, so they are immutable after
construction and validated eagerly.

All quantities are SI: meters, Newtons, radians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

DATASET_SCHEMA = "tactmem-dataset"
DATASET_VERSION = 1

PHASES = ("approach", "fit", "align", "insert")

# Per-step sanity bounds for actions; demonstrations and rollouts are
# expected to stay well inside these.
MAX_DPOS = 0.01  # m
MAX_DEULER = 0.05  # rad

STD_FLOOR = 1e-8


class DatasetError(ValueError):
    """Raised for malformed dataset files or schema mismatches."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _as_float_array(x, shape: tuple[int, ...], what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{what}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what}: non-finite values")
    return _freeze(a)


def taxel_index_to_coord(i: int) -> tuple[int, int]:
    """Row-major taxel index 0..8 -> grid coordinate (r, c) in {-1,0,1}^2."""
    if not 0 <= i <= 8:
        raise IndexError(f"taxel index {i} out of range 0..8")
    return i // 3 - 1, i % 3 - 1


def taxel_coord_to_index(r: int, c: int) -> int:
    if r not in (-1, 0, 1) or c not in (-1, 0, 1):
        raise IndexError(f"taxel coordinate ({r}, {c}) outside the 3x3 grid")
    return (r + 1) * 3 + (c + 1)


@dataclass(frozen=True)
class TaxelGrid:
    """Forces of the 9-taxel array, row-major over (r, c) in {-1,0,1}^2.

    ``forces[i]`` is the 3D force (N) of taxel ``i``; component 2 is normal
    to the sensor plate.
    """

    forces: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "forces", _as_float_array(self.forces, (9, 3), "TaxelGrid.forces")
        )

    def at(self, r: int, c: int) -> np.ndarray:
        return self.forces[taxel_coord_to_index(r, c)]


@dataclass(frozen=True)
class Pose7:
    """Position plus scalar-first unit quaternion.

    The quaternion is renormalized on construction; inputs further than a
    coarse tolerance from unit length are rejected as corrupt.
    """

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "position", _as_float_array(self.position, (3,), "Pose7.position")
        )
        q = np.asarray(self.quaternion, dtype=np.float64)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError("Pose7.quaternion: expected 4 finite components")
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-3:
            raise ValueError(f"Pose7.quaternion: norm {n:.6f} too far from 1")
        object.__setattr__(self, "quaternion", _freeze(q / n))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.quaternion])


@dataclass(frozen=True)
class Wrench6:
    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "force", _as_float_array(self.force, (3,), "Wrench6.force")
        )
        object.__setattr__(
            self, "torque", _as_float_array(self.torque, (3,), "Wrench6.torque")
        )

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass(frozen=True)
class Action6:
    """Per-step end-effector displacement: position delta plus XYZ intrinsic
    Euler rotation delta."""

    dpos: np.ndarray
    deuler: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dpos", _as_float_array(self.dpos, (3,), "Action6.dpos"))
        object.__setattr__(
            self, "deuler", _as_float_array(self.deuler, (3,), "Action6.deuler")
        )
        if np.linalg.norm(self.dpos) > MAX_DPOS + 1e-12:
            raise ValueError(f"Action6.dpos norm {np.linalg.norm(self.dpos):.4g} exceeds {MAX_DPOS}")
        if np.max(np.abs(self.deuler)) > MAX_DEULER + 1e-12:
            raise ValueError(f"Action6.deuler component exceeds {MAX_DEULER}")

    @staticmethod
    def zero() -> "Action6":
        return Action6(np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dpos, self.deuler])


@dataclass(frozen=True)
class RobotState:
    """One 50 Hz sensor frame."""

    taxels: TaxelGrid
    ft: Wrench6
    arm_pose: Pose7
    grip_pose: Pose7
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("RobotState.t must be non-negative")


@dataclass(frozen=True)
class TrajectoryMeta:
    shape_id: str
    start_pose_id: int
    condition_id: str
    success: bool


@dataclass(frozen=True)
class Trajectory:
    """Ordered (state, action) steps plus provenance.

    ``phases``, when present, labels every step with one of ``PHASES`` and
    must be non-decreasing in that order.
    """

    steps: tuple[tuple[RobotState, Action6], ...]
    meta: TrajectoryMeta
    phases: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("Trajectory must contain at least one step")
        ts = [s.t for s, _ in self.steps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("RobotState.t must be strictly increasing")
        if self.phases is not None:
            if len(self.phases) != len(self.steps):
                raise ValueError("phase labels must match step count")
            order = [PHASES.index(p) for p in self.phases]
            if any(b < a for a, b in zip(order, order[1:])):
                raise ValueError("phase labels must be non-decreasing")

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Window:
    """H consecutive (state, action) pairs ending at some step t.

    Histories that would extend before the first step are padded by
    repeating step 0 with a zero action; those entries carry ``padded[i] ==
    True``.
    """

    states: tuple[RobotState, ...]
    actions: tuple[Action6, ...]
    padded: tuple[bool, ...]

    def __post_init__(self):
        if not len(self.states) == len(self.actions) == len(self.padded):
            raise ValueError("Window fields must have equal length")

    def __len__(self) -> int:
        return len(self.states)

    def as_arrays(self) -> "WindowArrays":
        h = len(self.states)
        taxels = np.stack([s.taxels.forces for s in self.states])
        ft = np.stack([s.ft.as_array() for s in self.states])
        arm = np.stack([s.arm_pose.as_array() for s in self.states])
        grip = np.stack([s.grip_pose.as_array() for s in self.states])
        action = np.stack([a.as_array() for a in self.actions])
        return WindowArrays(
            taxels=taxels.reshape(h, 9, 3),
            ft=ft,
            arm=arm,
            grip=grip,
            action=action,
            padded=np.asarray(self.padded, dtype=bool),
        )


@dataclass
class WindowArrays:
    """Raw channel view of a window: the representation fed to encoders.

    Normalization happens on this view; a z-scored window no longer
    satisfies the unit-quaternion invariants of the structured types, so it
    lives here instead of in ``Window``.
    """

    taxels: np.ndarray  # (H, 9, 3)
    ft: np.ndarray  # (H, 6)
    arm: np.ndarray  # (H, 7)
    grip: np.ndarray  # (H, 7)
    action: np.ndarray  # (H, 6)
    padded: np.ndarray  # (H,) bool

    FIELDS = ("taxels", "ft", "arm", "grip", "action")

    def copy(self) -> "WindowArrays":
        return WindowArrays(
            **{f: getattr(self, f).copy() for f in self.FIELDS},
            padded=self.padded.copy(),
        )


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics, one (mean, std) pair per scalar
    channel of the window view. std is floored at 1e-8."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def __post_init__(self):
        for f in WindowArrays.FIELDS:
            if f not in self.mean or f not in self.std:
                raise ValueError(f"NormStats missing channel group {f!r}")
            if np.any(self.std[f] < STD_FLOOR - 1e-15):
                raise ValueError("NormStats.std below floor")


def make_window(traj: Trajectory, t: int, h: int) -> Window:
    """Extract steps [t-h+1 .. t]; pad the head with (step 0, zero action)."""
    if not 0 <= t < len(traj):
        raise IndexError(f"step {t} out of range for trajectory of length {len(traj)}")
    if h < 1:
        raise ValueError("window length must be >= 1")
    lo = t - h + 1
    n_pad = max(0, -lo)
    real = traj.steps[max(lo, 0) : t + 1]
    s0 = traj.steps[0][0]
    states = (s0,) * n_pad + tuple(s for s, _ in real)
    actions = (Action6.zero(),) * n_pad + tuple(a for _, a in real)
    padded = (True,) * n_pad + (False,) * len(real)
    return Window(states=states, actions=actions, padded=padded)


def _iter_step_arrays(trajs: Sequence[Trajectory]) -> Iterator[dict[str, np.ndarray]]:
    for traj in trajs:
        for state, action in traj.steps:
            yield {
                "taxels": state.taxels.forces,
                "ft": state.ft.as_array(),
                "arm": state.arm_pose.as_array(),
                "grip": state.grip_pose.as_array(),
                "action": action.as_array(),
            }


def compute_norm_stats(trajs: Sequence[Trajectory]) -> NormStats:
    """Per-channel mean/std over every step of every trajectory."""
    if not trajs:
        raise ValueError("cannot compute normalization stats on an empty dataset")
    stacks: dict[str, list[np.ndarray]] = {f: [] for f in WindowArrays.FIELDS}
    for rec in _iter_step_arrays(trajs):
        for f in WindowArrays.FIELDS:
            stacks[f].append(rec[f])
    mean, std = {}, {}
    for f in WindowArrays.FIELDS:
        data = np.stack(stacks[f])
        mean[f] = data.mean(axis=0)
        std[f] = np.maximum(data.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize(window: Window | WindowArrays, stats: NormStats) -> WindowArrays:
    """z-score every channel. Applying twice re-normalizes; this is not a
    projection."""
    arrays = window.as_arrays() if isinstance(window, Window) else window
    out = arrays.copy()
    for f in WindowArrays.FIELDS:
        setattr(out, f, (getattr(arrays, f) - stats.mean[f]) / stats.std[f])
    return out


def denormalize(arrays: WindowArrays, stats: NormStats) -> WindowArrays:
    out = arrays.copy()
    for f in WindowArrays.FIELDS:
        setattr(out, f, getattr(arrays, f) * stats.std[f] + stats.mean[f])
    return out


# ---------------------------------------------------------------------------
# Dataset persistence: line-delimited JSON, one trajectory per line, with a
# header record. Floats go through repr and therefore round-trip bit-exactly.
# See docs/dataset_format.md for the record schema.
# ---------------------------------------------------------------------------


def _state_to_obj(state: RobotState) -> dict:
    return {
        "taxels": state.taxels.forces.tolist(),
        "ft": state.ft.as_array().tolist(),
        "arm": state.arm_pose.as_array().tolist(),
        "grip": state.grip_pose.as_array().tolist(),
        "t": state.t,
    }


def _state_from_obj(obj: dict, line: int) -> RobotState:
    taxels = obj["taxels"]
    if len(taxels) != 9:
        raise DatasetError(f"line {line}: expected 9 taxels, got {len(taxels)}")
    arm = obj["arm"]
    grip = obj["grip"]
    return RobotState(
        taxels=TaxelGrid(np.asarray(taxels)),
        ft=Wrench6(np.asarray(obj["ft"][:3]), np.asarray(obj["ft"][3:])),
        arm_pose=Pose7(np.asarray(arm[:3]), np.asarray(arm[3:])),
        grip_pose=Pose7(np.asarray(grip[:3]), np.asarray(grip[3:])),
        t=int(obj["t"]),
    )


def save_dataset(trajs: Sequence[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "schema": DATASET_SCHEMA,
            "version": DATASET_VERSION,
            "count": len(trajs),
        }
        fh.write(json.dumps(header) + "\n")
        for traj in trajs:
            rec = {
                "meta": {
                    "shape_id": traj.meta.shape_id,
                    "start_pose_id": traj.meta.start_pose_id,
                    "condition_id": traj.meta.condition_id,
                    "success": traj.meta.success,
                },
                "phases": list(traj.phases) if traj.phases is not None else None,
                "steps": [
                    {"state": _state_to_obj(s), "action": a.as_array().tolist()}
                    for s, a in traj.steps
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> list[Trajectory]:
    trajs: list[Trajectory] = []
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise DatasetError(f"line 1: malformed header: {e}") from e
        if header.get("schema") != DATASET_SCHEMA:
            raise DatasetError(f"line 1: unknown schema {header.get('schema')!r}")
        if header.get("version") != DATASET_VERSION:
            raise DatasetError(
                f"line 1: schema version {header.get('version')} != {DATASET_VERSION}"
            )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed record: {e}") from e
            try:
                steps = tuple(
                    (
                        _state_from_obj(s["state"], lineno),
                        Action6(np.asarray(s["action"][:3]), np.asarray(s["action"][3:])),
                    )
                    for s in rec["steps"]
                )
                meta = TrajectoryMeta(
                    shape_id=rec["meta"]["shape_id"],
                    start_pose_id=int(rec["meta"]["start_pose_id"]),
                    condition_id=rec["meta"]["condition_id"],
                    success=bool(rec["meta"]["success"]),
                )
                phases = rec.get("phases")
                trajs.append(
                    Trajectory(
                        steps=steps,
                        meta=meta,
                        phases=tuple(phases) if phases is not None else None,
                    )
                )
            except DatasetError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"line {lineno}: {e}") from e
    expected = header.get("count")
    if expected is not None and expected != len(trajs):
        raise DatasetError(
            f"header count {expected} does not match {len(trajs)} records"
        )
    return trajs
