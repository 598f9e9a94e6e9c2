"""Autoregressive rollout harness for learned particle simulators.

Velocities and accelerations are in finite-difference units: the velocity at
frame ``t`` is ``p_t - p_{t-1}`` and an acceleration is the second
difference, with the frame interval absorbed. Use :func:`to_physical` to
convert.

A predictor is any object with a ``mode`` attribute (``"acceleration"``,
``"velocity"`` or ``"position"``) and a ``predict(frame)`` method taking a
:class:`FeatureFrame` and returning an ``[N, dim]`` array. The harness owns
all state; wall particles are never moved by the predictor.
"""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import h5py
import numpy as np

from .cases import N_WALL_LAYERS, get_case, has_force, external_force
from .core import FLUID, CaseSpec, ContractError, Domain, periodic_displacement, wrap_positions
from .dataio import Trajectory
from .metrics import RolloutReport, evaluate_rollout
from .neighbors import neighbor_search

log = logging.getLogger(__name__)

DEFAULT_HISTORY = 5
RADIUS_FACTOR = 1.5
PF_PROBS = (0.8, 0.1, 0.05, 0.05)
MODES = ("acceleration", "velocity", "position")


class PredictorError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"rollout step {step}: {message}")
        self.step = step


# -- history and features ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HistoryWindow:
    """The ``H + 1`` most recent position frames, oldest first."""

    positions: np.ndarray
    domain: Domain
    step: int = 0

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] < 2:
            raise ContractError(f"history needs [H+1 >= 2, N, dim] positions, got {p.shape}")
        if p.shape[2] != self.domain.dim:
            raise ContractError("history dimension does not match the domain")
        object.__setattr__(self, "positions", p)

    @property
    def history(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def current(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def velocities(self) -> np.ndarray:
        """``[H, N, dim]`` minimum-image frame differences."""
        p = self.positions
        return periodic_displacement(self.domain, p[1:], p[:-1])

    def push(self, new_positions) -> "HistoryWindow":
        new = np.asarray(new_positions, dtype=np.float64)[None]
        return HistoryWindow(
            np.concatenate([self.positions[1:], new]), self.domain, self.step + 1
        )

    @classmethod
    def from_trajectory(cls, traj: Trajectory, domain: Domain, t: int, history: int = DEFAULT_HISTORY):
        """Window ending at frame ``t`` (needs ``t >= history``)."""
        if t < history or t >= traj.num_frames:
            raise ContractError(
                f"frame {t} cannot end a {history}-step history of a "
                f"{traj.num_frames}-frame trajectory"
            )
        return cls(traj.positions[t - history : t + 1].astype(np.float64), domain, t)


@dataclass(eq=False)
class FeatureFrame:
    """Inputs handed to a predictor at one rollout step."""

    position: np.ndarray
    velocities: np.ndarray  # [N, H, dim]
    types: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_displacements: np.ndarray
    edge_distances: np.ndarray
    force: Optional[np.ndarray] = None
    boundary: Optional[np.ndarray] = None
    step: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def num_particles(self) -> int:
        return self.position.shape[0]

    @property
    def dim(self) -> int:
        return self.position.shape[1]


def wall_bounds(spec: CaseSpec):
    """Lower/upper wall surfaces per axis; infinite on periodic axes."""
    L = spec.domain.lengths
    lo = np.where(spec.domain.periodic_mask, -np.inf, N_WALL_LAYERS * spec.dx)
    hi = np.where(spec.domain.periodic_mask, np.inf, L - N_WALL_LAYERS * spec.dx)
    return lo, hi


def boundary_features(positions, spec: CaseSpec, radius: float) -> Optional[np.ndarray]:
    """Distances to the lower and upper wall of each non-periodic axis.

    Clipped to ``[0, radius]`` and divided by ``radius``; ``None`` for fully
    periodic cases.
    """
    axes = np.flatnonzero(~spec.domain.periodic_mask)
    if axes.size == 0:
        return None
    lo, hi = wall_bounds(spec)
    x = np.asarray(positions, dtype=np.float64)
    cols = []
    for a in axes:
        cols.append(x[:, a] - lo[a])
        cols.append(hi[a] - x[:, a])
    d = np.stack(cols, axis=1)
    return np.clip(d, 0.0, radius) / radius


def extract_features(
    window: HistoryWindow,
    case: Union[str, CaseSpec],
    types=None,
    *,
    history: Optional[int] = None,
    radius: Optional[float] = None,
    strategy: str = "chunked",
) -> FeatureFrame:
    """Node and edge features of the current frame.

    The force vector is included only for forced cases and the boundary
    distances only when some axis is non-periodic.
    """
    spec = get_case(case)
    H = window.history if history is None else history
    if window.history < H:
        raise ContractError(f"history of {window.history} frames, need {H}")
    dom = window.domain
    r_c = RADIUS_FACTOR * spec.dx if radius is None else radius
    x = window.current
    n = x.shape[0]
    vel = window.velocities[-H:].transpose(1, 0, 2) if H > 0 else np.zeros((n, 0, x.shape[1]))
    edges = neighbor_search(wrap_positions(dom, x), dom, r_c, strategy=strategy)
    t = np.zeros(n, dtype=np.int64) if types is None else np.asarray(types)
    return FeatureFrame(
        position=x,
        velocities=vel,
        types=t,
        senders=edges.senders,
        receivers=edges.receivers,
        edge_displacements=edges.displacements,
        edge_distances=edges.distances,
        force=external_force(spec, x) if has_force(spec) else None,
        boundary=boundary_features(x, spec, r_c),
        step=window.step,
        metadata={
            "radius": r_c,
            "history": H,
            "boundary_clip": "radius",
            "boundary_normalized_by": "radius",
            "units": "finite_difference",
        },
    )


# -- integration ------------------------------------------------------------------


def integrate_prediction(window: HistoryWindow, prediction, mode: str) -> np.ndarray:
    """Next positions from a prediction.

    ``acceleration``: ``v = (p_t - p_{t-1}) + a``, ``p = p_t + v``
    (semi-implicit Euler); ``velocity``: ``p = p_t + v``; ``position``:
    taken as is. Periodic axes are wrapped.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    p_t = window.current
    if pred.shape != p_t.shape:
        raise ContractError(f"prediction shape {pred.shape}, expected {p_t.shape}")
    if mode == "acceleration":
        v = periodic_displacement(window.domain, p_t, window.positions[-2]) + pred
        nxt = p_t + v
    elif mode == "velocity":
        nxt = p_t + pred
    elif mode == "position":
        nxt = pred
    else:
        raise ContractError(f"unknown prediction mode {mode!r}")
    return wrap_positions(window.domain, nxt)


def finite_difference_acceleration(p_prev, p_t, p_next, domain: Domain) -> np.ndarray:
    """Second difference ``p_{t+1} - 2 p_t + p_{t-1}`` under minimum image."""
    return periodic_displacement(domain, p_next, p_t) - periodic_displacement(domain, p_t, p_prev)


def to_physical(values, frame_dt: float, order: int = 1):
    """Finite-difference velocity (``order=1``) or acceleration (``2``) to physical units."""
    return np.asarray(values, dtype=np.float64) / frame_dt**order


def to_finite_difference(values, frame_dt: float, order: int = 1):
    return np.asarray(values, dtype=np.float64) * frame_dt**order


# -- predictors ------------------------------------------------------------------


class Predictor(Protocol):
    mode: str

    def predict(self, frame: FeatureFrame) -> np.ndarray: ...


class GroundTruthPredictor:
    """Plays the reference back: returns frame ``step + 1`` of a trajectory."""

    mode = "position"

    def __init__(self, reference: Trajectory):
        self.reference = reference

    def predict(self, frame: FeatureFrame) -> np.ndarray:
        t = frame.step + 1
        if t >= self.reference.num_frames:
            raise IndexError(f"reference has no frame {t}")
        return self.reference.positions[t].astype(np.float64)


class ZeroAccelerationPredictor:
    """Constant-velocity extrapolation baseline."""

    mode = "acceleration"

    def predict(self, frame: FeatureFrame) -> np.ndarray:
        return np.zeros_like(frame.position)


class SolverPredictor:
    """The SPH solver itself, advanced one stored frame per call.

    The solver is rebuilt from the case initializer with the same seed and
    options used for the dataset, then fast-forwarded to the frame being
    predicted from, so it reproduces generated trajectories exactly.
    """

    mode = "position"

    def __init__(self, case, seed: int = 0, layout=None, relax_steps=None, warmup=None, warmup_max_frames=None):
        from . import cases as _cases

        self.spec = get_case(case)
        kwargs = {}
        if relax_steps is not None:
            kwargs["relax_steps"] = relax_steps
        state, _ = _cases.init_case(self.spec, seed, layout=layout, **kwargs)
        self._keep = (state.types == FLUID) | (state.layers == 0)
        self.solver = _cases.make_solver(self.spec, state)
        warm = self.spec.stationary if warmup is None else warmup
        if warm:
            wkw = {} if warmup_max_frames is None else {"max_frames": warmup_max_frames}
            _cases.warm_up(self.solver, self.spec, **wkw)
        self.frame = 0

    def predict(self, frame: FeatureFrame) -> np.ndarray:
        if frame.step < self.frame:
            raise ContractError("solver predictor cannot go back in time")
        stride = self.spec.frames_between_samples
        while self.frame <= frame.step:
            self.solver.run(stride)
            self.frame += 1
        return self.solver.state.positions[self._keep].astype(np.float32).astype(np.float64)


def write_feature_frame(frame: FeatureFrame, path) -> None:
    """Serialize a feature frame to an HDF5 exchange file."""
    with h5py.File(path, "w") as f:
        for name in ("position", "velocities", "types", "senders", "receivers",
                     "edge_displacements", "edge_distances", "force", "boundary"):
            value = getattr(frame, name)
            if value is not None:
                f.create_dataset(name, data=np.asarray(value))
        f.attrs["step"] = frame.step
        for k, v in frame.metadata.items():
            f.attrs[k] = v


def read_feature_frame(path) -> FeatureFrame:
    with h5py.File(path, "r") as f:
        get = lambda k: np.asarray(f[k][()]) if k in f else None  # noqa: E731
        meta = {k: (v.item() if hasattr(v, "item") else v) for k, v in f.attrs.items()}
        step = int(meta.pop("step", 0))
        return FeatureFrame(
            position=get("position"),
            velocities=get("velocities"),
            types=get("types"),
            senders=get("senders"),
            receivers=get("receivers"),
            edge_displacements=get("edge_displacements"),
            edge_distances=get("edge_distances"),
            force=get("force"),
            boundary=get("boundary"),
            step=step,
            metadata=meta,
        )


class FileExchangePredictor:
    """Delegates prediction to an external program through HDF5 files.

    Each step the harness writes ``request.h5`` (see
    :func:`write_feature_frame`) and runs ``command`` with the placeholders
    ``{request}`` and ``{response}`` substituted. The program must write a
    ``prediction`` dataset of shape ``[N, dim]`` into the response file;
    an optional ``mode`` attribute must agree with the declared mode.
    """

    def __init__(self, command: Sequence[str], mode: str = "acceleration", workdir=None, timeout=None):
        if mode not in MODES:
            raise ContractError(f"unknown prediction mode {mode!r}")
        self.command = list(command)
        self.mode = mode
        self.timeout = timeout
        self.workdir = workdir or tempfile.mkdtemp(prefix="sphbench-exchange-")
        os.makedirs(self.workdir, exist_ok=True)

    def predict(self, frame: FeatureFrame) -> np.ndarray:
        req = os.path.join(self.workdir, "request.h5")
        resp = os.path.join(self.workdir, "response.h5")
        if os.path.exists(resp):
            os.remove(resp)
        write_feature_frame(frame, req)
        cmd = [c.format(request=req, response=resp) for c in self.command]
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(
                f"external predictor exited with {proc.returncode}: {proc.stderr.strip()[-500:]}"
            )
        if not os.path.exists(resp):
            raise RuntimeError("external predictor wrote no response file")
        with h5py.File(resp, "r") as f:
            if "prediction" not in f:
                raise RuntimeError("response file lacks a 'prediction' dataset")
            mode = f.attrs.get("mode", self.mode)
            if isinstance(mode, bytes):
                mode = mode.decode()
            if mode != self.mode:
                raise RuntimeError(f"response mode {mode!r} differs from declared {self.mode!r}")
            return np.asarray(f["prediction"][()], dtype=np.float64)


# -- rollout ---------------------------------------------------------------------


def rollout(
    predictor: Predictor,
    window: HistoryWindow,
    steps: int,
    case: Union[str, CaseSpec],
    types=None,
    reference: Optional[Trajectory] = None,
    *,
    history: Optional[int] = None,
    metrics_kwargs: Optional[dict] = None,
    strategy: str = "chunked",
):
    """Closed-loop prediction for ``steps`` frames after the window.

    Returns the predicted :class:`Trajectory` (steps frames, the window not
    included; ``None`` when ``steps`` is 0) and a :class:`RolloutReport` against ``reference``, whose
    frame ``window.step + k`` is compared with predicted step ``k``. Walls
    are reset to the reference positions, or held at their last known
    positions without a reference.
    """
    spec = get_case(case)
    if steps < 0:
        raise ContractError("steps must be non-negative")
    n, dim = window.current.shape
    t = np.zeros(n, dtype=np.int64) if types is None else np.asarray(types)
    walls = t != FLUID
    t0 = window.step
    if reference is not None and reference.num_frames < t0 + steps + 1:
        raise ContractError(
            f"reference has {reference.num_frames} frames, need {t0 + steps + 1}"
        )
    mode = getattr(predictor, "mode", None)
    if mode not in MODES:
        raise ContractError(f"predictor declares unknown mode {mode!r}")
    last_input = window.current.copy()
    out = np.empty((steps, n, dim), dtype=np.float64)
    for k in range(steps):
        frame = extract_features(window, spec, t, history=history, strategy=strategy)
        try:
            pred = predictor.predict(frame)
        except Exception as exc:  # surfaced with the step index
            raise PredictorError(f"{type(exc).__name__}: {exc}", k + 1) from exc
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != (n, dim):
            raise PredictorError(f"prediction shape {pred.shape}, expected {(n, dim)}", k + 1)
        if not np.all(np.isfinite(pred)):
            raise PredictorError("non-finite prediction", k + 1)
        nxt = integrate_prediction(window, pred, predictor.mode)
        if walls.any():
            src = reference.positions[t0 + k + 1] if reference is not None else window.current
            nxt[walls] = np.asarray(src, dtype=np.float64)[walls]
        out[k] = nxt
        window = window.push(nxt)

    traj = Trajectory(out.astype(np.float32), t, spec.frame_dt, spec.case_id) if steps else None
    report = RolloutReport()
    if reference is not None:
        ref = reference.positions[t0 + 1 : t0 + 1 + steps].astype(np.float64)
        pred32 = out.astype(np.float32).astype(np.float64)
        kwargs = dict(
            last_input=last_input,
            types=t,
            masses=spec.particle_mass,
            frame_dt=spec.frame_dt,
        )
        kwargs.update(metrics_kwargs or {})
        report = evaluate_rollout(pred32, ref, spec.domain, **kwargs)
    return traj, report


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    noise_std: float = 3e-4
    pushforward_probs: tuple = PF_PROBS

    def __post_init__(self):
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")
        p = np.asarray(self.pushforward_probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ContractError("push-forward probabilities must be non-negative and sum to 1")

    @property
    def max_unroll(self) -> int:
        return len(self.pushforward_probs)


def add_random_walk_noise(
    window: HistoryWindow,
    noise_std: float,
    rng: np.random.Generator,
    mask=None,
) -> HistoryWindow:
    """Perturb the history with accumulated Gaussian velocity noise.

    Each of the ``H`` velocities gets an independent increment of standard
    deviation ``noise_std / sqrt(H)``; positions accumulate the increments
    from the oldest frame on, so the newest frame is displaced with standard
    deviation ``noise_std`` per coordinate and the velocities of the noisy
    window are exactly the noisy increments added to the clean ones.
    ``mask`` limits the noise to a subset of particles (e.g. fluid).
    """
    if noise_std < 0:
        raise ContractError("noise_std must be non-negative")
    if noise_std == 0:
        return window
    H = window.history
    p = window.positions
    inc = rng.normal(0.0, noise_std / np.sqrt(H), size=(H,) + p.shape[1:])
    if mask is not None:
        inc[:, ~np.asarray(mask, bool)] = 0.0
    shift = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(inc, axis=0)])
    return HistoryWindow(p + shift, window.domain, window.step)


def sample_pushforward_steps(config: AugmentationConfig, rng: np.random.Generator, size=None):
    """Unroll length ``k`` in ``1..len(probs)`` (``k - 1`` extra steps)."""
    k = rng.choice(config.max_unroll, size=size, p=np.asarray(config.pushforward_probs)) + 1
    return int(k) if size is None else k


def pushforward_window(
    predictor: Predictor,
    window: HistoryWindow,
    extra_steps: int,
    case: Union[str, CaseSpec],
    types=None,
) -> HistoryWindow:
    """Advance a training window by the model's own predictions.

    The trainer calls this with ``k - 1`` from
    :func:`sample_pushforward_steps` and treats the result as constant input
    (no gradient flows through these steps).
    """
    spec = get_case(case)
    t = np.zeros(window.current.shape[0], np.int64) if types is None else np.asarray(types)
    walls = t != FLUID
    for _ in range(extra_steps):
        frame = extract_features(window, spec, t)
        nxt = integrate_prediction(window, predictor.predict(frame), predictor.mode)
        nxt[walls] = window.current[walls]
        window = window.push(nxt)
    return window
