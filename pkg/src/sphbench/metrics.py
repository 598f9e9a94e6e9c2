"""Rollout error measures: position MSE, kinetic-energy MSE and Sinkhorn distance.

Conventions:

* Position errors use the minimum-image displacement on periodic axes and
  average over steps, particles and coordinates (so a single error vector
  ``(0.3, 0.4)`` scores ``0.125``).
* Only fluid particles enter the measures when a type array is supplied;
  walls never move.
* The Sinkhorn distance is the transport cost ``<pi_eps, C>`` of the
  entropic plan with squared-distance ground cost. By default the debiased
  form ``d(P, Q) - d(P, P)/2 - d(Q, Q)/2`` is reported, which vanishes for
  identical clouds.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import FLUID, ContractError, Domain, periodic_displacement

log = logging.getLogger(__name__)

DEFAULT_MSE_STEPS = (1, 5, 10, 20)
SINKHORN_EPS_FACTOR = 1e-3
SINKHORN_MAX_ITERS = 500
SINKHORN_TOL = 1e-6
CHECK_EVERY = 10


class SinkhornConvergenceWarning(RuntimeWarning):
    pass


def _check_pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ContractError(f"shape mismatch: prediction {pred.shape} vs reference {ref.shape}")
    return pred, ref


def mse_per_step(pred, ref, domain: Domain, mask=None) -> np.ndarray:
    """Squared minimum-image error per step, averaged over particles and axes."""
    pred, ref = _check_pair(pred, ref)
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]
    if mask is not None:
        pred, ref = pred[:, mask], ref[:, mask]
    d = periodic_displacement(domain, pred, ref)
    return np.mean(d * d, axis=(1, 2))


def mse_n(pred, ref, domain: Domain, n: int, mask=None) -> float:
    """Mean position error over the first ``n`` rollout steps."""
    pred, ref = _check_pair(pred, ref)
    if not 1 <= n <= pred.shape[0]:
        raise ContractError(f"n = {n} outside 1..{pred.shape[0]}")
    return float(np.mean(mse_per_step(pred[:n], ref[:n], domain, mask)))


def kinetic_energy(velocities, masses) -> float:
    """``0.5 * sum_i m_i |v_i|^2``."""
    v = np.asarray(velocities, dtype=np.float64)
    m = np.broadcast_to(np.asarray(masses, dtype=np.float64), v.shape[:1])
    return float(0.5 * np.sum(m * np.sum(v * v, axis=-1)))


def finite_difference_velocities(positions, domain: Domain, frame_dt: float = 1.0):
    """Velocities ``(p_t - p_{t-1}) / dt`` for ``t >= 1``, minimum-image."""
    p = np.asarray(positions, dtype=np.float64)
    return periodic_displacement(domain, p[1:], p[:-1]) / frame_dt


def kinetic_energy_series(positions, masses, domain: Domain, frame_dt: float = 1.0, mask=None):
    """Kinetic energy of frames ``1..T-1`` from position differences."""
    p = np.asarray(positions, dtype=np.float64)
    if mask is not None:
        p = p[:, mask]
        masses = np.broadcast_to(np.asarray(masses, np.float64), mask.shape)[mask]
    v = finite_difference_velocities(p, domain, frame_dt)
    m = np.broadcast_to(np.asarray(masses, dtype=np.float64), v.shape[1:2])
    return 0.5 * np.sum(m[None, :] * np.sum(v * v, axis=-1), axis=1)


def mse_e_kin(pred_energy, ref_energy) -> float:
    a = np.asarray(pred_energy, dtype=np.float64)
    b = np.asarray(ref_energy, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"energy series lengths differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


# -- Sinkhorn --------------------------------------------------------------------


@dataclass
class SinkhornResult:
    value: float
    converged: bool
    iterations: int
    residual: float
    epsilon: float


def sinkhorn_epsilon(domain: Domain, factor: float = SINKHORN_EPS_FACTOR) -> float:
    return factor * domain.diagonal**2


def _cost(x, y, domain: Optional[Domain], periodic: bool):
    if domain is not None and periodic:
        d = periodic_displacement(domain, x[:, None, :], y[None, :, :])
    else:
        d = x[:, None, :] - y[None, :, :]
    return np.sum(d * d, axis=-1)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def entropic_transport(
    C: np.ndarray,
    epsilon: float,
    max_iters: int = SINKHORN_MAX_ITERS,
    tol: float = SINKHORN_TOL,
) -> SinkhornResult:
    """Log-domain Sinkhorn with uniform marginals on a cost matrix.

    Uses epsilon scaling: the regularization is annealed geometrically from
    the cost scale down to ``epsilon``, warm-starting the dual potentials.
    Only the final stage counts toward ``max_iters`` and the convergence
    test (L1 violation of the row marginal).
    """
    n, m = C.shape
    if n == 0 or m == 0:
        raise ContractError("both point clouds must be non-empty")
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    scale = float(C.max())
    schedule = []
    eps = max(scale, epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps *= 0.5
    schedule.append(epsilon)

    def update(eps):
        nonlocal f, g
        f = -eps * _logsumexp((g[None, :] - C) / eps + log_b[None, :], axis=1)
        g = -eps * _logsumexp((f[:, None] - C) / eps + log_a[:, None], axis=0)

    for eps in schedule[:-1]:
        for _ in range(10):
            update(eps)

    eps = schedule[-1]
    residual = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        update(eps)
        if it % CHECK_EVERY and it != max_iters:
            continue
        # g is exact for the columns; check the rows
        log_pi = (f[:, None] + g[None, :] - C) / eps + log_a[:, None] + log_b[None, :]
        row = np.exp(_logsumexp(log_pi, axis=1))
        residual = float(np.sum(np.abs(row - np.exp(log_a))))
        if residual < tol:
            break
    log_pi = (f[:, None] + g[None, :] - C) / eps + log_a[:, None] + log_b[None, :]
    value = float(np.sum(np.exp(log_pi) * C))
    return SinkhornResult(value, residual < tol, it, residual, eps)


def sinkhorn_distance(
    P,
    Q,
    domain: Optional[Domain] = None,
    epsilon: Optional[float] = None,
    max_iters: int = SINKHORN_MAX_ITERS,
    tol: float = SINKHORN_TOL,
    debiased: bool = True,
    periodic: bool = True,
    return_details: bool = False,
):
    """Entropic optimal-transport distance between two point clouds.

    ``periodic`` selects minimum-image ground cost on the domain's periodic
    axes. Non-convergence raises a :class:`SinkhornConvergenceWarning`
    carrying the residual; ``return_details`` also returns the individual
    :class:`SinkhornResult` objects.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if P.size == 0 or Q.size == 0:
        raise ContractError("both point clouds must be non-empty")
    if P.shape[1] != Q.shape[1]:
        raise ContractError("point clouds live in different dimensions")
    if epsilon is None:
        if domain is None:
            raise ContractError("epsilon or domain is required")
        epsilon = sinkhorn_epsilon(domain)
    args = (epsilon, max_iters, tol)
    pq = entropic_transport(_cost(P, Q, domain, periodic), *args)
    results = {"pq": pq}
    value = pq.value
    if debiased:
        pp = entropic_transport(_cost(P, P, domain, periodic), *args)
        if P.shape == Q.shape and np.array_equal(P, Q):
            qq = pp
        else:
            qq = entropic_transport(_cost(Q, Q, domain, periodic), *args)
        results.update(pp=pp, qq=qq)
        value = pq.value - 0.5 * pp.value - 0.5 * qq.value
    bad = {k: r.residual for k, r in results.items() if not r.converged}
    if bad:
        warnings.warn(
            f"Sinkhorn did not converge within {max_iters} iterations "
            f"(marginal residuals {bad})",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )
    if return_details:
        return value, results
    return value


# -- reports ---------------------------------------------------------------------


@dataclass
class RolloutReport:
    """Per-step and aggregated errors of one rollout."""

    mse_per_step: list = field(default_factory=list)
    mse_n: dict = field(default_factory=dict)
    sinkhorn_steps: list = field(default_factory=list)
    sinkhorn_per_step: list = field(default_factory=list)
    sinkhorn_converged: list = field(default_factory=list)
    e_kin_pred: list = field(default_factory=list)
    e_kin_ref: list = field(default_factory=list)
    mse_e_kin: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return len(self.mse_per_step)

    @property
    def sinkhorn(self) -> float:
        """Mean Sinkhorn value over the evaluated steps (0 when none)."""
        v = self.sinkhorn_per_step
        return float(np.mean(v)) if v else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mse_n"] = {str(k): v for k, v in self.mse_n.items()}
        d["sinkhorn"] = self.sinkhorn
        return d

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        """One row per rollout step; Sinkhorn cells are empty where skipped."""
        sk = dict(zip(self.sinkhorn_steps, self.sinkhorn_per_step))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "mse", "sinkhorn", "e_kin_pred", "e_kin_ref"])
            for k in range(self.num_steps):
                step = k + 1
                w.writerow(
                    [
                        step,
                        repr(self.mse_per_step[k]),
                        repr(sk[step]) if step in sk else "",
                        repr(self.e_kin_pred[k]) if k < len(self.e_kin_pred) else "",
                        repr(self.e_kin_ref[k]) if k < len(self.e_kin_ref) else "",
                    ]
                )


def evaluate_rollout(
    pred,
    ref,
    domain: Domain,
    *,
    last_input=None,
    types=None,
    masses=1.0,
    frame_dt: float = 1.0,
    mse_steps: Sequence[int] = DEFAULT_MSE_STEPS,
    sinkhorn_every: int = 1,
    sinkhorn_max_particles: Optional[int] = None,
    sinkhorn_epsilon_factor: float = SINKHORN_EPS_FACTOR,
    sinkhorn_max_iters: int = SINKHORN_MAX_ITERS,
    sinkhorn_tol: float = SINKHORN_TOL,
    sinkhorn_periodic: bool = True,
    seed: int = 0,
) -> RolloutReport:
    """Score predicted steps ``[n, N, dim]`` against the reference.

    ``last_input`` is the final frame fed to the model; it anchors the
    finite-difference energy of the first step. ``sinkhorn_every = 0``
    disables the Sinkhorn measure; ``sinkhorn_max_particles`` evaluates it
    on a fixed random subset of fluid particles.
    """
    pred, ref = _check_pair(pred, ref)
    n = pred.shape[0]
    config = {
        "mse_steps": list(mse_steps),
        "sinkhorn_every": sinkhorn_every,
        "sinkhorn_max_particles": sinkhorn_max_particles,
        "sinkhorn_epsilon": sinkhorn_epsilon_factor * domain.diagonal**2,
        "sinkhorn_max_iters": sinkhorn_max_iters,
        "sinkhorn_tol": sinkhorn_tol,
        "sinkhorn_periodic": sinkhorn_periodic,
        "sinkhorn_debiased": True,
        "frame_dt": frame_dt,
    }
    report = RolloutReport(config=config)
    if n == 0:
        return report
    mask = None if types is None else np.asarray(types) == FLUID
    per_step = mse_per_step(pred, ref, domain, mask)
    report.mse_per_step = per_step.tolist()
    report.mse_n = {k: float(np.mean(per_step[:k])) for k in mse_steps if k <= n}

    if last_input is not None:
        anchor = np.asarray(last_input, dtype=np.float64)[None]
        ek_p = kinetic_energy_series(np.concatenate([anchor, pred]), masses, domain, frame_dt, mask)
        ek_r = kinetic_energy_series(np.concatenate([anchor, ref]), masses, domain, frame_dt, mask)
    else:
        ek_p = kinetic_energy_series(pred, masses, domain, frame_dt, mask)
        ek_r = kinetic_energy_series(ref, masses, domain, frame_dt, mask)
    report.e_kin_pred = ek_p.tolist()
    report.e_kin_ref = ek_r.tolist()
    report.mse_e_kin = mse_e_kin(ek_p, ek_r)

    if sinkhorn_every > 0:
        idx = np.arange(pred.shape[1]) if mask is None else np.flatnonzero(mask)
        if sinkhorn_max_particles is not None and idx.size > sinkhorn_max_particles:
            rng = np.random.default_rng(seed)
            idx = np.sort(rng.choice(idx, sinkhorn_max_particles, replace=False))
        eps = config["sinkhorn_epsilon"]
        for k in range(sinkhorn_every - 1, n, sinkhorn_every):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SinkhornConvergenceWarning)
                value, res = sinkhorn_distance(
                    pred[k, idx],
                    ref[k, idx],
                    domain,
                    eps,
                    sinkhorn_max_iters,
                    sinkhorn_tol,
                    periodic=sinkhorn_periodic,
                    return_details=True,
                )
            report.sinkhorn_steps.append(k + 1)
            # the debiased value can dip below zero by solver tolerance
            report.sinkhorn_per_step.append(max(float(value), 0.0))
            report.sinkhorn_converged.append(all(r.converged for r in res.values()))
    return report


def aggregate_reports(reports: Sequence[RolloutReport]) -> dict:
    """Mean of each headline number over several rollouts."""
    if not reports:
        return {}
    keys = sorted({k for r in reports for k in r.mse_n})
    out = {f"mse_{k}": float(np.mean([r.mse_n[k] for r in reports if k in r.mse_n])) for k in keys}
    out["sinkhorn"] = float(np.mean([r.sinkhorn for r in reports]))
    out["mse_e_kin"] = float(np.mean([r.mse_e_kin for r in reports]))
    out["num_rollouts"] = len(reports)
    return out
