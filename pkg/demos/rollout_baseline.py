"""Score a constant-velocity baseline against a short generated lid-driven cavity run.

Generates 30 frames (3000 solver steps, about 25 s) and rolls the baseline
out for 20 steps from a 5-frame history.
"""

from sphbench import cases
from sphbench.rollout import HistoryWindow, ZeroAccelerationPredictor, rollout

spec = cases.get_case("ldc2d")
traj = cases.generate_trajectory(spec, seed=0, frames=30, warmup=False)
window = HistoryWindow.from_trajectory(traj, spec.domain, 5)
_, report = rollout(ZeroAccelerationPredictor(), window, 20, spec, traj.types, traj,
                    metrics_kwargs={"sinkhorn_every": 5, "sinkhorn_max_particles": 512})
for n in (5, 20):
    print(f"MSE_{n}: {report.mse_n[n]:.3e}")
print(f"Sinkhorn (mean over steps 5..20): {report.sinkhorn:.3e}")
print(f"MSE_Ekin: {report.mse_e_kin:.3e}")
