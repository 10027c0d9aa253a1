"""
The forward diffusion in the STFT domain
========================================

Clean speech is turned into noise by an Ornstein-Uhlenbeck style SDE whose
diffusion grows geometrically from sigma_min to sigma_max.  Its perturbation
kernel is Gaussian with mean delta_t * s and a closed-form variance.  Here we
print the schedule and check it against a brute-force simulation.
"""
import numpy as np

from udiffse.sde import DiffusionSchedule, perturb, simulate_forward

sched = DiffusionSchedule()  # gamma 1.5, sigma 0.05 -> 0.5, N = 30
print(f"{'t':>5} {'delta':>8} {'sigma^2':>10} {'g':>8}")
for t in np.linspace(0, 1, 6):
    print(f"{t:5.2f} {sched.delta(t):8.4f} {sched.sigma_sq(t):10.6f} {sched.g(t):8.4f}")

# One clean bin pushed forward to t = 1, many times over.
rng = np.random.default_rng(0)
s0 = np.array([0.8 - 0.3j])
paths = simulate_forward(s0, 1.0, sched, rng, n_substeps=1000, n_trials=5000)[:, 0]
print("\nsimulated mean     ", paths.mean().round(4), " kernel mean    ", (sched.delta(1.0) * s0[0]).round(4))
print("simulated variance ", round(float(np.var(paths)), 5), "    kernel variance", round(float(sched.sigma_sq(1.0)), 5))

# The kernel can also be sampled directly, which is what training uses.
direct = np.array([perturb(s0, 1.0, sched, rng)[0] for _ in range(5000)])
print("direct-draw variance", round(float(np.var(direct)), 5))
