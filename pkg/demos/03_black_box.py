"""
Black-box search on the same problem
====================================

Here the simulator is treated as an opaque function: propose (K, c), roll
out, and compare with a recorded trajectory.
"""

# %%
from rodspring import blackbox, presets
from rodspring.sim import rollout, sample_dataset

config = presets.simple()
data = sample_dataset(config, None, n_traj=3, n_steps=10, seed=5)
reference = rollout(data.initial_state(0), config, None, 500)

# %%
# Known mass: search (K, c) in [0.1, 1000] from an initial guess of 1.
space, to_params = blackbox.known_mass_map(config, mass=10.0)
loss = blackbox.make_loss(reference, config, to_params)
cma = blackbox.cma_es(loss, space, blackbox.CmaConfig(seed=0))
ls = blackbox.local_search(loss, space)
for name, res in (("CMA-ES", cma), ("L-BFGS-B", ls)):
    print(f"{name:>9}: K={res.x[0]:8.3f} c={res.x[1]:7.3f} loss={res.loss:.2e} "
          f"iters={len(res.history)} ({res.stop_reason[:40]})")

# %%
# Free mass: scaling (K, c, M) together leaves every trajectory unchanged,
# so the search lands on some point of a line of perfect fits.
space, to_params = blackbox.free_mass_map(config)
loss = blackbox.make_loss(rollout(data.initial_state(0), config, None, 150), config, to_params)
for seed in (0, 3):
    res = blackbox.cma_es(loss, space, blackbox.CmaConfig(seed=seed, tol=1e-3, max_iter=300))
    K, c, M = res.x
    print(f"seed {seed}: K={K:.1f} c={c:.2f} M={M:.2f}  K/M={K / M:.4f} c/M={c / M:.4f} loss={res.loss:.1e}")
