# %% [markdown]
# # Measured convergence bound on a quadratic task
#
# Each client minimizes 0.5 ||w - x_i||^2 for its own optimum x_i, so the
# global gradient is exact and the smoothness constant is 1. We record the
# squared global gradient norm at every version and compare its running
# average with the bound computed from constants measured along the run.

# %%
from aflbench.analysis import convergence_bound, empirical_grad_norm_average, measure_bound_inputs
from aflbench.config import load, to_sim_config
from aflbench.engine import initial_parameters, prepare_data, run_simulation

cfg = to_sim_config(load("configs/quadratic.json"), seed=0)
data = prepare_data(cfg)
w0 = initial_parameters(cfg)
log = run_simulation(cfg, data, w0)

# %%
for T in (200, 500, 1000, 2000):
    inputs = measure_bound_inputs(cfg, data, log, w0, T=T)
    terms = convergence_bound(inputs)
    print(f"T={T:5d}  average {empirical_grad_norm_average(log, T):9.4f}  bound {terms.total:10.2f}  "
          f"(terms {terms.term1:.2f}, {terms.term2:.2f}, {terms.term3:.4f}, {terms.term4:.2f})")

# %% [markdown]
# The bound holds with a wide margin. Its staleness terms do not shrink
# with T and dominate at this scale, while the measured average keeps
# falling as the iterates approach the minimizer.
