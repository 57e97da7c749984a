# %% [markdown]
# # Simulated staleness against the closed form
#
# The event engine can run with no-op training, which makes it a pure
# queueing simulation. We compare the mean staleness each agent observes
# against the closed-form expectation.

# %%
import numpy as np

from aflbench.engine import staleness_monte_carlo
from aflbench.mechanism import expected_staleness

rng = np.random.default_rng(0)
rates = rng.uniform(0.5, 4.0, 8)
for b in (1, 2, 5):
    mc = staleness_monte_carlo(rates, b, "constant", 10_000, seed=1)
    ex = np.array([expected_staleness(rates, i, b) for i in range(rates.size)])
    print(f"b={b}: worst relative error {np.max(np.abs(mc - ex) / ex):.3%}")

# %% [markdown]
# Exponential delays (memoryless arrivals) agree as well:

# %%
mc = staleness_monte_carlo([0.5, 1.0, 2.0, 3.0], 2, "exponential", 20_000, seed=3)
print(mc.round(2), [round(expected_staleness([0.5, 1.0, 2.0, 3.0], i, 2), 2) for i in range(4)])

# %% [markdown]
# One caveat: equal constant delays with b equal to the number of agents
# march in lockstep: every buffer holds exactly one update per agent, the
# tie-break rule fixes who pulls before the aggregation, and staleness is a
# deterministic [1, 1, 0] instead of the closed form's 2/3 for everyone. The
# closed form describes an average over arrival phases, which this resonant
# case never explores.

# %%
print(staleness_monte_carlo([1.0, 1.0, 1.0], 3, "constant", 3000))
