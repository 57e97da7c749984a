# %% [markdown]
# # Fair weights and throttling incentives
#
# Each agent reports updates at some rate. Faster agents land more updates
# in the server buffer, so with uniform weights they steer the model more.
# The fair weight multiplies each update so that every agent's long-run
# share of the aggregate is 1/n.

# %%
import numpy as np

from aflbench import mechanism as mech

rates = [1.0] * 10 + [0.1] * 5  # ten fast agents, five slow ones
b, n = 5, len(rates)
for i in (0, 10):
    e = mech.expected_staleness(rates, i, b)
    p = mech.influence(rates, i)
    w = mech.fair_weight(e, b, n)
    print(f"agent {i:2d}: influence {p:.4f}  E[staleness] {e:5.2f}  fair weight {w:.3f}  product {w * p:.4f}")

# %% [markdown]
# Slow agents see stale models, and the weight grows with expected
# staleness, exactly offsetting their lower arrival frequency.
#
# Within one buffer the weights are normalized to sum to one:

# %%
print(mech.normalized_weights([0.0, 0.0, 4.0, 9.0, 9.0], b, n).round(3))

# %% [markdown]
# ## Does throttling pay?
#
# Consider an agent that slows down on purpose. Its utility is its expected
# normalized weight times its arrival share. In a large pool of faster peers
# the derivative of utility in the agent's own rate is positive, so
# reporting the true (maximum) rate is optimal.

# %%
rates = [1.0] + [10.0] * 14
rep = mech.check_no_profitable_throttle(rates, [0, 1, 2, 3, 4], 0, np.linspace(0.05, 1.0, 20))
print("large pool: best rate", rep.best_rate, "gain", rep.max_utility_gain)

# %% [markdown]
# With only two agents and a very fast deviator the sign flips and slowing
# down is profitable, matching the sign of the derivative numerator.

# %%
rep = mech.check_no_profitable_throttle([100.0, 1.0], [0, 1], 0, np.arange(1.0, 101.0))
print("two agents: best rate", rep.best_rate, "gain", round(rep.max_utility_gain, 4),
      "derivative sign", mech.utility_derivative_sign([100.0, 1.0], [0, 1], 0))
