# %% [markdown]
# # Fast and slow agents with disjoint labels
#
# Ten fast agents hold labels 4-9, five slow agents hold labels 0-3. With
# uniform buffered averaging the slow agents' labels are under-represented
# in the aggregate. Staleness-based fair weights restore their share.

# %%
from aflbench.analysis import fairness_metrics
from aflbench.engine import fairness_config, prepare_data, run_simulation

logs = {}
for strategy in ("fedstaleweight", "fedavg"):
    cfg = fairness_config(strategy, master_seed=0, total_aggregations=1000)
    data = prepare_data(cfg)
    log = logs[strategy] = run_simulation(cfg, data)
    rep = fairness_metrics(log, cfg.task, log.final_params, data.holdout, data.fast_labels, data.slow_labels)
    print(f"{strategy:15s} global {rep.final_global_acc:.3f}  fast {rep.final_fast_acc:.3f}  "
          f"slow {rep.final_slow_acc:.3f}  rounds to 0.8: {rep.agg_rounds_to_target}")

# %% [markdown]
# Both runs share the same seed, so data partition, initialization and
# every delay draw are identical. Only the aggregation weights differ.
#
# The accuracy curves are in the metrics logs; every hundredth aggregation:

# %%
for strategy, log in logs.items():
    print(f"{strategy:15s}", log.column("global_test_accuracy")[99::100].round(3))

# %% [markdown]
# The same comparison over several seeds is one command:
#
#     aflbench compare configs/fairness.json --out-dir out/fairness --jobs 4
