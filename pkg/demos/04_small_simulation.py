"""A reduced Monte Carlo study: 100 replicates of the log odds-product design.

The full acceptance run uses 1000 replicates. Here the table shows bias,
Monte Carlo SE, SD accuracy and Wald coverage per estimator and scenario.
Scenario names: bth (both plug-in models correct), psc (only propensity
correct), orc (only outcome nuisance correct), bad (neither).
"""

from relrisk import run_study, logop_design

res = run_study(logop_design("rr", n=500), reps=100, seed=1)
print(res.table().round(3).to_string())
