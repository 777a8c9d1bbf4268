"""Simulate two surveys, one of them biased, fit the joint model and map
prevalence on a coarse grid.

Run with ``python demos/quickstart.py``; takes about a minute.
"""
import numpy as np

from multiprev.mcml import MCMLConfig, asymptotic_covariance, fit, format_report
from multiprev.predict import PredictionGrid, predict, summarize
from multiprev.sampler import ChainConfig
from multiprev.simstudy import qv, simulate_dataset

chain = ChainConfig(n_iter=6000, burnin=1000, thin=5)
scenario = qv(nu2=1.0, n=80)
data, _ = simulate_dataset(scenario, np.random.default_rng(1))
print(f"{len(data)} records in {data.n_surveys} surveys, biased: {data.biased}")

result = fit(data, scenario.spec, config=MCMLConfig(chain=chain, n_starts=1, seed=2))
ac = asymptotic_covariance(result, method="laplace")
intervals = {n: ac.natural_interval(n) for j, n in enumerate(ac.natural_names)
             if ac.cov_natural[j, j] > 0}
print(format_report(result, intervals))

xs = np.linspace(0.1, 0.9, 5)
pts = np.array([(x, y) for y in xs for x in xs])
grid = PredictionGrid(pts, np.ones((len(pts), 1)), target_survey=0, include_nugget=False)
surface = predict(result, grid, chain=chain, seed=3)
print(summarize(surface, thresholds=[0.5, 0.75]).round(3).to_string(index=False))
