"""A ten-replicate quality-variation study comparing the joint (J),
first-survey-only (FSO) and naive (N) analyses.

Run with ``python demos/small_simstudy.py [n_jobs]``.
"""
import sys
import warnings

from multiprev.simstudy import qv, run_scenario

n_jobs = int(sys.argv[1]) if len(sys.argv) > 1 else 1
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    mt = run_scenario(qv(nu2=1.0, n=100, n_rep=10), n_jobs=n_jobs, seed=1)
print(mt.table.round(3).to_string(index=False))
print("failed fits:", mt.n_failed)
