"""Convergence of the 2D manufactured solution for two element pairs.

Run with ``python demos/convergence_2d.py``; takes a few seconds.
"""

from stokesdarcy import harness

for pair in ("mini-rt0", "th2-bdm2"):
    cfg = harness.StudyConfig(pair=pair, levels=[["1/8", "1/8"], ["1/16", "1/16"], ["1/32", "1/32"]])
    record = harness.run_study(cfg)
    print(harness.to_markdown(record))
    print("least-squares slopes:", {k: round(v, 3) for k, v in record.slopes().items()})
    print()
