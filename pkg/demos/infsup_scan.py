"""Discrete inf-sup constants of two stable pairs and the unstable P1-P1 control."""

from stokesdarcy import harness

for name in ("mini-rt0-2d-infsup", "br-rt0-2d-infsup", "p1p1-rt0-2d-infsup"):
    print(name)
    harness.infsup_scan(harness.load_preset(name), log=lambda s: print("  " + s))
