"""STair Network: stair-shaped atrous blocks, multi-stage wiring, cost model and harness."""
__version__ = "0.1.0"
