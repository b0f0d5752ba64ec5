"""Benchmark tasks: dynamic portfolio allocation and stability-constrained dispatch."""
