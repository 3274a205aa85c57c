"""Benchmark harness: episodes, reports, option ranking and the CLI."""
