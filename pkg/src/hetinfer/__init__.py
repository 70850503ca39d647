"""Heterogeneous inference planner and simulator."""
