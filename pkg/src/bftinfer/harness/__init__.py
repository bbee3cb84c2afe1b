"""Simulation harness: network, faults, workloads, scenarios and experiments."""
