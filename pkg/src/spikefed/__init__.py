"""Deterministic desk-scale simulator of differentially private federated
learning over spiking networks: LIF forward simulation, surrogate-gradient
BPTT, DP-SGD with an RDP accountant, rate-aware aggregation, and a paired
ablation harness."""

__version__ = "0.1.0"
