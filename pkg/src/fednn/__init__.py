"""Federated nearest-neighbor translation memories at desk scale.

Clients build encrypted key-value memories from a pluggable sequence
model, a server aggregates them in a single round, and clients decode
with an adaptive kNN-augmented ensemble.  Includes FedAvg/FT-Ensemble
baselines, communication-cost accounting and a privacy-leakage harness.
"""

__version__ = "0.1.0"
