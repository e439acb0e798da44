"""Desk-scale lab for cooperative downlink beamforming.

Submodules:

- ``numerics``   tape-based reverse-mode differentiation on flat tensors
- ``scenario``   network layouts, Rayleigh channels, instance normalization
- ``objective``  SINR, sum rate, per-BS power accounting and projection
- ``baselines``  WMMSE and projected-gradient solvers
- ``edge_gnn``   bipartite GNN with node- and edge-update layers
- ``trainer``    unsupervised RMSProp training on the sum-rate objective
- ``cli``        experiment front end (generate/train/baseline/sweep/verify/evaluate)
"""

__version__ = "0.1.0"
