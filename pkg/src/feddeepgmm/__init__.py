"""Federated DeepGMM: instrumental-variable regression as a federated minimax game.

Modules: ``nn`` (flat-vector MLPs), ``data`` (IV scenarios and client
partitions), ``objective`` (the client game), ``optim`` and ``federation``
(FedGDA), ``diagnostics`` (curvature certificates), ``experiment`` and
``cli`` (runs and reports).
"""
__version__ = "0.1.0"
