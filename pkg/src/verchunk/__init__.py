"""Chunked multi-version record store."""
from .model import (CompositeKey, Delta, DeltaError, GraphError, Record, SignedDelta, VersionGraph,
                    VersionTree, apply_delta, dag_to_tree, materialize, materialize_all)

__all__ = [
    "CompositeKey", "Delta", "DeltaError", "GraphError", "Record", "SignedDelta", "VersionGraph",
    "VersionTree", "apply_delta", "dag_to_tree", "materialize", "materialize_all",
]
