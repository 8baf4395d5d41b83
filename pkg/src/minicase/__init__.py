"""minicase: a desk-scale tensor-graph optimizing compiler.

Equality saturation over a typed e-graph drives layout and distribution
search; exact extraction, MCTS + MINLP scheduling, and bin-packing memory
planning complete the pipeline, with a dense reference interpreter proving
every transformation semantics-preserving.
"""

__version__ = "0.1.0"
