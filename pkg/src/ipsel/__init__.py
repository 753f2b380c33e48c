"""Memory-bounded patch selection and cross-attention aggregation.

Subpackages:
  grad       tensor engine with reverse-mode differentiation and byte ledger
  data       patch tiling, synthetic multi-digit benchmark, positional codes
  model      shared patch encoder and cross-attention transformer aggregator
  selection  streaming top-M patch selection under three loading strategies
  baselines  gated-attention MIL, top-logit MIL, random selection, plain CNN
  harness    training loop, optimizer, benchmarks, CLI
"""

__version__ = "0.1.0"
