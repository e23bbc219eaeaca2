"""Sequence-level visual KV-cache compression toolkit.

Submodules:
  kernels    dense matmul/softmax/SVD/cosine primitives
  kvmodel    binary containers (KVD1/KVC1), segmented cache, codec bundles
  keycodec   learned token retention + key reconstructor
  valuecodec token-axis PCA for values
  pipeline   prefill/decode paths with byte-traffic accounting
  analysis   redundancy, overlap, rank, and fidelity diagnostics
  memmodel   footprint formulas and break-even planning
  synth      deterministic synthetic KV / query-trace generators
  cli        command-line entry point
"""

__version__ = "0.1.0"
