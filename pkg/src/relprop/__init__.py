"""Relevance propagation, relevance-path analysis, and feature visualization
for small sequential CNNs (conv / relu / maxpool / flatten / linear).

The public surface lives in the submodules:

- :mod:`relprop.tensor` — float32 kernels (conv, pooling, adjoints)
- :mod:`relprop.network` — network descriptions, traces, channel masking
- :mod:`relprop.lrp` — propagation rules and relevance maps
- :mod:`relprop.graph` — channel-level relevance graphs and top-k paths
- :mod:`relprop.deconv` — mirrored reconstruction networks
- :mod:`relprop.heatmap` — heatmap extraction and PNG rendering
- :mod:`relprop.metrics` — masked-forward fidelity metrics and k sweeps
- :mod:`relprop.weights` — the LRPW tensor container format
- :mod:`relprop.imageio` — image decode, resize, normalization
- :mod:`relprop.cli` — the ``relprop`` command line driver
"""

__version__ = "0.1.0"
