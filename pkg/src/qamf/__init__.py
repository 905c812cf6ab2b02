"""Quality-aware multimodal fusion on synthetic identity data.

A small numpy-based library implementing quality-weighted set fusion with
two aggregation blocks, angular-margin training losses with hyperspherical
weight regularization, an SGD training loop, and verification /
identification metrics, plus a `qamf` experiment CLI.
"""

__version__ = "0.1.0"
