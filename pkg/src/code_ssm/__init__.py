"""
code-ssm: a bidirectional gated state-space encoder for source code.

This package provides a numpy autodiff core, diagonal SSM kernels with FFT
convolution, the gated encoder and its ablation variants, masked-LM
pretraining, downstream task heads and metrics, and a memory/throughput
benchmark against a reference attention layer.
"""

__version__ = "0.1.0"
__author__ = "code-ssm developers"
