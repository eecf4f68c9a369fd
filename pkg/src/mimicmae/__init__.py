"""Desk-scale masked autoencoder pretraining with encoder-side feature mimicking.

Student encoders learn from two targets at once: a frozen teacher's patch
features regressed from the visible tokens right after the encoder, and raw
pixels of the masked tokens reconstructed after a light decoder. Everything
runs on a small numpy tensor core with reverse-mode autodiff so each piece is
gradient-checkable.
"""

import os as _os

# Sequential kernels by default: the matrices here are tiny, threaded BLAS
# pools only add contention, and bitwise reproducibility is a contract.
# Respects explicit overrides; must run before numpy first loads.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
