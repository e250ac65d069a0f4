"""Diversity-inducing self-supervised pretraining on patch-tokenized images.

Small, CPU-only reference implementation: a pre-norm transformer encoder over
image patches, a cell-prior pooling and masked-attention disentanglement
stage, momentum self-distillation training, attention-sparsity profiling, and
a dual-stream multiple-instance head for downstream bag classification.
"""

import os as _os

# DIRL_THREADS caps worker parallelism. BLAS pools size themselves from the
# environment at import time, so this must run before numpy loads.
_cap = _os.environ.get("DIRL_THREADS", "")
if _cap.isdigit() and int(_cap) >= 1:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

__version__ = "0.1.0"
