"""Learning proxy optimizers for problems constrained by differential equations."""
import os as _os

# cap BLAS threads before numpy is first imported
if "DEOP_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DEOP_THREADS"])

__version__ = "0.1.0"
