"""Capability-balanced distillation of privileged navigation experts into a
depth-window student, on a planar omnidirectional simulator."""
import os as _os

# CAPNAV_THREADS caps BLAS threading; unset or 0 means the single-threaded
# deterministic preset. Must run before numpy is first imported.
_threads = _os.environ.get("CAPNAV_THREADS", "0").strip() or "0"
_n = str(max(1, int(_threads))) if _threads.isdigit() else "1"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    if _threads != "0" or _var not in _os.environ:
        _os.environ[_var] = _n

__version__ = "0.1.0"
