"""Process-level runtime tuning for the numeric hot path.

Two effects matter on small multicore boxes:

* OpenBLAS worker threads spin-wait after every GEMM and starve the OpenMP
  threads of the compiled kernels, so BLAS is pinned to one thread (our
  GEMMs are small; the conv kernels own the parallelism).
* glibc serves multi-megabyte numpy buffers via mmap and returns them to
  the kernel on free, so every graph rebuild pays page-fault costs; raising
  the mmap/trim thresholds keeps those buffers on the reusable heap.

Call `configure()` before heavy work; it is idempotent and safe to call
late (after numpy import) because it falls back to the OpenBLAS runtime
API when the environment variable would no longer be honored.
"""

import ctypes
import ctypes.util
import os
import sys

_done = False

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def _openblas_candidates():
    import glob

    import numpy
    root = os.path.dirname(os.path.dirname(numpy.__file__))
    for pattern in ("numpy.libs/*openblas*.so*", "numpy/.libs/*openblas*.so*",
                    "scipy_openblas64/lib/*.so*"):
        yield from sorted(glob.glob(os.path.join(root, pattern)))


def _set_openblas_threads(n):
    if "numpy" not in sys.modules:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(n))
        return
    for path in list(_openblas_candidates()) + [None]:
        try:
            lib = ctypes.CDLL(path)
        except OSError:
            continue
        for sym in ("openblas_set_num_threads64_", "openblas_set_num_threads"):
            setter = getattr(lib, sym, None)
            if setter is not None:
                setter(ctypes.c_int(n))
                return


def configure(blas_threads=1):
    """Tune thread policies and the allocator; returns quietly on failure."""
    global _done
    if _done:
        return
    _done = True
    os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")
    _set_openblas_threads(blas_threads)
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError):
        pass
