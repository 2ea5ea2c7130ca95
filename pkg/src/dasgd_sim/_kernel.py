"""Staleness kernel selection.

The compiled extension is used when available; set DASGD_SIM_PURE=1 to
force the pure-Python kernel (useful for debugging and for the benchmark
comparison in bench.py).
"""

import os

if os.environ.get("DASGD_SIM_PURE"):
    from dasgd_sim._staleness_pure import StalenessKernel

    KERNEL_IMPL = "pure"
else:
    try:
        from dasgd_sim._staleness_core import StalenessKernel

        KERNEL_IMPL = "compiled"
    except ImportError:
        from dasgd_sim._staleness_pure import StalenessKernel

        KERNEL_IMPL = "pure"

__all__ = ["StalenessKernel", "KERNEL_IMPL"]
