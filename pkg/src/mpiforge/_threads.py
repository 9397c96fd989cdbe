"""Worker-thread count for the compiled kernels.

Resolution order: explicit set_threads (the CLI flag), the
MPIFORGE_THREADS environment variable, then the CPU count.  Kernel
results do not depend on the count; it only sets the parallel width.
"""

from __future__ import annotations

import os

_explicit = None


def set_threads(n) -> None:
    """Pin the kernel thread count; ``None`` reverts to env/auto."""
    global _explicit
    if n is not None:
        n = int(n)
        if n < 1:
            raise ValueError("thread count must be >= 1")
    _explicit = n


def get_threads() -> int:
    if _explicit is not None:
        return _explicit
    env = os.environ.get("MPIFORGE_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError("MPIFORGE_THREADS must be an integer, got %r" % env)
        if n < 1:
            raise ValueError("MPIFORGE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1
