"""Process-level allocator tuning for the training loop.

Each step allocates dozens of ~1 MB temporaries. glibc serves blocks that
size with fresh ``mmap`` calls and unmaps them on free, so every step pays
page faults. Raising the mmap and trim thresholds keeps them on the heap.
"""
import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold: int = 256 * 1024 * 1024) -> bool:
    """Best effort; returns False where glibc ``mallopt`` is unavailable."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) == 1 and libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold) == 1
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
