"""Counter-based random streams.

Every draw in the pipeline comes from a Philox generator keyed by
``(global seed, stream id)`` and positioned at a counter, so results depend
only on *which* stream and step asked for numbers, never on execution order.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name):
    """Stable 32-bit id for a named stream."""
    return zlib.crc32(name.encode("utf-8"))


def rng(seed, stream, counter=0):
    """Generator for ``(seed, stream, counter)``.

    ``stream`` may be a string (hashed) or an int. Distinct counters land in
    disjoint regions of the Philox counter space.
    """
    sid = stream_id(stream) if isinstance(stream, str) else int(stream)
    key = np.array([int(seed) & _MASK64, sid & _MASK64], dtype=np.uint64)
    ctr = np.array([0, 0, int(counter) & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))
