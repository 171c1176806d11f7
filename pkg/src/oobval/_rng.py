"""Named substreams of a single master seed.

Every random choice in the package flows from one 64-bit seed through
substreams keyed by (tag, index...) so that components can be re-run in
isolation and results never depend on execution order or worker count.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_to_int(tag):
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(tag) & _MASK64


def substream(master_seed, *tags):
    """Return a Generator for the substream (master_seed, *tags).

    Tags may be strings (hashed stably) or integers. Identical arguments
    always produce an identical stream.
    """
    entropy = [int(master_seed) & _MASK64]
    entropy.extend(_tag_to_int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(master_seed, *tags):
    """A single uint64 drawn from the named substream (for seeding kernels)."""
    return int(substream(master_seed, *tags).integers(0, 1 << 64, dtype=np.uint64))
