"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, *labels)``: a numpy
``Generator`` over the Philox4x64-10 counter-based bit generator whose 128-bit
key is the first 16 bytes of ``blake2b(repr((seed, *labels)))``.  The counter
starts at zero.  Two streams with different labels are statistically
independent, and a stream's output does not depend on which other streams were
drawn first, so worker/round randomness is independent of execution order.

Gaussian variates use numpy's documented ziggurat sampler on top of Philox.
"""

import hashlib

import numpy as np


def stream_key(seed, *labels):
    digest = hashlib.blake2b(repr((int(seed),) + tuple(labels)).encode(), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").copy()


def stream(seed, *labels):
    """Return an independent ``np.random.Generator`` keyed by ``(seed, *labels)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def derive_seed(seed, *labels):
    """A 63-bit integer seed derived from ``(seed, *labels)``."""
    return int(stream_key(seed, *labels)[0] >> np.uint64(1))
