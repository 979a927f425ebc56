import zlib

import numpy as np


KERNEL_ASSEMBLY = "kernel-assembly"
KERNEL_SPLIT = "kernel-split"
GEOMETRY_SAMPLING = "geometry-sampling"
COERCIVITY_PROBES = "coercivity-probes"
VERIFY = "verify"


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named substream of the run seed.

    The name is hashed with crc32 so the stream does not depend on python's salted str hash.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
