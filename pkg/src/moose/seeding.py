"""Seed derivation.

Every random stream in the pipeline is ``derive_rng(seed, component, index)``:
a numpy ``Generator`` seeded from the top-level seed, the CRC-32 of a
component name and an integer index. Streams therefore do not depend on the
order in which components run.
"""
import zlib

import numpy as np


def derive_seed(seed, component, index=0):
    return np.random.SeedSequence([int(seed), zlib.crc32(component.encode()), int(index)])


def derive_rng(seed, component, index=0):
    return np.random.default_rng(derive_seed(seed, component, index))
