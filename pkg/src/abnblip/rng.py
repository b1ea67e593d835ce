"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(root_seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(root_seed, name, *keys)``.

    Streams with different names never share state, so re-seeding one
    component (say, ``shuffle``) leaves the others untouched.
    """
    return np.random.default_rng([int(root_seed), stream_key(name), *map(int, keys)])


def derive_seed(root_seed: int, name: str, *keys: int) -> int:
    ss = np.random.SeedSequence([int(root_seed), stream_key(name), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
