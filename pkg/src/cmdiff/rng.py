"""Named random sub-streams derived from one user seed."""

import numpy as np
import torch

STREAMS = {"data": 1, "init": 2, "train": 3, "sampling": 4}


def substream_seed(seed: int, name: str) -> int:
    ss = np.random.SeedSequence([int(seed), STREAMS[name]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def numpy_rng(seed: int, name: str):
    return np.random.default_rng(substream_seed(seed, name))


def torch_generator(seed: int, name: str):
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, name))
    return g
