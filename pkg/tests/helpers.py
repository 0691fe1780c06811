import math

from glwalk.engine import WALK_TAG, block_size
from glwalk.rng import stream


def replay_matrices(measure, n, seed=0, replica=0, tag=WALK_TAG):
    """The matrices Y_1..Y_n a replica sees, drawn independently of the kernels."""
    gen = stream(seed, replica, tag)
    bs = block_size(measure.dim)
    mats = []
    while len(mats) < n:
        dr = measure.draw(gen, bs)
        for k in range(bs):
            mats.append(dr.mats[k] * (math.exp(dr.logscale[k]) if dr.logscale is not None else 1.0))
    return mats[:n]
