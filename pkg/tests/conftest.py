import numpy as np

from dualprec import (VIRTUAL_UPLINK, SystemDims, build_effective_channel,
                      gen_channel, random_unit_precoders)

DIMS_2x2 = SystemDims(M=4, K=2, N=(2, 2), L=(2, 2))


def rand_instance(seed, dims=DIMS_2x2, sigma2=1.0, p_max=10.0):
    """Channel + seeded random uplink precoders + effective channel."""
    ch = gen_channel(dims, sigma2, p_max, seed=seed)
    up = random_unit_precoders(dims, VIRTUAL_UPLINK, seed=[seed, 1])
    eff = build_effective_channel(ch, up)
    return ch, up, eff


def scalar_instance(p_max=3.0, sigma2=1.0):
    """M = K = N = L = 1 with H = 1: everything reduces to closed forms."""
    from dualprec import ChannelSet

    dims = SystemDims(M=1, K=1, N=(1,), L=(1,))
    ch = ChannelSet(dims=dims, H=(np.array([[1.0 + 0j]]),), sigma2=sigma2,
                    p_max=p_max)
    up = random_unit_precoders(dims, VIRTUAL_UPLINK, seed=0)
    # pin the beamformer to exactly 1 so hand algebra applies bit for bit
    up = type(up)(direction=VIRTUAL_UPLINK,
                  by_user=(np.array([[1.0 + 0j]]),), powers=up.powers)
    eff = build_effective_channel(ch, up)
    return ch, up, eff
