import numpy as np

from bprl.nn import forward_cache, unpack


def min_hidden_preactivation(arch, params, x):
    """Distance of the nearest hidden unit from its ReLU kink."""
    p = params.astype(np.float64)
    _, acts = forward_cache(arch, p, x.astype(np.float64))
    layers = unpack(arch, p)
    zs = [acts[i] @ W + b for i, (W, b) in enumerate(layers[:-1])]
    return min(float(np.abs(z).min()) for z in zs) if zs else np.inf


def _signs(arch, p, x):
    _, acts = forward_cache(arch, p, x)
    return [(acts[i] @ W + b) > 0 for i, (W, b) in enumerate(unpack(arch, p)[:-1])]


def kink_free(arch, params, x, fd_step):
    """True when no single-parameter step of +-fd_step flips any hidden ReLU."""
    p = params.astype(np.float64)
    x = x.astype(np.float64)
    base = _signs(arch, p, x)
    for k in range(p.size):
        orig = p[k]
        for step in (fd_step, -fd_step):
            p[k] = orig + step
            if any(np.any(a != b) for a, b in zip(_signs(arch, p, x), base)):
                return False
        p[k] = orig
    return True
