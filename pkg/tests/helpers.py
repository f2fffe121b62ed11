"""Small spec builders shared by the tests."""

import numpy as np

from detlimit.generator import ControlSet, GeneratorSpec, JumpAtom


def zero(t, x, m, u):
    return np.zeros(x.shape[0])


def make_spec(dim=1, drift=None, diffusion=None, jumps=(), controls=None, running=None, terminal=None, name="t"):
    controls = controls or ControlSet(np.zeros((1, dim)))
    return GeneratorSpec(
        dim, controls,
        drift or (lambda t, x, m, u: np.zeros_like(x)),
        running or zero,
        terminal or (lambda x, m: np.zeros(x.shape[0])),
        diffusion, tuple(jumps), name,
    )


def const_diffusion(G):
    G = np.atleast_2d(np.asarray(G, float))
    return lambda t, x, m, u: np.broadcast_to(G, (x.shape[0],) + G.shape)


def jump(rate, y):
    return JumpAtom.constant(rate, y)
