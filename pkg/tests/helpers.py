"""Shared test helpers: random networks and finite-difference jets."""

import numpy as np

from liqhjb import net as nn

BOX_LO = (0.1, 0.0, 0.0)
BOX_HI = (8.0, 2.0, 1.0)


def random_net(seed, hidden=16, head="linear", scale=1.0):
    rng = np.random.default_rng(seed)
    net = nn.init(hidden, seed, BOX_LO, BOX_HI, head=head)
    net.b1[:] = rng.normal(0.0, 0.5, hidden)
    net.b2 = np.asarray(rng.normal())
    net.W1 *= scale
    return net


def random_points(seed, n):
    rng = np.random.default_rng(seed)
    return rng.uniform(BOX_LO, BOX_HI, size=(n, 3))


def fd_jet(f, x, h=1e-3):
    """Central differences with one Richardson step: returns (W, L, t, WW, LL, WL) at one point."""

    def once(h):
        e = np.eye(3) * h
        f0 = f(x)
        d1 = [(f(x + e[i]) - f(x - e[i])) / (2 * h) for i in range(3)]
        d2 = [(f(x + e[i]) - 2 * f0 + f(x - e[i])) / h**2 for i in range(2)]
        wl = (f(x + e[0] + e[1]) - f(x + e[0] - e[1]) - f(x - e[0] + e[1]) + f(x - e[0] - e[1])) / (4 * h * h)
        return np.array(d1 + d2 + [wl])

    return (4 * once(h / 2) - once(h)) / 3
