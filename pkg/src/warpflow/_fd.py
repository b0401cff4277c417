"""Finite differences on nonuniform 1-d grids."""
import numpy as np


_W_CACHE = {}


def _onesided_weights(x, x0, order):
    # Taylor-matching weights for a derivative at x0 from the nodes x (cached per stencil)
    key = (np.asarray(x, float).tobytes(), float(x0), order)
    w = _W_CACHE.get(key)
    if w is None:
        if len(_W_CACHE) > 4096:
            _W_CACHE.clear()
        w = _W_CACHE[key] = _solve_weights(x, x0, order)
    return w


def _solve_weights(x, x0, order):
    n = len(x)
    dx = np.asarray(x, float) - x0
    V = np.vander(dx, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = np.prod(np.arange(1, order + 1))
    return np.linalg.solve(V, rhs)


def _ghost(x, y, side, parity):
    # mirror node across the endpoint; odd data is reflected through the end value
    i0, i1 = (0, 1) if side == "left" else (-1, -2)
    xg = 2 * x[i0] - x[i1]
    yg = y[i1] if parity == "even" else 2 * y[i0] - y[i1]
    return xg, yg


def deriv(x, y, order=1, left=None, right=None):
    """Derivative of sampled data on a strictly increasing grid.

    Interior nodes use the three-point stencil. Endpoints use a mirrored
    ghost node when a parity ('even' or 'odd') is given for that end,
    otherwise a one-sided second-order stencil.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    n = len(x)
    if n < 4:
        raise ValueError("grid too short for differentiation (need at least 4 nodes)")
    xl, yl = x, y
    pad_l = left is not None
    pad_r = right is not None
    if pad_l:
        xg, yg = _ghost(x, y, "left", left)
        xl = np.concatenate(([xg], xl))
        yl = np.concatenate(([yg], yl))
    if pad_r:
        xg, yg = _ghost(x, y, "right", right)
        xl = np.concatenate((xl, [xg]))
        yl = np.concatenate((yl, [yg]))
    h1 = xl[1:-1] - xl[:-2]
    h2 = xl[2:] - xl[1:-1]
    fm, f0, fp = yl[:-2], yl[1:-1], yl[2:]
    if order == 1:
        mid = (-h2 / (h1 * (h1 + h2)) * fm + (h2 - h1) / (h1 * h2) * f0
               + h1 / (h2 * (h1 + h2)) * fp)
    else:
        mid = 2.0 * (fm / (h1 * (h1 + h2)) - f0 / (h1 * h2) + fp / (h2 * (h1 + h2)))
    out = np.empty(n)
    i0 = 0 if pad_l else 1
    i1 = n if pad_r else n - 1
    out[i0:i1] = mid
    m = order + 2
    if not pad_l:
        out[0] = _onesided_weights(x[:m], x[0], order) @ y[:m]
    if not pad_r:
        out[-1] = _onesided_weights(x[-m:], x[-1], order) @ y[-m:]
    return out


def cumtrapz0(x, y):
    """Cumulative trapezoid integral starting from zero at x[0]."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


_C4 = {1: (np.array([1.0, -8.0, 0.0, 8.0, -1.0]), 12.0),
       2: (np.array([-1.0, 16.0, -30.0, 16.0, -1.0]), 12.0),
       3: (np.array([-1.0, 2.0, 0.0, -2.0, 1.0]), 2.0)}


def deriv4_uniform(x, y, order=1, left=None, right=None):
    """Five-point derivative (orders 1-3) on a uniform grid.

    Fourth order for orders 1 and 2, second order for order 3. Ends take
    two ghost nodes by parity, or a one-sided six-node stencil.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x)
    if n < 6:
        raise ValueError("grid too short (need at least 6 nodes)")
    h = x[1] - x[0]
    if np.max(np.abs(np.diff(x) - h)) > 1e-9 * abs(h) * n:
        raise ValueError("grid is not uniform")
    if order not in _C4:
        raise ValueError("order must be 1, 2 or 3")

    def ghosts(side, parity):
        i0, idx = (0, [2, 1]) if side == "left" else (-1, [-2, -3])
        if side == "right":
            idx = [-2, -3]
        g = y[idx]
        return g if parity == "even" else 2 * y[i0] - g

    yl = y
    if left is not None:
        yl = np.concatenate((ghosts("left", left), yl))
    if right is not None:
        yl = np.concatenate((yl, ghosts("right", right)))
    w, den = _C4[order]
    mid = (w[0] * yl[:-4] + w[1] * yl[1:-3] + w[2] * yl[2:-2] + w[3] * yl[3:-1]
           + w[4] * yl[4:]) / (den * h ** order)
    out = np.empty(n)
    i0 = 0 if left is not None else 2
    i1 = n if right is not None else n - 2
    out[i0:i1] = mid
    if left is None:
        for i in (0, 1):
            out[i] = _onesided_weights(x[:6], x[i], order) @ y[:6]
    if right is None:
        for i in (-1, -2):
            out[i] = _onesided_weights(x[-6:], x[i], order) @ y[-6:]
    return out
