"""Gain term of the binned coagulation generator.

For cell ``i`` and bins ``a, b`` the pair rate is ``0.5 K[a, b] G[i, a] P[i, b]``;
the merged type is split between pivots ``lo[a, b]`` and ``lo[a, b] + 1`` with
weights ``wlo``/``whi`` that conserve number and mass.
"""
import numpy as np

from .._accel import USE_NUMBA, njit


@njit
def gain_loops(G, P, K, lo, wlo, whi):
    ncell, nb = G.shape
    out = np.zeros((ncell, nb))
    for i in range(ncell):
        for a in range(nb):
            ga = G[i, a]
            if ga == 0.0:
                continue
            for b in range(nb):
                r = 0.5 * K[a, b] * ga * P[i, b]
                if r == 0.0:
                    continue
                k = lo[a, b]
                out[i, k] += r * wlo[a, b]
                if k + 1 < nb:
                    out[i, k + 1] += r * whi[a, b]
    return out


@njit
def dual_gain_loops(F, P, K, lo, wlo, whi):
    # transpose of gain_loops: value of f at the merged type, weighted by rate
    ncell, nb = F.shape
    out = np.zeros((ncell, nb))
    for i in range(ncell):
        for a in range(nb):
            acc = 0.0
            for b in range(nb):
                k = lo[a, b]
                fv = wlo[a, b] * F[i, k]
                if k + 1 < nb:
                    fv += whi[a, b] * F[i, k + 1]
                acc += 0.5 * K[a, b] * P[i, b] * fv
            out[i, a] = acc
    return out


def scatter_matrix(lo, wlo, whi):
    """``(nb*nb, nb)`` matrix sending pair ``(a, b)`` to its pivot split."""
    nb = lo.shape[0]
    S = np.zeros((nb * nb, nb))
    rows = np.arange(nb * nb)
    flat = lo.ravel()
    S[rows, flat] += wlo.ravel()
    up = flat + 1 < nb
    S[rows[up], flat[up] + 1] += whi.ravel()[up]
    return S


def gain_numpy(G, P, K, S):
    ncell, nb = G.shape
    pairs = 0.5 * K[None, :, :] * G[:, :, None] * P[:, None, :]
    return pairs.reshape(ncell, nb * nb) @ S


def dual_gain_numpy(F, P, K, S):
    ncell, nb = F.shape
    fm = (F @ S.T).reshape(ncell, nb, nb)
    return 0.5 * np.einsum("ab,ib,iab->ia", K, P, fm)


class BinGain:
    """Dispatches the gain computation to the compiled or numpy path."""

    def __init__(self, lo, wlo, whi, use_numba=None):
        self.lo = np.ascontiguousarray(lo, dtype=np.int64)
        self.wlo = np.ascontiguousarray(wlo, dtype=float)
        self.whi = np.ascontiguousarray(whi, dtype=float)
        self.use_numba = USE_NUMBA if use_numba is None else use_numba
        self.S = None if self.use_numba else scatter_matrix(self.lo, self.wlo, self.whi)

    def gain(self, G, P, K):
        if self.use_numba:
            return gain_loops(np.ascontiguousarray(G), np.ascontiguousarray(P), K,
                              self.lo, self.wlo, self.whi)
        return gain_numpy(G, P, K, self.S)

    def dual_gain(self, F, P, K):
        if self.use_numba:
            return dual_gain_loops(np.ascontiguousarray(F), np.ascontiguousarray(P), K,
                                   self.lo, self.wlo, self.whi)
        if self.S is None:
            self.S = scatter_matrix(self.lo, self.wlo, self.whi)
        return dual_gain_numpy(F, P, K, self.S)
