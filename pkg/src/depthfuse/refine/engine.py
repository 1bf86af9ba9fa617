"""Row-tiled propagation stencil.

Each step reads the previous state (replicate-padded) and writes a fresh
buffer, so tiles never race. Every pixel is summed in the same fixed order
regardless of how rows are split across workers, which makes the result
bitwise independent of the thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def _step_rows(padded, nbr, center, phi, sparse, valid, prop_out, state_out, r, row0, row1):
    width = prop_out.shape[1]
    for y in range(row0, row1):
        for x in range(width):
            acc = center[y, x] * padded[y + r, x + r]
            j = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    acc += nbr[j, y, x] * padded[y + r + dy, x + r + dx]
                    j += 1
            prop_out[y, x] = acc
            if valid[y, x]:
                p = phi[y, x]
                state_out[y, x] = (1.0 - p) * acc + p * sparse[y, x]
            else:
                state_out[y, x] = acc


@njit(cache=True)
def _step_backward(prev, nbr, center, gprop, r, gprev, gnbr, gcenter):
    height, width = prev.shape
    for y in range(height):
        for x in range(width):
            g = gprop[y, x]
            if g == 0.0:
                continue
            gcenter[y, x] += g * prev[y, x]
            gprev[y, x] += g * center[y, x]
            j = 0
            for dy in range(-r, r + 1):
                yy = min(max(y + dy, 0), height - 1)
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        continue
                    xx = min(max(x + dx, 0), width - 1)
                    gnbr[j, y, x] += g * prev[yy, xx]
                    gprev[yy, xx] += g * nbr[j, y, x]
                    j += 1


def embed(depth: np.ndarray, phi: np.ndarray, sparse: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.where(valid, (1.0 - phi) * depth + phi * sparse, depth)


class PropagationEngine:
    """Runs propagation steps over row tiles on a fixed-size worker pool."""

    def __init__(self, threads: int = 1, tile_rows: int | None = None):
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        self.threads = int(threads)
        self.tile_rows = tile_rows
        self._pool = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _tiles(self, height: int) -> list[tuple[int, int]]:
        rows = self.tile_rows or max(1, math.ceil(height / (4 * self.threads)))
        return [(r0, min(r0 + rows, height)) for r0 in range(0, height, rows)]

    def step(self, state, nbr, center, phi, sparse, valid, kernel: int):
        """One propagate-then-embed step on a single (h, w) image.

        Returns ``(propagated, embedded)``.
        """
        r = kernel // 2
        padded = np.pad(state, r, mode="edge")
        prop = np.empty_like(state)
        out = np.empty_like(state)
        tiles = self._tiles(state.shape[0])
        if self._pool is None or len(tiles) == 1:
            _step_rows(padded, nbr, center, phi, sparse, valid, prop, out, r, 0, state.shape[0])
        else:
            futures = [self._pool.submit(_step_rows, padded, nbr, center, phi, sparse, valid,
                                         prop, out, r, r0, r1) for r0, r1 in tiles]
            for f in futures:
                f.result()
        return prop, out

    def run_branch(self, coarse, nbr, center, phi, sparse, valid, kernel: int, steps: int):
        """Propagate one kernel branch for ``steps`` iterations.

        Arrays are (n, h, w) except ``nbr`` which is (n, k*k-1, h, w).
        Returns ``states`` (n, steps+1, h, w) and ``props`` (n, steps, h, w);
        ``states[:, 0]`` is the coarse map after one embedding.
        """
        coarse = np.ascontiguousarray(coarse, dtype=np.float64)
        nbr = np.ascontiguousarray(nbr, dtype=np.float64)
        center = np.ascontiguousarray(center, dtype=np.float64)
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        sparse = np.ascontiguousarray(sparse, dtype=np.float64)
        valid = np.ascontiguousarray(valid, dtype=np.bool_)
        n, h, w = coarse.shape
        states = np.empty((n, steps + 1, h, w))
        props = np.empty((n, steps, h, w))
        for b in range(n):
            states[b, 0] = embed(coarse[b], phi[b], sparse[b], valid[b])
            for t in range(1, steps + 1):
                props[b, t - 1], states[b, t] = self.step(
                    states[b, t - 1], nbr[b], center[b], phi[b], sparse[b], valid[b], kernel)
        return states, props


def branch_backward(coarse, states, props, nbr, center, phi, sparse, valid, kernel: int, state_grads):
    """Adjoint of :meth:`PropagationEngine.run_branch`.

    ``state_grads`` is (n, steps+1, h, w): the loss gradient arriving directly
    at each recorded state. Returns gradients for (coarse, nbr, center, phi).
    """
    n, steps_p1, h, w = states.shape
    r = kernel // 2
    g_coarse = np.zeros((n, h, w))
    g_nbr = np.zeros(nbr.shape)
    g_center = np.zeros((n, h, w))
    g_phi = np.zeros((n, h, w))
    for b in range(n):
        carry = np.zeros((h, w))
        keep = np.where(valid[b], 1.0 - phi[b], 1.0)
        for t in range(steps_p1 - 1, 0, -1):
            g_state = carry + state_grads[b, t]
            g_phi[b] += np.where(valid[b], g_state * (sparse[b] - props[b, t - 1]), 0.0)
            g_prop = np.ascontiguousarray(g_state * keep)
            carry = np.zeros((h, w))
            _step_backward(states[b, t - 1], nbr[b], center[b], g_prop, r, carry, g_nbr[b], g_center[b])
        g_state = carry + state_grads[b, 0]
        g_phi[b] += np.where(valid[b], g_state * (sparse[b] - coarse[b]), 0.0)
        g_coarse[b] = g_state * keep
    return g_coarse, g_nbr, g_center, g_phi
