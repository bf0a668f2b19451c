"""Optional numba kernels for the two byte-level hot loops.

Both kernels have pure-Python twins (in rng.py and checkpoint.py) that
produce bit-identical results; these only exist for speed. If numba is
unavailable the package still works, just slower.
"""

from __future__ import annotations

HAVE_NUMBA = False

try:
    import numpy as np
    from numba import njit, types

    @njit("void(uint64[:], uint64[:])", cache=True, nogil=True)
    def xoshiro_fill(state, out):  # pragma: no cover - exercised via rng tests
        s0 = state[0]
        s1 = state[1]
        s2 = state[2]
        s3 = state[3]
        c5 = np.uint64(5)
        c7 = np.uint64(7)
        c57 = np.uint64(57)
        c9 = np.uint64(9)
        c17 = np.uint64(17)
        c45 = np.uint64(45)
        c19 = np.uint64(19)
        for i in range(out.shape[0]):
            x = s1 * c5
            out[i] = ((x << c7) | (x >> c57)) * c9
            t = s1 << c17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << c45) | (s3 >> c19)
        state[0] = s0
        state[1] = s1
        state[2] = s2
        state[3] = s3

    # readonly array type so views from np.frombuffer are accepted
    _fnv_sig = types.uint64(types.Array(types.uint8, 1, "C", readonly=True), types.uint64)

    @njit(_fnv_sig, cache=True, nogil=True)
    def fnv1a_update(data, h):  # pragma: no cover - exercised via checkpoint tests
        prime = np.uint64(0x100000001B3)
        for i in range(data.shape[0]):
            h = (h ^ np.uint64(data[i])) * prime
        return h

    @njit("void(float64[:], float64[:], float64[:], float64[:], float64, float64, "
          "float64, float64, float64, float64)", cache=True, nogil=True)
    def adam_update(p, g, m, v, b1, b2, lr, eps, bias1, bias2):  # pragma: no cover
        # single fused pass; matches the numpy fallback in trainer.Adam exactly
        for i in range(p.shape[0]):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi)
            p[i] -= lr * (m[i] / bias1) / (np.sqrt(v[i] / bias2) + eps)

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    xoshiro_fill = None
    fnv1a_update = None
    adam_update = None
