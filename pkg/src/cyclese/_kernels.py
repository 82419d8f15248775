"""Per-timestep LSTMP recurrences, the only sequential part of the networks.

Everything that can be batched over time (input projections, weight
gradients) is done with plain matrix products by the caller; these kernels
only walk the recurrence. Two interchangeable implementations exist: numba
``@njit`` loops and a pure-numpy fallback. Set ``CYCLESE_DISABLE_NUMBA=1``
to force the fallback (numba is also skipped when it cannot be imported).

Gate layout along the 4H axis is ``[input, forget, cell, output]``.
"""

import os

import numpy as np

_DISABLED = os.environ.get("CYCLESE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by CYCLESE_DISABLE_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def forward_numpy(zx, w_rec, w_proj):
    """Run the recurrence given precomputed input terms.

    zx:     (T, 4H) input projection plus bias for every step
    w_rec:  (4H, P) recurrent weights acting on the previous projection
    w_proj: (P, H)  projection of the hidden state

    Returns activated gates (T, 4H), cells (T, H), hidden (T, H) and
    projected outputs (T, P).
    """
    T, H4 = zx.shape
    H = H4 // 4
    P = w_proj.shape[0]
    gates = np.empty((T, H4))
    cells = np.empty((T, H))
    hidden = np.empty((T, H))
    proj = np.empty((T, P))
    r = np.zeros(P)
    c = np.zeros(H)
    for t in range(T):
        z = zx[t] + w_rec @ r
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        g = np.tanh(z[2 * H:3 * H])
        o = _sigmoid(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        r = w_proj @ h
        gates[t, :H] = i
        gates[t, H:2 * H] = f
        gates[t, 2 * H:3 * H] = g
        gates[t, 3 * H:] = o
        cells[t] = c
        hidden[t] = h
        proj[t] = r
    return gates, cells, hidden, proj


def backward_numpy(d_proj, gates, cells, hidden, w_rec, w_proj):
    """BPTT through the recurrence.

    d_proj is dLoss/d(projected output) coming from the layer above. Returns
    dLoss/dz for every step (T, 4H) and the total gradient reaching each
    projected output, recurrent contribution included (T, P).
    """
    T, H4 = gates.shape
    H = H4 // 4
    P = w_proj.shape[0]
    dz_all = np.empty((T, H4))
    dr_all = np.empty((T, P))
    dr_next = np.zeros(P)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i = gates[t, :H]
        f = gates[t, H:2 * H]
        g = gates[t, 2 * H:3 * H]
        o = gates[t, 3 * H:]
        c_prev = cells[t - 1] if t > 0 else np.zeros(H)
        dr = d_proj[t] + dr_next
        dr_all[t] = dr
        dh = w_proj.T @ dr
        tc = np.tanh(cells[t])
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[t]
        dz[:H] = dc * g * i * (1.0 - i)
        dz[H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dr_next = w_rec.T @ dz
    return dz_all, dr_all


if HAS_NUMBA:

    @njit(cache=True)
    def _forward_jit(zx, w_rec, w_proj):
        T, H4 = zx.shape
        H = H4 // 4
        P = w_proj.shape[0]
        gates = np.empty((T, H4))
        cells = np.empty((T, H))
        hidden = np.empty((T, H))
        proj = np.empty((T, P))
        r = np.zeros(P)
        c = np.zeros(H)
        for t in range(T):
            z = zx[t] + np.dot(w_rec, r)
            for k in range(H):
                ig = 0.5 * (np.tanh(0.5 * z[k]) + 1.0)
                fg = 0.5 * (np.tanh(0.5 * z[H + k]) + 1.0)
                gg = np.tanh(z[2 * H + k])
                og = 0.5 * (np.tanh(0.5 * z[3 * H + k]) + 1.0)
                ck = fg * c[k] + ig * gg
                c[k] = ck
                hidden[t, k] = og * np.tanh(ck)
                cells[t, k] = ck
                gates[t, k] = ig
                gates[t, H + k] = fg
                gates[t, 2 * H + k] = gg
                gates[t, 3 * H + k] = og
            r = np.dot(w_proj, hidden[t])
            proj[t] = r
        return gates, cells, hidden, proj

    @njit(cache=True)
    def _backward_jit(d_proj, gates, cells, hidden, w_rec_t, w_proj_t):
        T, H4 = gates.shape
        H = H4 // 4
        P = w_proj_t.shape[1]
        dz_all = np.empty((T, H4))
        dr_all = np.empty((T, P))
        dr_next = np.zeros(P)
        dc_next = np.zeros(H)
        dz = np.empty(H4)
        for t in range(T - 1, -1, -1):
            dr = d_proj[t] + dr_next
            dr_all[t] = dr
            dh = np.dot(w_proj_t, dr)
            for k in range(H):
                i = gates[t, k]
                f = gates[t, H + k]
                g = gates[t, 2 * H + k]
                o = gates[t, 3 * H + k]
                c_prev = cells[t - 1, k] if t > 0 else 0.0
                tc = np.tanh(cells[t, k])
                dc = dh[k] * o * (1.0 - tc * tc) + dc_next[k]
                dz[k] = dc * g * i * (1.0 - i)
                dz[H + k] = dc * c_prev * f * (1.0 - f)
                dz[2 * H + k] = dc * i * (1.0 - g * g)
                dz[3 * H + k] = dh[k] * tc * o * (1.0 - o)
                dc_next[k] = dc * f
            dz_all[t] = dz
            dr_next = np.dot(w_rec_t, dz)
        return dz_all, dr_all

    def forward_numba(zx, w_rec, w_proj):
        return _forward_jit(np.ascontiguousarray(zx), np.ascontiguousarray(w_rec),
                            np.ascontiguousarray(w_proj))

    def backward_numba(d_proj, gates, cells, hidden, w_rec, w_proj):
        return _backward_jit(np.ascontiguousarray(d_proj), gates, cells, hidden,
                             np.ascontiguousarray(w_rec.T), np.ascontiguousarray(w_proj.T))

    BACKEND = "numba"
    lstmp_forward = forward_numba
    lstmp_backward = backward_numba
else:
    forward_numba = backward_numba = None
    BACKEND = "numpy"
    lstmp_forward = forward_numpy
    lstmp_backward = backward_numpy
