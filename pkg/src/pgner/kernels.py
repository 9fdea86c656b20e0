"""Hot inner loops.

Every kernel is written once, in a numpy subset that numba can compile.  The
``*_py`` functions are the pure-numpy path; the public names are the
compiled versions unless ``PGNER_DISABLE_NUMBA`` is set (see ``_accel``).

LSTM kernels are time-major: ``x`` is ``(L, B, D)`` and ``mask`` is
``(L, B, 1)`` with 1.0 on real positions.  At a masked position the cell and
hidden state are carried over unchanged, so right padding works for both
directions: run forward and read ``hs[L-1]``, or run with ``reverse`` and
read ``hs[0]``.  Gate order inside the ``4H`` axis is i, f, g, o.
"""

import numpy as np

from ._accel import LSTM_NUMBA, USE_NUMBA, maybe_njit


def _lstm_forward_py(x, Wx, Wh, b, h0, c0, mask, reverse, one):
    L = x.shape[0]
    B = x.shape[1]
    D = x.shape[2]
    H = h0.shape[1]
    xw = np.dot(x.reshape(L * B, D), Wx).reshape(L, B, 4 * H)
    hs = np.empty((L, B, H), dtype=x.dtype)
    cs = np.empty((L, B, H), dtype=x.dtype)
    gates = np.empty((L, B, 4 * H), dtype=x.dtype)
    h = h0.copy()
    c = c0.copy()
    for step in range(L):
        t = L - 1 - step if reverse else step
        z = xw[t] + np.dot(h, Wh) + b
        i = one / (one + np.exp(-z[:, :H]))
        f = one / (one + np.exp(-z[:, H:2 * H]))
        g = np.tanh(z[:, 2 * H:3 * H])
        o = one / (one + np.exp(-z[:, 3 * H:]))
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        m = mask[t]
        c = m * c_new + (one - m) * c
        h = m * h_new + (one - m) * h
        hs[t] = h
        cs[t] = c
        gates[t, :, :H] = i
        gates[t, :, H:2 * H] = f
        gates[t, :, 2 * H:3 * H] = g
        gates[t, :, 3 * H:] = o
    return hs, cs, gates


def _lstm_backward_py(dhs, x, Wx, Wh, hs, cs, gates, h0, c0, mask, reverse, one):
    L = x.shape[0]
    B = x.shape[1]
    D = x.shape[2]
    H = h0.shape[1]
    dz_all = np.empty((L, B, 4 * H), dtype=x.dtype)
    dWh = np.zeros_like(Wh)
    dh = np.zeros((B, H), dtype=x.dtype)
    dc = np.zeros((B, H), dtype=x.dtype)
    WhT = Wh.T.copy()
    for step in range(L):
        # walk the recurrence backwards
        t = step if reverse else L - 1 - step
        first = t == L - 1 if reverse else t == 0
        if first:
            h_prev = h0
            c_prev = c0
        elif reverse:
            h_prev = hs[t + 1]
            c_prev = cs[t + 1]
        else:
            h_prev = hs[t - 1]
            c_prev = cs[t - 1]
        m = mask[t]
        dh_t = dh + dhs[t]
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = np.tanh(cs[t])
        dh_new = m * dh_t
        dc_new = m * dc + dh_new * o * (one - tc * tc)
        dz = dz_all[t]
        dz[:, :H] = dc_new * g * i * (one - i)
        dz[:, H:2 * H] = dc_new * c_prev * f * (one - f)
        dz[:, 2 * H:3 * H] = dc_new * i * (one - g * g)
        dz[:, 3 * H:] = dh_new * tc * o * (one - o)
        dWh += np.dot(h_prev.T.copy(), dz)
        dh = np.dot(dz, WhT) + (one - m) * dh_t
        dc = dc_new * f + (one - m) * dc
    flat = dz_all.reshape(L * B, 4 * H)
    dWx = np.dot(x.reshape(L * B, D).T.copy(), flat)
    dx = np.dot(flat, Wx.T.copy()).reshape(L, B, D)
    db = flat.sum(axis=0)
    return dx, dWx, dWh, db, dh, dc


def _levenshtein_py(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return prev[m]


def _kmp_search_py(pattern, text):
    m = pattern.shape[0]
    n = text.shape[0]
    out = np.empty(n, dtype=np.int64)
    if m == 0 or n < m:
        return out[:0]
    fail = np.zeros(m, dtype=np.int64)
    k = 0
    for i in range(1, m):
        while k > 0 and pattern[i] != pattern[k]:
            k = fail[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        fail[i] = k
    count = 0
    k = 0
    for i in range(n):
        while k > 0 and text[i] != pattern[k]:
            k = fail[k - 1]
        if text[i] == pattern[k]:
            k += 1
        if k == m:
            out[count] = i - m + 1
            count += 1
            k = fail[k - 1]
    return out[:count]


def _scatter_add_rows_py(out, ids, vals):
    B = ids.shape[0]
    L = ids.shape[1]
    for r in range(B):
        for j in range(L):
            out[r, ids[r, j]] += vals[r, j]
    return out


def _scatter_add_rows_np(out, ids, vals):
    rows = np.repeat(np.arange(ids.shape[0]), ids.shape[1])
    np.add.at(out, (rows, ids.ravel()), vals.ravel())
    return out


lstm_forward_py = _lstm_forward_py
lstm_backward_py = _lstm_backward_py
levenshtein_py = _levenshtein_py
kmp_search_py = _kmp_search_py

lstm_forward_nb = maybe_njit(_lstm_forward_py)
lstm_backward_nb = maybe_njit(_lstm_backward_py)
if LSTM_NUMBA:
    lstm_forward, lstm_backward = lstm_forward_nb, lstm_backward_nb
else:
    lstm_forward, lstm_backward = _lstm_forward_py, _lstm_backward_py
levenshtein_codes = maybe_njit(_levenshtein_py)
kmp_search = maybe_njit(_kmp_search_py)
if USE_NUMBA:
    scatter_add_rows = maybe_njit(_scatter_add_rows_py)
else:
    scatter_add_rows = _scatter_add_rows_np
