"""Hot numerical kernels with two interchangeable backends.

Every kernel exists twice: a pure-numpy implementation and a numba
``@njit`` translation of the same arithmetic. The active backend is chosen
at import from the ``LATEFUSE_NUMBA`` environment variable:

    unset / "auto"        use numba when importable, else numpy
    "0", "off", "false"   force the numpy path
    "1", "on", "require"  force numba; raise if it cannot be imported

``set_backend`` switches at runtime (used by tests and the kernel
benchmark). Matrix products are deliberately left to numpy's BLAS in both
backends; the kernels here cover the loops numpy cannot fuse: masked
softmax attention, layernorm, GELU, row-wise cross entropy and the AdamW
update. All kernels are serial so a fixed reduction order keeps results
bit-reproducible across runs and thread counts.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_attention_forward(q, k, v, mask, n_heads):
    """Masked multi-head softmax attention.

    q (nq,d), k/v (nk,d), mask (nq,nk) uint8 with 1=visible. Heads are
    contiguous column slices of width d//n_heads; scores are scaled by
    1/sqrt(head dim). Returns (out (nq,d), weights (n_heads,nq,nk)) with
    exactly-zero weight on masked positions. Rows must have at least one
    visible key; the caller guards that.
    """
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    out = np.empty((nq, d))
    w = np.empty((n_heads, nq, nk))
    hidden = mask == 0
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = (q[:, sl] @ k[:, sl].T) * scale
        s[hidden] = -np.inf
        m = s.max(axis=1, keepdims=True)
        e = np.exp(s - m)  # exp(-inf - finite) == 0.0 exactly
        p = e / e.sum(axis=1, keepdims=True)
        w[h] = p
        out[:, sl] = p @ v[:, sl]
    return out, w


def _np_attention_backward(dout, q, k, v, w, n_heads):
    nq, d = q.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = w[h]
        dv[:, sl] = p.T @ dout[:, sl]
        dp = dout[:, sl] @ v[:, sl].T
        ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        dq[:, sl] = (ds @ k[:, sl]) * scale
        dk[:, sl] = (ds.T @ q[:, sl]) * scale
    return dq, dk, dv


def _np_layernorm_forward(x, g, b, eps):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * g + b
    return y, mu, rstd


def _np_layernorm_backward(dout, x, g, mu, rstd):
    xhat = (x - mu[:, None]) * rstd[:, None]
    dg = (dout * xhat).sum(axis=0)
    db = dout.sum(axis=0)
    dxhat = dout * g
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dg, db


def _np_gelu_forward(x):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def _np_gelu_backward(x, dout):
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _np_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _np_cross_entropy_rows(logits, targets):
    """Per-row -log softmax(logits)[target]; also returns the softmax rows."""
    n = logits.shape[0]
    m = logits.max(axis=1)
    e = np.exp(logits - m[:, None])
    z = e.sum(axis=1)
    probs = e / z[:, None]
    losses = np.log(z) + m - logits[np.arange(n), targets]
    return losses, probs


def _np_cross_entropy_rows_backward(probs, targets, dlosses):
    dlogits = probs * dlosses[:, None]
    dlogits[np.arange(len(targets)), targets] -= dlosses
    return dlogits


def _np_adamw_update(p, g, m, v, step, lr, b1, b2, eps, wd):
    """In-place AdamW with decoupled weight decay on flat float64 views."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


# ---------------------------------------------------------------------------
# numba implementations (same arithmetic, explicit serial loops)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_attention_forward(q, k, v, mask, n_heads):
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    out = np.empty((nq, d))
    w = np.empty((n_heads, nq, nk))
    for h in range(n_heads):
        off = h * dh
        for i in range(nq):
            mx = -1.0e308
            for j in range(nk):
                if mask[i, j]:
                    s = 0.0
                    for c in range(dh):
                        s += q[i, off + c] * k[j, off + c]
                    s *= scale
                    w[h, i, j] = s
                    if s > mx:
                        mx = s
            tot = 0.0
            for j in range(nk):
                if mask[i, j]:
                    e = math.exp(w[h, i, j] - mx)
                    w[h, i, j] = e
                    tot += e
                else:
                    w[h, i, j] = 0.0
            inv = 1.0 / tot
            for j in range(nk):
                w[h, i, j] *= inv
            for c in range(dh):
                acc = 0.0
                for j in range(nk):
                    acc += w[h, i, j] * v[j, off + c]
                out[i, off + c] = acc
    return out, w


@njit(cache=True)
def _nb_attention_backward(dout, q, k, v, w, n_heads):
    nq, d = q.shape
    nk = k.shape[0]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for h in range(n_heads):
        off = h * dh
        for i in range(nq):
            dot = 0.0
            for j in range(nk):
                if w[h, i, j] != 0.0:
                    dp = 0.0
                    for c in range(dh):
                        dp += dout[i, off + c] * v[j, off + c]
                        dv[j, off + c] += w[h, i, j] * dout[i, off + c]
                    dot += dp * w[h, i, j]
            for j in range(nk):
                if w[h, i, j] != 0.0:
                    dp = 0.0
                    for c in range(dh):
                        dp += dout[i, off + c] * v[j, off + c]
                    ds = w[h, i, j] * (dp - dot)
                    for c in range(dh):
                        dq[i, off + c] += ds * k[j, off + c] * scale
                        dk[j, off + c] += ds * q[i, off + c] * scale
    return dq, dk, dv


@njit(cache=True)
def _nb_layernorm_forward(x, g, b, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mu = np.empty(n)
    rstd = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        m = s / d
        var = 0.0
        for j in range(d):
            c = x[i, j] - m
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        mu[i] = m
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - m) * r * g[j] + b[j]
    return y, mu, rstd


@njit(cache=True)
def _nb_layernorm_backward(dout, x, g, mu, rstd):
    n, d = x.shape
    dx = np.empty_like(x)
    dg = np.zeros(d)
    db = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rstd[i]
            dxh = dout[i, j] * g[j]
            dg[j] += dout[i, j] * xh
            db[j] += dout[i, j]
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rstd[i]
            dxh = dout[i, j] * g[j]
            dx[i, j] = (dxh - m1 - xh * m2) * rstd[i]
    return dx, dg, db


@njit(cache=True)
def _nb_gelu_forward(x):
    y = np.empty_like(x)
    for i in range(x.size):
        xi = x[i]
        u = _GELU_C0 * (xi + _GELU_C1 * xi * xi * xi)
        y[i] = 0.5 * xi * (1.0 + math.tanh(u))
    return y


@njit(cache=True)
def _nb_gelu_backward(x, dout):
    dx = np.empty_like(x)
    for i in range(x.size):
        xi = x[i]
        u = _GELU_C0 * (xi + _GELU_C1 * xi * xi * xi)
        t = math.tanh(u)
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * xi * xi)
        dx[i] = dout[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
    return dx


@njit(cache=True)
def _nb_softmax_rows(x):
    n, d = x.shape
    p = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        tot = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            p[i, j] = e
            tot += e
        inv = 1.0 / tot
        for j in range(d):
            p[i, j] *= inv
    return p


@njit(cache=True)
def _nb_cross_entropy_rows(logits, targets):
    n, d = logits.shape
    probs = np.empty_like(logits)
    losses = np.empty(n)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, d):
            if logits[i, j] > m:
                m = logits[i, j]
        tot = 0.0
        for j in range(d):
            e = math.exp(logits[i, j] - m)
            probs[i, j] = e
            tot += e
        inv = 1.0 / tot
        for j in range(d):
            probs[i, j] *= inv
        losses[i] = math.log(tot) + m - logits[i, targets[i]]
    return losses, probs


@njit(cache=True)
def _nb_cross_entropy_rows_backward(probs, targets, dlosses):
    n, d = probs.shape
    dlogits = np.empty_like(probs)
    for i in range(n):
        for j in range(d):
            dlogits[i, j] = probs[i, j] * dlosses[i]
        dlogits[i, targets[i]] -= dlosses[i]
    return dlogits


@njit(cache=True)
def _nb_adamw_update(p, g, m, v, step, lr, b1, b2, eps, wd):
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for i in range(p.size):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + wd * p[i])


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_KERNEL_NAMES = (
    "attention_forward",
    "attention_backward",
    "layernorm_forward",
    "layernorm_backward",
    "gelu_forward",
    "gelu_backward",
    "softmax_rows",
    "cross_entropy_rows",
    "cross_entropy_rows_backward",
    "adamw_update",
)

IMPLEMENTATIONS: dict[str, dict] = {
    "numpy": {name: globals()["_np_" + name] for name in _KERNEL_NAMES},
}
if NUMBA_AVAILABLE:
    IMPLEMENTATIONS["numba"] = {name: globals()["_nb_" + name] for name in _KERNEL_NAMES}

_active_backend = ""


def set_backend(name: str) -> None:
    """Rebind the module-level kernel names to one backend.

    name: "numpy", "numba" or "auto". Raises RuntimeError when numba is
    requested but not importable.
    """
    global _active_backend
    if name == "auto":
        name = "numba" if NUMBA_AVAILABLE else "numpy"
    if name not in IMPLEMENTATIONS:
        known = ", ".join(sorted(set(IMPLEMENTATIONS) | {"auto"}))
        raise RuntimeError(f"kernel backend {name!r} unavailable (choices: {known})")
    globals().update(IMPLEMENTATIONS[name])
    _active_backend = name


def backend_name() -> str:
    return _active_backend


def warmup() -> None:
    """Run every active kernel once on tiny inputs (triggers JIT compile)."""
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 4))
    kv = rng.standard_normal((5, 4))
    mask = np.ones((3, 5), dtype=np.uint8)
    out, w = attention_forward(q, kv, kv, mask, 2)
    attention_backward(np.ones_like(out), q, kv, kv, w, 2)
    x = rng.standard_normal((3, 4))
    g = np.ones(4)
    b = np.zeros(4)
    y, mu, rstd = layernorm_forward(x, g, b, 1e-5)
    layernorm_backward(np.ones_like(y), x, g, mu, rstd)
    flat = rng.standard_normal(8)
    gelu_backward(flat, gelu_forward(flat))
    softmax_rows(x)
    t = np.array([1, 0, 3], dtype=np.int64)
    losses, probs = cross_entropy_rows(x, t)
    cross_entropy_rows_backward(probs, t, np.ones_like(losses))
    adamw_update(flat.copy(), flat, np.zeros(8), np.zeros(8), 1, 1e-3, 0.9, 0.999, 1e-8, 0.0)


def _initial_backend() -> str:
    flag = os.environ.get("LATEFUSE_NUMBA", "").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return "numpy"
    if flag in ("1", "on", "true", "yes", "require"):
        if not NUMBA_AVAILABLE:
            raise RuntimeError("LATEFUSE_NUMBA requires numba but it is not importable")
        return "numba"
    return "auto"


set_backend(_initial_backend())
