"""Backend parity: the numba kernels must reproduce the numpy reference
to tight tolerance on randomized shapes, and the backend switch must be
observable and reversible."""

import numpy as np
import pytest

from latefuse import kernels

NEEDS_NUMBA = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not importable")

TOL = 1e-12


@pytest.fixture(autouse=True)
def restore_backend():
    before = kernels.backend_name()
    yield
    kernels.set_backend(before)


def random_attention_case(rng):
    n_heads = int(rng.integers(1, 5))
    dh = int(rng.integers(1, 5))
    d = n_heads * dh
    nq = int(rng.integers(1, 7))
    nk = int(rng.integers(1, 7))
    q = rng.standard_normal((nq, d))
    k = rng.standard_normal((nk, d))
    v = rng.standard_normal((nk, d))
    mask = (rng.random((nq, nk)) < 0.7).astype(np.uint8)
    mask[:, 0] = 1  # every query row needs a visible key
    return q, k, v, mask, n_heads


@NEEDS_NUMBA
def test_attention_parity():
    rng = np.random.default_rng(11)
    for _ in range(25):
        q, k, v, mask, h = random_attention_case(rng)
        out_np, w_np = kernels.IMPLEMENTATIONS["numpy"]["attention_forward"](q, k, v, mask, h)
        out_nb, w_nb = kernels.IMPLEMENTATIONS["numba"]["attention_forward"](q, k, v, mask, h)
        assert np.abs(out_np - out_nb).max() <= TOL
        assert np.abs(w_np - w_nb).max() <= TOL
        dout = rng.standard_normal(out_np.shape)
        g_np = kernels.IMPLEMENTATIONS["numpy"]["attention_backward"](dout, q, k, v, w_np, h)
        g_nb = kernels.IMPLEMENTATIONS["numba"]["attention_backward"](dout, q, k, v, w_np, h)
        for a, b in zip(g_np, g_nb):
            assert np.abs(a - b).max() <= TOL


@NEEDS_NUMBA
def test_masked_positions_get_exact_zero_weight():
    rng = np.random.default_rng(3)
    q, k, v, mask, h = random_attention_case(rng)
    for impl in ("numpy", "numba"):
        _, w = kernels.IMPLEMENTATIONS[impl]["attention_forward"](q, k, v, mask, h)
        assert (w[:, mask == 0] == 0.0).all()
        assert np.abs(w.sum(axis=2) - 1.0).max() < 1e-12


@NEEDS_NUMBA
def test_layernorm_parity():
    rng = np.random.default_rng(5)
    for _ in range(25):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
        x = rng.standard_normal((n, d))
        g = rng.standard_normal(d)
        b = rng.standard_normal(d)
        y0, mu0, r0 = kernels.IMPLEMENTATIONS["numpy"]["layernorm_forward"](x, g, b, 1e-5)
        y1, mu1, r1 = kernels.IMPLEMENTATIONS["numba"]["layernorm_forward"](x, g, b, 1e-5)
        assert np.abs(y0 - y1).max() <= TOL
        assert np.abs(mu0 - mu1).max() <= TOL
        assert np.abs(r0 - r1).max() <= TOL
        dout = rng.standard_normal((n, d))
        for a, b2 in zip(
            kernels.IMPLEMENTATIONS["numpy"]["layernorm_backward"](dout, x, g, mu0, r0),
            kernels.IMPLEMENTATIONS["numba"]["layernorm_backward"](dout, x, g, mu0, r0),
        ):
            assert np.abs(a - b2).max() <= TOL


@NEEDS_NUMBA
def test_gelu_softmax_ce_parity():
    rng = np.random.default_rng(6)
    for _ in range(25):
        x = rng.standard_normal(int(rng.integers(1, 40)))
        a = kernels.IMPLEMENTATIONS["numpy"]["gelu_forward"](x)
        b = kernels.IMPLEMENTATIONS["numba"]["gelu_forward"](x)
        assert np.abs(a - b).max() <= TOL
        dout = rng.standard_normal(x.shape)
        assert (
            np.abs(
                kernels.IMPLEMENTATIONS["numpy"]["gelu_backward"](x, dout)
                - kernels.IMPLEMENTATIONS["numba"]["gelu_backward"](x, dout)
            ).max()
            <= TOL
        )
        logits = rng.standard_normal((int(rng.integers(1, 7)), int(rng.integers(2, 12))))
        assert (
            np.abs(
                kernels.IMPLEMENTATIONS["numpy"]["softmax_rows"](logits)
                - kernels.IMPLEMENTATIONS["numba"]["softmax_rows"](logits)
            ).max()
            <= TOL
        )
        targets = rng.integers(0, logits.shape[1], logits.shape[0]).astype(np.int64)
        l0, p0 = kernels.IMPLEMENTATIONS["numpy"]["cross_entropy_rows"](logits, targets)
        l1, p1 = kernels.IMPLEMENTATIONS["numba"]["cross_entropy_rows"](logits, targets)
        assert np.abs(l0 - l1).max() <= TOL
        assert np.abs(p0 - p1).max() <= TOL
        dl = rng.standard_normal(len(targets))
        assert (
            np.abs(
                kernels.IMPLEMENTATIONS["numpy"]["cross_entropy_rows_backward"](p0, targets, dl)
                - kernels.IMPLEMENTATIONS["numba"]["cross_entropy_rows_backward"](p0, targets, dl)
            ).max()
            <= TOL
        )


@NEEDS_NUMBA
def test_adamw_parity():
    rng = np.random.default_rng(9)
    for step in (1, 2, 50):
        p = rng.standard_normal(40)
        g = rng.standard_normal(40)
        m = rng.standard_normal(40) * 0.1
        v = np.abs(rng.standard_normal(40)) * 0.1
        state_np = (p.copy(), m.copy(), v.copy())
        state_nb = (p.copy(), m.copy(), v.copy())
        kernels.IMPLEMENTATIONS["numpy"]["adamw_update"](
            state_np[0], g, state_np[1], state_np[2], step, 1e-3, 0.9, 0.999, 1e-8, 0.01
        )
        kernels.IMPLEMENTATIONS["numba"]["adamw_update"](
            state_nb[0], g, state_nb[1], state_nb[2], step, 1e-3, 0.9, 0.999, 1e-8, 0.01
        )
        for a, b in zip(state_np, state_nb):
            assert np.abs(a - b).max() <= TOL


def test_backend_switch_rebinds_module_names():
    kernels.set_backend("numpy")
    assert kernels.backend_name() == "numpy"
    assert kernels.attention_forward is kernels.IMPLEMENTATIONS["numpy"]["attention_forward"]
    if kernels.NUMBA_AVAILABLE:
        kernels.set_backend("numba")
        assert kernels.backend_name() == "numba"
        assert kernels.attention_forward is kernels.IMPLEMENTATIONS["numba"]["attention_forward"]
    kernels.set_backend("auto")
    expected = "numba" if kernels.NUMBA_AVAILABLE else "numpy"
    assert kernels.backend_name() == expected


def test_unknown_backend_rejected():
    with pytest.raises(RuntimeError, match="unavailable"):
        kernels.set_backend("tpu")


def test_warmup_runs_on_active_backend():
    kernels.set_backend("numpy")
    kernels.warmup()
    if kernels.NUMBA_AVAILABLE:
        kernels.set_backend("numba")
        kernels.warmup()
