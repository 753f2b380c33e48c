"""Low-level array kernels behind the differentiable primitives.

All matrix products and convolutions route through numba-compiled loops
rather than BLAS. That costs some throughput on large GEMMs but buys two
properties the rest of the package relies on:

  * row stability — output row i is computed by one thread with a fixed
    sequential reduction, so the same patch embedded alone or inside any
    batch yields bit-identical values;
  * reproducibility — no dependence on BLAS build, blocking heuristics,
    or thread count.

Convolutions are specialized for the shapes the encoder uses (3x3 stride 1,
3x3 stride 2, 1x1 stride 2). Stride-2 kernels read column-phase-split
copies of the input (even/odd columns) so their inner loops stay
contiguous and vectorizable. Fused variants fold the following eval-mode
batch-norm (per-channel scale/shift), an optional residual add and an
optional ReLU into the convolution epilogue; they are used only on the
no-gradient evaluation path, where no intermediate is retained.

Set IPSEL_NO_NUMBA=1 to fall back to pure numpy (slower, BLAS-backed
matmul; intended for debugging only).
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("IPSEL_NO_NUMBA", "0") != "1"

if USE_NUMBA:
    # The default TBB layer is too old in some environments and warns loudly.
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    from numba import njit, prange
else:  # pragma: no cover - debugging fallback
    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range

_JIT = dict(parallel=True, fastmath=True, cache=True)
_JIT_SERIAL = dict(parallel=False, fastmath=True, cache=True)


def _dual(py_func):
    """Parallel + serial compilations of one kernel.

    Small calls dispatch to the serial twin to skip the threading-runtime
    launch overhead. Selection correctness relies on the twins producing
    bit-identical values (each output element runs the same inner loop
    either way); test_kernel_twins asserts that equality on every dual
    kernel, so a toolchain change that broke it would fail the suite.
    """
    if not USE_NUMBA:
        return py_func, py_func
    return (njit(**_JIT)(py_func), njit(**_JIT_SERIAL)(py_func))


# Below this many output elements the omp launch overhead dominates the
# arithmetic; dispatch to the serial twin instead.
_SERIAL_CUTOFF = 4096


# ---------------------------------------------------------------------------
# Matrix products
# ---------------------------------------------------------------------------

def _mm_nn_impl(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=a.dtype)
    for i in prange(m):
        arow = a[i]
        orow = out[i]
        for j in range(n):
            orow[j] = arow[0] * b[0, j]
        for l in range(1, k):
            av = arow[l]
            brow = b[l]
            for j in range(n):
                orow[j] += av * brow[j]
    return out


_mm_nn, _mm_nn_serial = _dual(_mm_nn_impl)


@njit(**_JIT)
def _mm_nt(a, b):
    # a (m, k) @ b(n, k)^T -> (m, n); inner loop is a dot of contiguous rows.
    m, k = a.shape
    n = b.shape[0]
    out = np.empty((m, n), dtype=a.dtype)
    for i in prange(m):
        arow = a[i]
        for j in range(n):
            brow = b[j]
            acc = arow[0] * brow[0]
            for l in range(1, k):
                acc += arow[l] * brow[l]
            out[i, j] = acc
    return out


@njit(**_JIT)
def _mm_tn(a, b):
    # a(k, m)^T @ b(k, n) -> (m, n); accumulates rank-1 updates row-wise.
    k, m = a.shape
    n = b.shape[1]
    out = np.empty((m, n), dtype=a.dtype)
    for i in prange(m):
        orow = out[i]
        av = a[0, i]
        for j in range(n):
            orow[j] = av * b[0, j]
        for l in range(1, k):
            av = a[l, i]
            brow = b[l]
            for j in range(n):
                orow[j] += av * brow[j]
    return out


@njit(**_JIT)
def _bmm_nn(a, b, a_batched, b_batched):
    # a (Ba, m, k), b (Bb, k, n) with Ba/Bb in {B, 1}; returns (B, m, n).
    B = max(a.shape[0], b.shape[0])
    m, k = a.shape[1], a.shape[2]
    n = b.shape[2]
    out = np.empty((B, m, n), dtype=a.dtype)
    for bi in prange(B * m):
        bb = bi // m
        i = bi % m
        arow = a[bb if a_batched else 0, i]
        bmat = b[bb if b_batched else 0]
        orow = out[bb, i]
        for j in range(n):
            orow[j] = arow[0] * bmat[0, j]
        for l in range(1, k):
            av = arow[l]
            brow = bmat[l]
            for j in range(n):
                orow[j] += av * brow[j]
    return out


@njit(**_JIT)
def _bmm_nt(a, b, a_batched, b_batched):
    # a (Ba, m, k) @ b (Bb, n, k)^T -> (B, m, n).
    B = max(a.shape[0], b.shape[0])
    m, k = a.shape[1], a.shape[2]
    n = b.shape[1]
    out = np.empty((B, m, n), dtype=a.dtype)
    for bi in prange(B * m):
        bb = bi // m
        i = bi % m
        arow = a[bb if a_batched else 0, i]
        bmat = b[bb if b_batched else 0]
        for j in range(n):
            brow = bmat[j]
            acc = arow[0] * brow[0]
            for l in range(1, k):
                acc += arow[l] * brow[l]
            out[bb, i, j] = acc
    return out


@njit(**_JIT)
def _bmm_tn(a, b, a_batched, b_batched):
    # a (Ba, k, m)^T @ b (Bb, k, n) -> (B, m, n).
    B = max(a.shape[0], b.shape[0])
    k, m = a.shape[1], a.shape[2]
    n = b.shape[2]
    out = np.empty((B, m, n), dtype=a.dtype)
    for bi in prange(B * m):
        bb = bi // m
        i = bi % m
        amat = a[bb if a_batched else 0]
        bmat = b[bb if b_batched else 0]
        orow = out[bb, i]
        av = amat[0, i]
        for j in range(n):
            orow[j] = av * bmat[0, j]
        for l in range(1, k):
            av = amat[l, i]
            brow = bmat[l]
            for j in range(n):
                orow[j] += av * brow[j]
    return out


def matmul_nn(a, b):
    if USE_NUMBA:
        if a.shape[0] * a.shape[1] * b.shape[1] <= _SERIAL_CUTOFF:
            return _mm_nn_serial(a, b)
        return _mm_nn(a, b)
    return a @ b


def matmul_nt(a, b):
    if USE_NUMBA:
        return _mm_nt(a, b)
    return a @ b.T


def matmul_tn(a, b):
    if USE_NUMBA:
        return _mm_tn(a, b)
    return a.T @ b


def bmm(a, b, transpose: str = "nn"):
    """Batched product of 3D operands whose leading dim is B or 1."""
    a_batched = a.shape[0] > 1
    b_batched = b.shape[0] > 1
    if USE_NUMBA:
        fn = {"nn": _bmm_nn, "nt": _bmm_nt, "tn": _bmm_tn}[transpose]
        return fn(a, b, a_batched, b_batched)
    if transpose == "nt":
        b = np.swapaxes(b, 1, 2)
    elif transpose == "tn":
        a = np.swapaxes(a, 1, 2)
    return a @ b


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def pad_hw(x, pad):
    # np.pad's generic machinery is slow on hot paths; zeros + interior
    # assignment is a single memset-backed alloc and one copy.
    if pad == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def phase_split(xp):
    """Even/odd column copies of a padded input, for stride-2 kernels."""
    xe = np.ascontiguousarray(xp[:, :, :, 0::2])
    xo = np.ascontiguousarray(xp[:, :, :, 1::2])
    return xe, xo


def _conv3x3_s1_impl(xp, w, bias):
    B, Ci, Hp, Wp = xp.shape
    Co = w.shape[0]
    Ho, Wo = Hp - 2, Wp - 2
    out = np.empty((B, Co, Ho, Wo), dtype=xp.dtype)
    for bc in prange(B * Co):
        b = bc // Co
        co = bc % Co
        acc = np.empty(Wo, dtype=xp.dtype)
        for ho in range(Ho):
            bv = bias[co]
            for wo in range(Wo):
                acc[wo] = bv
            for ci in range(Ci):
                for kh in range(3):
                    xrow = xp[b, ci, ho + kh]
                    w0 = w[co, ci, kh, 0]
                    w1 = w[co, ci, kh, 1]
                    w2 = w[co, ci, kh, 2]
                    for wo in range(Wo):
                        acc[wo] += w0 * xrow[wo] + w1 * xrow[wo + 1] + w2 * xrow[wo + 2]
            for wo in range(Wo):
                out[b, co, ho, wo] = acc[wo]
    return out


_conv3x3_s1, _conv3x3_s1_serial = _dual(_conv3x3_s1_impl)


def _conv3x3_s1_fused_impl(xp, w, scale, shift, other, use_add, use_relu):
    B, Ci, Hp, Wp = xp.shape
    Co = w.shape[0]
    Ho, Wo = Hp - 2, Wp - 2
    out = np.empty((B, Co, Ho, Wo), dtype=xp.dtype)
    zero = xp.dtype.type(0.0)
    for bc in prange(B * Co):
        b = bc // Co
        co = bc % Co
        acc = np.empty(Wo, dtype=xp.dtype)
        sc = scale[co]
        sh = shift[co]
        for ho in range(Ho):
            for wo in range(Wo):
                acc[wo] = zero
            for ci in range(Ci):
                for kh in range(3):
                    xrow = xp[b, ci, ho + kh]
                    w0 = w[co, ci, kh, 0]
                    w1 = w[co, ci, kh, 1]
                    w2 = w[co, ci, kh, 2]
                    for wo in range(Wo):
                        acc[wo] += w0 * xrow[wo] + w1 * xrow[wo + 1] + w2 * xrow[wo + 2]
            orow = out[b, co, ho]
            if use_add:
                arow = other[b, co, ho]
                for wo in range(Wo):
                    v = acc[wo] * sc + sh + arow[wo]
                    orow[wo] = max(v, zero) if use_relu else v
            else:
                for wo in range(Wo):
                    v = acc[wo] * sc + sh
                    orow[wo] = max(v, zero) if use_relu else v
    return out


_conv3x3_s1_fused, _conv3x3_s1_fused_serial = _dual(_conv3x3_s1_fused_impl)


def _conv3x3_s2_impl(xe, xo, w, bias):
    # Phase-split padded input: xe/xo hold even/odd columns of xp.
    B, Ci, Hp, We = xe.shape
    Co = w.shape[0]
    Ho = (Hp - 3) // 2 + 1
    Wo = We - 1
    out = np.empty((B, Co, Ho, Wo), dtype=xe.dtype)
    for bc in prange(B * Co):
        b = bc // Co
        co = bc % Co
        acc = np.empty(Wo, dtype=xe.dtype)
        for ho in range(Ho):
            bv = bias[co]
            for wo in range(Wo):
                acc[wo] = bv
            for ci in range(Ci):
                for kh in range(3):
                    erow = xe[b, ci, 2 * ho + kh]
                    orow_in = xo[b, ci, 2 * ho + kh]
                    w0 = w[co, ci, kh, 0]
                    w1 = w[co, ci, kh, 1]
                    w2 = w[co, ci, kh, 2]
                    for wo in range(Wo):
                        acc[wo] += w0 * erow[wo] + w1 * orow_in[wo] + w2 * erow[wo + 1]
            for wo in range(Wo):
                out[b, co, ho, wo] = acc[wo]
    return out


_conv3x3_s2, _conv3x3_s2_serial = _dual(_conv3x3_s2_impl)


def _conv3x3_s2_fused_impl(xe, xo, w, scale, shift, other, use_add, use_relu):
    B, Ci, Hp, We = xe.shape
    Co = w.shape[0]
    Ho = (Hp - 3) // 2 + 1
    Wo = We - 1
    out = np.empty((B, Co, Ho, Wo), dtype=xe.dtype)
    zero = xe.dtype.type(0.0)
    for bc in prange(B * Co):
        b = bc // Co
        co = bc % Co
        acc = np.empty(Wo, dtype=xe.dtype)
        sc = scale[co]
        sh = shift[co]
        for ho in range(Ho):
            for wo in range(Wo):
                acc[wo] = zero
            for ci in range(Ci):
                for kh in range(3):
                    erow = xe[b, ci, 2 * ho + kh]
                    orow_in = xo[b, ci, 2 * ho + kh]
                    w0 = w[co, ci, kh, 0]
                    w1 = w[co, ci, kh, 1]
                    w2 = w[co, ci, kh, 2]
                    for wo in range(Wo):
                        acc[wo] += w0 * erow[wo] + w1 * orow_in[wo] + w2 * erow[wo + 1]
            orow = out[b, co, ho]
            if use_add:
                arow = other[b, co, ho]
                for wo in range(Wo):
                    v = acc[wo] * sc + sh + arow[wo]
                    orow[wo] = max(v, zero) if use_relu else v
            else:
                for wo in range(Wo):
                    v = acc[wo] * sc + sh
                    orow[wo] = max(v, zero) if use_relu else v
    return out


_conv3x3_s2_fused, _conv3x3_s2_fused_serial = _dual(_conv3x3_s2_fused_impl)


def _conv1x1_s2_impl(xe, w, bias):
    # xe holds even columns of the *unpadded* input; output width equals
    # xe's width and rows are sampled with stride 2 here.
    B, Ci, H, We = xe.shape
    Co = w.shape[0]
    Ho = (H - 1) // 2 + 1
    out = np.empty((B, Co, Ho, We), dtype=xe.dtype)
    for bc in prange(B * Co):
        b = bc // Co
        co = bc % Co
        for ho in range(Ho):
            orow = out[b, co, ho]
            xrow = xe[b, 0, 2 * ho]
            w0 = w[co, 0]
            for wo in range(We):
                orow[wo] = bias[co] + w0 * xrow[wo]
            for ci in range(1, Ci):
                xrow = xe[b, ci, 2 * ho]
                wv = w[co, ci]
                for wo in range(We):
                    orow[wo] += wv * xrow[wo]
    return out


_conv1x1_s2, _conv1x1_s2_serial = _dual(_conv1x1_s2_impl)


@njit(**_JIT)
def _conv3x3_s1_gw(xp, go):
    # One pass over the data per output channel: go rows are loaded once
    # and dotted against the three shifted x rows of every (ci, kh) tap.
    B, Ci, Hp, Wp = xp.shape
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    gw = np.zeros((Co, Ci, 3, 3), dtype=xp.dtype)
    for co in prange(Co):
        acc = np.zeros((Ci, 3, 3), dtype=np.float64)
        for b in range(B):
            for ho in range(Ho):
                grow = go[b, co, ho]
                for ci in range(Ci):
                    for kh in range(3):
                        xrow = xp[b, ci, ho + kh]
                        a0 = 0.0
                        a1 = 0.0
                        a2 = 0.0
                        for wo in range(Wo):
                            gv = grow[wo]
                            a0 += gv * xrow[wo]
                            a1 += gv * xrow[wo + 1]
                            a2 += gv * xrow[wo + 2]
                        acc[ci, kh, 0] += a0
                        acc[ci, kh, 1] += a1
                        acc[ci, kh, 2] += a2
        for ci in range(Ci):
            for kh in range(3):
                for kw in range(3):
                    gw[co, ci, kh, kw] = acc[ci, kh, kw]
    return gw


@njit(**_JIT)
def _conv3x3_s2_gw(xe, xo, go):
    B, Ci = xe.shape[0], xe.shape[1]
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    gw = np.zeros((Co, Ci, 3, 3), dtype=xe.dtype)
    for cc in prange(Co * Ci):
        co = cc // Ci
        ci = cc % Ci
        for kh in range(3):
            for kw in range(3):
                acc = xe.dtype.type(0.0)
                for b in range(B):
                    for ho in range(Ho):
                        grow = go[b, co, ho]
                        if kw == 1:
                            xrow = xo[b, ci, 2 * ho + kh]
                            for wo in range(Wo):
                                acc += grow[wo] * xrow[wo]
                        else:
                            xrow = xe[b, ci, 2 * ho + kh]
                            off = kw // 2
                            for wo in range(Wo):
                                acc += grow[wo] * xrow[wo + off]
                gw[co, ci, kh, kw] = acc
    return gw


@njit(**_JIT)
def _conv3x3_s2_gx(go, w, B, Ci, Hp, Wp):
    # Scatter into the padded-input gradient; each (b, ci) plane is private
    # to one thread, so accumulation order is fixed.
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    gxp = np.zeros((B, Ci, Hp, Wp), dtype=go.dtype)
    for bc in prange(B * Ci):
        b = bc // Ci
        ci = bc % Ci
        for co in range(Co):
            for ho in range(Ho):
                grow = go[b, co, ho]
                for kh in range(3):
                    grow_x = gxp[b, ci, 2 * ho + kh]
                    for kw in range(3):
                        wv = w[co, ci, kh, kw]
                        for wo in range(Wo):
                            grow_x[2 * wo + kw] += wv * grow[wo]
    return gxp


@njit(**_JIT)
def _conv1x1_s2_gx(go, w, B, Ci, H, W):
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    gx = np.zeros((B, Ci, H, W), dtype=go.dtype)
    for bc in prange(B * Ci):
        b = bc // Ci
        ci = bc % Ci
        for co in range(Co):
            wv = w[co, ci]
            for ho in range(Ho):
                grow = go[b, co, ho]
                xrow = gx[b, ci, 2 * ho]
                for wo in range(Wo):
                    xrow[2 * wo] += wv * grow[wo]
    return gx


@njit(**_JIT)
def _conv1x1_s2_gw(xe, go):
    B, Ci = xe.shape[0], xe.shape[1]
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    gw = np.zeros((Co, Ci), dtype=xe.dtype)
    for cc in prange(Co * Ci):
        co = cc // Ci
        ci = cc % Ci
        acc = xe.dtype.type(0.0)
        for b in range(B):
            for ho in range(Ho):
                grow = go[b, co, ho]
                xrow = xe[b, ci, 2 * ho]
                for wo in range(Wo):
                    acc += grow[wo] * xrow[wo]
        gw[co, ci] = acc
    return gw


# ---------------------------------------------------------------------------
# Batch-norm training kernels (4D inputs)
# ---------------------------------------------------------------------------

@njit(**_JIT)
def _bn_stats(x):
    # Per-channel biased mean/variance, accumulated in f64 for stability.
    B, C, H, W = x.shape
    mu = np.empty(C, dtype=x.dtype)
    var = np.empty(C, dtype=x.dtype)
    n = B * H * W
    for c in prange(C):
        s = 0.0
        for b in range(B):
            plane = x[b, c]
            for h in range(H):
                row = plane[h]
                for w in range(W):
                    s += row[w]
        m = s / n
        sq = 0.0
        for b in range(B):
            plane = x[b, c]
            for h in range(H):
                row = plane[h]
                for w in range(W):
                    d = row[w] - m
                    sq += d * d
        mu[c] = m
        var[c] = sq / n
    return mu, var


@njit(**_JIT)
def _bn_apply(x, mu, inv, gamma, beta):
    B, C, H, W = x.shape
    out = np.empty_like(x)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        m = mu[c]
        sc = inv[c] * gamma[c]
        sh = beta[c]
        for h in range(H):
            xrow = x[b, c, h]
            orow = out[b, c, h]
            for w in range(W):
                orow[w] = (xrow[w] - m) * sc + sh
    return out


@njit(**_JIT)
def _bn_bwd_reduce(x, g, mu, inv):
    # Per-channel sums of g and g * xhat (xhat recomputed on the fly).
    B, C, H, W = x.shape
    s1 = np.empty(C, dtype=x.dtype)
    s2 = np.empty(C, dtype=x.dtype)
    for c in prange(C):
        a1 = 0.0
        a2 = 0.0
        m = mu[c]
        iv = inv[c]
        for b in range(B):
            xp = x[b, c]
            gp = g[b, c]
            for h in range(H):
                xrow = xp[h]
                grow = gp[h]
                for w in range(W):
                    gv = grow[w]
                    a1 += gv
                    a2 += gv * (xrow[w] - m) * iv
        s1[c] = a1
        s2[c] = a2
    return s1, s2


@njit(**_JIT)
def _bn_bwd_gx(x, g, mu, inv, gamma, m1, m2):
    # gx = gamma * inv * (g - mean(g) - xhat * mean(g * xhat))
    B, C, H, W = x.shape
    gx = np.empty_like(x)
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        m = mu[c]
        iv = inv[c]
        sc = gamma[c] * iv
        mm1 = m1[c]
        mm2 = m2[c]
        for h in range(H):
            xrow = x[b, c, h]
            grow = g[b, c, h]
            orow = gx[b, c, h]
            for w in range(W):
                xhat = (xrow[w] - m) * iv
                orow[w] = sc * (grow[w] - mm1 - xhat * mm2)
    return gx


def bn_train_forward(x, gamma, beta, eps):
    """(out, mu, var, inv) with batch statistics; numba on 4D inputs."""
    if USE_NUMBA and x.ndim == 4:
        mu, var = _bn_stats(x)
        inv = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
        return _bn_apply(x, mu, inv, gamma, beta), mu, var, inv
    red = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    mu = np.mean(x, axis=red, dtype=np.float64).astype(x.dtype)
    var = np.mean((x - mu.reshape(shape)) ** 2, axis=red,
                  dtype=np.float64).astype(x.dtype)
    inv = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    return xhat * gamma.reshape(shape) + beta.reshape(shape), mu, var, inv


def bn_train_backward(x, g, mu, inv, gamma):
    """(gx, ggamma, gbeta) for the batch-statistics path."""
    if USE_NUMBA and x.ndim == 4:
        n = x.dtype.type(x.shape[0] * x.shape[2] * x.shape[3])
        s1, s2 = _bn_bwd_reduce(x, g, mu, inv)
        gx = _bn_bwd_gx(x, g, mu, inv, gamma, s1 / n, s2 / n)
        return gx, s2, s1
    red = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    gxhat = g * gamma.reshape(shape)
    m1 = np.mean(gxhat, axis=red, dtype=np.float64).astype(x.dtype)
    m2 = np.mean(gxhat * xhat, axis=red, dtype=np.float64).astype(x.dtype)
    gx = inv.reshape(shape) * (gxhat - m1.reshape(shape) - xhat * m2.reshape(shape))
    ggamma = np.sum(g * xhat, axis=red, dtype=np.float64).astype(x.dtype)
    gbeta = np.sum(g, axis=red, dtype=np.float64).astype(x.dtype)
    return gx, ggamma, gbeta


# -- numpy reference paths (used when numba is disabled) ---------------------

def _conv_ref(x, w, bias, stride, pad):
    B, Ci, H, W = x.shape
    Co, _, KH, KW = w.shape
    xp = pad_hw(x, pad)
    Ho = (H + 2 * pad - KH) // stride + 1
    Wo = (W + 2 * pad - KW) // stride + 1
    cols = np.empty((B, Ci, KH, KW, Ho, Wo), dtype=x.dtype)
    for kh in range(KH):
        for kw in range(KW):
            cols[:, :, kh, kw] = xp[:, :, kh : kh + Ho * stride : stride,
                                    kw : kw + Wo * stride : stride]
    out = np.einsum("bcklhw,ockl->bohw", cols, w, optimize=True)
    return (out + bias[None, :, None, None]).astype(x.dtype)


def _out_elems(x, co, stride, pad, k):
    ho = (x.shape[2] + 2 * pad - k) // stride + 1
    wo = (x.shape[3] + 2 * pad - k) // stride + 1
    return x.shape[0] * co * ho * wo


def conv2d_forward(x, w, bias, stride, pad):
    """Dispatch to the specialized kernel for this (k, stride)."""
    KH = w.shape[2]
    if not USE_NUMBA:
        return _conv_ref(x, w, bias, stride, pad)
    small = _out_elems(x, w.shape[0], stride, pad, KH) <= _SERIAL_CUTOFF
    if KH == 3 and stride == 1:
        fn = _conv3x3_s1_serial if small else _conv3x3_s1
        return fn(pad_hw(x, pad), w, bias)
    if KH == 3 and stride == 2:
        xe, xo = phase_split(pad_hw(x, pad))
        fn = _conv3x3_s2_serial if small else _conv3x3_s2
        return fn(xe, xo, w, bias)
    if KH == 1 and stride == 2 and pad == 0:
        xe = np.ascontiguousarray(x[:, :, :, 0::2])
        fn = _conv1x1_s2_serial if small else _conv1x1_s2
        return fn(xe, w[:, :, 0, 0], bias)
    return _conv_ref(x, w, bias, stride, pad)


def conv2d_fused_eval(x, w, scale, shift, stride, pad, other=None, relu=False):
    """conv + folded batch-norm (+residual) (+ReLU) for no-grad eval passes."""
    if not USE_NUMBA:
        out = _conv_ref(x, w, np.zeros(w.shape[0], dtype=x.dtype), stride, pad)
        out = out * scale[None, :, None, None] + shift[None, :, None, None]
        if other is not None:
            out = out + other
        if relu:
            out = np.maximum(out, 0)
        return out.astype(x.dtype)
    dummy = np.zeros((1, 1, 1, 1), dtype=x.dtype)
    use_add = other is not None
    KH = w.shape[2]
    small = _out_elems(x, w.shape[0], stride, pad, KH) <= _SERIAL_CUTOFF
    if KH == 3 and stride == 1:
        fn = _conv3x3_s1_fused_serial if small else _conv3x3_s1_fused
        return fn(pad_hw(x, pad), w, scale, shift,
                  other if use_add else dummy, use_add, relu)
    if KH == 3 and stride == 2:
        xe, xo = phase_split(pad_hw(x, pad))
        fn = _conv3x3_s2_fused_serial if small else _conv3x3_s2_fused
        return fn(xe, xo, w, scale, shift,
                  other if use_add else dummy, use_add, relu)
    if KH == 1 and stride == 2 and pad == 0:
        xe = np.ascontiguousarray(x[:, :, :, 0::2])
        fn = _conv1x1_s2_serial if small else _conv1x1_s2
        out = fn(xe, w[:, :, 0, 0], np.zeros(w.shape[0], dtype=x.dtype))
        out = out * scale[None, :, None, None] + shift[None, :, None, None]
        if other is not None:
            out = out + other
        if relu:
            out = np.maximum(out, 0)
        return out.astype(x.dtype)
    raise NotImplementedError(f"no fused kernel for k={KH}, stride={stride}")


def conv2d_grad_input(go, x_shape, w, stride, pad):
    B, Ci, H, W = x_shape
    KH = w.shape[2]
    if USE_NUMBA and KH == 3 and stride == 1:
        # correlation with the rotated kernel reuses the forward conv
        w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gop = pad_hw(go, 2 - pad)
        fn = _conv3x3_s1_serial if B * Ci * H * W <= _SERIAL_CUTOFF else _conv3x3_s1
        return fn(gop, w_rot, np.zeros(Ci, dtype=go.dtype))
    if USE_NUMBA and KH == 3 and stride == 2:
        gxp = _conv3x3_s2_gx(go, w, B, Ci, H + 2 * pad, W + 2 * pad)
        return gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
    if USE_NUMBA and KH == 1 and stride == 2 and pad == 0:
        return _conv1x1_s2_gx(go, w[:, :, 0, 0], B, Ci, H, W)
    # reference scatter
    gx = np.zeros(x_shape, dtype=go.dtype)
    gxp = pad_hw(gx, pad) if pad else gx
    Co, Ho, Wo = go.shape[1], go.shape[2], go.shape[3]
    KW = w.shape[3]
    for kh in range(KH):
        for kw in range(KW):
            region = gxp[:, :, kh : kh + Ho * stride : stride,
                         kw : kw + Wo * stride : stride]
            region += np.einsum("bohw,oc->bchw", go, w[:, :, kh, kw], optimize=True)
    if pad:
        return gxp[:, :, pad : pad + H, pad : pad + W]
    return gxp


def conv2d_grad_weight(go, x, w_shape, stride, pad):
    KH, KW = w_shape[2], w_shape[3]
    if USE_NUMBA and KH == 3 and stride == 1:
        return _conv3x3_s1_gw(pad_hw(x, pad), go)
    if USE_NUMBA and KH == 3 and stride == 2:
        xe, xo = phase_split(pad_hw(x, pad))
        return _conv3x3_s2_gw(xe, xo, go)
    if USE_NUMBA and KH == 1 and stride == 2 and pad == 0:
        xe = np.ascontiguousarray(x[:, :, :, 0::2])
        return _conv1x1_s2_gw(xe, go)[:, :, None, None]
    xp = pad_hw(x, pad)
    Ho, Wo = go.shape[2], go.shape[3]
    gw = np.zeros(w_shape, dtype=go.dtype)
    for kh in range(KH):
        for kw in range(KW):
            region = xp[:, :, kh : kh + Ho * stride : stride,
                        kw : kw + Wo * stride : stride]
            gw[:, :, kh, kw] = np.einsum("bohw,bchw->oc", go, region, optimize=True)
    return gw
