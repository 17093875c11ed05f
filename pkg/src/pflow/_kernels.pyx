# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: MLP loss/gradient/HVP/Hessian and Euler loops.

Same API and parameter layout as ``_kernels_py``.  Every kernel accepts
either float64 or complex128 parameters (fused specialisations).
"""

import numpy as np

from libc.math cimport cos, exp, sin, sqrt

ctypedef fused num:
    double
    double complex

cdef double GUARD_NORM = 1e12


cdef inline double _re(num z) noexcept nogil:
    if num is double:
        return z
    else:
        return z.real


cdef inline num _exp(num z) noexcept nogil:
    if num is double:
        return exp(z)
    else:
        return exp(z.real) * (cos(z.imag) + 1j * sin(z.imag))


cdef inline num _elu(num z) noexcept nogil:
    if _re(z) > 0:
        return z
    return _exp(z) - 1


cdef inline num _elu_d1(num z) noexcept nogil:
    if _re(z) > 0:
        return 1
    return _exp(z)


cdef inline num _elu_d2(num z) noexcept nogil:
    if _re(z) > 0:
        return 0
    return _exp(z)


cdef inline double _abs2(num z) noexcept nogil:
    if num is double:
        return z * z
    else:
        return z.real * z.real + z.imag * z.imag


cdef class _Layout:
    cdef public Py_ssize_t L, n, D, nact, out_dim
    cdef public object w, pw, pb, ao

    def __init__(self, widths, Py_ssize_t n):
        widths = [int(v) for v in widths]
        self.L = len(widths) - 1
        self.n = n
        self.out_dim = widths[self.L]
        pw, pb, ao = [], [], []
        off = 0
        aoff = 0
        for l in range(self.L):
            pw.append(off)
            off += widths[l] * widths[l + 1]
            pb.append(off)
            off += widths[l + 1]
        for l in range(self.L + 1):
            ao.append(aoff)
            aoff += n * widths[l]
        self.D = off
        self.nact = aoff
        self.w = np.asarray(widths, dtype=np.intp)
        self.pw = np.asarray(pw, dtype=np.intp)
        self.pb = np.asarray(pb, dtype=np.intp)
        self.ao = np.asarray(ao, dtype=np.intp)


cdef void _forward(num[::1] p, num[::1] act, num[::1] pre, const double[:, ::1] x,
                   Py_ssize_t n, Py_ssize_t L, Py_ssize_t[::1] w, Py_ssize_t[::1] pw,
                   Py_ssize_t[::1] pb, Py_ssize_t[::1] ao) noexcept nogil:
    cdef Py_ssize_t l, i, o, q, fin, fout
    cdef num s
    for i in range(n):
        for q in range(w[0]):
            act[ao[0] + i * w[0] + q] = x[i, q]
    for l in range(L):
        fin = w[l]
        fout = w[l + 1]
        for i in range(n):
            for o in range(fout):
                s = p[pb[l] + o]
                for q in range(fin):
                    s = s + act[ao[l] + i * fin + q] * p[pw[l] + o * fin + q]
                pre[ao[l + 1] + i * fout + o] = s
                if l < L - 1:
                    act[ao[l + 1] + i * fout + o] = _elu(s)
                else:
                    act[ao[l + 1] + i * fout + o] = s


cdef num _loss_grad(num[::1] p, num[::1] g, num[::1] act, num[::1] pre, num[::1] delta,
                    const double[:, ::1] x, const double[:, ::1] y,
                    Py_ssize_t n, Py_ssize_t L, Py_ssize_t[::1] w, Py_ssize_t[::1] pw,
                    Py_ssize_t[::1] pb, Py_ssize_t[::1] ao, bint want_grad) noexcept nogil:
    cdef Py_ssize_t l, i, o, q, fin, fout, m
    cdef num r, s, loss = 0
    cdef Py_ssize_t outd = w[L]
    cdef double N = n * outd
    _forward(p, act, pre, x, n, L, w, pw, pb, ao)
    for i in range(n):
        for o in range(outd):
            r = act[ao[L] + i * outd + o] - y[i, o]
            loss = loss + r * r
            delta[ao[L] + i * outd + o] = (2.0 / N) * r
    loss = loss / N
    if not want_grad:
        return loss
    for l in range(L - 1, -1, -1):
        fin = w[l]
        fout = w[l + 1]
        for o in range(fout):
            s = 0
            for i in range(n):
                s = s + delta[ao[l + 1] + i * fout + o]
            g[pb[l] + o] = s
            for q in range(fin):
                s = 0
                for i in range(n):
                    s = s + delta[ao[l + 1] + i * fout + o] * act[ao[l] + i * fin + q]
                g[pw[l] + o * fin + q] = s
        if l > 0:
            for i in range(n):
                for q in range(fin):
                    s = 0
                    for o in range(fout):
                        s = s + delta[ao[l + 1] + i * fout + o] * p[pw[l] + o * fin + q]
                    delta[ao[l] + i * fin + q] = s * _elu_d1(pre[ao[l] + i * fin + q])
    return loss


cdef void _hvp_after_forward(num[::1] p, num[::1] v, num[::1] out, num[::1] act, num[::1] pre,
                             num[::1] delta, num[::1] ra, num[::1] rz, num[::1] rd,
                             const double[:, ::1] y, Py_ssize_t n, Py_ssize_t L,
                             Py_ssize_t[::1] w, Py_ssize_t[::1] pw, Py_ssize_t[::1] pb,
                             Py_ssize_t[::1] ao) noexcept nogil:
    cdef Py_ssize_t l, i, o, q, fin, fout
    cdef num s, t, rt, z, d1
    cdef Py_ssize_t outd = w[L]
    cdef double N = n * outd
    for i in range(n * w[0]):
        ra[i] = 0
    for l in range(L):
        fin = w[l]
        fout = w[l + 1]
        for i in range(n):
            for o in range(fout):
                s = v[pb[l] + o]
                for q in range(fin):
                    s = s + ra[ao[l] + i * fin + q] * p[pw[l] + o * fin + q] \
                          + act[ao[l] + i * fin + q] * v[pw[l] + o * fin + q]
                rz[ao[l + 1] + i * fout + o] = s
                if l < L - 1:
                    ra[ao[l + 1] + i * fout + o] = _elu_d1(pre[ao[l + 1] + i * fout + o]) * s
                else:
                    ra[ao[l + 1] + i * fout + o] = s
    for i in range(n):
        for o in range(outd):
            delta[ao[L] + i * outd + o] = (2.0 / N) * (act[ao[L] + i * outd + o] - y[i, o])
            rd[ao[L] + i * outd + o] = (2.0 / N) * rz[ao[L] + i * outd + o]
    for l in range(L - 1, -1, -1):
        fin = w[l]
        fout = w[l + 1]
        for o in range(fout):
            s = 0
            for i in range(n):
                s = s + rd[ao[l + 1] + i * fout + o]
            out[pb[l] + o] = s
            for q in range(fin):
                s = 0
                for i in range(n):
                    s = s + rd[ao[l + 1] + i * fout + o] * act[ao[l] + i * fin + q] \
                          + delta[ao[l + 1] + i * fout + o] * ra[ao[l] + i * fin + q]
                out[pw[l] + o * fin + q] = s
        if l > 0:
            for i in range(n):
                for q in range(fin):
                    t = 0
                    rt = 0
                    for o in range(fout):
                        t = t + delta[ao[l + 1] + i * fout + o] * p[pw[l] + o * fin + q]
                        rt = rt + rd[ao[l + 1] + i * fout + o] * p[pw[l] + o * fin + q] \
                                + delta[ao[l + 1] + i * fout + o] * v[pw[l] + o * fin + q]
                    z = pre[ao[l] + i * fin + q]
                    d1 = _elu_d1(z)
                    delta[ao[l] + i * fin + q] = t * d1
                    rd[ao[l] + i * fin + q] = rt * d1 + t * _elu_d2(z) * rz[ao[l] + i * fin + q]


def _prep(params, x, y, widths):
    dtype = np.complex128 if np.iscomplexobj(params) else np.float64
    p = np.ascontiguousarray(params, dtype=dtype)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(np.reshape(y, (x.shape[0], -1)), dtype=np.float64)
    lay = _Layout(widths, x.shape[0])
    if lay.D != p.shape[0]:
        raise ValueError(f"parameter vector has length {p.shape[0]}, layout needs {lay.D}")
    return p, x, y, lay


def _loss_grad_impl(num[::1] p, num[::1] g, num[::1] act, num[::1] pre, num[::1] delta,
                    const double[:, ::1] x, const double[:, ::1] y, _Layout lay, bint want_grad):
    cdef Py_ssize_t[::1] w = lay.w, pw = lay.pw, pb = lay.pb, ao = lay.ao
    cdef num loss
    with nogil:
        loss = _loss_grad(p, g, act, pre, delta, x, y, lay.n, lay.L, w, pw, pb, ao, want_grad)
    return loss


def mlp_loss(params, x, y, widths):
    p, x, y, lay = _prep(params, x, y, widths)
    buf = lambda m: np.zeros(m, dtype=p.dtype)
    return _loss_grad_impl(p, buf(lay.D), buf(lay.nact), buf(lay.nact), buf(lay.nact), x, y, lay, False)


def mlp_loss_grad(params, x, y, widths):
    p, x, y, lay = _prep(params, x, y, widths)
    g = np.zeros(lay.D, dtype=p.dtype)
    buf = lambda m: np.zeros(m, dtype=p.dtype)
    loss = _loss_grad_impl(p, g, buf(lay.nact), buf(lay.nact), buf(lay.nact), x, y, lay, True)
    return loss, g


def _hvp_batch_impl(num[::1] p, num[:, ::1] V, num[:, ::1] out, const double[:, ::1] x,
                    const double[:, ::1] y, _Layout lay):
    cdef Py_ssize_t[::1] w = lay.w, pw = lay.pw, pb = lay.pb, ao = lay.ao
    cdef Py_ssize_t k, K = V.shape[0]
    if num is double:
        dt = np.float64
    else:
        dt = np.complex128
    cdef num[::1] act = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] pre = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] delta = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] ra = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] rz = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] rd = np.zeros(lay.nact, dtype=dt)
    with nogil:
        _forward(p, act, pre, x, lay.n, lay.L, w, pw, pb, ao)
        for k in range(K):
            _hvp_after_forward(p, V[k], out[k], act, pre, delta, ra, rz, rd, y,
                               lay.n, lay.L, w, pw, pb, ao)


def mlp_hvp_batch(params, x, y, widths, V):
    V = np.atleast_2d(V)
    if np.iscomplexobj(V) and not np.iscomplexobj(params):
        params = np.asarray(params, dtype=np.complex128)
    p, x, y, lay = _prep(params, x, y, widths)
    V = np.ascontiguousarray(V, dtype=p.dtype)
    out = np.zeros((V.shape[0], lay.D), dtype=p.dtype)
    _hvp_batch_impl(p, V, out, x, y, lay)
    return out


def mlp_hvp(params, x, y, widths, v):
    return mlp_hvp_batch(params, x, y, widths, np.asarray(v)[None, :])[0]


def mlp_hessian(params, x, y, widths):
    D = np.shape(params)[0]
    dtype = np.complex128 if np.iscomplexobj(params) else np.float64
    H = mlp_hvp_batch(params, x, y, widths, np.eye(D, dtype=dtype))
    return 0.5 * (H + H.T)


def euler_linear(A, c, theta0, double step, Py_ssize_t nsteps, Py_ssize_t sample_every):
    """Euler steps of ``theta' = A theta + c``; returns (samples, steps_done)."""
    cdef double complex[:, ::1] Av = np.ascontiguousarray(A, dtype=np.complex128)
    cdef double complex[::1] cv = np.ascontiguousarray(c, dtype=np.complex128)
    cdef double complex[::1] th = np.array(theta0, dtype=np.complex128)
    cdef Py_ssize_t D = th.shape[0]
    cdef double complex[::1] tmp = np.zeros(D, dtype=np.complex128)
    nsamp = nsteps // sample_every + 1
    samples_arr = np.zeros((nsamp, D), dtype=np.complex128)
    cdef double complex[:, ::1] samples = samples_arr
    cdef Py_ssize_t k, i, j, si = 1, done = nsteps
    cdef double complex s
    cdef double nrm
    samples[0, :] = th
    with nogil:
        for k in range(1, nsteps + 1):
            nrm = 0
            for i in range(D):
                s = cv[i]
                for j in range(D):
                    s = s + Av[i, j] * th[j]
                tmp[i] = s
            for i in range(D):
                th[i] = th[i] + step * tmp[i]
                nrm = nrm + _abs2(th[i])
            if not (sqrt(nrm) <= GUARD_NORM):
                done = k
                break
            if k % sample_every == 0:
                samples[si, :] = th
                si += 1
    return samples_arr[:si], done


def _gradflow_impl(num[::1] th, num coef, double step, Py_ssize_t nsteps, Py_ssize_t sample_every,
                   num[:, ::1] samples, const double[:, ::1] x, const double[:, ::1] y, _Layout lay):
    cdef Py_ssize_t[::1] w = lay.w, pw = lay.pw, pb = lay.pb, ao = lay.ao
    if num is double:
        dt = np.float64
    else:
        dt = np.complex128
    cdef num[::1] g = np.zeros(lay.D, dtype=dt)
    cdef num[::1] act = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] pre = np.zeros(lay.nact, dtype=dt)
    cdef num[::1] delta = np.zeros(lay.nact, dtype=dt)
    cdef Py_ssize_t k, i, si = 1, done = nsteps, D = lay.D
    cdef double nrm
    cdef num sc = step * coef
    samples[0, :] = th
    with nogil:
        for k in range(1, nsteps + 1):
            _loss_grad(th, g, act, pre, delta, x, y, lay.n, lay.L, w, pw, pb, ao, True)
            nrm = 0
            for i in range(D):
                th[i] = th[i] + sc * g[i]
                nrm = nrm + _abs2(th[i])
            if not (sqrt(nrm) <= GUARD_NORM):
                done = k
                break
            if k % sample_every == 0:
                samples[si, :] = th
                si += 1
    return si, done


def euler_mlp_gradflow(params, x, y, widths, coef, double step, Py_ssize_t nsteps, Py_ssize_t sample_every):
    """Euler steps of ``theta' = coef * grad E(theta)`` for the MLP loss."""
    if np.iscomplexobj(coef):
        params = np.asarray(params, dtype=np.complex128)
    p, x, y, lay = _prep(params, x, y, widths)
    th = p.copy()
    samples = np.zeros((nsteps // sample_every + 1, lay.D), dtype=p.dtype)
    coef = complex(coef) if p.dtype == np.complex128 else float(coef)
    si, done = _gradflow_impl(th, coef, step, nsteps, sample_every, samples, x, y, lay)
    return samples[:si], done
