"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` function for function and are selected by
:mod:`pflow.kernels` when the compiled extension is unavailable.

MLP parameter layout: for each layer ``l`` the weight matrix ``W_l``
(shape ``out x in``, row-major) followed by the bias ``b_l``.  Hidden
layers use Elu (extended to complex arguments by the sign of the real
part); the output layer is linear; the loss is the mean squared error
over all outputs.
"""

import numpy as np

GUARD_NORM = 1e12


def _layers(params, widths):
    out, off = [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = params[off : off + fan_in * fan_out].reshape(fan_out, fan_in)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        out.append((W, b))
    return out


def _elu(z):
    pos = z.real > 0
    e = np.exp(np.where(pos, 0, z)) - 1
    return np.where(pos, z, e)


def _elu_d1(z):
    pos = z.real > 0
    return np.where(pos, 1, np.exp(np.where(pos, 0, z)))


def _elu_d2(z):
    pos = z.real > 0
    return np.where(pos, 0, np.exp(np.where(pos, 0, z)))


def _forward(params, x, widths):
    layers = _layers(params, widths)
    acts, pre = [x.astype(params.dtype)], []
    for l, (W, b) in enumerate(layers):
        z = acts[-1] @ W.T + b
        pre.append(z)
        acts.append(_elu(z) if l < len(layers) - 1 else z)
    return layers, acts, pre


def mlp_loss(params, x, y, widths):
    _, acts, _ = _forward(params, x, widths)
    r = acts[-1] - y
    return (r * r).sum() / r.size


def mlp_loss_grad(params, x, y, widths):
    layers, acts, pre = _forward(params, x, widths)
    r = acts[-1] - y
    loss = (r * r).sum() / r.size
    delta = (2.0 / r.size) * r
    grads = []
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads.append(delta.sum(0))
        grads.append((delta.T @ acts[l]).ravel())
        if l:
            delta = (delta @ W) * _elu_d1(pre[l - 1])
    return loss, np.concatenate(grads[::-1])


def mlp_hvp_batch(params, x, y, widths, V):
    """Hessian times each row of ``V`` (shape ``K x D``) by forward-over-reverse."""
    V = np.atleast_2d(V).astype(np.result_type(params, V))
    layers, acts, pre = _forward(params, x, widths)
    vlayers = [_layers(v, widths) for v in V]
    K = V.shape[0]
    L = len(layers)
    r = acts[-1] - y
    N = r.size

    Ra = [np.zeros((K,) + acts[0].shape, dtype=V.dtype)]
    Rz = []
    for l, (W, b) in enumerate(layers):
        VW = np.stack([vl[l][0] for vl in vlayers])
        Vb = np.stack([vl[l][1] for vl in vlayers])
        rz = Ra[-1] @ W.T + np.einsum("ni,koi->kno", acts[l], VW) + Vb[:, None, :]
        Rz.append(rz)
        Ra.append(_elu_d1(pre[l]) * rz if l < L - 1 else rz)

    delta = (2.0 / N) * r
    rdelta = (2.0 / N) * Rz[-1]
    blocks = [[] for _ in range(K)]
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        VW = np.stack([vl[l][0] for vl in vlayers])
        rgW = np.einsum("kno,ni->koi", rdelta, acts[l]) + np.einsum("no,kni->koi", delta, Ra[l])
        rgb = rdelta.sum(1)
        for k in range(K):
            blocks[k].append(rgb[k])
            blocks[k].append(rgW[k].ravel())
        if l:
            t = delta @ W
            rt = rdelta @ W + np.einsum("no,koi->kni", delta, VW)
            d1, d2 = _elu_d1(pre[l - 1]), _elu_d2(pre[l - 1])
            rdelta = rt * d1 + t * d2 * Rz[l - 1]
            delta = t * d1
    return np.stack([np.concatenate(b[::-1]) for b in blocks])


def mlp_hvp(params, x, y, widths, v):
    return mlp_hvp_batch(params, x, y, widths, v[None, :])[0]


def mlp_hessian(params, x, y, widths):
    D = params.shape[0]
    H = mlp_hvp_batch(params, x, y, widths, np.eye(D, dtype=params.dtype))
    return 0.5 * (H + H.T)


def euler_linear(A, c, theta0, step, nsteps, sample_every):
    """Euler steps of ``theta' = A theta + c``; returns (samples, steps_done)."""
    theta = np.array(theta0, dtype=complex)
    samples = [theta.copy()]
    for k in range(1, nsteps + 1):
        theta = theta + step * (A @ theta + c)
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > GUARD_NORM:
            return np.array(samples), k
        if k % sample_every == 0:
            samples.append(theta.copy())
    return np.array(samples), nsteps


def euler_mlp_gradflow(params, x, y, widths, coef, step, nsteps, sample_every):
    """Euler steps of ``theta' = coef * grad E(theta)`` for the MLP loss."""
    theta = np.array(params, dtype=np.result_type(params, coef))
    samples = [theta.copy()]
    for k in range(1, nsteps + 1):
        _, g = mlp_loss_grad(theta, x, y, widths)
        theta = theta + (step * coef) * g
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > GUARD_NORM:
            return np.array(samples), k
        if k % sample_every == 0:
            samples.append(theta.copy())
    return np.array(samples), nsteps
