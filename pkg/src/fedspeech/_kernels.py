"""Fused numeric kernels for the training hot path.

All kernels are sequential (no threading) so results are bit-reproducible,
and operate on C-contiguous float64 arrays. fastmath stays off: IEEE-754
semantics are part of the reproducibility contract.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def adam_update(param, grad, m, v, lr_c1, inv_sqrt_c2, beta1, beta2, eps, decay):
    """One bias-corrected Adam step on a single parameter array, in place.

    lr_c1 = learning_rate / (1 - beta1**t) and inv_sqrt_c2 = 1 / sqrt(1 - beta2**t)
    are precomputed per step so the per-element work is a single fused pass.
    decay is the L2 coefficient added to the raw gradient (0 for non-weight arrays).
    """
    p = param.ravel()
    g = grad.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(p.size):
        gi = g[i] + decay * p[i]
        mi = beta1 * mf[i] + (1.0 - beta1) * gi
        vi = beta2 * vf[i] + (1.0 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        p[i] = p[i] - lr_c1 * mi / (np.sqrt(vi) * inv_sqrt_c2 + eps)


@njit(cache=True)
def bn_relu_forward_train(z, gamma, beta, momentum, eps, running_mean, running_var,
                          mean_out, inv_std_out, z_hat_out, h_out, a_out):
    """Train-mode batch normalization followed by ReLU.

    Normalizes each feature of z with the population batch statistics, applies
    the gamma/beta affine and ReLU, and updates the running statistics in place
    with running <- (1 - momentum) * running + momentum * batch_stat.
    """
    rows, cols = z.shape
    for f in range(cols):
        s = 0.0
        for b in range(rows):
            s += z[b, f]
        mu = s / rows
        s2 = 0.0
        for b in range(rows):
            d = z[b, f] - mu
            s2 += d * d
        var = s2 / rows
        inv = 1.0 / np.sqrt(var + eps)
        mean_out[f] = mu
        inv_std_out[f] = inv
        running_mean[f] = (1.0 - momentum) * running_mean[f] + momentum * mu
        running_var[f] = (1.0 - momentum) * running_var[f] + momentum * var
        g = gamma[f]
        bt = beta[f]
        for b in range(rows):
            zh = (z[b, f] - mu) * inv
            z_hat_out[b, f] = zh
            hv = g * zh + bt
            h_out[b, f] = hv
            a_out[b, f] = hv if hv > 0.0 else 0.0


@njit(cache=True)
def bn_relu_backward(d_a, h, z_hat, inv_std, gamma, d_z_out, d_gamma_out, d_beta_out):
    """Backward pass through ReLU and train-mode batch normalization.

    d_a is the gradient w.r.t. the ReLU output; d_z_out receives the gradient
    w.r.t. the batchnorm input. Uses the closed form for population-variance
    batch statistics.
    """
    rows, cols = d_a.shape
    for f in range(cols):
        sg = 0.0
        sb = 0.0
        for b in range(rows):
            dh = d_a[b, f] if h[b, f] > 0.0 else 0.0
            d_z_out[b, f] = dh
            sg += dh * z_hat[b, f]
            sb += dh
        d_gamma_out[f] = sg
        d_beta_out[f] = sb
        c = gamma[f] * inv_std[f] / rows
        for b in range(rows):
            dh = d_z_out[b, f]
            d_z_out[b, f] = c * (rows * dh - sb - z_hat[b, f] * sg)


def warm_up():
    """Trigger JIT compilation of all kernels on tiny inputs."""
    z = np.zeros((2, 3))
    g = np.ones(3)
    b = np.zeros(3)
    rm = np.zeros(3)
    rv = np.ones(3)
    buf = np.zeros((2, 3))
    vec = np.zeros(3)
    bn_relu_forward_train(z, g, b, 0.1, 1e-5, rm, rv,
                          vec.copy(), vec.copy(), buf.copy(), buf.copy(), buf.copy())
    bn_relu_backward(buf, buf, buf, vec, g, buf.copy(), vec.copy(), vec.copy())
    p = np.zeros(4)
    adam_update(p, np.ones(4), np.zeros(4), np.zeros(4), 1e-3, 1.0, 0.9, 0.999, 1e-8, 0.0)
