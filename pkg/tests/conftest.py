import numpy as np
import pytest

from fedspeech import _kernels
from fedspeech.network import LayerSpec


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # JIT-compile the numba kernels once so per-test timings stay honest.
    _kernels.warm_up()


def tiny_stack(input_dim=8, hidden=4, n_classes=2, batchnorm=True):
    """Small two-hidden-layer stack for gradient and equivalence tests."""
    return (
        LayerSpec(input_dim, hidden, batchnorm, "relu"),
        LayerSpec(hidden, hidden, batchnorm, "relu"),
        LayerSpec(hidden, n_classes, False, "softmax"),
    )


def finite_difference_gradients(params, batch, labels, h=1e-5):
    """Central finite differences of the train-mode loss, parameter by
    parameter. Deliberately routed through forward + cross_entropy only."""
    from fedspeech import cross_entropy, forward

    def loss():
        probs, _ = forward(params, batch, "train")
        return cross_entropy(probs, labels)

    fd = []
    for _, arr, _ in params.trainable_arrays():
        g = np.empty_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss()
            arr[idx] = orig - h
            down = loss()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        fd.append(g)
    return fd


def max_relative_gradient_error(params, batch, labels, h=1e-5):
    """Worst relative disagreement between backward() and finite differences.

    The denominator floor keeps structurally-zero gradients (e.g. biases under
    batchnorm) from turning finite-difference noise into spurious errors.
    """
    from fedspeech import backward, forward

    _, cache = forward(params, batch, "train")
    grads = backward(cache, labels)
    fd = finite_difference_gradients(params, batch, labels, h)
    worst = 0.0
    for analytic, numeric in zip(grads.trainable_arrays(), fd):
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
