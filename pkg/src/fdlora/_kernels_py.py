"""Numpy reference versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating-point operation order. Inputs are never mutated.
"""
import numpy as np


def matmul(a, b):
    return a @ b


def softmax_xent(logits, labels, scale):
    """Per-example cross-entropy and ``scale * (softmax - onehot)``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=1)
    rows = np.arange(n)
    losses = np.log(total) - shifted[rows, labels]
    grad = expd / total[:, None]
    grad[rows, labels] -= 1.0
    grad *= scale
    return losses, grad


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    m_new = beta1 * m + (1.0 - beta1) * g
    v_new = beta2 * v + (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    p_new = p - lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + eps)
    p_new = p_new - (lr * weight_decay) * p_new
    return p_new, m_new, v_new


def nesterov_update(theta, delta, buf, lr, momentum):
    buf_new = momentum * buf + delta
    theta_new = theta - lr * (delta + momentum * buf_new)
    return theta_new, buf_new
