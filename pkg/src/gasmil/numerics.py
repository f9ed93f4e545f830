"""Dense float64 arithmetic, activations, AdamW and a finite-difference checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Most helpers
also accept leading batch axes, so a stack of bags ``(B, n, m)`` flows through
the same code as a single ``(n, m)`` bag.

Randomness comes from :func:`make_rng`, a ``numpy.random.Generator`` backed by
PCG64.  PCG64 output for a given seed is fixed across platforms and numpy
releases, which is what makes training runs bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, ParameterError

ADAMW_LR = 0.001
ADAMW_WEIGHT_DECAY = 0.05
ADAMW_BETA1 = 0.9
ADAMW_BETA2 = 0.999
ADAMW_EPS = 1e-8


def make_rng(seed):
    """Deterministic PCG64 generator for ``seed`` (an int or a SeedSequence)."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def as_matrix(x):
    return np.asarray(x, dtype=np.float64)


def linear_affine(x, w, b):
    """``x @ w + b`` with explicit shape checking.

    ``x`` may carry leading batch axes; ``w`` is ``(p, q)`` and ``b`` has ``q``
    entries (a flat vector or a ``1 x q`` row).
    """
    x = as_matrix(x)
    w = as_matrix(w)
    b = as_matrix(b).reshape(-1)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise DimensionError(
            f"cannot apply affine map: input {x.shape}, weight {w.shape}, bias {b.shape}"
        )
    return x @ w + b


def sigmoid_map(x):
    """Elementwise logistic function, stable for any finite or infinite input."""
    return expit(as_matrix(x))


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow."""
    x = as_matrix(x)
    return -np.logaddexp(0.0, -x)


def row_softmax(x, axis=-1):
    x = as_matrix(x)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def dropout_mask(shape, p, rng):
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout_apply(x, p, training, rng):
    x = as_matrix(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x.copy()
    return x * dropout_mask(x.shape, p, rng)


@dataclass
class Parameter:
    """A trainable array with its gradient and AdamW moment buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None)
    m1: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        for attr in ("grad", "m1", "m2"):
            current = getattr(self, attr)
            if current is None:
                setattr(self, attr, np.zeros_like(self.value))
            elif np.shape(current) != self.value.shape:
                raise DimensionError(
                    f"{attr} of parameter {self.name!r} has shape {np.shape(current)}, "
                    f"expected {self.value.shape}"
                )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def adamw_step(
    param,
    lr=ADAMW_LR,
    wd=ADAMW_WEIGHT_DECAY,
    beta1=ADAMW_BETA1,
    beta2=ADAMW_BETA2,
    eps=ADAMW_EPS,
):
    """One AdamW update of ``param`` in place (decoupled weight decay).

    The decay term uses the pre-update value::

        value <- value - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * value
    """
    if lr < 0 or wd < 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
        raise ParameterError(
            f"invalid AdamW hyperparameters lr={lr} wd={wd} betas=({beta1}, {beta2}) eps={eps}"
        )
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {param.name!r}")
    param.step_count += 1
    t = param.step_count
    param.m1 *= beta1
    param.m1 += (1.0 - beta1) * g
    param.m2 *= beta2
    param.m2 += (1.0 - beta2) * g * g
    m_hat = param.m1 / (1.0 - beta1**t)
    v_hat = param.m2 / (1.0 - beta2**t)
    update = lr * (m_hat / (np.sqrt(v_hat) + eps)) + (lr * wd) * param.value
    param.value -= update
    return param


def finite_diff_check(loss_fn, params, epsilon=1e-5, max_coords=None, rng=None):
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps each
    key of ``params`` to an array of the same shape.  ``params`` maps names to
    float64 arrays that are perturbed in place and restored afterwards.  When
    ``max_coords`` is given, at most that many coordinates per array are
    checked, chosen with ``rng``.

    The error at one coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericError(f"loss is not finite: {loss0}")
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    if rng is None:
        rng = make_rng(0)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if arr.size and not np.shares_memory(flat, arr):
            raise ParameterError(f"parameter {name!r} must be contiguous for in-place perturbation")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus, _ = loss_fn(params)
            flat[i] = orig - epsilon
            minus, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"loss became non-finite while perturbing {name}[{i}]")
            numeric = (plus - minus) / (2.0 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
