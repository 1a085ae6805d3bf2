"""Dense float64 tensor math with hand-written analytic gradients.

Tensors are plain C-order ``numpy`` arrays in float64. Every loss-bearing
operation comes with a companion ``*_backward`` (or ``*_grad``) function so
the training losses can chain them explicitly, and ``grad_check`` verifies
any such composition against central finite differences.

A gradient set is a ``dict`` mapping parameter name -> gradient array of the
same shape as the parameter.
"""

from __future__ import annotations

import numpy as np

GradientSet = dict[str, np.ndarray]

# Arguments of sqrt in the Hellinger gradient are clamped here so the
# gradient stays finite when an attention weight underflows to 0.
HELLINGER_CLAMP = 1e-12


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def require_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# softmax family

def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def spatial_softmax(logits: np.ndarray) -> np.ndarray:
    """Per-head softmax over all H*W positions of a (K, H, W) logit stack.

    Each output slice is nonnegative and sums to 1; stabilized by per-map
    max subtraction.
    """
    z = _as_f64(logits)
    if z.ndim != 3:
        raise ValueError(f"expected (K, H, W) logits, got shape {z.shape}")
    require_finite("logits", z)
    k, h, w = z.shape
    flat = softmax(z.reshape(k, h * w))
    return flat.reshape(k, h, w)


def spatial_softmax_backward(maps: np.ndarray, grad_maps: np.ndarray) -> np.ndarray:
    """Gradient through spatial_softmax.

    ``maps`` is the forward output A (K, H, W), ``grad_maps`` is dL/dA;
    returns dL/dlogits with the same shape.
    """
    a = _as_f64(maps)
    g = _as_f64(grad_maps)
    k = a.shape[0]
    af = a.reshape(k, -1)
    gf = g.reshape(k, -1)
    inner = (af * gf).sum(axis=1, keepdims=True)
    return (af * (gf - inner)).reshape(a.shape)


# ---------------------------------------------------------------------------
# divergences

def hellinger_sq(p: np.ndarray, q: np.ndarray) -> float:
    """Squared Hellinger distance 1 - sum_t sqrt(p_t q_t) between two
    discrete distributions; symmetric, in [0, 1] for simplex inputs."""
    p = _as_f64(p).ravel()
    q = _as_f64(q).ravel()
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be nonnegative")
    return float(1.0 - np.sqrt(p * q).sum())


def hellinger_sq_grad(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of hellinger_sq w.r.t. both arguments.

    sqrt arguments are clamped to >= HELLINGER_CLAMP so the gradient stays
    finite at zero entries.
    """
    p = np.maximum(_as_f64(p).ravel(), HELLINGER_CLAMP)
    q = np.maximum(_as_f64(q).ravel(), HELLINGER_CLAMP)
    ratio = np.sqrt(q / p)
    return -0.5 * ratio, -0.5 / ratio


# ---------------------------------------------------------------------------
# losses on probability vectors / logits

def cross_entropy_from_logits(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], log-sum-exp stabilized."""
    z = _as_f64(logits).ravel()
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} logits")
    return float(-log_softmax(z)[label])


def cross_entropy_grad(logits: np.ndarray, label: int) -> np.ndarray:
    """dCE/dlogits = softmax(logits) - onehot(label)."""
    z = _as_f64(logits).ravel()
    if not 0 <= label < z.shape[0]:
        raise IndexError(f"label {label} out of range for {z.shape[0]} logits")
    g = softmax(z)
    g[label] -= 1.0
    return g


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum p log p in nats, with 0*log 0 = 0."""
    p = _as_f64(p).ravel()
    if (p < 0).any():
        raise ValueError("distribution entries must be nonnegative")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_to_uniform(p: np.ndarray) -> float:
    """KL(p || uniform) = log C - entropy(p) = sum p log(p*C), nats."""
    p = _as_f64(p).ravel()
    c = p.shape[0]
    if c == 0:
        raise ValueError("empty distribution")
    if (p < 0).any():
        raise ValueError("distribution entries must be nonnegative")
    return float(np.log(c) - entropy(p))


def kl_to_uniform_grad_logits(logits: np.ndarray) -> np.ndarray:
    """Gradient of KL(softmax(z) || uniform) w.r.t. the logits z.

    With p = softmax(z) and g = log p + log C this is p * (g - p.g).
    """
    z = _as_f64(logits).ravel()
    c = z.shape[0]
    if c == 0:
        raise ValueError("empty logits")
    p = softmax(z)
    g = log_softmax(z) + np.log(c)
    return p * (g - float(p @ g))


# ---------------------------------------------------------------------------
# supporting ops (standard semantics, analytic gradients)

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _as_f64(a) @ _as_f64(b)


def matmul_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = _as_f64(grad)
    return g @ _as_f64(b).T, _as_f64(a).T @ g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return _as_f64(grad) * (_as_f64(x) > 0)


def conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1x1 channel-mixing convolution over an (H, W, C_in) grid.

    Equivalent to a per-cell affine map: out[h, w] = x[h, w] @ w + b.
    """
    x = _as_f64(x)
    w = _as_f64(w)
    if x.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape} vs weights {w.shape}")
    return x @ w + _as_f64(b)


def conv1x1_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dL/dx, dL/dw, dL/db) for conv1x1."""
    x = _as_f64(x)
    g = _as_f64(grad)
    h, wd, cin = x.shape
    cout = g.shape[2]
    gx = g @ _as_f64(w).T
    gw = x.reshape(-1, cin).T @ g.reshape(-1, cout)
    gb = g.reshape(-1, cout).sum(axis=0)
    return gx, gw, gb


def spatial_mean(x: np.ndarray) -> np.ndarray:
    """Mean over the two leading spatial axes of an (H, W, C) map."""
    x = _as_f64(x)
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C), got shape {x.shape}")
    return x.mean(axis=(0, 1))


def spatial_mean_backward(shape: tuple[int, int, int], grad: np.ndarray) -> np.ndarray:
    h, w, c = shape
    return np.broadcast_to(_as_f64(grad) / (h * w), (h, w, c)).copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _as_f64(a) + _as_f64(b)


def add_backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = _as_f64(grad)
    return g, g


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return _as_f64(x) * float(s)


def scale_backward(s: float, grad: np.ndarray) -> np.ndarray:
    return _as_f64(grad) * float(s)


# ---------------------------------------------------------------------------
# finite-difference checker

def grad_check(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps
    every key of ``params`` to an array of matching shape. The relative
    error per coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    The loss must be twice differentiable at the probe point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at probe point")
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.asarray(p).shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {np.asarray(p).shape} for {name!r}")
        flat = params[name].reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            hi, _ = loss_fn(params)
            flat[i] = orig - eps
            lo, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("non-finite loss at probe point")
            numeric = (hi - lo) / (2.0 * eps)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
