"""Dense numeric kernel: a 3-layer MLP with hand-written reverse-mode
gradients, row normalization, and a central finite-difference checker.

Matrices are plain ``numpy`` float64 arrays of shape ``(rows, cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

N_LAYERS = 3


def _float_dtype(x):
    # keep float64 or wider (extended precision is used by the FD oracle)
    dt = np.result_type(x)
    if np.issubdtype(dt, np.floating) and dt.itemsize >= 8:
        return dt
    return np.float64


def as_matrix(x, name="x") -> np.ndarray:
    m = np.asarray(x, dtype=_float_dtype(x))
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


@dataclass
class MlpParams:
    """Weights and biases of a 3-layer MLP.

    ``weights[k]`` has shape ``(fan_in, fan_out)`` so that a layer computes
    ``x @ W + b``. Hidden layers use the rectifier, the output layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ShapeError(f"MLP must have exactly {N_LAYERS} layers")
        self.weights = [np.asarray(w, dtype=_float_dtype(w)) for w in self.weights]
        self.biases = [np.asarray(b, dtype=_float_dtype(b)) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} input width {w.shape[0]} does not chain "
                                 f"from layer {k - 1} output {self.weights[k - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order ``W0, b0, W1, b1, W2, b2``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        return cls(weights=arrays[0::2], biases=arrays[1::2])

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()])

    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays()]


@dataclass
class GradBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class MlpCache:
    # layer inputs and pre-activations, one entry per layer
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)


def init_mlp(dims: Sequence[int], seed: int, tag: int = 0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, one RNG stream per layer.

    ``dims`` lists the 4 widths ``(in, hidden1, hidden2, out)``.
    """
    if len(dims) != N_LAYERS + 1:
        raise ShapeError(f"need {N_LAYERS + 1} widths, got {len(dims)}")
    weights, biases = [], []
    for k in range(N_LAYERS):
        rng = np.random.default_rng([seed, tag, k])
        bound = 1.0 / np.sqrt(dims[k])
        weights.append(rng.uniform(-bound, bound, size=(dims[k], dims[k + 1])))
        biases.append(rng.uniform(-bound, bound, size=dims[k + 1]))
    return MlpParams(weights, biases)


def relu(x):
    return np.maximum(x, 0.0)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    x = as_matrix(x)
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, MLP expects {params.in_dim}")
    cache = MlpCache(shapes=params.shapes())
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.preacts.append(z)
        h = relu(z) if k < N_LAYERS - 1 else z
    return h, cache


def mlp_backward(params: MlpParams, cache: MlpCache, upstream) -> GradBundle:
    upstream = as_matrix(upstream, "upstream")
    if cache.shapes != params.shapes() or len(cache.inputs) != N_LAYERS:
        raise ShapeError("cache does not belong to these parameters")
    if upstream.shape != cache.preacts[-1].shape:
        raise ShapeError(f"upstream {upstream.shape} != output {cache.preacts[-1].shape}")
    dws = [None] * N_LAYERS
    dbs = [None] * N_LAYERS
    dz = upstream
    for k in reversed(range(N_LAYERS)):
        if k < N_LAYERS - 1:
            dz = dz * (cache.preacts[k] > 0.0)
        dws[k] = cache.inputs[k].T @ dz
        dbs[k] = dz.sum(axis=0)
        dz = dz @ params.weights[k].T
    return GradBundle(weights=dws, biases=dbs, input=dz)


def l2_normalize_rows(m) -> tuple[np.ndarray, np.ndarray]:
    """Scale every row to unit Euclidean norm.

    Returns ``(normalized, zero_rows)`` where ``zero_rows`` is a boolean mask of
    all-zero rows; those rows are passed through unchanged.
    """
    m = as_matrix(m, "m")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return m / safe[:, None], zero


def l2_normalize_backward(raw, normalized, upstream) -> np.ndarray:
    """Gradient through ``y = x / ||x||`` for each row; zero rows pass 0."""
    norms = np.linalg.norm(raw, axis=1)
    safe = np.where(norms == 0.0, np.inf, norms)
    radial = np.einsum("ij,ij->i", normalized, upstream)
    return (upstream - normalized * radial[:, None]) / safe[:, None]


def grad_check(
    loss_and_grad: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    oracle_dtype=np.longdouble,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` must return ``(loss, grads)`` with ``grads``
    shaped like ``params``. The analytic gradient is always taken at float64.
    The perturbed loss evaluations run in ``oracle_dtype``, extended precision
    by default: a float64 central difference has a ~1e-10 absolute rounding
    floor, which otherwise dominates the relative error on near-zero gradient
    coordinates. Pass ``np.float64`` for a plain check (the loss must then only
    support float64). The caller's arrays are left untouched.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    loss, analytic = loss_and_grad(base)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the base point")
    params = [p.astype(oracle_dtype) for p in base]
    worst = 0.0
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[i], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_and_grad(params)[0]
            flat[j] = orig - epsilon
            down = loss_and_grad(params)[0]
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss not finite when perturbing param {i}[{j}]")
            numeric = float((up - down) / (2 * p.dtype.type(epsilon)))
            a = a_flat[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
