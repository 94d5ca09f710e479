"""Trainable regressors: closed-form ridge and a small numpy MLP.

Training is plain seeded mini-batch SGD with hand-written backpropagation, so
identical (spec, data, seed) always reproduce identical parameter vectors.
Models carrying the ``nonnegative`` output constraint pass the raw network
output through softplus, which keeps bound-model predictions strictly
positive.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError, DivergenceError, SerializationError
from .seeding import derive_seed

KIND_LINEAR = "linear"
KIND_MLP = "mlp"
ACTIVATIONS = ("tanh", "relu")
OUTPUT_FREE = "free"
OUTPUT_NONNEGATIVE = "nonnegative"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegressorSpec:
    """Architecture and training hyperparameters for one regressor."""

    kind: str = KIND_LINEAR
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    l2: float = 0.0
    output: str = OUTPUT_FREE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in (KIND_LINEAR, KIND_MLP):
            raise ConfigError(f"unknown regressor kind {self.kind!r}")
        if self.kind == KIND_MLP and not self.hidden:
            raise ConfigError("mlp kind needs at least one hidden layer")
        if self.kind == KIND_LINEAR and self.hidden:
            raise ConfigError("linear kind takes no hidden layers")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden layer sizes must be positive, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.l2 < 0:
            raise ConfigError(f"l2 penalty must be >= 0, got {self.l2}")
        if self.output not in (OUTPUT_FREE, OUTPUT_NONNEGATIVE):
            raise ConfigError(f"unknown output constraint {self.output!r}")


def layer_sizes(spec: RegressorSpec, d: int) -> list[int]:
    return [d, *spec.hidden, 1]


def param_count(spec: RegressorSpec, d: int) -> int:
    sizes = layer_sizes(spec, d)
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class Regressor:
    """A fitted predictor: spec, input dimension, and a flat parameter vector."""

    spec: RegressorSpec
    d: int
    params: np.ndarray
    final_loss: float
    epochs_run: int

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        expected = param_count(self.spec, self.d)
        if params.shape != (expected,):
            raise ConfigError(
                f"parameter vector has length {params.size}, spec/d imply {expected}"
            )
        if not np.all(np.isfinite(params)):
            raise ConfigError("parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)


def _unpack(params: np.ndarray, sizes: list[int]):
    """Views (W, b) per layer; W is (fan_in, fan_out)."""
    layers, offset = [], 0
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_params(spec: RegressorSpec, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    sizes = layer_sizes(spec, d)
    chunks = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(spec: RegressorSpec, params: np.ndarray, X: np.ndarray):
    """Returns (prediction vector, per-layer caches for backprop)."""
    layers = _unpack(params, layer_sizes(spec, X.shape[1]))
    a, caches = X, []
    for w, b in layers[:-1]:
        z = a @ w + b
        a_next = _activate(z, spec.activation)
        caches.append((a, z, a_next))
        a = a_next
    w, b = layers[-1]
    raw = (a @ w + b)[:, 0]
    caches.append((a, raw, None))
    if spec.output == OUTPUT_NONNEGATIVE:
        pred = np.logaddexp(0.0, raw)  # softplus, overflow-safe
    else:
        pred = raw
    return pred, caches


def predict_batch(model: Regressor, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DataError(f"expected inputs of shape (n, {model.d}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("inputs must be finite")
    pred, _ = _forward(model.spec, model.params, X)
    return pred


def predict(model: Regressor, x) -> float:
    """Evaluate the model at a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise DataError(f"expected input of shape ({model.d},), got {x.shape}")
    return float(predict_batch(model, x[None, :])[0])


def loss_and_grad(
    spec: RegressorSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray]:
    """MSE plus l2 * sum of squared weights (biases unpenalized), with gradient."""
    n = X.shape[0]
    sizes = layer_sizes(spec, X.shape[1])
    layers = _unpack(params, sizes)
    pred, caches = _forward(spec, params, X)
    err = pred - y
    loss = float(np.mean(err * err))

    grad = np.zeros_like(params)
    grad_layers = _unpack(grad, sizes)

    a_last, raw, _ = caches[-1]
    dpred = 2.0 * err / n
    if spec.output == OUTPUT_NONNEGATIVE:
        draw = dpred * _sigmoid(raw)
    else:
        draw = dpred
    delta = draw[:, None]  # (n, 1)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_layers[i]
        a_in = caches[i][0]
        gw += a_in.T @ delta
        gb += delta.sum(axis=0)
        if i > 0:
            _, z_prev, a_prev = caches[i - 1]
            delta = (delta @ w.T) * _activate_grad(z_prev, a_prev, spec.activation)

    if spec.l2 > 0.0:
        for (w, _), (gw, _) in zip(layers, grad_layers):
            loss += spec.l2 * float(np.sum(w * w))
            gw += 2.0 * spec.l2 * w
    return loss, grad


def _fit_linear_closed_form(spec: RegressorSpec, train: Dataset) -> Regressor:
    # minimize mean((Xw + b - y)^2) + l2 * ||w||^2; bias unpenalized
    A = np.hstack([train.X, np.ones((train.n, 1))])
    if spec.l2 == 0.0:
        theta, *_ = np.linalg.lstsq(A, train.y, rcond=None)
    else:
        reg = np.eye(train.d + 1) * (train.n * spec.l2)
        reg[-1, -1] = 0.0
        theta = np.linalg.solve(A.T @ A + reg, A.T @ train.y)
    params = np.concatenate([theta[:-1], theta[-1:]])
    loss, _ = loss_and_grad(spec, params, train.X, train.y)
    if not np.isfinite(loss) or not np.all(np.isfinite(params)):
        raise DivergenceError(0, "least-squares solution is not finite")
    return Regressor(spec=spec, d=train.d, params=params, final_loss=loss, epochs_run=0)


def _run_sgd(
    spec: RegressorSpec,
    params: np.ndarray,
    data: Dataset,
    epochs: int,
    learning_rate: float,
    shuffle_rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    X, y = data.X, data.y
    loss, _ = loss_and_grad(spec, params, X, y)
    for epoch in range(epochs):
        perm = shuffle_rng.permutation(data.n)
        for start in range(0, data.n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            _, grad = loss_and_grad(spec, params, X[idx], y[idx])
            params = params - learning_rate * grad
        loss, _ = loss_and_grad(spec, params, X, y)
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
    return params, loss


def fit(spec: RegressorSpec, train: Dataset) -> Regressor:
    """Train a fresh regressor on ``train``.

    Linear models with a free output are solved in closed form; everything
    else runs ``spec.epochs`` epochs of seeded mini-batch SGD. A linear model
    with the nonnegative constraint is trained as a zero-hidden-layer network
    because softplus removes the closed form.
    """
    if train.n < 1:
        raise DataError("cannot fit on an empty training set")
    if spec.kind == KIND_LINEAR and spec.output == OUTPUT_FREE:
        return _fit_linear_closed_form(spec, train)
    init_rng = np.random.default_rng(derive_seed(spec.seed, "init"))
    params = init_params(spec, train.d, init_rng)
    shuffle_rng = np.random.default_rng(derive_seed(spec.seed, "shuffle"))
    params, loss = _run_sgd(spec, params, train, spec.epochs, spec.learning_rate, shuffle_rng)
    return Regressor(spec=spec, d=train.d, params=params, final_loss=loss, epochs_run=spec.epochs)


def fine_tune(model: Regressor, data: Dataset, epochs: int, learning_rate: float) -> Regressor:
    """Continue training from the model's current parameters on new data.

    Returns a new regressor; the input model is untouched. ``epochs=0``
    reproduces the input parameters exactly.
    """
    if data.n < 1:
        raise DataError("cannot fine-tune on an empty dataset")
    if data.d != model.d:
        raise DataError(f"data has d={data.d}, model expects d={model.d}")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if epochs > 0 and learning_rate <= 0:
        raise ConfigError(f"learning rate must be > 0, got {learning_rate}")
    shuffle_rng = np.random.default_rng(derive_seed(model.spec.seed, "fine-tune"))
    params, loss = _run_sgd(
        model.spec, model.params.copy(), data, epochs, learning_rate, shuffle_rng
    )
    return Regressor(
        spec=model.spec, d=model.d, params=params, final_loss=loss, epochs_run=epochs
    )


@dataclass(frozen=True)
class GradientCheckReport:
    max_relative_error: float
    worst_param_index: int
    n_params: int
    tolerance: float
    passed: bool


def gradient_check(
    spec: RegressorSpec, data: Dataset, tolerance: float = 1e-4, step: float = 1e-5
) -> GradientCheckReport:
    """Compare the analytic loss gradient against central finite differences.

    Runs at freshly initialized parameters over every parameter in turn.
    Report-only: the result says whether the worst relative error stayed
    within ``tolerance``.
    """
    if spec.kind != KIND_MLP:
        raise ConfigError("gradient_check supports the mlp kind only")
    if data.n < 1 or data.n > 32:
        raise DataError(f"gradient_check expects 1..32 samples, got {data.n}")
    rng = np.random.default_rng(derive_seed(spec.seed, "init"))
    params = init_params(spec, data.d, rng)
    _, analytic = loss_and_grad(spec, params, data.X, data.y)
    numeric = np.zeros_like(params)
    for j in range(params.size):
        bumped = params.copy()
        bumped[j] += step
        hi, _ = loss_and_grad(spec, bumped, data.X, data.y)
        bumped[j] -= 2.0 * step
        lo, _ = loss_and_grad(spec, bumped, data.X, data.y)
        numeric[j] = (hi - lo) / (2.0 * step)
    # floor keeps near-zero gradients from dividing rounding noise by ~0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradientCheckReport(
        max_relative_error=float(rel[worst]),
        worst_param_index=worst,
        n_params=params.size,
        tolerance=tolerance,
        passed=bool(rel[worst] <= tolerance),
    )


def spec_to_dict(spec: RegressorSpec) -> dict:
    return {
        "kind": spec.kind,
        "hidden": list(spec.hidden),
        "activation": spec.activation,
        "learning_rate": spec.learning_rate,
        "epochs": spec.epochs,
        "batch_size": spec.batch_size,
        "l2": spec.l2,
        "output": spec.output,
        "seed": spec.seed,
    }


def spec_from_dict(payload: dict) -> RegressorSpec:
    return RegressorSpec(
        kind=payload["kind"],
        hidden=tuple(payload["hidden"]),
        activation=payload["activation"],
        learning_rate=payload["learning_rate"],
        epochs=payload["epochs"],
        batch_size=payload["batch_size"],
        l2=payload["l2"],
        output=payload["output"],
        seed=payload["seed"],
    )


def save(model: Regressor) -> bytes:
    """Versioned JSON envelope; floats survive the round trip bit-for-bit."""
    payload = {
        "format_version": FORMAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "d": model.d,
        "params": [float(p) for p in model.params],
        "final_loss": model.final_loss,
        "epochs_run": model.epochs_run,
    }
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def load(blob: bytes) -> Regressor:
    try:
        payload = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"corrupted model payload: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise SerializationError("model payload is missing its format_version")
    if payload["format_version"] != FORMAT_VERSION:
        raise SerializationError(
            f"unsupported model format version {payload['format_version']!r} "
            f"(supported: {FORMAT_VERSION})"
        )
    try:
        return Regressor(
            spec=spec_from_dict(payload["spec"]),
            d=payload["d"],
            params=np.asarray(payload["params"], dtype=np.float64),
            final_loss=payload["final_loss"],
            epochs_run=payload["epochs_run"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"corrupted model payload: {exc}") from exc


def fingerprint(model: Regressor) -> str:
    """Hash of the prediction function: forward-pass spec fields, d, parameters."""
    canonical = json.dumps(
        {
            "kind": model.spec.kind,
            "hidden": list(model.spec.hidden),
            "activation": model.spec.activation,
            "output": model.spec.output,
            "d": model.d,
            "params": [float(p) for p in model.params],
        },
        sort_keys=True,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
