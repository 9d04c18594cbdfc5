"""From-scratch multilayer perceptrons used as local models.

Architecture: softmax(act(... act(x W_0 + b_0) ... W_C + b_C)) with ReLU or
sigmoid hidden activations. Parameters live in plain numpy arrays so the
matcher can treat neurons as weight vectors; training is minibatch
cross-entropy descent with an L2 penalty on weights (not biases), run by
either AMSGrad (the max-of-second-moment Adam variant, bias-corrected,
beta1=0.9 / beta2=0.999 / eps=1e-8) or plain SGD. Everything is
deterministic given the seeds: one stream initializes weights, a separate
stream drives epoch shuffles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_float_matrix, as_labels, check_positive

__all__ = [
    "MLPParams",
    "TrainConfig",
    "init_params",
    "forward",
    "predict_proba",
    "predict",
    "evaluate",
    "loss_value",
    "loss_and_grads",
    "train",
    "to_atoms",
    "from_atoms",
    "apply_permutation",
]


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(pre):
    return (pre > 0).astype(np.float64)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_grad(pre):
    s = _sigmoid(pre)
    return s * (1.0 - s)


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}


@dataclass
class MLPParams:
    """Weights and biases of one network.

    ``weights[c]`` maps layer c to layer c+1 (the input counts as layer 0),
    so a net with hidden widths (L1, .., LC) and K outputs stores matrices
    of shapes (D, L1), (L1, L2), .., (LC, K) and bias vectors (L1,), ..,
    (LC,), (K,).
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have equal length")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i - 1}->{i} shapes are inconsistent")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains non-finite parameters")

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def hidden_sizes(self) -> tuple:
        return tuple(int(w.shape[1]) for w in self.weights[:-1])

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation)


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of local training; the seed is mandatory.

    init_scale follows the convention that N(0, 0.01) names the variance
    (std 0.1); set init_scale_is_variance=False to read it as the std.
    """

    seed: int
    learning_rate: float = 0.01
    l2: float = 1e-6
    batch_size: int = 32
    epochs: int = 10
    optimizer: str = "amsgrad"
    init_scale: float = 0.01
    init_scale_is_variance: bool = True
    bias_init: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("TrainConfig.seed is mandatory")
        check_positive(self.learning_rate, "learning_rate")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if int(self.epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("amsgrad", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        check_positive(self.init_scale, "init_scale")


def init_params(input_dim: int, hidden_sizes, output_dim: int, seed,
                activation: str = "relu", init_scale: float = 0.01,
                init_scale_is_variance: bool = True,
                bias_init: float = 0.1) -> MLPParams:
    """Seeded Gaussian weight init with constant biases."""
    std = float(np.sqrt(init_scale)) if init_scale_is_variance else float(init_scale)
    rng = np.random.default_rng(seed)
    sizes = [int(input_dim)] + [int(h) for h in hidden_sizes] + [int(output_dim)]
    weights = [rng.normal(0.0, std, size=(sizes[i], sizes[i + 1]))
               for i in range(len(sizes) - 1)]
    biases = [np.full(sizes[i + 1], float(bias_init)) for i in range(len(sizes) - 1)]
    return MLPParams(weights, biases, activation)


def _forward_cached(params: MLPParams, X: np.ndarray):
    act, _ = _ACTIVATIONS[params.activation]
    hs = [X]
    pres = []
    h = X
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = h @ W + b
        pres.append(pre)
        h = act(pre)
        hs.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return logits, hs, pres


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def forward(params: MLPParams, X) -> np.ndarray:
    """Class probabilities, one row per input."""
    X = as_float_matrix(X, "X")
    if X.shape[1] != params.input_dim:
        raise ValueError(f"X has {X.shape[1]} features, network expects {params.input_dim}")
    logits, _, _ = _forward_cached(params, X)
    return np.exp(_log_softmax(logits))


predict_proba = forward


def predict(params: MLPParams, X) -> np.ndarray:
    return np.argmax(forward(params, X), axis=1)


def _params_of(model) -> MLPParams:
    if isinstance(model, MLPParams):
        return model
    params = getattr(model, "params", None)
    if isinstance(params, MLPParams):
        return params
    raise TypeError(f"cannot extract MLP parameters from {type(model).__name__}")


def evaluate(model, X, y) -> float:
    """Fraction of argmax-correct predictions."""
    params = _params_of(model)
    X = as_float_matrix(X, "X")
    y = as_labels(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs for {y.shape[0]} labels")
    return float(np.mean(predict(params, X) == y))


def _l2_penalty(params: MLPParams, l2: float) -> float:
    return 0.5 * l2 * float(sum(np.sum(W * W) for W in params.weights))


def loss_value(params: MLPParams, X, y, l2: float = 0.0) -> float:
    """Mean cross-entropy plus (l2/2) * sum of squared weights."""
    X = as_float_matrix(X, "X")
    y = as_labels(y, num_classes=params.output_dim)
    logits, _, _ = _forward_cached(params, X)
    logp = _log_softmax(logits)
    ce = -float(np.mean(logp[np.arange(X.shape[0]), y]))
    return ce + _l2_penalty(params, l2)


def loss_and_grads(params: MLPParams, X, y, l2: float = 0.0):
    """Loss plus gradients w.r.t. every weight matrix and bias vector."""
    X = as_float_matrix(X, "X")
    y = as_labels(y, num_classes=params.output_dim)
    n = X.shape[0]
    _, dact = _ACTIVATIONS[params.activation]

    logits, hs, pres = _forward_cached(params, X)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), y])) + _l2_penalty(params, l2)

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    w_grads = [None] * len(params.weights)
    b_grads = [None] * len(params.biases)
    for c in range(len(params.weights) - 1, -1, -1):
        w_grads[c] = hs[c].T @ delta + l2 * params.weights[c]
        b_grads[c] = delta.sum(axis=0)
        if c > 0:
            delta = (delta @ params.weights[c].T) * dact(pres[c - 1])
    return loss, w_grads, b_grads


class _AmsGrad:
    """Adam with a running max of the second moment (bias-corrected)."""

    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.vmax = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, tensors, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (x, g) in enumerate(zip(tensors, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            np.maximum(self.vmax[i], self.v[i], out=self.vmax[i])
            x -= self.lr * (self.m[i] / c1) / (np.sqrt(self.vmax[i] / c2) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, tensors, grads):
        for x, g in zip(tensors, grads):
            x -= self.lr * g


def train(params: MLPParams, X, y, cfg: TrainConfig) -> MLPParams:
    """Minibatch training; returns new parameters, the input is untouched.

    Deterministic for a fixed config: the epoch shuffles come from
    cfg.seed. Aborts with the offending minibatch index if the loss ever
    turns non-finite.
    """
    X = as_float_matrix(X, "X")
    y = as_labels(y, num_classes=params.output_dim)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs for {y.shape[0]} labels")
    out = params.copy()
    if cfg.epochs == 0:
        return out

    tensors = out.weights + out.biases
    if cfg.optimizer == "amsgrad":
        opt = _AmsGrad([t.shape for t in tensors], cfg.learning_rate,
                       cfg.beta1, cfg.beta2, cfg.eps)
    else:
        opt = _Sgd(cfg.learning_rate)

    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for k, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            loss, w_grads, b_grads = loss_and_grads(out, X[idx], y[idx], cfg.l2)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss {loss} at epoch {epoch}, minibatch {k}"
                )
            opt.step(tensors, w_grads + b_grads)
    return out


def to_atoms(params: MLPParams) -> list:
    """Per-layer neuron vectors in the local coordinate frame.

    Layer 0 rows are [incoming input weights | bias | outgoing weights];
    deeper layers drop the input block. For a single hidden layer this is
    the (L_j, D+1+K) matrix of [hidden weights, hidden bias, softmax row].
    """
    out = []
    for c in range(len(params.weights) - 1):
        blocks = []
        if c == 0:
            blocks.append(params.weights[0].T)
        blocks.append(params.biases[c][:, None])
        blocks.append(params.weights[c + 1])
        out.append(np.concatenate(blocks, axis=1))
    return out


def from_atoms(atom_layers, input_dim: int, output_dim: int,
               output_bias, activation: str = "relu") -> MLPParams:
    """Rebuild network parameters from per-layer atom matrices.

    Exact inverse of ``to_atoms`` on its image; the output-layer bias is
    not part of any atom and must be supplied.
    """
    atom_layers = [np.asarray(a, dtype=np.float64) for a in atom_layers]
    n_hidden = len(atom_layers)
    if n_hidden == 0:
        raise ValueError("at least one hidden layer of atoms is required")
    widths = [a.shape[0] for a in atom_layers]
    weights = []
    biases = []
    for c, atoms in enumerate(atom_layers):
        upper = widths[c + 1] if c + 1 < n_hidden else int(output_dim)
        expected = (int(input_dim) if c == 0 else 0) + 1 + upper
        if atoms.shape[1] != expected:
            raise ValueError(
                f"layer {c} atoms have dimension {atoms.shape[1]}, expected {expected}"
            )
        ofs = 0
        if c == 0:
            weights.append(atoms[:, :input_dim].T.copy())
            ofs = int(input_dim)
        biases.append(atoms[:, ofs].copy())
        weights.append(atoms[:, ofs + 1:].copy())
    output_bias = np.asarray(output_bias, dtype=np.float64).reshape(-1)
    if output_bias.shape[0] != output_dim:
        raise ValueError(
            f"output bias has length {output_bias.shape[0]}, expected {output_dim}"
        )
    biases.append(output_bias.copy())
    return MLPParams(weights, biases, activation)


def apply_permutation(params: MLPParams, layer: int, perm) -> MLPParams:
    """Reorder the neurons of one hidden layer; predictions are unchanged."""
    perm = np.asarray(perm, dtype=np.int64)
    n_hidden = len(params.weights) - 1
    if not 0 <= layer < n_hidden:
        raise ValueError(f"layer must be in 0..{n_hidden - 1}, got {layer}")
    width = params.weights[layer].shape[1]
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise ValueError(f"perm must be a permutation of 0..{width - 1}")
    out = params.copy()
    out.weights[layer] = out.weights[layer][:, perm]
    out.biases[layer] = out.biases[layer][perm]
    out.weights[layer + 1] = out.weights[layer + 1][perm, :]
    return out
