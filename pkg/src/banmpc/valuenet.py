"""Small tanh networks for value and value-sensitivity models.

Plain numpy throughout.  The networks are tiny (a few thousand weights), so
training runs full speed on one core and inference inside the controller
loop costs microseconds.  Besides the forward pass the networks expose exact
first and second derivatives with respect to their input; the controller
embeds those in the terminal cost of the short-horizon program, where the
curvature matters for the step acceptance of the optimizer.

Derivatives are exact, not finite differences: with tanh the only
nonlinearity is applied elementwise, so the Hessian of a scalar head is a
sum over layers of J' diag(tanh'' . adjoint) J terms.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

_MAGIC = b"VNET1"


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN or infinite."""


@dataclass
class Normalizer:
    """Per-coordinate affine map to zero mean, unit spread."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_data(cls, data, floor=1e-8):
        data = np.asarray(data, dtype=float)
        std = data.std(axis=0)
        return cls(mean=data.mean(axis=0), std=np.maximum(std, floor))

    @classmethod
    def identity(cls, dim):
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


@dataclass
class MlpNetwork:
    """Fully connected tanh network with a linear output layer.

    weights[l] has shape (width_out, width_in).  Inputs are normalized and
    outputs de-normalized internally, so callers always work in raw units.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    x_norm: Normalizer
    y_norm: Normalizer

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    def forward(self, x):
        """Evaluate the network. x: (n_in,) or (batch, n_in)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        z = self.x_norm.normalize(np.atleast_2d(x))
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = z @ w.T + b
            if l < last:
                z = np.tanh(z)
        out = self.y_norm.denormalize(z)
        return out[0] if single else out

    def value(self, x):
        """Scalar convenience for single-output networks."""
        if self.n_out != 1:
            raise ValueError("value() requires a single-output network")
        return float(self.forward(np.asarray(x, dtype=float))[0])

    def _head_weights(self, output_weights):
        if output_weights is None:
            if self.n_out != 1:
                raise ValueError(
                    "output_weights required for multi-output networks")
            output_weights = np.ones(1)
        ow = np.asarray(output_weights, dtype=float)
        if ow.shape != (self.n_out,):
            raise ValueError("output_weights must have length n_out")
        return ow * self.y_norm.std

    def grad_input(self, x, output_weights=None):
        """Exact gradient of sum_q output_weights[q] * out_q at a point."""
        ow = self._head_weights(output_weights)
        x = np.asarray(x, dtype=float)
        zs = self._trace(x)
        a = self.weights[-1].T @ ow
        for l in range(len(self.weights) - 2, -1, -1):
            dz = (1.0 - zs[l + 1] ** 2) * a
            a = self.weights[l].T @ dz
        return a / self.x_norm.std

    def hess_input(self, x, output_weights=None):
        """Exact input Hessian of the contracted scalar head.

        One term per hidden layer: B_l' diag(tanh''(u_l) . a_l) B_l with
        B_l the Jacobian of that layer's pre-activation with respect to the
        input and a_l the downstream gradient at the activation output.
        """
        ow = self._head_weights(output_weights)
        x = np.asarray(x, dtype=float)
        zs = self._trace(x)
        n_hidden = len(self.weights) - 1

        # adjoints a[l] = d(scalar)/d z_l for hidden activations l = 1..L-1
        adj = [None] * (n_hidden + 1)
        adj[n_hidden] = self.weights[-1].T @ ow
        for l in range(n_hidden - 1, 0, -1):
            dz = (1.0 - zs[l + 1] ** 2) * adj[l + 1]
            adj[l] = self.weights[l].T @ dz

        hess = np.zeros((self.n_in, self.n_in))
        jac = np.eye(self.n_in)  # J_{l-1} = d z_{l-1} / d x_norm
        for l in range(n_hidden):
            b_mat = self.weights[l] @ jac
            t = zs[l + 1]
            curv = -2.0 * t * (1.0 - t ** 2) * adj[l + 1]
            hess += b_mat.T @ (curv[:, None] * b_mat)
            jac = ((1.0 - t ** 2)[:, None]) * b_mat
        scale = 1.0 / self.x_norm.std
        return hess * np.outer(scale, scale)

    def _trace(self, x):
        """Forward pass storing activations. zs[0] is the normalized input."""
        if x.shape != (self.n_in,):
            raise ValueError(f"expected input of shape ({self.n_in},)")
        z = self.x_norm.normalize(x)
        zs = [z]
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            u = w @ z + b
            z = np.tanh(u) if l < last else u
            zs.append(z)
        return zs

    def copy(self):
        return MlpNetwork(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            x_norm=Normalizer(self.x_norm.mean.copy(), self.x_norm.std.copy()),
            y_norm=Normalizer(self.y_norm.mean.copy(), self.y_norm.std.copy()),
        )


def init_network(n_in, n_out, hidden=(32, 32, 32), rng=None,
                 x_norm=None, y_norm=None):
    """Glorot-uniform initialized tanh network."""
    if rng is None:
        rng = np.random.default_rng(0)
    dims = [int(n_in)] + [int(h) for h in hidden] + [int(n_out)]
    if min(dims) <= 0:
        raise ValueError("all layer widths must be positive")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpNetwork(
        weights=weights, biases=biases,
        x_norm=x_norm if x_norm is not None else Normalizer.identity(n_in),
        y_norm=y_norm if y_norm is not None else Normalizer.identity(n_out),
    )


@dataclass
class FitResult:
    network: MlpNetwork
    best_val_mse: float
    train_mse: float
    epochs_run: int
    val_history: List[float] = field(default_factory=list)


def _forward_batch(weights, biases, x):
    z = x
    acts = [z]
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = z @ w.T + b
        if l < last:
            z = np.tanh(z)
        acts.append(z)
    return acts


def fit_mlp(inputs, targets, hidden=(32, 32, 32), *, seed=0, epochs=200,
            batch_size=256, learning_rate=1e-3, validation=0.1,
            x_norm=None, shuffle_each_epoch=True):
    """Train a tanh MLP with Adam, keeping the best-on-validation weights.

    validation is either a fraction of the data to hold out or an explicit
    (inputs, targets) pair.  Normalizers are fitted on the training portion
    unless x_norm is supplied (a shared, frozen input normalizer).
    Raises NonFiniteLossError when the loss diverges.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets must be matching 2-d arrays")
    if x.shape[0] < 4:
        raise ValueError("too few samples to train on")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteLossError("non-finite entries in the training data")

    rng = np.random.default_rng(seed)
    if isinstance(validation, tuple):
        x_tr, y_tr = x, y
        x_val = np.asarray(validation[0], dtype=float)
        y_val = np.asarray(validation[1], dtype=float)
        if y_val.ndim == 1:
            y_val = y_val[:, None]
    else:
        frac = float(validation)
        if not 0.0 < frac < 1.0:
            raise ValueError("validation fraction must lie in (0, 1)")
        perm = rng.permutation(x.shape[0])
        n_val = max(1, int(round(frac * x.shape[0])))
        x_val, y_val = x[perm[:n_val]], y[perm[:n_val]]
        x_tr, y_tr = x[perm[n_val:]], y[perm[n_val:]]

    xn = x_norm if x_norm is not None else Normalizer.from_data(x_tr)
    yn = Normalizer.from_data(y_tr)
    net = init_network(x.shape[1], y.shape[1], hidden, rng, x_norm=xn, y_norm=yn)

    xt = xn.normalize(x_tr)
    yt = (y_tr - yn.mean) / yn.std
    xv = xn.normalize(x_val)

    params = net.weights + net.biases
    m_adam = [np.zeros_like(p) for p in params]
    v_adam = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    n_tr = xt.shape[0]
    n_layers = len(net.weights)
    best_val = np.inf
    best = [p.copy() for p in params]
    val_history = []
    last_train = np.inf

    for epoch in range(epochs):
        order = rng.permutation(n_tr) if shuffle_each_epoch else np.arange(n_tr)
        total = 0.0
        for start in range(0, n_tr, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = xt[idx], yt[idx]
            acts = _forward_batch(net.weights, net.biases, xb)
            err = acts[-1] - yb
            loss = float(np.mean(err ** 2))
            total += loss * len(idx)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss diverged at epoch {epoch}")

            # backprop of mean squared error
            grad_w = [None] * n_layers
            grad_b = [None] * n_layers
            delta = 2.0 * err / err.size
            for l in range(n_layers - 1, -1, -1):
                grad_w[l] = delta.T @ acts[l]
                grad_b[l] = delta.sum(axis=0)
                if l > 0:
                    delta = (delta @ net.weights[l]) * (1.0 - acts[l] ** 2)

            step += 1
            grads = grad_w + grad_b
            corr1 = 1.0 - beta1 ** step
            corr2 = 1.0 - beta2 ** step
            for p, g, m, v in zip(params, grads, m_adam, v_adam):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g ** 2
                p -= learning_rate * (m / corr1) / (np.sqrt(v / corr2) + eps)

        last_train = total / n_tr
        # raw-unit validation error decides the checkpoint
        pred = _forward_batch(net.weights, net.biases, xv)[-1] * yn.std + yn.mean
        val_mse = float(np.mean((pred - y_val) ** 2))
        val_history.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best = [p.copy() for p in params]

    for p, b in zip(params, best):
        p[...] = b
    train_scale = float(np.mean(yn.std ** 2))
    return FitResult(network=net, best_val_mse=best_val,
                     train_mse=last_train * train_scale,
                     epochs_run=epochs, val_history=val_history)


def mix_values(net_a, net_b, beta):
    """Blend two networks into one computing beta*a(x) + (1-beta)*b(x).

    The blend is realized structurally: hidden layers are stacked block
    diagonally and the output layer folds in the mixing weights together
    with each network's output normalization, so the result is an ordinary
    MlpNetwork (same evaluation, gradient, Hessian and persistence paths).
    Both networks must share the input normalizer and architecture depth.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if net_a.n_in != net_b.n_in or net_a.n_out != net_b.n_out:
        raise ValueError("networks must agree on input and output sizes")
    if len(net_a.weights) != len(net_b.weights):
        raise ValueError("networks must have the same depth to be mixed")
    if not (np.allclose(net_a.x_norm.mean, net_b.x_norm.mean)
            and np.allclose(net_a.x_norm.std, net_b.x_norm.std)):
        raise ValueError("networks must share the input normalizer")

    n_hidden = len(net_a.weights) - 1
    weights, biases = [], []
    for l in range(n_hidden):
        wa, wb = net_a.weights[l], net_b.weights[l]
        if l == 0:
            w = np.vstack([wa, wb])
        else:
            w = np.zeros((wa.shape[0] + wb.shape[0], wa.shape[1] + wb.shape[1]))
            w[:wa.shape[0], :wa.shape[1]] = wa
            w[wa.shape[0]:, wa.shape[1]:] = wb
        weights.append(w)
        biases.append(np.concatenate([net_a.biases[l], net_b.biases[l]]))

    # fold output normalization and the blend weights into the last layer
    sa = beta * net_a.y_norm.std[:, None] * net_a.weights[-1]
    sb = (1.0 - beta) * net_b.y_norm.std[:, None] * net_b.weights[-1]
    weights.append(np.hstack([sa, sb]))
    bias = (beta * (net_a.y_norm.std * net_a.biases[-1] + net_a.y_norm.mean)
            + (1.0 - beta) * (net_b.y_norm.std * net_b.biases[-1]
                              + net_b.y_norm.mean))
    biases.append(bias)

    return MlpNetwork(
        weights=weights, biases=biases,
        x_norm=Normalizer(net_a.x_norm.mean.copy(), net_a.x_norm.std.copy()),
        y_norm=Normalizer.identity(net_a.n_out),
    )


def save_network(net, path):
    """Write a network to disk; the round trip is bit exact."""
    dims = [net.n_in] + [w.shape[0] for w in net.weights]
    blob = [_MAGIC, struct.pack("<I", len(net.weights))]
    blob.append(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(net.weights, net.biases):
        blob.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        blob.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    for arr in (net.x_norm.mean, net.x_norm.std, net.y_norm.mean, net.y_norm.std):
        blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_network(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != _MAGIC:
        raise ValueError(f"{path} is not a saved network")
    off = 5
    (n_layers,) = struct.unpack_from("<I", raw, off)
    off += 4
    dims = struct.unpack_from(f"<{n_layers + 1}I", raw, off)
    off += 4 * (n_layers + 1)

    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return arr

    weights, biases = [], []
    for l in range(n_layers):
        rows, cols = dims[l + 1], dims[l]
        weights.append(take(rows * cols).reshape(rows, cols))
        biases.append(take(rows))
    x_mean, x_std = take(dims[0]), take(dims[0])
    y_mean, y_std = take(dims[-1]), take(dims[-1])
    if off != len(raw):
        raise ValueError(f"{path} has trailing bytes; file is corrupt")
    return MlpNetwork(weights=weights, biases=biases,
                      x_norm=Normalizer(x_mean, x_std),
                      y_norm=Normalizer(y_mean, y_std))
