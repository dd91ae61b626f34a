"""Parameter store, layers, losses and the Adam update.

Weight init is scaled-uniform fan-in: He-style for ReLU layers,
Xavier-style for linear outputs and LSTM gate blocks.  Biases start at
zero except the LSTM forget gate, which starts at 1.0.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import (
    IndexOutOfRange,
    ShapeMismatch,
    Tensor,
    as_tensor,
    exp,
    log_softmax,
    matmul,
    relu,
    sigmoid,
    sqrt,
    square,
    sub,
    take_rows,
    tanh,
    tmean,
    tsum,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class ParamStore:
    """Named parameter tensors with paired Adam moment estimates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.meta: dict[str, str] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter '{name}'")
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def adam_step(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 5.0,
    ) -> None:
        """One Adam update over all parameters; gradients are zeroed after.

        Gradients are first clipped by global norm (clip_norm <= 0 disables).
        Parameters with no gradient this step keep stale moments untouched.
        """
        scale = 1.0
        if clip_norm and clip_norm > 0.0:
            norm = self.grad_norm()
            if norm > clip_norm:
                scale = clip_norm / norm
        self.step_count += 1
        b1t = 1.0 - beta1**self.step_count
        b2t = 1.0 - beta2**self.step_count
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad * scale
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            t.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
        self.zero_grad()

    # -- checkpoint io ---------------------------------------------------
    # Layout: text manifest terminated by a DATA line, then the raw
    # little-endian float64 payload of every tensor in manifest order.
    #   hierimit-checkpoint v1
    #   meta <key> <value>
    #   tensor <name> <ndim> <d0> <d1> ...
    #   ...
    #   DATA
    #   <raw bytes>

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["hierimit-checkpoint v1"]
        for key in sorted(self.meta):
            lines.append(f"meta {key} {self.meta[key]}")
        names = sorted(self.params)
        for name in names:
            shape = self.params[name].data.shape
            lines.append(f"tensor {name} {len(shape)} " + " ".join(str(d) for d in shape))
        lines.append("DATA")
        blob = b"".join(
            np.ascontiguousarray(self.params[n].data, dtype="<f8").tobytes() for n in names
        )
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
            fh.write(blob)

    def load(self, path) -> None:
        path = Path(path)
        raw = path.read_bytes()
        head, _, rest = raw.partition(b"DATA\n")
        lines = head.decode("utf-8").strip().split("\n")
        if not lines or lines[0] != "hierimit-checkpoint v1":
            raise ValueError(f"{path}: not a hierimit checkpoint")
        specs = []
        self.meta = {}
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "meta":
                self.meta[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "tensor":
                name = parts[1]
                ndim = int(parts[2])
                shape = tuple(int(d) for d in parts[3 : 3 + ndim])
                specs.append((name, shape))
        offset = 0
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(rest, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += count * struct.calcsize("<d")
            if name in self.params:
                if self.params[name].data.shape != shape:
                    raise ShapeMismatch(f"checkpoint tensor {name}: shape {shape}")
                self.params[name].data = vals.astype(np.float64).copy()
            else:
                self.add(name, vals.astype(np.float64).copy())


def uniform_fanin(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    limit = gain / np.sqrt(n_in)
    return rng.uniform(-limit, limit, size=(n_in, n_out))


class Dense:
    """Affine layer with optional ReLU."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, activation: str = "linear"):
        gain = np.sqrt(6.0) if activation == "relu" else np.sqrt(3.0)
        self.W = store.add(f"{name}.W", uniform_fanin(rng, n_in, n_out, gain))
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.n_in = n_in
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.n_in:
            raise ShapeMismatch(f"dense expects last dim {self.n_in}, got {x.data.shape}")
        out = matmul(x, self.W) + self.b
        if self.activation == "relu":
            out = relu(out)
        return out


class MLP:
    """Stack of Dense layers; hidden layers use ReLU."""

    def __init__(self, store, name, sizes, rng, out_activation: str = "linear"):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            act = out_activation if last else "relu"
            self.layers.append(Dense(store, f"{name}.{i}", a, b, rng, activation=act))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LstmCell:
    """Standard LSTM cell; gate order (i, f, g, o); forget bias starts at 1."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int,
                 rng: np.random.Generator):
        self.n_in = n_in
        self.n_hidden = n_hidden
        self.Wx = store.add(f"{name}.Wx", uniform_fanin(rng, n_in, 4 * n_hidden, np.sqrt(3.0)))
        self.Wh = store.add(f"{name}.Wh", uniform_fanin(rng, n_hidden, 4 * n_hidden, np.sqrt(3.0)))
        bias = np.zeros(4 * n_hidden)
        bias[n_hidden : 2 * n_hidden] = 1.0
        self.b = store.add(f"{name}.b", bias)

    def zero_state(self, batch: int | None = None):
        shape = (self.n_hidden,) if batch is None else (batch, self.n_hidden)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))

    def __call__(self, state, x: Tensor):
        """One step; returns ((hidden, cell), output) with output == hidden."""
        h, c = state
        if x.data.shape[-1] != self.n_in:
            raise ShapeMismatch(f"lstm expects last dim {self.n_in}, got {x.data.shape}")
        gates = matmul(x, self.Wx) + matmul(h, self.Wh) + self.b
        nh = self.n_hidden
        i = sigmoid(gates[..., 0:nh])
        f = sigmoid(gates[..., nh : 2 * nh])
        g = tanh(gates[..., 2 * nh : 3 * nh])
        o = sigmoid(gates[..., 3 * nh : 4 * nh])
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        return (h_new, c_new), h_new


class Embedding:
    """Learned lookup table, one row per id."""

    def __init__(self, store: ParamStore, name: str, count: int, width: int,
                 rng: np.random.Generator):
        self.table = store.add(f"{name}.E", rng.uniform(-0.5, 0.5, size=(count, width)))

    def __call__(self, indices) -> Tensor:
        return take_rows(self.table, np.asarray(indices, dtype=np.intp))


def softmax_ce(logits: Tensor, class_index, mask: np.ndarray | None = None,
               axis: int = -1) -> Tensor:
    """Cross-entropy -log softmax(logits)[class_index].

    Scalar class_index with 1-D logits gives a scalar loss; an index array
    over batched logits gives a per-row loss vector.
    """
    logp = log_softmax(logits, axis=axis, mask=mask)
    if np.isscalar(class_index) or np.asarray(class_index).ndim == 0:
        k = int(class_index)
        if not 0 <= k < logits.data.shape[axis]:
            raise IndexOutOfRange(f"class index {k} outside logits width {logits.data.shape[axis]}")
        return -logp[..., k]
    idx = np.asarray(class_index, dtype=np.intp)
    rows = tuple(np.indices(idx.shape))
    return -logp[rows + (idx,)]


def mse(a, b, axis=None) -> Tensor:
    """Mean squared error over all elements (or over one axis)."""
    return tmean(square(sub(as_tensor(a), as_tensor(b))), axis=axis)


def gaussian_logpdf(x, mean, log_std) -> Tensor:
    """Diagonal-Gaussian log density, summed over the last axis."""
    x, mean, log_std = as_tensor(x), as_tensor(mean), as_tensor(log_std)
    z = sub(x, mean) * exp(-log_std)
    per_dim = -0.5 * square(z) - log_std - 0.5 * LOG_2PI
    return tsum(per_dim, axis=-1)


def l2_rows(x: Tensor) -> Tensor:
    """Euclidean norm of each row (last axis)."""
    return sqrt(tsum(square(x), axis=-1) + 1e-24)


def lstm_unroll(cell: LstmCell, inputs: list) -> list:
    """Run the cell over a list of per-step inputs; returns hidden per step."""
    state = cell.zero_state(batch=inputs[0].data.shape[0] if inputs[0].data.ndim > 1 else None)
    outs = []
    for x in inputs:
        state, h = cell(state, x)
        outs.append(h)
    return outs
