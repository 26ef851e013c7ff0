"""Multilayer perceptron with hand-rolled reverse-mode gradients.

The topology is fixed: dense layers, rectifier hidden units, and either an
identity output (value heads) or a scaled/shifted tanh (bounded policy
heads). ``backward`` returns exact gradients for this piecewise-linear
network with respect to both parameters and inputs; the rectifier's
subgradient at a kink is taken as zero. An Adam optimizer and soft target
blending live here as well, plus a binary checkpoint format: one JSON header
line followed by all parameters as a flat little-endian float64 blob in layer
order (weights row-major, then biases).
"""

from __future__ import annotations

import json
from typing import List, Sequence, Tuple

import numpy as np

__all__ = [
    "MLP",
    "StackedCritics",
    "Adam",
    "soft_update",
    "soft_update_stacked",
    "save_mlp",
    "load_mlp",
    "save_adam",
    "load_adam",
]

_OUTPUT_ACTIVATIONS = ("identity", "tanh")


class MLP:
    """Dense net ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Weights have shape (fan_in, fan_out) and act as ``x @ W + b``. Parameters
    are initialized uniformly in +-1/sqrt(fan_in) from the provided generator.
    For a tanh output, the final value is ``offset + scale * tanh(z)`` with
    per-dimension scale/offset, which bounds the output inside
    [offset - scale, offset + scale].
    """

    def __init__(self, layer_sizes: Sequence[int], output_activation: str = "identity",
                 output_scale=1.0, output_offset=0.0, rng: np.random.Generator | None = None):
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must be >=2 positive ints, got {layer_sizes}")
        if output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.layer_sizes = sizes
        self.output_activation = output_activation
        out_dim = sizes[-1]
        self.output_scale = np.broadcast_to(np.asarray(output_scale, dtype=np.float64), (out_dim,)).copy()
        self.output_offset = np.broadcast_to(np.asarray(output_offset, dtype=np.float64), (out_dim,)).copy()
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> List[np.ndarray]:
        """Live views, ordered W0, b0, W1, b1, ..."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.layer_sizes = list(self.layer_sizes)
        clone.output_activation = self.output_activation
        clone.output_scale = self.output_scale.copy()
        clone.output_offset = self.output_offset.copy()
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def same_architecture(self, other: "MLP") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.output_activation == other.output_activation
            and np.array_equal(self.output_scale, other.output_scale)
            and np.array_equal(self.output_offset, other.output_offset)
        )

    # -- forward / backward -------------------------------------------------

    def _promote(self, x) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input shape {x.shape} does not match input size {self.layer_sizes[0]}")
        return x, single

    def forward(self, x) -> np.ndarray:
        y, _ = self._forward(x)
        return y

    def _forward(self, x):
        x2, single = self._promote(x)
        inputs = [x2]  # input to each layer (post-activation of previous)
        h = x2
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                h = np.maximum(z, 0.0)
                inputs.append(h)
            else:
                if self.output_activation == "tanh":
                    t = np.tanh(z)
                    out = self.output_offset + self.output_scale * t
                else:
                    t = None
                    out = z
        cache = (inputs, t, single)
        return (out[0] if single else out), cache

    def forward_cached(self, x):
        """Forward pass returning (output, cache) for a later backward."""
        return self._forward(x)

    def backward(self, cache, grad_output):
        """Backpropagate ``grad_output`` through the cached forward pass.

        Returns (parameter gradients ordered as :meth:`parameters`,
        gradient with respect to the input).
        """
        inputs, t, single = cache
        g = np.asarray(grad_output, dtype=np.float64)
        if single and g.ndim == 1:
            g = g[None, :]
        if g.shape != (inputs[0].shape[0], self.layer_sizes[-1]):
            raise ValueError(f"grad_output shape {g.shape} does not match output")
        if self.output_activation == "tanh":
            g = g * self.output_scale * (1.0 - t * t)
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            h = inputs[i]
            w_grads[i] = h.T @ g
            b_grads[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (inputs[i] > 0.0)  # rectifier mask; zero subgradient at the kink
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.append(wg)
            grads.append(bg)
        grad_input = g[0] if single else g
        return grads, grad_input


class Adam:
    """Standard Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        """Apply one update in place; returns the updated parameter list."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count does not match optimizer state")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError("shape mismatch in Adam step")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


class StackedCritics:
    """K same-architecture value nets stored as stacked tensors.

    Semantically identical to a list of independent MLPs (each member is
    initialized from its own generator and trained on its own targets), but
    every forward, backward, Adam step, and soft target update runs as one
    batched tensor operation instead of K separate passes.
    """

    def __init__(self, layer_sizes: Sequence[int], count: int,
                 rngs: Sequence[np.random.Generator]):
        if count < 1 or len(rngs) != count:
            raise ValueError("need one generator per stacked member")
        sizes = [int(n) for n in layer_sizes]
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ValueError(f"layer_sizes must be >=2 positive ints, got {layer_sizes}")
        self.layer_sizes = sizes
        self.count = count
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            w = np.empty((count, fan_in, fan_out))
            b = np.empty((count, fan_out))
            for k, rng in enumerate(rngs):
                w[k] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b[k] = rng.uniform(-bound, bound, size=fan_out)
            self.weights.append(w)
            self.biases.append(b)

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def copy(self) -> "StackedCritics":
        clone = StackedCritics.__new__(StackedCritics)
        clone.layer_sizes = list(self.layer_sizes)
        clone.count = self.count
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def forward_all(self, x) -> np.ndarray:
        """(count, batch) outputs of every member on shared inputs (batch, d)."""
        y, _ = self._forward(x)
        return y

    def _forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input shape {x.shape} does not match input size {self.layer_sizes[0]}")
        inputs = []  # per-layer inputs; first is (batch, d), later (count, batch, width)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b[:, None, :]
            h = np.maximum(z, 0.0) if i < last else z
        return h[:, :, 0], inputs

    def td_step(self, x, targets, optimizer: "Adam"):
        """One squared-error step of every member toward its own targets.

        ``targets`` has shape (count, batch); the mean squared residual is
        taken per member, exactly as a per-member TD update would.
        """
        q, inputs = self._forward(x)
        resid = q - np.asarray(targets, dtype=np.float64)
        g = ((2.0 / resid.shape[1]) * resid)[:, :, None]
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            h = inputs[i]
            if h.ndim == 2:  # shared first-layer input
                w_grads[i] = np.einsum("bi,kbo->kio", h, g)
            else:
                w_grads[i] = np.matmul(h.transpose(0, 2, 1), g)
            b_grads[i] = g.sum(axis=1)
            if i > 0:
                g = np.matmul(g, self.weights[i].transpose(0, 2, 1))
                g = g * (inputs[i] > 0.0)
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.append(wg)
            grads.append(bg)
        optimizer.step(self.parameters(), grads)
        return float(np.mean(resid**2))

    def member(self, k: int) -> MLP:
        """Materialize member ``k`` as a standalone MLP (copied parameters)."""
        net = MLP(self.layer_sizes, rng=np.random.default_rng(0))
        for i in range(len(self.weights)):
            net.weights[i][...] = self.weights[i][k]
            net.biases[i][...] = self.biases[i][k]
        return net

    def members(self) -> List[MLP]:
        return [self.member(k) for k in range(self.count)]

    @classmethod
    def from_members(cls, nets: Sequence[MLP]) -> "StackedCritics":
        if not nets:
            raise ValueError("need at least one member")
        sizes = nets[0].layer_sizes
        if any(n.layer_sizes != sizes for n in nets):
            raise ValueError("members must share one architecture")
        stack = cls.__new__(cls)
        stack.layer_sizes = list(sizes)
        stack.count = len(nets)
        stack.weights = [
            np.stack([n.weights[i] for n in nets]) for i in range(len(sizes) - 1)
        ]
        stack.biases = [
            np.stack([n.biases[i] for n in nets]) for i in range(len(sizes) - 1)
        ]
        return stack


def soft_update_stacked(target: StackedCritics, online: StackedCritics, tau: float) -> StackedCritics:
    """Stacked counterpart of :func:`soft_update`."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.layer_sizes != online.layer_sizes or target.count != online.count:
        raise ValueError("soft_update requires identical stacked architectures")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po
    return target


def soft_update(target: MLP, online: MLP, tau: float) -> MLP:
    """Blend ``target <- tau * online + (1 - tau) * target`` per parameter."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_architecture(online):
        raise ValueError("soft_update requires identical architectures")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - tau
        pt += tau * po
    return target


# -- checkpoint format -------------------------------------------------------
#
# One UTF-8 JSON header line, then the raw blob. MLP blobs hold every layer's
# weight matrix (row-major) followed by its bias vector, as little-endian
# float64. Adam blobs hold all first moments then all second moments in
# parameter order.


def _write_blob(path, header: dict, arrays: Sequence[np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_blob(path) -> Tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return header, flat


def save_mlp(path, net: MLP, counters: dict | None = None):
    header = {
        "format": "mlp-v1",
        "layer_sizes": net.layer_sizes,
        "hidden_activation": "relu",
        "output_activation": net.output_activation,
        "output_scale": net.output_scale.tolist(),
        "output_offset": net.output_offset.tolist(),
        "counters": counters or {},
    }
    _write_blob(path, header, net.parameters())


def load_mlp(path) -> MLP:
    header, flat = _read_blob(path)
    if header.get("format") != "mlp-v1":
        raise ValueError(f"{path}: not an mlp-v1 checkpoint")
    net = MLP(
        header["layer_sizes"],
        output_activation=header["output_activation"],
        output_scale=np.asarray(header["output_scale"], dtype=np.float64),
        output_offset=np.asarray(header["output_offset"], dtype=np.float64),
        rng=np.random.default_rng(0),
    )
    offset = 0
    for p in net.parameters():
        n = p.size
        if offset + n > flat.size:
            raise ValueError(f"{path}: parameter blob too short")
        p[...] = flat[offset:offset + n].reshape(p.shape)
        offset += n
    if offset != flat.size:
        raise ValueError(f"{path}: parameter blob has {flat.size - offset} trailing values")
    return net


def save_adam(path, opt: Adam):
    header = {
        "format": "adam-v1",
        "shapes": [list(m.shape) for m in opt.m],
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "counters": {"step": opt.step_count},
    }
    _write_blob(path, header, list(opt.m) + list(opt.v))


def load_adam(path) -> Adam:
    header, flat = _read_blob(path)
    if header.get("format") != "adam-v1":
        raise ValueError(f"{path}: not an adam-v1 checkpoint")
    shapes = [tuple(s) for s in header["shapes"]]
    templates = [np.zeros(s) for s in shapes]
    opt = Adam(templates, lr=header["lr"], beta1=header["beta1"],
               beta2=header["beta2"], eps=header["eps"])
    opt.step_count = int(header["counters"]["step"])
    arrays = opt.m + opt.v
    offset = 0
    for a in arrays:
        n = a.size
        if offset + n > flat.size:
            raise ValueError(f"{path}: moment blob too short")
        a[...] = flat[offset:offset + n].reshape(a.shape)
        offset += n
    if offset != flat.size:
        raise ValueError(f"{path}: moment blob has trailing values")
    return opt
