"""Small tanh MLPs with sinusoidal time features, built on the tape.

Two construction modes matter for control policies:
  * ``zero_final=True`` zero-initialises the last linear layer, so the
    network output is exactly 0 at construction;
  * ``final_bias=c`` additionally sets the last bias to a constant, so a
    zero-final network outputs exactly ``c`` everywhere.
"""
from __future__ import annotations

import numpy as np

from . import tape
from .tape import Node

Array = np.ndarray


def time_features(t, width: int, batch: int = 1) -> Array:
    """Sinusoidal features of diffusion time, shape (batch, width).

    ``t`` may be a scalar (shared across the batch) or a length-``batch``
    vector. Frequencies are geometric in [1, 400], covering t in [0, 1].
    """
    if width % 2 != 0:
        raise ValueError(f"time feature width must be even, got {width}")
    half = width // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(400.0), half))
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    if tt.shape[0] == 1 and batch > 1:
        tt = np.repeat(tt, batch, axis=0)
    if tt.shape[0] != batch:
        raise ValueError(f"got {tt.shape[0]} times for batch {batch}")
    ang = tt * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Mlp:
    """Fully connected network, tanh hidden activations, linear output."""

    def __init__(
        self,
        sizes,
        rng: np.random.Generator,
        zero_final: bool = False,
        final_bias: float | None = None,
        name: str = "mlp",
    ):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.name = name
        self.weights: list[Node] = []
        self.biases: list[Node] = []
        n_layers = len(self.sizes) - 1
        for i, (m, n) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == n_layers - 1
            if last and zero_final:
                w = np.zeros((m, n))
                b = np.full(n, 0.0 if final_bias is None else float(final_bias))
            else:
                # Xavier-style scaling keeps tanh pre-activations O(1)
                w = rng.standard_normal((m, n)) * np.sqrt(1.0 / m)
                b = np.zeros(n)
            self.weights.append(tape.leaf(w, name=f"{name}.w{i}"))
            self.biases.append(tape.leaf(b, name=f"{name}.b{i}"))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Node:
        h = tape.as_node(x)
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = tape.add(tape.matmul(h, w), b)
            if i < n_layers - 1:
                h = tape.tanh(h)
        return h

    def params(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def named_params(self) -> list[tuple[str, Node]]:
        return [(p.name, p) for p in self.params()]

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def state_dict(self) -> dict[str, Array]:
        return {name: p.value.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"checkpoint {arr.shape} vs model {p.value.shape}"
                )
            p.value = arr


def forward_plain(mlp: Mlp, x: Array) -> Array:
    """Tape-free duplicate of ``Mlp.__call__`` used as a cross-check."""
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.value + b.value
        if i < n_layers - 1:
            h = np.tanh(h)
    return h
