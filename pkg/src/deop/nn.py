"""Dense ReLU networks, SGD/Adam optimizers and JSON checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "MlpParams", "OptimizerState", "TrainingAborted", "mlp_init", "mlp_init_stack",
    "mlp_forward", "optimizer_step", "adam", "sgd", "save_checkpoint", "load_checkpoint",
    "params_to_dict", "params_from_dict",
]


class TrainingAborted(RuntimeError):
    """Raised when an update would introduce non-finite parameters."""


@dataclass
class MlpParams:
    """Layer list of ``(W, b)`` with W shaped (out, in).

    Hidden layers use ReLU, the last layer is affine.  A *stacked* parameter set
    carries a leading axis on every array, W (G, out, in) and b (G, out), and
    evaluates G independent networks on inputs shaped (G, batch, in).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("MlpParams needs one bias per weight and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        nd = self.weights[0].ndim
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != nd or b.ndim != nd - 1 or W.shape[:-1] != b.shape:
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k and W.shape[-1] != self.weights[k - 1].shape[-2]:
                raise ValueError(f"layer {k}: input dim {W.shape[-1]} does not chain "
                                 f"from output dim {self.weights[k - 1].shape[-2]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")
        self._binding = None

    @property
    def stacked(self) -> bool:
        return self.weights[0].ndim == 3

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-1]] + [W.shape[-2] for W in self.weights]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.seed, dict(self.metadata))

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def layers(self) -> list[tuple]:
        return list(zip(self.weights, self.biases))

    def bind(self, tape: ad.Tape) -> list[tuple]:
        """Register the arrays as leaves of ``tape``; repeated calls reuse the leaves."""
        if self._binding is not None and self._binding[0] is tape:
            return self._binding[1]
        layers = [(tape.param(W), tape.param(b)) for W, b in zip(self.weights, self.biases)]
        self._binding = (tape, layers)
        return layers

    def leaves(self, tape: ad.Tape) -> list[ad.Var]:
        out = []
        for W, b in self.bind(tape):
            out.extend((W, b))
        return out

    def grads(self, gradients: ad.Gradients, tape: ad.Tape) -> list[np.ndarray]:
        """Gradient arrays aligned with :meth:`arrays`."""
        return [gradients[v] for v in self.leaves(tape)]

    def unstack(self) -> list["MlpParams"]:
        if not self.stacked:
            return [self]
        G = self.weights[0].shape[0]
        return [MlpParams([W[g] for W in self.weights], [b[g] for b in self.biases],
                          self.seed, dict(self.metadata)) for g in range(G)]

    @staticmethod
    def stack(nets: Sequence["MlpParams"]) -> "MlpParams":
        if len({tuple(n.sizes) for n in nets}) != 1:
            raise ValueError("only networks with identical layer sizes can be stacked")
        n_layers = len(nets[0].weights)
        return MlpParams([np.stack([n.weights[k] for n in nets]) for k in range(n_layers)],
                         [np.stack([n.biases[k] for n in nets]) for k in range(n_layers)],
                         nets[0].seed)


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpParams:
    """Uniform fan-in initialization ``U(-1/sqrt(in), 1/sqrt(in))`` with zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be >= 2 positive integers, got {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(weights, biases, seed=int(seed))


def mlp_init_stack(layer_sizes: Sequence[int], seeds: Sequence[int]) -> MlpParams:
    """Stack of independently seeded networks with shared architecture."""
    return MlpParams.stack([mlp_init(layer_sizes, s) for s in seeds])


def mlp_forward(params: MlpParams, x, tape: ad.Tape | None = None):
    """Evaluate the network on ``x`` shaped (in,), (batch, in) or, stacked, (G, batch, in)."""
    xv = ad.value_of(x)
    if np.shape(xv)[-1] != params.in_dim:
        raise ad.ShapeError("mlp_forward", np.shape(xv), (params.in_dim,))
    if tape is None:
        if isinstance(x, ad.Var):
            raise ValueError("taped input requires the tape argument")
        return ad.mlp(np.asarray(x, dtype=np.float64), params.layers())
    return ad.mlp(x, params.bind(tape))


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    method: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam(lr: float = 1e-3) -> OptimizerState:
    return OptimizerState("adam", lr)


def sgd(lr: float) -> OptimizerState:
    return OptimizerState("sgd", lr)


def optimizer_step(params, grads, state: OptimizerState):
    """One update; ``params`` is an :class:`MlpParams` or a list of arrays.

    Returns a new object of the same kind; ``state`` is advanced in place.
    """
    arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    grads = list(grads)
    if len(grads) != len(arrays):
        raise ValueError(f"expected {len(arrays)} gradient arrays, got {len(grads)}")
    for k, (p, g) in enumerate(zip(arrays, grads)):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in parameter array {k}")
    if state.method == "sgd":
        new = [p - state.lr * g for p, g in zip(arrays, grads)]
        state.step += 1
    else:
        if state.m is None:
            state.m = [np.zeros_like(p) for p in arrays]
            state.v = [np.zeros_like(p) for p in arrays]
        state.step += 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        new = []
        for p, g, m, v in zip(arrays, grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            new.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    if isinstance(params, MlpParams):
        return params.with_arrays(new)
    return new


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "deop-mlp"
CHECKPOINT_VERSION = 1


def params_to_dict(params: MlpParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sizes": params.sizes,
        "stacked": params.stacked,
        "seed": params.seed,
        "weights": [W.tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "metadata": params.metadata,
    }


def params_from_dict(d: dict) -> MlpParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an MLP checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    p = MlpParams([np.array(w, dtype=np.float64) for w in d["weights"]],
                  [np.array(b, dtype=np.float64) for b in d["biases"]],
                  d.get("seed"), dict(d.get("metadata", {})))
    if p.sizes != list(d["sizes"]):
        raise ValueError("checkpoint sizes do not match stored arrays")
    return p


def save_checkpoint(params: MlpParams, path) -> None:
    """JSON checkpoint; float repr round-trips doubles exactly."""
    Path(path).write_text(json.dumps(params_to_dict(params), sort_keys=True))


def load_checkpoint(path) -> MlpParams:
    return params_from_dict(json.loads(Path(path).read_text()))
