"""Unrolled ISTA reconstructor with a learned sparsifying transform per phase.

Each phase takes a gradient step on the data term and then applies a learned
proximal step with a residual connection::

    r = x - rho * A^T (A x - y)
    x = r + H(G(soft(F(D(r)), theta)))

F and G are two-layer conv/relu/conv blocks; G mirrors F so that G(F(.))
can be pushed towards the identity by the symmetry constraint loss.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .kspace import A_node, At_node, Mask

KERNEL = 3
INIT_RHO = 0.5
INIT_THETA = 0.01
CONVS = ("D", "F1", "F2", "G1", "G2", "H")


def conv_shapes(channels: int, k: int = KERNEL) -> dict[str, tuple[int, int, int, int]]:
    c = channels
    return {
        "D": (c, 2, k, k),
        "F1": (c, c, k, k),
        "F2": (c, c, k, k),
        "G1": (c, c, k, k),
        "G2": (c, c, k, k),
        "H": (2, c, k, k),
    }


def theta_raw_for(theta: float) -> float:
    """Inverse softplus."""
    return float(np.log(np.expm1(theta)))


@dataclasses.dataclass
class PhaseParams:
    """Learnable tensors of one phase. Fields hold arrays, or graph nodes
    once the parameters have been lifted into a graph."""

    rho: object
    theta_raw: object
    weights: dict
    biases: dict

    def named(self, prefix: str = "") -> list[tuple[str, object]]:
        out = [(prefix + "rho", self.rho), (prefix + "theta_raw", self.theta_raw)]
        for c in CONVS:
            out.append((f"{prefix}conv_{c}.weight", self.weights[c]))
            out.append((f"{prefix}conv_{c}.bias", self.biases[c]))
        return out

    def theta(self) -> float:
        return float(np.logaddexp(0.0, _value(self.theta_raw)))


def _value(v):
    return v.value if isinstance(v, ad.Node) else v


@dataclasses.dataclass
class ModelParams:
    phases: list[PhaseParams]
    channels: int

    @property
    def K(self) -> int:
        return len(self.phases)

    def named(self) -> list[tuple[str, object]]:
        out = []
        for k, p in enumerate(self.phases):
            out.extend(p.named(f"phase{k}."))
        return out

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: _value(v) for name, v in self.named()}

    @classmethod
    def from_dict(cls, tensors: dict, K: int, channels: int) -> "ModelParams":
        phases = []
        for k in range(K):
            pre = f"phase{k}."
            phases.append(
                PhaseParams(
                    rho=tensors[pre + "rho"],
                    theta_raw=tensors[pre + "theta_raw"],
                    weights={c: tensors[f"{pre}conv_{c}.weight"] for c in CONVS},
                    biases={c: tensors[f"{pre}conv_{c}.bias"] for c in CONVS},
                )
            )
        return cls(phases, channels)

    def lift(self, graph: ad.Graph) -> "ModelParams":
        """Same structure with every tensor replaced by a leaf node of ``graph``."""
        leaves = {name: graph.leaf(v, name=name) for name, v in self.named()}
        return ModelParams.from_dict(leaves, self.K, self.channels)

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({n: np.array(v, copy=True) for n, v in self.as_dict().items()}, self.K, self.channels)


def xavier_uniform(rng, shape, gain: float = 1.0) -> np.ndarray:
    receptive = int(np.prod(shape[2:]))
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(K: int = 9, channels: int = 16, seed: int = 0, gain: float = 1.0) -> ModelParams:
    if K < 1 or channels < 1:
        raise ValueError(f"need K >= 1 and channels >= 1, got K={K}, channels={channels}")
    rng = np.random.default_rng(seed)
    shapes = conv_shapes(channels)
    phases = []
    for _ in range(K):
        phases.append(
            PhaseParams(
                rho=np.array(INIT_RHO),
                theta_raw=np.array(theta_raw_for(INIT_THETA)),
                weights={c: xavier_uniform(rng, shapes[c], gain) for c in CONVS},
                biases={c: np.zeros(shapes[c][0]) for c in CONVS},
            )
        )
    return ModelParams(phases, channels)


# -- forward pieces -------------------------------------------------------


def _conv(x, p: PhaseParams, name):
    return ad.conv2d(x, p.weights[name], p.biases[name])


def transform(r: ad.Node, p: PhaseParams) -> tuple[ad.Node, ad.Node]:
    """Returns (D(r), F(D(r)))."""
    d = _conv(r, p, "D")
    z = _conv(ad.relu(_conv(d, p, "F1")), p, "F2")
    return d, z


def inverse_transform(z: ad.Node, p: PhaseParams) -> ad.Node:
    return _conv(ad.relu(_conv(z, p, "G1")), p, "G2")


def symmetry_features(r: ad.Node, p: PhaseParams) -> tuple[ad.Node, ad.Node]:
    """Reference features D(r) and their round trip G(F(D(r))) with no shrinkage."""
    d, z = transform(r, p)
    return d, inverse_transform(z, p)


def gradient_step(x_prev: ad.Node, y: ad.Node, m: Mask, p: PhaseParams) -> ad.Node:
    residual = ad.sub(A_node(x_prev, m), y)
    return ad.sub(x_prev, ad.scale(At_node(residual, m), p.rho))


def _phase(x_prev, y, m, p):
    r = gradient_step(x_prev, y, m, p)
    d, z = transform(r, p)
    theta = ad.softplus(p.theta_raw)
    shrunk = ad.soft_threshold(z, theta)
    x = ad.add(r, _conv(inverse_transform(shrunk, p), p, "H"))
    return x, (d, inverse_transform(z, p))


def phase_forward(x_prev: ad.Node, y: ad.Node, m: Mask, p: PhaseParams) -> ad.Node:
    return _phase(x_prev, y, m, p)[0]


def _ensure_graph(y, params: ModelParams):
    if isinstance(y, ad.Node):
        g = y.graph
    else:
        g = None
        for _, v in params.named():
            if isinstance(v, ad.Node):
                g = v.graph
                break
        g = g or ad.Graph()
        y = g.leaf(y, name="y")
    if params.phases and not isinstance(params.phases[0].rho, ad.Node):
        params = params.lift(g)
    return g, y, params


def reconstruct(y, m: Mask, params: ModelParams):
    """Zero-filled start followed by K phases.

    ``y`` may be an array or a node; array parameters are lifted into the
    graph that ``y`` (or the first node parameter) belongs to. Returns the
    final image node and a list of per-phase (reference, round-trip) pairs.
    """
    _, y, params = _ensure_graph(y, params)
    x = At_node(y, m)
    per_phase = []
    for p in params.phases:
        x, pair = _phase(x, y, m, p)
        per_phase.append(pair)
    return x, per_phase


def reconstruct_array(y: np.ndarray, m: Mask, params: ModelParams) -> np.ndarray:
    x, _ = reconstruct(y, m, params)
    return x.value


def magnitude(x: np.ndarray) -> np.ndarray:
    return np.sqrt(x[0] ** 2 + x[1] ** 2)
