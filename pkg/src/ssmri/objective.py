"""Training objectives for the parallel self-supervised scheme and its baselines."""

from __future__ import annotations

import dataclasses
import enum
import logging

import numpy as np

from . import autodiff as ad
from .kspace import A_node, Abar_node, Mask

log = logging.getLogger(__name__)


class LossMode(str, enum.Enum):
    PARALLEL = "parallel"
    PARALLEL_NO_DIFF = "parallel_no_diff"
    SSDU = "ssdu"
    SUPERVISED = "supervised"

    @property
    def two_branch(self) -> bool:
        return self in (LossMode.PARALLEL, LossMode.PARALLEL_NO_DIFF)


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01  # difference loss
    beta: float = 0.01  # symmetry constraint, branch 1
    gamma: float = 0.01  # symmetry constraint, branch 2

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _pattern(m):
    return m.pattern if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def _as_node(graph, v, name):
    return v if isinstance(v, ad.Node) else graph.leaf(v, name=name)


def recon_loss(y_full, m_full, x: ad.Node) -> ad.Node:
    """Data fidelity against every scanned point, seen by the branch or not."""
    y = _as_node(x.graph, y_full, "y_full")
    pat = _pattern(m_full)
    return ad.masked_mse(A_node(x, pat), y, pat)


def diff_loss(x1: ad.Node, x2: ad.Node, m_full) -> ad.Node:
    """Agreement of the two branches on the unscanned part of k-space."""
    pat = _pattern(m_full)
    return ad.masked_mse(Abar_node(x1, pat), Abar_node(x2, pat), 1.0 - pat)


def constraint_loss(per_phase, graph: ad.Graph | None = None) -> ad.Node:
    if not per_phase:
        if graph is None:
            raise ValueError("constraint_loss of an empty phase list needs a graph")
        return graph.leaf(0.0, name="zero")
    terms = [ad.masked_mse(rt, ref, np.ones(ref.shape)) for ref, rt in per_phase]
    return ad.mean(terms)


def image_loss(x: ad.Node, gt) -> ad.Node:
    """Plain MSE against a reference image (real images get a zero imag channel)."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 2:
        gt = np.stack([gt, np.zeros_like(gt)])
    ref = x.graph.leaf(gt, name="ground_truth")
    return ad.masked_mse(x, ref, np.ones(x.shape))


def total_loss(
    branch1,
    branch2,
    y_full,
    m_full,
    weights: LossWeights = LossWeights(),
    mode: LossMode | str = LossMode.PARALLEL,
    ground_truth=None,
    loss_mask=None,
) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Loss of one training case.

    ``branch1``/``branch2`` are ``(x, per_phase)`` pairs from ``reconstruct``;
    ``branch2`` is ignored by the single-branch modes. Returns the root node
    and every component, including components that do not feed the root
    (the difference term in ``parallel_no_diff``).
    """
    mode = LossMode(mode)
    x1, pp1 = branch1
    g = x1.graph
    comps: dict[str, ad.Node] = {}

    if mode.two_branch:
        if branch2 is None:
            raise ValueError(f"mode {mode.value} needs two branches")
        x2, pp2 = branch2
        comps["recon1"] = recon_loss(y_full, m_full, x1)
        comps["recon2"] = recon_loss(y_full, m_full, x2)
        comps["diff"] = diff_loss(x1, x2, m_full)
        comps["cons1"] = constraint_loss(pp1, g)
        comps["cons2"] = constraint_loss(pp2, g)
        total = ad.add(comps["recon1"], comps["recon2"])
        if mode is LossMode.PARALLEL:
            total = ad.add(total, ad.scale(comps["diff"], weights.alpha))
        total = ad.add(total, ad.scale(comps["cons1"], weights.beta))
        total = ad.add(total, ad.scale(comps["cons2"], weights.gamma))
    elif mode is LossMode.SSDU:
        lm = m_full if loss_mask is None else loss_mask
        comps["recon1"] = recon_loss(y_full, lm, x1)
        comps["cons1"] = constraint_loss(pp1, g)
        total = ad.add(comps["recon1"], ad.scale(comps["cons1"], weights.gamma))
    else:
        if ground_truth is None:
            raise ValueError("supervised mode needs a ground-truth image")
        comps["image"] = image_loss(x1, ground_truth)
        comps["cons1"] = constraint_loss(pp1, g)
        total = ad.add(comps["image"], ad.scale(comps["cons1"], weights.gamma))
    return total, comps
