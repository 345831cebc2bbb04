"""Centered orthonormal FFTs, Cartesian sampling masks and encoding operators.

Images and k-space are real arrays of shape (2, H, W): channel 0 is the real
part, channel 1 the imaginary part. DC sits at index (H//2, W//2).
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

MAX_SUBSET_RETRIES = 100
SUBSET_WINDOW = (0.4, 0.6)


# -- transforms -----------------------------------------------------------


def to_complex(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3 or x.shape[0] != 2:
        raise ValueError(f"expected a 2 x H x W real/imag array, got shape {x.shape}")
    return x[0] + 1j * x[1]


def to_channels(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag])


def _check_image(x):
    if x.ndim != 3 or x.shape[0] != 2:
        raise ValueError(f"expected a 2 x H x W real/imag array, got shape {x.shape}")
    h, w = x.shape[1:]
    if h < 1 or w < 1:
        raise ValueError(f"unsupported size {h}x{w}")


def fft2_centered(img: np.ndarray) -> np.ndarray:
    _check_image(img)
    z = np.fft.ifftshift(to_complex(img))
    return to_channels(np.fft.fftshift(np.fft.fft2(z, norm="ortho")))


def ifft2_centered(ksp: np.ndarray) -> np.ndarray:
    _check_image(ksp)
    z = np.fft.ifftshift(to_complex(ksp))
    return to_channels(np.fft.fftshift(np.fft.ifft2(z, norm="ortho")))


# -- masks ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True, eq=False)
class Mask:
    pattern: np.ndarray
    acs_lines: int
    seed: int | None
    accel: float

    @property
    def height(self) -> int:
        return self.pattern.shape[0]

    @property
    def width(self) -> int:
        return self.pattern.shape[1]

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.pattern))

    def complement(self) -> np.ndarray:
        return 1.0 - self.pattern

    def metadata(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "accel": self.accel,
            "acs_lines": self.acs_lines,
            "seed": self.seed,
        }

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.metadata() == other.metadata() and np.array_equal(self.pattern, other.pattern)


def acs_rows(h: int, acs_lines: int) -> slice:
    start = h // 2 - acs_lines // 2
    return slice(start, start + acs_lines)


def _bernoulli_mask(rng, h, w, acs_lines, prob):
    pattern = (rng.random((h, w)) < prob).astype(np.float64)
    pattern[acs_rows(h, acs_lines)] = 1.0
    return pattern


def make_undersampling_mask(h: int, w: int, accel: float, acs_lines: int, seed: int) -> Mask:
    """Fully sampled central rows plus uniform per-point Bernoulli sampling elsewhere.

    The Bernoulli probability is solved in closed form so that the expected
    number of samples equals ``h * w / accel``.
    """
    if accel < 1:
        raise ValueError(f"accel must be >= 1, got {accel}")
    if not 0 <= acs_lines < h:
        raise ValueError(f"acs_lines must lie in [0, {h}), got {acs_lines}")
    if accel == 1:
        return Mask(np.ones((h, w)), acs_lines, seed, accel)
    budget = h * w / accel
    acs_points = acs_lines * w
    if acs_points > budget:
        raise ValueError(
            f"infeasible mask: {acs_lines} ACS rows ({acs_points} points) exceed "
            f"the budget of {budget:.0f} points at accel {accel}"
        )
    prob = (budget - acs_points) / ((h - acs_lines) * w)
    rng = np.random.default_rng(seed)
    return Mask(_bernoulli_mask(rng, h, w, acs_lines, prob), acs_lines, seed, accel)


@dataclasses.dataclass(frozen=True)
class SubsetPair:
    sub1: Mask
    sub2: Mask
    parent: Mask

    def overlap_fraction(self) -> float:
        both = np.count_nonzero(self.sub1.pattern * self.sub2.pattern)
        return both / max(1, self.parent.count)

    def coverage_fraction(self) -> float:
        union = np.count_nonzero(np.maximum(self.sub1.pattern, self.sub2.pattern))
        return union / max(1, self.parent.count)


def make_selection_subsets(parent: Mask, sel_acs: int = 16, seed: int = 0) -> SubsetPair:
    """Intersect the parent with two independent random selection masks.

    Each selection mask keeps ``sel_acs`` central rows and samples the rest
    with a probability chosen so the intersection holds about half of the
    parent's points. Draws are rejected until the two subsets differ and both
    land in the 40-60% cardinality window.
    """
    if sel_acs > parent.acs_lines:
        raise ValueError(f"sel_acs ({sel_acs}) must not exceed the parent's ACS ({parent.acs_lines})")
    h, w = parent.height, parent.width
    n_parent = parent.count
    acs_points = sel_acs * w
    rest = n_parent - acs_points
    prob = 0.0 if rest <= 0 else float(np.clip((0.5 * n_parent - acs_points) / rest, 0.0, 1.0))
    sel_accel = h * w / (acs_points + prob * (h * w - acs_points))

    rng = np.random.default_rng(seed)
    lo, hi = SUBSET_WINDOW
    for attempt in range(MAX_SUBSET_RETRIES):
        subs = []
        for _ in range(2):
            sel = _bernoulli_mask(rng, h, w, sel_acs, prob)
            subs.append(Mask(sel * parent.pattern, sel_acs, seed, sel_accel))
        s1, s2 = subs
        ok = all(lo * n_parent <= s.count <= hi * n_parent for s in subs)
        if ok and not np.array_equal(s1.pattern, s2.pattern):
            if attempt:
                log.debug("subset draw accepted after %d retries", attempt)
            return SubsetPair(s1, s2, parent)
    raise ValueError(
        f"could not draw subsets within {lo:.0%}-{hi:.0%} of {n_parent} parent points "
        f"after {MAX_SUBSET_RETRIES} retries"
    )


# -- encoding operators (arrays) -----------------------------------------


def _pattern(m) -> np.ndarray:
    return m.pattern if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def _check_mask(x, pat):
    if x.shape[1:] != pat.shape:
        raise ValueError(f"mask shape {pat.shape} does not match data shape {x.shape[1:]}")


def apply_A(x: np.ndarray, m) -> np.ndarray:
    pat = _pattern(m)
    _check_mask(x, pat)
    return fft2_centered(x) * pat


def apply_At(y: np.ndarray, m) -> np.ndarray:
    pat = _pattern(m)
    _check_mask(y, pat)
    return ifft2_centered(y * pat)


def apply_Abar(x: np.ndarray, m) -> np.ndarray:
    pat = _pattern(m)
    _check_mask(x, pat)
    return fft2_centered(x) * (1.0 - pat)


def apply_Abar_t(y: np.ndarray, m) -> np.ndarray:
    pat = _pattern(m)
    _check_mask(y, pat)
    return ifft2_centered(y * (1.0 - pat))


# -- encoding operators (graph nodes) ------------------------------------
# The real/imag representation of a unitary map has its inverse as transpose.


def A_node(x: ad.Node, m) -> ad.Node:
    pat = _pattern(m)
    _check_mask(x.value, pat)
    return ad.linear(x, lambda v: apply_A(v, pat), lambda g: apply_At(g, pat), op="A")


def At_node(y: ad.Node, m) -> ad.Node:
    pat = _pattern(m)
    _check_mask(y.value, pat)
    return ad.linear(y, lambda v: apply_At(v, pat), lambda g: apply_A(g, pat), op="At")


def Abar_node(x: ad.Node, m) -> ad.Node:
    pat = _pattern(m)
    _check_mask(x.value, pat)
    return ad.linear(x, lambda v: apply_Abar(v, pat), lambda g: apply_Abar_t(g, pat), op="Abar")
