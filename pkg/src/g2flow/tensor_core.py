"""Pointwise tensor algebra on a 7-dimensional vector space.

Tensors at a point are dense ndarrays with one axis per index and an
explicit variance (upper or lower) per index. Contractions check variance
and insert the metric when asked to, so index bookkeeping mistakes fail
loudly instead of silently producing the wrong invariant.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._packing import DIM, epsilon_dense

UP = +1
DOWN = -1


class VarianceError(ValueError):
    """A contraction paired two indices that cannot be traced as given."""


class RankDeficiencyError(ValueError):
    """A pointwise linear solve met a matrix that is rank deficient."""


@dataclass(frozen=True)
class PointTensor:
    """A tensor at a single point: dense components plus index variance.

    components has shape (7,)*rank; variance is a tuple with +1 for an
    upper index and -1 for a lower one, in axis order.
    """

    components: np.ndarray
    variance: tuple[int, ...]

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=float)
        object.__setattr__(self, "components", comp)
        if comp.shape != (DIM,) * len(self.variance):
            raise ValueError(
                f"components shape {comp.shape} does not match "
                f"variance of length {len(self.variance)}"
            )
        if any(v not in (UP, DOWN) for v in self.variance):
            raise ValueError("variance entries must be +1 (up) or -1 (down)")

    @property
    def rank(self) -> int:
        return len(self.variance)

    def __add__(self, other: "PointTensor") -> "PointTensor":
        if self.variance != other.variance:
            raise VarianceError("cannot add tensors of different variance")
        return PointTensor(self.components + other.components, self.variance)

    def __sub__(self, other: "PointTensor") -> "PointTensor":
        if self.variance != other.variance:
            raise VarianceError("cannot subtract tensors of different variance")
        return PointTensor(self.components - other.components, self.variance)

    def __mul__(self, scalar: float) -> "PointTensor":
        return PointTensor(self.components * scalar, self.variance)

    __rmul__ = __mul__


def contract(
    a: PointTensor,
    b: PointTensor,
    pairs,
    g: np.ndarray | None = None,
    g_inv: np.ndarray | None = None,
) -> PointTensor:
    """Contract index pairs (i, j) of a and b, i indexing a and j indexing b.

    An up-down pair traces directly. A down-down pair needs g_inv, an up-up
    pair needs g; otherwise VarianceError is raised. Unpaired indices keep
    their order (a's first, then b's).
    """
    pairs = [(int(i), int(j)) for i, j in pairs]
    if len({i for i, _ in pairs}) != len(pairs) or len({j for _, j in pairs}) != len(
        pairs
    ):
        raise ValueError("an index may appear in at most one pair")

    acomp, avar = a.components, list(a.variance)
    bcomp, bvar = b.components, list(b.variance)
    for i, j in pairs:
        va, vb = avar[i], bvar[j]
        if va == vb == DOWN:
            if g_inv is None:
                raise VarianceError("down-down pair requires g_inv")
            acomp = _apply_metric(acomp, i, g_inv)
            avar[i] = UP
        elif va == vb == UP:
            if g is None:
                raise VarianceError("up-up pair requires g")
            acomp = _apply_metric(acomp, i, g)
            avar[i] = DOWN

    letters = "abcdefghijklmnopqrstuvwxyz"
    asub = list(letters[: a.rank])
    bsub = list(letters[a.rank : a.rank + b.rank])
    for i, j in pairs:
        bsub[j] = asub[i]
    afree = [s for k, s in enumerate(asub) if k not in {i for i, _ in pairs}]
    bfree = [s for k, s in enumerate(bsub) if k not in {j for _, j in pairs}]
    out = "".join(afree + bfree)
    comp = np.einsum(f"{''.join(asub)},{''.join(bsub)}->{out}", acomp, bcomp)
    var = tuple(
        [v for k, v in enumerate(avar) if k not in {i for i, _ in pairs}]
        + [v for k, v in enumerate(bvar) if k not in {j for _, j in pairs}]
    )
    return PointTensor(comp, var)


def _apply_metric(comp: np.ndarray, axis: int, metric: np.ndarray) -> np.ndarray:
    moved = np.moveaxis(comp, axis, -1)
    return np.moveaxis(moved @ metric, -1, axis)


def raise_index(t: PointTensor, axis: int, g_inv: np.ndarray) -> PointTensor:
    if t.variance[axis] != DOWN:
        raise VarianceError("index is already up")
    var = list(t.variance)
    var[axis] = UP
    return PointTensor(_apply_metric(t.components, axis, g_inv), tuple(var))


def lower_index(t: PointTensor, axis: int, g: np.ndarray) -> PointTensor:
    if t.variance[axis] != UP:
        raise VarianceError("index is already down")
    var = list(t.variance)
    var[axis] = DOWN
    return PointTensor(_apply_metric(t.components, axis, g), tuple(var))


def _alternating_sum(comp: np.ndarray, axes: tuple[int, ...], signed: bool):
    out = np.zeros_like(comp)
    for perm in itertools.permutations(range(len(axes))):
        sign = 1
        if signed:
            sign = _perm_sign(perm)
        out += sign * np.moveaxis(comp, axes, [axes[p] for p in perm])
    return out / math.factorial(len(axes))


def _perm_sign(perm) -> int:
    sign = 1
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                sign = -sign
    return sign


def antisymmetrize(t: PointTensor, axes=None) -> PointTensor:
    """Alternation over the given axes (all by default), with 1/k! weight."""
    axes = tuple(range(t.rank)) if axes is None else tuple(axes)
    if len({t.variance[i] for i in axes}) > 1:
        raise VarianceError("cannot alternate axes of mixed variance")
    return PointTensor(_alternating_sum(t.components, axes, signed=True), t.variance)


def symmetrize(t: PointTensor, axes=None) -> PointTensor:
    """Symmetrization over the given axes (all by default), with 1/k! weight."""
    axes = tuple(range(t.rank)) if axes is None else tuple(axes)
    if len({t.variance[i] for i in axes}) > 1:
        raise VarianceError("cannot symmetrize axes of mixed variance")
    return PointTensor(_alternating_sum(t.components, axes, signed=False), t.variance)


def epsilon_symbol() -> np.ndarray:
    """The permutation symbol on 7 indices, +1 on (0, ..., 6). Not a tensor."""
    return epsilon_dense()


def epsilon_upper(sqrt_det_g) -> PointTensor:
    """Levi-Civita tensor with all indices up: symbol / sqrt(det g)."""
    return PointTensor(epsilon_dense() / float(sqrt_det_g), (UP,) * DIM)


def epsilon_lower(sqrt_det_g) -> PointTensor:
    """Levi-Civita tensor with all indices down: symbol * sqrt(det g)."""
    return PointTensor(epsilon_dense() * float(sqrt_det_g), (DOWN,) * DIM)


def solve_pointwise(A, y, rank_tol: float = 1e-10):
    """Least-squares solve of A x = y by SVD, with leading batch axes allowed.

    A has shape (..., m, n) and y shape (..., m). Returns (x, residual_norm).
    Raises RankDeficiencyError when any batch member has singular values
    below rank_tol relative to its largest one.
    """
    A = np.asarray(getattr(A, "components", A), dtype=float)
    y = np.asarray(getattr(y, "components", y), dtype=float)
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    smax = s[..., :1]
    if np.any(smax == 0.0) or np.any(s < rank_tol * smax):
        raise RankDeficiencyError(
            "matrix is rank deficient below relative tolerance "
            f"{rank_tol:g} (min ratio {float(np.min(s / np.where(smax == 0, 1, smax))):.3e})"
        )
    coeff = np.einsum("...im,...i->...m", u, y) / s
    x = np.einsum("...mi,...m->...i", vt, coeff)
    resid = y - np.einsum("...im,...m->...i", A, x)
    return x, np.linalg.norm(resid, axis=-1)
