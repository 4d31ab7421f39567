"""Pointwise algebra of a G2-structure on a 7-dimensional space.

A structure is described by its positive 3-form phi (packed, 35 components).
The metric it induces, the dual 4-form psi, the type decompositions of
2-, 3-, 4- and 5-forms and the quadratic contraction identities relating
phi, psi and the metric are all evaluated here, batched over arbitrary
leading axes so the same kernels serve single points and whole grids.

Index convention: packed forms carry lower indices unless a name says
otherwise (phi_up, psi_up). Vectors returned by decompositions carry an
upper index. The orientation symbol is +1 on (0, 1, ..., 6).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ._packing import (
    COMBO_POS,
    COMBOS,
    DIM,
    NCOMP,
    assemble_first,
    complement_gather,
    expand_first,
    pack,
    pair_split,
    perm_parity,
    unpack,
    wedge,
)

__all__ = [
    "NonPositiveFormError",
    "G2Structure",
    "FormDecomposition",
    "standard_phi",
    "standard_psi",
    "standard_structure",
    "metric_from_phi",
    "hodge_star",
    "raise_form",
    "lower_form",
    "interior",
    "wedge",
    "i_phi",
    "star_i_phi",
    "circ",
    "sym_inner",
    "form_inner",
    "project",
    "project_lstsq",
    "reassemble",
    "verify_contractions",
]


class NonPositiveFormError(ValueError):
    """A 3-form failed to induce a positive-definite metric."""


_STANDARD_TERMS = (
    ((0, 1, 2), 1.0),
    ((0, 3, 4), 1.0),
    ((0, 5, 6), 1.0),
    ((1, 3, 5), 1.0),
    ((1, 4, 6), -1.0),
    ((2, 3, 6), -1.0),
    ((2, 4, 5), -1.0),
)


def standard_phi() -> np.ndarray:
    """Packed components of the flat positive 3-form."""
    phi = np.zeros(NCOMP[3])
    pos = {c: i for i, c in enumerate(COMBOS[3])}
    for combo, val in _STANDARD_TERMS:
        phi[pos[combo]] = val
    return phi


def standard_psi() -> np.ndarray:
    """Packed components of the flat dual 4-form (star of standard_phi)."""
    return complement_gather(standard_phi(), 3)


def _contract_each_axis(dense: np.ndarray, k: int, m: np.ndarray) -> np.ndarray:
    """Contract each of the last k axes of dense with the matrix m (..., 7, 7)."""
    lead = dense.ndim - k
    mm = m.reshape(m.shape[:-2] + (1,) * (k - 1) + m.shape[-2:])
    for i in range(k):
        dense = np.moveaxis(dense, lead + i, -1)
        dense = np.einsum("...a,...ab->...b", dense, mm)
        dense = np.moveaxis(dense, -1, lead + i)
    return dense


def raise_form(alpha: np.ndarray, k: int, g_inv: np.ndarray) -> np.ndarray:
    """All indices of a packed k-form raised with g_inv. Dense transient of
    rank k, so keep k <= 3 on grid-sized batches."""
    if k == 0:
        return np.array(alpha, copy=True)
    return pack(_contract_each_axis(unpack(alpha, k), k, g_inv), k)


def lower_form(alpha: np.ndarray, k: int, g: np.ndarray) -> np.ndarray:
    """All indices of a packed k-form lowered with g (same caveat as raise_form)."""
    if k == 0:
        return np.array(alpha, copy=True)
    return pack(_contract_each_axis(unpack(alpha, k), k, g), k)


def metric_from_phi(phi: np.ndarray):
    """Metric and volume factor induced by a positive 3-form.

    Returns (g, sqrt_det_g). Raises NonPositiveFormError when the candidate
    bilinear form has non-positive determinant anywhere in the batch.
    """
    phi = np.asarray(phi, dtype=float)
    rho = 6.0 * complement_gather(phi, 3)
    r2 = pair_split(rho, 4)
    a2 = expand_first(phi, 3)
    s = np.einsum("...aP,...PQ,...bQ->...ab", a2, r2, a2, optimize=True) / 36.0
    det_s = np.linalg.det(s)
    if not np.all(np.isfinite(det_s)) or np.any(det_s <= 0.0):
        raise NonPositiveFormError(
            f"3-form does not induce a metric: min det {float(np.min(det_s)):.3e}"
        )
    g = det_s[..., None, None] ** (-1.0 / 9.0) * s
    sqrt_det_g = det_s ** (1.0 / 9.0)
    return g, sqrt_det_g


def hodge_star(
    g: np.ndarray,
    alpha: np.ndarray,
    k: int,
    g_inv: np.ndarray | None = None,
    sqrt_det_g: np.ndarray | None = None,
) -> np.ndarray:
    """Hodge dual of a packed k-form, returned with lower indices.

    For k <= 3 the input is raised and gathered against the orientation
    symbol; for k >= 4 the gather runs first and the (7-k) output indices
    are lowered. Neither route materializes a dense rank-4 array.
    """
    g = np.asarray(g, dtype=float)
    if sqrt_det_g is None:
        sqrt_det_g = np.sqrt(np.linalg.det(g))
    sq = np.asarray(sqrt_det_g, dtype=float)
    if k <= 3:
        if g_inv is None:
            g_inv = np.linalg.inv(g)
        up = raise_form(alpha, k, g_inv)
        return complement_gather(up, k) * sq[..., None]
    up_out = complement_gather(alpha, k) / sq[..., None]
    return lower_form(up_out, DIM - k, g)


class G2Structure:
    """A G2-structure at a batch of points: phi, psi, metric and caches.

    Construct from a packed 3-form alone (metric and psi derived) or pass
    precomputed pieces to skip the derivation. Mixed-index expansions used
    by several operations are cached on first use.
    """

    def __init__(
        self,
        phi: np.ndarray,
        g: np.ndarray | None = None,
        sqrt_det_g: np.ndarray | None = None,
        psi: np.ndarray | None = None,
    ):
        self.phi = np.asarray(phi, dtype=float)
        if self.phi.shape[-1] != NCOMP[3]:
            raise ValueError("phi must be packed with 35 components on the last axis")
        if g is None:
            g, sqrt_det_g = metric_from_phi(self.phi)
        self.g = np.asarray(g, dtype=float)
        if sqrt_det_g is None:
            sqrt_det_g = np.sqrt(np.linalg.det(self.g))
        self.sqrt_det_g = np.asarray(sqrt_det_g, dtype=float)
        self.g_inv = np.linalg.inv(self.g)
        if psi is None:
            psi = hodge_star(self.g, self.phi, 3, self.g_inv, self.sqrt_det_g)
        self.psi = np.asarray(psi, dtype=float)
        self._cache: dict[str, np.ndarray] = {}

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.phi.shape[:-1]

    def _cached(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def phi_up(self) -> np.ndarray:
        return self._cached(
            "phi_up",
            lambda: complement_gather(self.psi, 4) / self.sqrt_det_g[..., None],
        )

    @property
    def psi_up(self) -> np.ndarray:
        return self._cached(
            "psi_up",
            lambda: complement_gather(self.phi, 3) / self.sqrt_det_g[..., None],
        )

    @property
    def e_phi(self) -> np.ndarray:
        return self._cached("e_phi", lambda: expand_first(self.phi, 3))

    @property
    def e_phi_up(self) -> np.ndarray:
        return self._cached("e_phi_up", lambda: expand_first(self.phi_up, 3))

    @property
    def e_psi(self) -> np.ndarray:
        return self._cached("e_psi", lambda: expand_first(self.psi, 4))

    @property
    def e_psi_up(self) -> np.ndarray:
        return self._cached("e_psi_up", lambda: expand_first(self.psi_up, 4))

    def drop_caches(self) -> None:
        self._cache.clear()

    def star(self, alpha: np.ndarray, k: int) -> np.ndarray:
        return hodge_star(self.g, alpha, k, self.g_inv, self.sqrt_det_g)


def standard_structure(batch_shape: tuple[int, ...] = ()) -> G2Structure:
    """The flat structure, broadcast over a batch."""
    phi = np.broadcast_to(standard_phi(), batch_shape + (NCOMP[3],)).copy()
    g = np.broadcast_to(np.eye(DIM), batch_shape + (DIM, DIM)).copy()
    sq = np.ones(batch_shape)
    psi = np.broadcast_to(standard_psi(), batch_shape + (NCOMP[4],)).copy()
    return G2Structure(phi, g=g, sqrt_det_g=sq, psi=psi)


def interior(X_up: np.ndarray, alpha: np.ndarray, k: int) -> np.ndarray:
    """Interior product of a vector (upper index) with a packed k-form."""
    return np.einsum("...m,...mC->...C", X_up, expand_first(alpha, k))


def i_phi(s: G2Structure, h: np.ndarray) -> np.ndarray:
    """3-form built by inserting a symmetric bilinear form into phi, one
    slot at a time, with the antisymmetrization weight folded in so that
    i_phi(g) = phi. The full h is used; a pure trace c*g maps to c*phi."""
    h_mixed = np.einsum("...ab,...bc->...ac", np.asarray(h, float), s.g_inv)
    t = np.einsum("...ad,...dP->...aP", h_mixed, s.e_phi)
    return assemble_first(t, 3) / 3.0


def star_i_phi(s: G2Structure, h: np.ndarray) -> np.ndarray:
    """Hodge dual of i_phi(h), assembled directly from psi.

    Uses the slot-insertion rule on psi plus a trace correction; agrees
    with s.star(i_phi(s, h), 3), which tests use as the second route.
    """
    h = np.asarray(h, dtype=float)
    h_mixed = np.einsum("...ab,...bc->...ac", h, s.g_inv)
    t = np.einsum("...ad,...dB->...aB", h_mixed, s.e_psi)
    tr = np.einsum("...ab,...ab->...", h, s.g_inv)
    return (-assemble_first(t, 4) + tr[..., None] * s.psi) / 3.0


def circ(s: G2Structure, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetric product (a o b)_ab = phi_amn phi_bpq a^mp b^nq."""
    phid = unpack(s.phi, 3)
    a_up = np.einsum("...am,...bn,...mn->...ab", s.g_inv, s.g_inv, np.asarray(a, float))
    b_up = np.einsum("...am,...bn,...mn->...ab", s.g_inv, s.g_inv, np.asarray(b, float))
    left = np.einsum("...amn,...mp->...apn", phid, a_up)
    right = np.einsum("...bpq,...nq->...bpn", phid, b_up)
    return np.einsum("...apn,...bpn->...ab", left, right)


def sym_inner(g_inv: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full contraction a_ab b_cd g^ac g^bd of two rank-2 tensors."""
    return np.einsum("...ab,...ac,...bd,...cd->...", a, g_inv, g_inv, b, optimize=True)


def form_inner(s: G2Structure, a: np.ndarray, b: np.ndarray, k: int) -> np.ndarray:
    """Pointwise inner product of packed k-forms (one term per combination)."""
    if k >= 4:
        return form_inner(s, s.star(a, k), s.star(b, k), DIM - k)
    b_up = raise_form(b, k, s.g_inv)
    return np.einsum("...C,...C->...", a, b_up)


@dataclass
class FormDecomposition:
    """Type components of a form under the G2 action.

    For 2-forms: X (upper vector, the 7-part as X -| phi) and w14.
    For 3-forms: f, X, h with the form equal to X -| psi + i_phi(h); h is
    symmetric with its trace included (tr h = 7f), so i_phi(h) carries both
    the 1-part f*phi and the 27-part.
    For 4-forms: f, X, h with the form equal to X^flat ^ phi + star_i_phi(h),
    same trace convention.
    For 5-forms: X, w14 with the form equal to star(X -| phi) + star(w14).
    Unused slots are None.
    """

    f: np.ndarray | None = None
    X: np.ndarray | None = None
    h: np.ndarray | None = None
    w14: np.ndarray | None = None


def project(s: G2Structure, alpha: np.ndarray, k: int) -> FormDecomposition:
    """Decompose a packed k-form into irreducible type components."""
    alpha = np.asarray(alpha, dtype=float)
    if k == 2:
        x = np.einsum("...P,...aP->...a", alpha, s.e_phi_up) / 3.0
        w14 = alpha - interior(x, s.phi, 3)
        return FormDecomposition(X=x, w14=w14)
    if k == 3:
        f = form_inner(s, alpha, s.phi, 3) / 7.0
        x = np.einsum("...B,...aB->...a", alpha, s.e_psi_up) / 4.0
        chi27 = alpha - f[..., None] * s.phi - interior(x, s.psi, 4)
        m_mixed = np.einsum("...bc,...cP->...bP", s.g, s.e_phi_up)
        j = 2.0 * np.einsum("...aP,...bP->...ab", expand_first(chi27, 3), m_mixed)
        h = 3.0 * (j + np.swapaxes(j, -1, -2)) / 8.0 + f[..., None, None] * s.g
        return FormDecomposition(f=f, X=x, h=h)
    if k == 4:
        dual = project(s, s.star(alpha, 4), 3)
        return FormDecomposition(f=dual.f, X=-dual.X, h=dual.h)
    if k == 5:
        dual = project(s, s.star(alpha, 5), 2)
        return FormDecomposition(X=dual.X, w14=dual.w14)
    raise ValueError(f"no type decomposition implemented for k={k}")


def project_lstsq(s: G2Structure, alpha: np.ndarray) -> FormDecomposition:
    """Decompose a 3-form by a pointwise linear solve against the explicit
    injections, with no hand-derived inversion constants.

    Builds the 35x35 matrix whose columns are the images of basis vectors
    under X -> X -| psi and of basis symmetric tensors under i_phi, then
    solves for the coordinates. Intended for verification on point batches;
    project() is the fast closed-form equivalent.
    """
    from .tensor_core import solve_pointwise

    alpha = np.asarray(alpha, dtype=float)
    batch = np.broadcast_shapes(alpha.shape[:-1], s.batch_shape)
    cols = []
    for a in range(DIM):
        e = np.zeros(DIM)
        e[a] = 1.0
        cols.append(np.broadcast_to(interior(e, s.psi, 4), batch + (NCOMP[3],)))
    sym_index = []
    for a in range(DIM):
        for b in range(a, DIM):
            e = np.zeros((DIM, DIM))
            e[a, b] = 1.0
            e[b, a] = 1.0
            if a == b:
                e[a, a] = 1.0
            cols.append(np.broadcast_to(i_phi(s, e), batch + (NCOMP[3],)))
            sym_index.append((a, b))
    mat = np.stack(cols, axis=-1)
    coords, _resid = solve_pointwise(mat, np.broadcast_to(alpha, batch + (NCOMP[3],)))
    x = coords[..., :DIM]
    h = np.zeros(batch + (DIM, DIM))
    for i, (a, b) in enumerate(sym_index):
        h[..., a, b] += coords[..., DIM + i]
        h[..., b, a] = h[..., a, b]
    f = np.einsum("...ab,...ab->...", h, s.g_inv) / 7.0
    return FormDecomposition(f=f, X=x, h=h)


def _pair_raise(g_inv: np.ndarray) -> np.ndarray:
    """Induced inverse metric on packed 2-forms: det of 2x2 minors."""
    m = np.array([c[0] for c in COMBOS[2]], dtype=np.intp)
    n = np.array([c[1] for c in COMBOS[2]], dtype=np.intp)
    gi = np.asarray(g_inv, dtype=float)
    mi, mj = m[:, None], m[None, :]
    ni, nj = n[:, None], n[None, :]
    return gi[..., mi, mj] * gi[..., ni, nj] - gi[..., mi, nj] * gi[..., ni, mj]


def reassemble(s: G2Structure, dec: FormDecomposition, k: int) -> np.ndarray:
    """Rebuild a packed k-form from its type components (see FormDecomposition)."""
    if k == 2:
        return interior(dec.X, s.phi, 3) + dec.w14
    if k == 3:
        return interior(dec.X, s.psi, 4) + i_phi(s, dec.h)
    if k == 4:
        x_low = np.einsum("...ab,...b->...a", s.g, dec.X)
        return wedge(x_low, s.phi, 1, 3) + star_i_phi(s, dec.h)
    if k == 5:
        two = interior(dec.X, s.phi, 3) + dec.w14
        return s.star(two, 2)
    raise ValueError(f"no reassembly implemented for k={k}")


@lru_cache(maxsize=None)
def _quad_pair_tables():
    """Gather tables for the two-pair term of the four-index quadratic
    identity, restricted to sorted index combinations."""
    rows = []
    for ai, a in enumerate(COMBOS[4]):
        for i, j in itertools.combinations(range(4), 2):
            pa = (a[i], a[j])
            rest_a = tuple(a[t] for t in range(4) if t not in (i, j))
            sa = perm_parity((i, j) + tuple(t for t in range(4) if t not in (i, j)))
            for bi, b in enumerate(COMBOS[4]):
                for k, l in itertools.combinations(range(4), 2):
                    pb = (b[k], b[l])
                    rest_b = tuple(b[t] for t in range(4) if t not in (k, l))
                    d2 = int(rest_a[0] == rest_b[0]) * int(rest_a[1] == rest_b[1]) - int(
                        rest_a[0] == rest_b[1]
                    ) * int(rest_a[1] == rest_b[0])
                    if d2 == 0:
                        continue
                    sb = perm_parity(
                        (k, l) + tuple(t for t in range(4) if t not in (k, l))
                    )
                    rows.append((ai, bi, COMBO_POS[2][pa], COMBO_POS[2][pb], sa * sb * d2))
    arr = np.array(rows, dtype=np.intp)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4].astype(float)


@lru_cache(maxsize=None)
def _quad_triple_tables():
    """Gather tables for the two-triple term of the same identity
    (sign folded in, including its overall minus)."""
    rows = []
    for ai, a in enumerate(COMBOS[4]):
        for i in range(4):
            rest_a = tuple(a[t] for t in range(4) if t != i)
            sa = (-1) ** (3 - i)
            for bi, b in enumerate(COMBOS[4]):
                for k in range(4):
                    if a[i] != b[k]:
                        continue
                    rest_b = tuple(b[t] for t in range(4) if t != k)
                    sb = (-1) ** (3 - k)
                    rows.append(
                        (ai, bi, COMBO_POS[3][rest_a], COMBO_POS[3][rest_b], -sa * sb)
                    )
    arr = np.array(rows, dtype=np.intp)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4].astype(float)


def _quad_identity_residual(s: G2Structure) -> float:
    """Max residual of the four-index quadratic identity relating two copies
    of psi to permutation deltas, psi and two copies of phi, evaluated on
    sorted index combinations (complete by antisymmetry)."""
    lhs = s.psi[..., :, None] * s.psi_up[..., None, :]
    rhs = np.zeros(lhs.shape[:-2] + (NCOMP[4], NCOMP[4]))
    rhs[...] = np.eye(NCOMP[4])

    ps = pair_split(s.psi, 4)
    g2up = _pair_raise(s.g_inv)
    psi_mixed = np.einsum("...PQ,...QR->...PR", ps, g2up)
    ai, bi, pi, qi, coef = _quad_pair_tables()
    np.add.at(rhs, (Ellipsis, ai, bi), coef * psi_mixed[..., pi, qi])

    ai, bi, ci, di, coef = _quad_triple_tables()
    np.add.at(rhs, (Ellipsis, ai, bi), coef * s.phi[..., ci] * s.phi_up[..., di])
    return float(np.max(np.abs(lhs - rhs)))


def verify_contractions(s: G2Structure) -> dict[str, float]:
    """Max-norm residuals of the quadratic contraction identities.

    Dense rank-4 and rank-5 intermediates appear, so call this on point
    samples (batch of at most a few hundred), not on whole grids.
    """
    g, gi = s.g, s.g_inv
    phid, psid = unpack(s.phi, 3), unpack(s.psi, 4)
    phiu, psiu = unpack(s.phi_up, 3), unpack(s.psi_up, 4)
    res: dict[str, float] = {}

    def mx(x):
        return float(np.max(np.abs(x)))

    phi_mixed = np.einsum("...mnd,...dc->...mnc", phid, gi)
    lhs = np.einsum("...abc,...mnc->...abmn", phid, phi_mixed)
    rhs = (
        np.einsum("...am,...bn->...abmn", g, g)
        - np.einsum("...an,...bm->...abmn", g, g)
        + psid
    )
    res["phi_phi_two_free_pairs"] = mx(lhs - rhs)

    lhs = np.einsum("...abc,...mbc->...am", phid, phiu)
    res["phi_phi_one_free_pair"] = mx(lhs - 6.0 * np.eye(DIM))

    res["phi_phi_full"] = mx(np.einsum("...abc,...abc->...", phid, phiu) - 42.0)

    psi_mixed = np.einsum("...dmnp,...dc->...cmnp", psid, gi)
    lhs = np.einsum("...abc,...cmnp->...abmnp", phid, psi_mixed)
    rhs = (
        np.einsum("...am,...npb->...abmnp", g, phid)
        + np.einsum("...an,...pmb->...abmnp", g, phid)
        + np.einsum("...ap,...mnb->...abmnp", g, phid)
    )
    rhs = rhs - np.swapaxes(rhs, -5, -4)
    res["phi_psi_one_pair"] = mx(lhs - rhs)

    res["phi_psi_orthogonal"] = mx(np.einsum("...abc,...mabc->...m", phid, psiu))

    lhs = np.einsum("...abcd,...mbcd->...am", psid, psiu)
    res["psi_psi_one_free_pair"] = mx(lhs - 24.0 * np.eye(DIM))

    res["psi_psi_full"] = mx(np.einsum("...abcd,...abcd->...", psid, psiu) - 168.0)

    res["psi_psi_four_free"] = _quad_identity_residual(s)

    res["star_phi_is_psi"] = mx(s.star(s.phi, 3) - s.psi)
    res["star_psi_is_phi"] = mx(s.star(s.psi, 4) - s.phi)
    res["phi_norm_seven"] = mx(form_inner(s, s.phi, s.phi, 3) - 7.0)
    res["psi_norm_seven"] = mx(form_inner(s, s.psi, s.psi, 4) - 7.0)
    res["insert_metric_gives_phi"] = mx(i_phi(s, s.g) - s.phi)

    g2, sq2 = metric_from_phi(s.phi)
    res["metric_roundtrip"] = max(mx(g2 - s.g), mx(sq2 - s.sqrt_det_g))
    return res
