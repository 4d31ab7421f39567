"""Pointwise principal symbols of the coflow linearizations.

Each flow linearization is a second-order operator acting on deformation
4-forms chi = *(X .| psi + 3 i_phi(h)).  Against a plane wave with covector
xi the leading terms become a quadratic form in the deformation data
(X, h); the evaluators below return those forms.  Their sign behavior
separates the flows: the gauge-fixed volume-gradient flow stays indefinite
(negative along X parallel to xi), the A-modified flow is nonnegative with
a nontrivial kernel, and the flow generated by the gauge vector alone is
strictly positive.

All evaluators are degree-2 homogeneous in xi, accept leading batch axes,
and default to the standard flat structure where a structure argument is
accepted.  xi is a covector, X a vector (upper index), h symmetric with
two lower indices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import algebra
from ._packing import NCOMP, unpack, wedge

DIM = 7

__all__ = [
    "SymbolSample",
    "symbol_unmodified",
    "symbol_modified",
    "symbol_gauge_flow",
    "symbol_from_linearization",
    "sample_unconstrained",
    "sample_constrained",
    "closedness_residual",
    "omega_kernel_nullity",
    "homogeneity_residual",
    "certificate",
    "write_certificate",
]


@dataclass
class SymbolSample:
    """One evaluated symbol sample for certificate storage."""

    xi: np.ndarray
    X: np.ndarray
    h: np.ndarray
    value: float

    def to_json(self) -> dict:
        return {
            "xi": np.asarray(self.xi).tolist(),
            "X": np.asarray(self.X).tolist(),
            "h": np.asarray(self.h).tolist(),
            "value": float(self.value),
        }


def _maybe_float(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v


def _dot(a, b):
    return np.einsum("...m,...m->...", a, b)


def symbol_unmodified(xi, X, h):
    """4(|xi|^2 |X|^2 - 2<xi,X>^2) + 2 |xi|^2 |h|^2, flat contractions.

    The quadratic form of the volume-gradient flow linearization after the
    gauge vector has cancelled the mixed second-derivative terms in the
    1+27 sector.  Indefinite: X = xi^# gives -4|xi|^4, X orthogonal to xi
    gives +4|xi|^2|X|^2.
    """
    xi = np.asarray(xi, float)
    X = np.asarray(X, float)
    h = np.asarray(h, float)
    n2 = _dot(xi, xi)
    hh = np.einsum("...ab,...ab->...", h, h)
    return _maybe_float(4.0 * (n2 * _dot(X, X) - 2.0 * _dot(xi, X) ** 2)
                        + 2.0 * n2 * hh)


def symbol_modified(s, xi, X, h):
    """(7/4)(|xi|^2 |X|^2 + <xi,X>^2) + 2 |omega|^2 with
    omega_ab = xi_m phi^{mn}_(a h_b)n + (1/2) xi_(a X_b).

    Nonnegative by construction; vanishes when X = 0 and h lies in the
    kernel of the phi-insertion map (which contains h proportional to g,
    the conformal 4-form direction).
    """
    if s is None:
        s = algebra.standard_structure()
    xi = np.asarray(xi, float)
    X = np.asarray(X, float)
    h = np.asarray(h, float)
    phid = unpack(s.phi, 3)
    phi_uud = np.einsum("...pqa,...pm,...qn->...mna", phid, s.g_inv, s.g_inv,
                        optimize=True)
    e = np.einsum("...m,...mna,...bn->...ab", xi, phi_uud, h, optimize=True)
    x_low = np.einsum("...ab,...b->...a", s.g, X)
    omega = 0.5 * (e + np.swapaxes(e, -1, -2)) + 0.25 * (
        xi[..., :, None] * x_low[..., None, :]
        + x_low[..., :, None] * xi[..., None, :]
    )
    n2 = np.einsum("...ab,...a,...b->...", s.g_inv, xi, xi)
    xn2 = np.einsum("...ab,...a,...b->...", s.g, X, X)
    xix = _dot(xi, X)
    om2 = algebra.sym_inner(s.g_inv, omega, omega)
    return _maybe_float(1.75 * (n2 * xn2 + xix ** 2) + 2.0 * om2)


def symbol_gauge_flow(xi, U):
    """(1/2)|xi|^2 |U|^2 + (1/2)<xi,U>^2, flat contractions.

    The quadratic form of the flow generated by the gauge vector alone;
    strictly positive for U != 0.
    """
    xi = np.asarray(xi, float)
    U = np.asarray(U, float)
    return _maybe_float(0.5 * _dot(xi, xi) * _dot(U, U)
                        + 0.5 * _dot(xi, U) ** 2)


def _chi4(s, X, h):
    chi3 = algebra.interior(X, s.psi, 4) + 3.0 * algebra.i_phi(s, h)
    return s.star(chi3, 3)


def symbol_from_linearization(s, xi, X, h):
    """Assemble the gauge-fixed linearization symbol as actual 4-forms and
    take the form inner product with the deformation:

        < |xi|^2 chi + 2 <xi,X> xi ^ phi , chi >.

    Cross-validates symbol_unmodified.  The two agree exactly on traceless
    h; for traced h this route carries an extra |xi|^2 (Tr h)^2, because
    <3 i_phi(q), 3 i_phi(h)> = 2 <q,h> + Tr q Tr h, while the scalar form
    counts the h-sector as 2|h|^2.
    """
    if s is None:
        s = algebra.standard_structure()
    xi = np.asarray(xi, float)
    X = np.asarray(X, float)
    h = np.asarray(h, float)
    chi = _chi4(s, X, h)
    n2 = np.einsum("...ab,...a,...b->...", s.g_inv, xi, xi)
    xix = _dot(xi, X)
    sigma = (n2[..., None] * chi
             + 2.0 * xix[..., None] * wedge(xi, s.phi, 1, 3))
    return _maybe_float(algebra.form_inner(s, sigma, chi, 4))


def sample_unconstrained(rng, n=None, xi_min=0.1):
    """(xi, X, h) with components i.i.d. uniform in [-1, 1]; xi redrawn
    while |xi| < xi_min."""
    shape = () if n is None else (int(n),)
    xi = rng.uniform(-1.0, 1.0, shape + (DIM,))
    for _ in range(100):
        small = np.einsum("...m,...m->...", xi, xi) < xi_min ** 2
        if not np.any(small):
            break
        redraw = rng.uniform(-1.0, 1.0, shape + (DIM,))
        xi = np.where(small[..., None], redraw, xi)
    X = rng.uniform(-1.0, 1.0, shape + (DIM,))
    h = rng.uniform(-1.0, 1.0, shape + (DIM, DIM))
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    return xi, X, h


def _sym_basis():
    basis = []
    for i in range(DIM):
        for j in range(i, DIM):
            e = np.zeros((DIM, DIM))
            e[i, j] = e[j, i] = 1.0
            basis.append(e)
    return np.array(basis)


def _closedness_maps(s):
    """Per covector component c, the matrix of (X, h) -> e_c ^ chi4(X, h),
    stacked as (7, 21, 35).  The closedness map for covector xi is then
    sum_c xi_c M_c."""
    cols = []
    for i in range(DIM):
        e = np.zeros(DIM)
        e[i] = 1.0
        cols.append(_chi4(s, e, np.zeros((DIM, DIM))))
    for e in _sym_basis():
        cols.append(_chi4(s, np.zeros(DIM), e))
    chi_cols = np.array(cols)
    m = np.zeros((DIM, NCOMP[5], 35))
    for c in range(DIM):
        ec = np.zeros(DIM)
        ec[c] = 1.0
        m[c] = wedge(np.broadcast_to(ec, (35, DIM)), chi_cols, 1, 4).T
    return m


_CLOSEDNESS_CACHE: dict[int, np.ndarray] = {}


def _closedness_for(s):
    key = id(s.phi) if s is not None else 0
    if key not in _CLOSEDNESS_CACHE:
        _CLOSEDNESS_CACHE[key] = _closedness_maps(
            algebra.standard_structure() if s is None else s
        )
        if len(_CLOSEDNESS_CACHE) > 8:
            _CLOSEDNESS_CACHE.pop(next(iter(_CLOSEDNESS_CACHE)))
    return _CLOSEDNESS_CACHE[key]


_SYM_BASIS = _sym_basis()


def _vec_to_xh(v):
    X = v[..., :DIM]
    h = np.einsum("...k,kab->...ab", v[..., DIM:], _SYM_BASIS)
    return X, h


def _xh_to_vec(X, h):
    out = np.zeros(X.shape[:-1] + (35,))
    out[..., :DIM] = X
    k = DIM
    for i in range(DIM):
        for j in range(i, DIM):
            out[..., k] = h[..., i, j]
            k += 1
    return out


def sample_constrained(rng, n=None, s=None, xi_min=0.1):
    """(xi, X, h) with (X, h) projected onto the kernel of the plane-wave
    closedness map xi ^ chi4(X, h) = 0, direction by direction."""
    single = n is None
    count = 1 if single else int(n)
    xi, X, h = sample_unconstrained(rng, count, xi_min)
    m = _closedness_for(s)
    vec = _xh_to_vec(X, h)
    out = np.empty_like(vec)
    for i in range(count):
        mat = np.tensordot(xi[i], m, axes=(0, 0))
        _, sv, vt = np.linalg.svd(mat, full_matrices=True)
        rank = int(np.sum(sv > 1e-12 * max(sv[0], 1e-300)))
        null = vt[rank:]
        out[i] = null.T @ (null @ vec[i])
    Xc, hc = _vec_to_xh(out)
    if single:
        return xi[0], Xc[0], hc[0]
    return xi, Xc, hc


def closedness_residual(s, xi, X, h):
    """Max |xi ^ chi4(X, h)| component, for checking constrained samples."""
    if s is None:
        s = algebra.standard_structure()
    chi = _chi4(s, np.asarray(X, float), np.asarray(h, float))
    five = wedge(np.asarray(xi, float), chi, 1, 4)
    return _maybe_float(np.max(np.abs(five), axis=-1))


def omega_kernel_nullity(s, xi, tol=1e-10):
    """Observed dimension of {h symmetric : omega(xi, 0, h) = 0}."""
    if s is None:
        s = algebra.standard_structure()
    phid = unpack(s.phi, 3)
    phi_uud = np.einsum("pqa,pm,qn->mna", phid, s.g_inv, s.g_inv)
    cols = []
    for e in _SYM_BASIS:
        w = np.einsum("m,mna,bn->ab", np.asarray(xi, float), phi_uud, e)
        w = 0.5 * (w + w.T)
        cols.append(w[np.triu_indices(DIM)])
    sv = np.linalg.svd(np.array(cols).T, compute_uv=False)
    return int(np.sum(sv < tol * max(sv[0], 1e-300)))


def homogeneity_residual(fn, xi, args, c=1.7):
    """|fn(c xi, ...) / (c^2 fn(xi, ...)) - 1| with a floor guard."""
    base = fn(xi, *args)
    scaled = fn(c * np.asarray(xi, float), *args)
    denom = np.maximum(np.abs(base), 1e-12)
    return np.max(np.abs(scaled - c * c * base) / (c * c * denom))


def _scale(xi, X, h):
    n2 = np.einsum("...m,...m->...", xi, xi)
    return n2 * (np.einsum("...m,...m->...", X, X)
                 + np.einsum("...ab,...ab->...", h, h) + 1e-300)


def certificate(
    seed: int = 20260817,
    n_modified: int = 100000,
    n_gauge: int = 10000,
    n_unmodified: int = 10000,
    n_agreement: int = 10000,
    n_constrained: int = 2000,
) -> dict:
    """Exhaustive-sampling certificates for the three symbol evaluators
    plus the two-route cross-validation; returns a JSON-ready dict."""
    rng = np.random.default_rng(seed)
    s = algebra.standard_structure()

    xi, X, h = sample_unconstrained(rng, n_modified)
    vm = symbol_modified(s, xi, X, h)
    i_min = int(np.argmin(vm))
    lam = 0.37
    lam_val = symbol_modified(s, xi[0], np.zeros(DIM), lam * np.eye(DIM))
    nullities = sorted(
        {omega_kernel_nullity(s, xi[j]) for j in range(0, 50)}
    )
    xic, Xc, hc = sample_constrained(rng, n_constrained)
    vc = symbol_modified(s, xic, Xc, hc)
    closed_res = float(np.max(closedness_residual(s, xic, Xc, hc)))
    modified = {
        "samples": int(n_modified),
        "min_value": float(vm[i_min]),
        "min_sample": SymbolSample(xi[i_min], X[i_min], h[i_min],
                                   float(vm[i_min])).to_json(),
        "conformal_direction_value": float(lam_val),
        "omega_kernel_nullities_observed": nullities,
        "constrained": {
            "samples": int(n_constrained),
            "min_scaled": float(np.min(vc / _scale(xic, Xc, hc))),
            "max_closedness_residual": closed_res,
        },
    }

    xi, X, h = sample_unconstrained(rng, n_unmodified)
    vu = symbol_unmodified(xi, X, h)
    i_neg = int(np.argmin(vu))
    i_pos = int(np.argmax(vu))
    if vu[i_neg] < 0.0:
        neg = SymbolSample(xi[i_neg], X[i_neg], h[i_neg], float(vu[i_neg]))
    else:
        # The negative cone (X nearly parallel to xi, h small) has tiny
        # measure under box sampling, so certify indefiniteness with the
        # aligned direction, where the value is -4|xi|^4 exactly.
        h0 = np.zeros((DIM, DIM))
        neg = SymbolSample(xi[0], xi[0],  h0,
                           float(symbol_unmodified(xi[0], xi[0], h0)))
    unmodified = {
        "samples": int(n_unmodified),
        "negative_sample": neg.to_json(),
        "positive_sample": SymbolSample(xi[i_pos], X[i_pos], h[i_pos],
                                        float(vu[i_pos])).to_json(),
        "negative_fraction": float(np.mean(vu < 0.0)),
    }

    xi, U, _ = sample_unconstrained(rng, n_gauge)
    vg = symbol_gauge_flow(xi, U)
    floor = 0.5 * np.einsum("...m,...m->...", xi, xi) \
        * np.einsum("...m,...m->...", U, U)
    gauge = {
        "samples": int(n_gauge),
        "min_value": float(np.min(vg)),
        "min_over_floor": float(np.min(vg / floor)),
    }

    xi, X, h = sample_unconstrained(rng, n_agreement)
    h0 = h - (np.trace(h, axis1=-2, axis2=-1)[..., None, None] / DIM) \
        * np.eye(DIM)
    va = symbol_from_linearization(s, xi, X, h0)
    vs = symbol_unmodified(xi, X, h0)
    sc = _scale(xi, X, h0)
    traceless_gap = float(np.max(np.abs(va - vs) / sc))
    va_t = symbol_from_linearization(s, xi, X, h)
    vs_t = symbol_unmodified(xi, X, h)
    n2 = np.einsum("...m,...m->...", xi, xi)
    tr2 = np.trace(h, axis1=-2, axis2=-1) ** 2
    excess_gap = float(np.max(np.abs(va_t - vs_t - n2 * tr2)
                              / _scale(xi, X, h)))
    agreement = {
        "samples": int(n_agreement),
        "traceless_max_rel_gap": traceless_gap,
        "traced_excess_identity_max_rel_gap": excess_gap,
    }

    rng_h = np.random.default_rng(seed + 1)
    hom = 0.0
    for _ in range(100):
        xi1, X1, h1 = sample_unconstrained(rng_h)
        hom = max(hom, homogeneity_residual(
            lambda q, a, b: symbol_unmodified(q, a, b), xi1, (X1, h1)))
        hom = max(hom, homogeneity_residual(
            lambda q, a, b: symbol_modified(s, q, a, b), xi1, (X1, h1)))
        hom = max(hom, homogeneity_residual(
            lambda q, a: symbol_gauge_flow(q, a), xi1, (X1,)))
        hom = max(hom, homogeneity_residual(
            lambda q, a, b: symbol_from_linearization(s, q, a, b),
            xi1, (X1, h1)))
    return {
        "seed": int(seed),
        "modified": modified,
        "unmodified": unmodified,
        "gauge_flow": gauge,
        "linearization_agreement": agreement,
        "homogeneity_max_residual": float(hom),
    }


def write_certificate(path, cert: dict) -> None:
    with open(path, "w") as f:
        json.dump(cert, f, indent=2, sort_keys=True)
        f.write("\n")
