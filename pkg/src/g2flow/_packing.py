"""Index tables for antisymmetric tensors over a 7-dimensional space.

A k-form is stored packed: one component per increasing index combination,
C(7, k) entries in lexicographic order, as the last axis of an ndarray.
Any leading axes (grid points, batch samples) broadcast through untouched.

Everything here is metric-free combinatorics. The tables turn wedge
products, interior products, Hodge complements and exterior derivatives
into fancy-index gathers so that grid-sized arrays never have to hold a
dense rank-4 tensor.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np

DIM = 7

COMBOS = {k: tuple(itertools.combinations(range(DIM), k)) for k in range(DIM + 1)}
COMBO_POS = {k: {c: i for i, c in enumerate(COMBOS[k])} for k in range(DIM + 1)}
NCOMP = {k: len(COMBOS[k]) for k in range(DIM + 1)}


def perm_parity(seq) -> int:
    """Sign of the permutation sorting ``seq``; 0 if an entry repeats."""
    seq = list(seq)
    if len(set(seq)) != len(seq):
        return 0
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


@lru_cache(maxsize=None)
def unpack_tables(k: int):
    """Dense-layout gather: position into the packed array (sentinel NCOMP[k]
    for repeated indices) and the matching sign, each shaped (7,)*k."""
    idx = np.full((DIM,) * k, NCOMP[k], dtype=np.intp)
    sgn = np.zeros((DIM,) * k, dtype=np.int8)
    for multi in itertools.product(range(DIM), repeat=k):
        s = perm_parity(multi)
        if s == 0:
            continue
        idx[multi] = COMBO_POS[k][tuple(sorted(multi))]
        sgn[multi] = s
    return idx, sgn


@lru_cache(maxsize=None)
def pack_tables(k: int):
    """Flat positions of the sorted combinations inside a dense (7,)*k block."""
    if k == 0:
        return np.zeros(1, dtype=np.intp)
    return np.array(
        [np.ravel_multi_index(c, (DIM,) * k) for c in COMBOS[k]], dtype=np.intp
    )


def pack(dense: np.ndarray, k: int) -> np.ndarray:
    """Packed components of an antisymmetric dense array (..., 7, ..., 7)."""
    lead = dense.shape[: dense.ndim - k]
    flat = dense.reshape(lead + (DIM**k,))
    return flat[..., pack_tables(k)]


def unpack(packed: np.ndarray, k: int) -> np.ndarray:
    """Dense (..., 7, ..., 7) array from packed components."""
    idx, sgn = unpack_tables(k)
    ext = np.concatenate(
        [packed, np.zeros(packed.shape[:-1] + (1,), dtype=packed.dtype)], axis=-1
    )
    return ext[..., idx] * sgn


@lru_cache(maxsize=None)
def expand_first_tables(k: int):
    """Tables producing E[m, C] = alpha_{m C} for a packed k-form, with m a
    free dense index and C running over (k-1)-combinations."""
    idx = np.full((DIM, NCOMP[k - 1]), NCOMP[k], dtype=np.intp)
    sgn = np.zeros((DIM, NCOMP[k - 1]), dtype=np.int8)
    for m in range(DIM):
        for ci, c in enumerate(COMBOS[k - 1]):
            s = perm_parity((m,) + c)
            if s == 0:
                continue
            idx[m, ci] = COMBO_POS[k][tuple(sorted((m,) + c))]
            sgn[m, ci] = s
    return idx, sgn


def expand_first(packed: np.ndarray, k: int) -> np.ndarray:
    """View a packed k-form as (..., 7, C(7, k-1)): first index dense."""
    idx, sgn = expand_first_tables(k)
    ext = np.concatenate(
        [packed, np.zeros(packed.shape[:-1] + (1,), dtype=packed.dtype)], axis=-1
    )
    return ext[..., idx] * sgn


@lru_cache(maxsize=None)
def assemble_first_tables(k: int):
    """Tables for the inverse of expand_first on antisymmetrized data.

    Given t[m, C] (m dense, C a (k-1)-combination), the packed k-form with
    components sum_j (-1)^j t[D_j, D \\ D_j] over each k-combination D is
    built from (slot, src, sgn) arrays of shape (k, C(7, k)).
    """
    nout = NCOMP[k]
    slot = np.empty((k, nout), dtype=np.intp)
    src = np.empty((k, nout), dtype=np.intp)
    sgn = np.empty((k, nout), dtype=np.int8)
    for di, d in enumerate(COMBOS[k]):
        for j in range(k):
            rest = d[:j] + d[j + 1 :]
            slot[j, di] = d[j]
            src[j, di] = COMBO_POS[k - 1][rest]
            sgn[j, di] = 1 if j % 2 == 0 else -1
    return slot, src, sgn


def assemble_first(t: np.ndarray, k: int) -> np.ndarray:
    """Packed k-form sum_j (-1)^j t[..., D_j, D \\ D_j] from t (..., 7, C(7,k-1))."""
    slot, src, sgn = assemble_first_tables(k)
    out = np.zeros(t.shape[:-2] + (NCOMP[k],), dtype=t.dtype)
    for j in range(k):
        out += sgn[j] * t[..., slot[j], src[j]]
    return out


@lru_cache(maxsize=None)
def wedge_tables(p: int, q: int):
    """Shuffle tables: (out, ai, bi, sgn) flat arrays with
    (a ^ b)[out] += sgn * a[ai] * b[bi]."""
    out, ai, bi, sg = [], [], [], []
    for oi, oc in enumerate(COMBOS[p + q]):
        for asel in itertools.combinations(range(p + q), p):
            acombo = tuple(oc[i] for i in asel)
            bcombo = tuple(oc[i] for i in range(p + q) if i not in asel)
            out.append(oi)
            ai.append(COMBO_POS[p][acombo])
            bi.append(COMBO_POS[q][bcombo])
            sg.append(perm_parity(acombo + bcombo))
    return (
        np.array(out, dtype=np.intp),
        np.array(ai, dtype=np.intp),
        np.array(bi, dtype=np.intp),
        np.array(sg, dtype=np.int8),
    )


def wedge(a: np.ndarray, b: np.ndarray, p: int, q: int) -> np.ndarray:
    """Wedge product of packed forms (shuffle sum, no extra factorials)."""
    out_i, ai, bi, sg = wedge_tables(p, q)
    terms = sg * a[..., ai] * b[..., bi]
    out = np.zeros(terms.shape[:-1] + (NCOMP[p + q],), dtype=terms.dtype)
    np.add.at(out, (Ellipsis, out_i), terms)
    return out


@lru_cache(maxsize=None)
def star_tables(k: int):
    """Complement gather: position of the complement combination among the
    (7-k)-combinations and the parity of (combo, complement)."""
    cidx = np.empty(NCOMP[k], dtype=np.intp)
    csgn = np.empty(NCOMP[k], dtype=np.int8)
    for i, c in enumerate(COMBOS[k]):
        comp = tuple(x for x in range(DIM) if x not in c)
        cidx[i] = COMBO_POS[DIM - k][comp]
        csgn[i] = perm_parity(c + comp)
    return cidx, csgn


def complement_gather(packed: np.ndarray, k: int) -> np.ndarray:
    """out[complement(A)] = parity(A, complement(A)) * in[A].

    This is the flat Levi-Civita contraction (1/k!) alpha_A epshat^{A B}:
    the Hodge star before any metric factors enter.
    """
    cidx, csgn = star_tables(k)
    out = np.empty(packed.shape[:-1] + (NCOMP[DIM - k],), dtype=packed.dtype)
    out[..., cidx] = csgn * packed
    return out


@lru_cache(maxsize=None)
def d_tables(k: int):
    """Cochain tables for the exterior derivative k -> k+1:
    (axis, src, sgn) arrays of shape (k+1, C(7, k+1)), meaning
    (d alpha)[D] = sum_j sgn[j, D] * d/dx_{axis[j, D]} alpha[src[j, D]]."""
    nout = NCOMP[k + 1]
    ax = np.empty((k + 1, nout), dtype=np.intp)
    src = np.empty((k + 1, nout), dtype=np.intp)
    sgn = np.empty((k + 1, nout), dtype=np.int8)
    for di, d in enumerate(COMBOS[k + 1]):
        for j in range(k + 1):
            rest = d[:j] + d[j + 1 :]
            ax[j, di] = d[j]
            src[j, di] = COMBO_POS[k][rest]
            sgn[j, di] = 1 if j % 2 == 0 else -1
    return ax, src, sgn


@lru_cache(maxsize=None)
def pair_split_tables(k: int):
    """Split a packed k-form (k even) into two packed halves of rank k//2:
    idx/sgn arrays of shape (C(7,k//2), C(7,k//2)) with sentinel NCOMP[k]
    marking overlapping halves."""
    h = k // 2
    n = NCOMP[h]
    idx = np.full((n, n), NCOMP[k], dtype=np.intp)
    sgn = np.zeros((n, n), dtype=np.int8)
    for i, p in enumerate(COMBOS[h]):
        for j, q in enumerate(COMBOS[h]):
            s = perm_parity(p + q)
            if s == 0:
                continue
            idx[i, j] = COMBO_POS[k][tuple(sorted(p + q))]
            sgn[i, j] = s
    return idx, sgn


def pair_split(packed: np.ndarray, k: int) -> np.ndarray:
    """View a packed k-form (k even) as a (..., C(7,k/2), C(7,k/2)) array."""
    idx, sgn = pair_split_tables(k)
    ext = np.concatenate(
        [packed, np.zeros(packed.shape[:-1] + (1,), dtype=packed.dtype)], axis=-1
    )
    return ext[..., idx] * sgn


@lru_cache(maxsize=None)
def epsilon_dense() -> np.ndarray:
    """Dense rank-7 Levi-Civita symbol, +1 on (0, 1, ..., 6)."""
    eps = np.zeros((DIM,) * DIM)
    for perm in itertools.permutations(range(DIM)):
        eps[perm] = perm_parity(perm)
    eps.setflags(write=False)
    return eps
