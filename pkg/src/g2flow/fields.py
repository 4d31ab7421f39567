"""Fields on a flat periodic 7-torus grid.

Grid arrays keep all seven axes (trivial directions have size 1), so the
leading axes of any field double as the batch axes of the pointwise
algebra kernels. Forms stay packed on the last axis. Derivatives are
4th-order central differences via periodic rolls; directions of size 1
differentiate to zero, so lower-dimensional tori embed for free.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import algebra
from ._packing import (
    DIM,
    NCOMP,
    assemble_first_tables,
    d_tables,
    expand_first,
    unpack,
    wedge,
)

_MAGIC = b"G2FSNAP1"


@dataclass(frozen=True)
class Grid:
    """Periodic grid: per-axis point counts and box lengths.

    Any size >= 1 is accepted; an axis with one point is trivial (all
    derivatives along it vanish). The 4th-order stencil reaches its design
    accuracy only on axes with at least 5 points, so convergence studies
    use sizes 16 and up; small sizes run with the wrapped stencil as-is.
    """

    sizes: tuple[int, ...]
    lengths: tuple[float, ...] = (1.0,) * DIM

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.sizes)
        lengths = tuple(float(x) for x in self.lengths)
        if len(sizes) != DIM or len(lengths) != DIM:
            raise ValueError("grid needs exactly 7 sizes and 7 lengths")
        if any(n < 1 for n in sizes):
            raise ValueError("grid sizes must be positive")
        if any(x <= 0 for x in lengths):
            raise ValueError("grid lengths must be positive")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "lengths", lengths)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(l / n for l, n in zip(self.lengths, self.sizes))

    @property
    def active_axes(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.sizes) if n > 1)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.sizes))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def min_active_spacing(self) -> float:
        act = self.active_axes
        if not act:
            return min(self.spacing)
        return min(self.spacing[i] for i in act)

    def coord(self, axis: int) -> np.ndarray:
        """Coordinate values along one axis, broadcastable over the grid."""
        n = self.sizes[axis]
        x = np.arange(n) * (self.lengths[axis] / n)
        shape = [1] * DIM
        shape[axis] = n
        return x.reshape(shape)

    def refined(self, factor: int = 2) -> "Grid":
        sizes = tuple(n * factor if n > 1 else 1 for n in self.sizes)
        return Grid(sizes, self.lengths)


@dataclass
class Field:
    """A grid field: values with the 7 grid axes leading.

    kind is ("scalar",), ("form", k) for packed k-forms, or
    ("tensor", variance) with variance a string like "dd" (one letter per
    index, "u" up / "d" down).
    """

    grid: Grid
    kind: tuple
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = component_shape(self.kind)
        if self.values.shape != self.grid.sizes + expected:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid "
                f"{self.grid.sizes} + components {expected}"
            )


def component_shape(kind: tuple) -> tuple[int, ...]:
    tag = kind[0]
    if tag == "scalar":
        return ()
    if tag == "form":
        return (NCOMP[int(kind[1])],)
    if tag == "tensor":
        return (DIM,) * len(kind[1])
    raise ValueError(f"unknown field kind {kind!r}")


def partial(values: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """4th-order periodic central difference along one grid axis."""
    n = grid.sizes[axis]
    if n == 1:
        return np.zeros_like(values)
    h = grid.lengths[axis] / n
    f1 = np.roll(values, -1, axis)
    b1 = np.roll(values, 1, axis)
    f2 = np.roll(values, -2, axis)
    b2 = np.roll(values, 2, axis)
    return (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h)


def gradient(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Coordinate gradient of a scalar field, lower index on the last axis."""
    out = np.zeros(f.shape + (DIM,))
    for ax in grid.active_axes:
        out[..., ax] = partial(f, grid, ax)
    return out


def exterior_derivative(alpha: np.ndarray, grid: Grid, k: int) -> np.ndarray:
    """d of a packed k-form field (k from 0 to 6)."""
    ax_t, src_t, sgn_t = d_tables(k)
    out = np.zeros(alpha.shape[:-1] + (NCOMP[k + 1],))
    for a in grid.active_axes:
        pa = partial(alpha, grid, a)
        for j in range(k + 1):
            mask = ax_t[j] == a
            if not np.any(mask):
                continue
            out[..., mask] += sgn_t[j][mask] * pa[..., src_t[j][mask]]
    return out


def codifferential(
    s: algebra.G2Structure, grid: Grid, alpha: np.ndarray, k: int
) -> np.ndarray:
    """Adjoint of d with respect to the induced metric: (-1)^k star d star."""
    sign = -1.0 if k % 2 else 1.0
    return sign * s.star(
        exterior_derivative(s.star(alpha, k), grid, DIM - k), DIM - k + 1
    )


def hodge_laplacian(
    s: algebra.G2Structure, grid: Grid, alpha: np.ndarray, k: int
) -> np.ndarray:
    """d delta + delta d on packed k-forms."""
    out = exterior_derivative(codifferential(s, grid, alpha, k), grid, k - 1) if k > 0 else 0.0
    if k < DIM:
        out = out + codifferential(s, grid, exterior_derivative(alpha, grid, k), k + 1)
    return out


def christoffels(s: algebra.G2Structure, grid: Grid) -> np.ndarray:
    """Levi-Civita connection coefficients, Gamma[..., a, b, c] = Gamma^a_bc."""
    dg = np.zeros(s.g.shape[:-2] + (DIM, DIM, DIM))
    for ax in grid.active_axes:
        dg[..., ax, :, :] = partial(s.g, grid, ax)
    low = 0.5 * (
        np.einsum("...bdc->...dbc", dg)
        + np.einsum("...cdb->...dbc", dg)
        - np.einsum("...dbc->...dbc", dg)
    )
    return np.einsum("...ad,...dbc->...abc", s.g_inv, low)


def cov_deriv(
    s: algebra.G2Structure,
    grid: Grid,
    t: np.ndarray,
    variance: str,
    gamma: np.ndarray | None = None,
) -> np.ndarray:
    """Covariant derivative of a dense tensor field; the new (lower)
    derivative index comes first among the component axes."""
    if gamma is None:
        gamma = christoffels(s, grid)
    rank = len(variance)
    lead = t.ndim - rank
    out = np.zeros(t.shape[:lead] + (DIM,) + t.shape[lead:])
    for ax in grid.active_axes:
        out[(Ellipsis, ax) + (slice(None),) * rank] = partial(t, grid, ax)
    letters = "bcdefghij"[:rank]
    for i, v in enumerate(variance):
        sub = letters[:i] + "e" + letters[i + 1 :]
        if v == "u":
            out += np.einsum(f"...{letters[i]}ae,...{sub}->...a{letters}", gamma, t)
        elif v == "d":
            out -= np.einsum(f"...ea{letters[i]},...{sub}->...a{letters}", gamma, t)
        else:
            raise ValueError("variance letters must be 'u' or 'd'")
    return out


def cov_deriv_form(
    s: algebra.G2Structure,
    grid: Grid,
    alpha: np.ndarray,
    k: int,
    gamma: np.ndarray | None = None,
) -> np.ndarray:
    """Covariant derivative of a packed k-form: output (..., 7, C(7,k)),
    derivative index first. Stays packed, so no dense rank-4 transients."""
    if gamma is None:
        gamma = christoffels(s, grid)
    e = expand_first(alpha, k)
    slot, src, sgn = assemble_first_tables(k)
    out = np.zeros(alpha.shape[:-1] + (DIM, NCOMP[k]))
    for ax in grid.active_axes:
        out[..., ax, :] = partial(alpha, grid, ax)
    for a in range(DIM):
        w = np.einsum("...em,...eC->...mC", gamma[..., :, a, :], e)
        corr = np.zeros(alpha.shape[:-1] + (NCOMP[k],))
        for j in range(k):
            corr += sgn[j] * w[..., slot[j], src[j]]
        out[..., a, :] -= corr
    return out


def divergence_vec(
    s: algebra.G2Structure, grid: Grid, x_up: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """div X = nabla_a X^a for an upper-index vector field."""
    out = np.zeros(x_up.shape[:-1])
    for ax in grid.active_axes:
        out += partial(x_up, grid, ax)[..., ax]
    return out + np.einsum("...aam,...m->...", gamma, x_up)


def divergence_sym2(
    s: algebra.G2Structure, grid: Grid, t: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """(div T)_b = nabla^a T_ab for a rank-2 field with lower indices."""
    dt = cov_deriv(s, grid, t, "dd", gamma)
    return np.einsum("...ca,...cab->...b", s.g_inv, dt)


def curl_vec(
    s: algebra.G2Structure, grid: Grid, x_low: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """(curl X)^a = (nabla_b X_c) phi^abc, upper index out."""
    dx = cov_deriv(s, grid, x_low, "d", gamma)
    return np.einsum("...bc,...abc->...a", dx, unpack(s.phi_up, 3))


def curl_sym2(
    s: algebra.G2Structure, grid: Grid, t: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """(curl T)_ab = (nabla_m T_an) phi^mn_b for rank-2 lower T; the free
    slot of T is its first one, so non-symmetric inputs are meaningful."""
    dt = cov_deriv(s, grid, t, "dd", gamma)
    phi_mixed = np.einsum("...mnp,...pb->...mnb", unpack(s.phi_up, 3), s.g)
    return np.einsum("...man,...mnb->...ab", dt, phi_mixed)


def rough_laplacian_vec(
    s: algebra.G2Structure, grid: Grid, x_low: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """g^{cd} nabla_c nabla_d X_a for a covector field."""
    u = cov_deriv(s, grid, x_low, "d", gamma)
    out = np.zeros_like(x_low)
    for ax in grid.active_axes:
        pu = partial(u, grid, ax)
        out += np.einsum("...c,...ca->...a", s.g_inv[..., :, ax], pu)
    v = np.einsum("...cd,...edc->...e", s.g_inv, gamma)
    out -= np.einsum("...e,...ea->...a", v, u)
    out -= np.einsum("...cd,...eda,...ce->...a", s.g_inv, gamma, u, optimize=True)
    return out


def rough_laplacian_sym2(
    s: algebra.G2Structure, grid: Grid, t: np.ndarray, gamma: np.ndarray
) -> np.ndarray:
    """g^{cd} nabla_c nabla_d T_ab without materializing rank-4 transients."""
    u = cov_deriv(s, grid, t, "dd", gamma)
    out = np.zeros_like(t)
    for ax in grid.active_axes:
        pu = partial(u, grid, ax)
        out += np.einsum("...c,...cab->...ab", s.g_inv[..., :, ax], pu)
    v = np.einsum("...cd,...edc->...e", s.g_inv, gamma)
    out -= np.einsum("...e,...eab->...ab", v, u)
    out -= np.einsum("...cd,...eda,...ceb->...ab", s.g_inv, gamma, u, optimize=True)
    out -= np.einsum("...cd,...edb,...cae->...ab", s.g_inv, gamma, u, optimize=True)
    return out


def ricci(s: algebra.G2Structure, grid: Grid, gamma: np.ndarray):
    """Ricci tensor (lower indices) and scalar curvature from the connection."""
    t1 = np.zeros(gamma.shape[:-3] + (DIM, DIM))
    for ax in grid.active_axes:
        t1 += partial(gamma[..., ax, :, :], grid, ax)
    tr = np.einsum("...aab->...b", gamma)
    t2 = np.zeros_like(t1)
    for ax in grid.active_axes:
        t2[..., ax, :] = partial(tr, grid, ax)
    t3 = np.einsum("...e,...edb->...db", tr, gamma)
    t4 = np.einsum("...ade,...eab->...db", gamma, gamma)
    ric = np.einsum("...db->...bd", t1 - t2 + t3 - t4)
    ric = 0.5 * (ric + np.swapaxes(ric, -1, -2))
    scal = np.einsum("...bd,...bd->...", s.g_inv, ric)
    return ric, scal


def riemann_contract_sym2(
    s: algebra.G2Structure,
    grid: Grid,
    gamma: np.ndarray,
    t_up: np.ndarray,
) -> np.ndarray:
    """W_ab = R_acbd T^{cd} for symmetric T, assembled term by term so the
    full curvature tensor is never stored."""
    shape = gamma.shape[:-3] + (DIM, DIM)
    a1 = np.zeros(shape)
    a2 = np.zeros(shape)
    for ax in grid.active_axes:
        dg = partial(gamma, grid, ax)
        a1[..., :, ax] += np.einsum("...edc,...cd->...e", dg, t_up)
        a2 += np.einsum("...ebc,...c->...eb", dg, t_up[..., :, ax])
    b1 = np.einsum("...ebm,...mdc,...cd->...eb", gamma, gamma, t_up, optimize=True)
    b2 = np.einsum("...edm,...mbc,...cd->...eb", gamma, gamma, t_up, optimize=True)
    w = np.einsum("...ae,...eb->...ab", s.g, a1 - a2 + b1 - b2)
    return 0.5 * (w + np.swapaxes(w, -1, -2))


def integrate(values: np.ndarray, s: algebra.G2Structure, grid: Grid) -> float:
    """Integral of a scalar field against the metric volume element."""
    return float(np.sum(values * s.sqrt_det_g) * grid.cell_volume)


def volume(s: algebra.G2Structure, grid: Grid) -> float:
    return integrate(np.ones(grid.sizes), s, grid)


def volume_from_pairing(s: algebra.G2Structure, grid: Grid) -> float:
    """Volume via the top-degree pairing of phi with psi, divided by 7."""
    top = wedge(s.phi, s.psi, 3, 4)
    return float(np.sum(top[..., 0]) * grid.cell_volume / 7.0)


def l2_inner_form(
    s: algebra.G2Structure, grid: Grid, a: np.ndarray, b: np.ndarray, k: int
) -> float:
    return integrate(algebra.form_inner(s, a, b, k), s, grid)


def write_snapshot(path, fld: Field, time: float, meta: dict | None = None) -> None:
    """Binary snapshot: magic, JSON header, little-endian float64 payload in
    C order (points vary slowest axis first, components contiguous per point)."""
    header = {
        "sizes": list(fld.grid.sizes),
        "lengths": list(fld.grid.lengths),
        "kind": list(fld.kind),
        "component_shape": list(component_shape(fld.kind)),
        "time": float(time),
        "time_hex": float(time).hex(),
        "dtype": "<f8",
    }
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.ascontiguousarray(fld.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def read_snapshot(path):
    """Inverse of write_snapshot: returns (Field, time, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a snapshot file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        grid = Grid(tuple(header["sizes"]), tuple(header["lengths"]))
        kind = tuple(header["kind"])
        shape = grid.sizes + tuple(header["component_shape"])
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(shape).copy()
    time = float.fromhex(header["time_hex"]) if "time_hex" in header else header["time"]
    return Field(grid, kind, data), time, header.get("meta")
