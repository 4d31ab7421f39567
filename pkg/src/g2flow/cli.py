"""Command-line driver: identity suites, flow runs, convergence studies,
symbol certificates and variation checks, from a sectioned key=value
configuration.

Heavy imports (numpy and the numerical modules) are deferred until after
the --threads flag has been applied to the BLAS/OpenMP environment, so the
thread cap actually takes effect.  Everything in this module below the
config layer assumes those imports have happened.

Exit codes: 0 all checks passed / run completed; 1 a numerical check
failed, the flow blew up, or reconstruction stalled; 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, replace

DIM = 7

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

COMMANDS = ("verify", "flow", "converge", "symbols", "variation")


class ConfigError(ValueError):
    """Configuration text failed to parse or validate."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass
class RunSpec:
    """One fully-specified invocation, as parsed from config text.

    Float-or-"auto" knobs keep the literal string "auto" until resolved
    against the grid/structure they depend on, so a parsed spec re-emits
    exactly.
    """

    command: str = "verify"
    # [grid]
    n: int = 16
    axes: tuple[int, ...] = (0, 1, 2)
    lengths: tuple[float, ...] = (1.0,) * DIM
    # [initial]
    kind: str = "perturbed"
    seed: int = 0
    amplitude: float = 0.02
    kmax: int = 1
    modes: int = 2
    # [flow]
    A: float | str = "auto"
    dt: float | str = "auto"
    t_end: float = 0.0
    steps: int | None = None
    variant: str = "modified"
    gauge: bool = False
    recon_tol: float = 1e-12
    recon_max_iter: int = 50
    diag_every: int = 1
    snapshot_every: int = 0
    blowup_max: float = 1e6
    # [output]
    out_dir: str = "g2flow-out"


# (section, key) -> RunSpec field name.  None section = top level.
_KEY_MAP = {
    (None, "command"): "command",
    ("grid", "n"): "n",
    ("grid", "axes"): "axes",
    ("grid", "lengths"): "lengths",
    ("initial", "kind"): "kind",
    ("initial", "seed"): "seed",
    ("initial", "amplitude"): "amplitude",
    ("initial", "kmax"): "kmax",
    ("initial", "modes"): "modes",
    ("flow", "A"): "A",
    ("flow", "dt"): "dt",
    ("flow", "t_end"): "t_end",
    ("flow", "steps"): "steps",
    ("flow", "variant"): "variant",
    ("flow", "gauge"): "gauge",
    ("flow", "recon_tol"): "recon_tol",
    ("flow", "recon_max_iter"): "recon_max_iter",
    ("flow", "diag_every"): "diag_every",
    ("flow", "snapshot_every"): "snapshot_every",
    ("flow", "blowup_max"): "blowup_max",
    ("output", "dir"): "out_dir",
}

_SECTIONS = ("grid", "initial", "flow", "output")


def _parse_int(section, key, raw, line, minimum=None):
    try:
        v = int(raw, 10)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be an integer, got {raw!r}", line)
    if minimum is not None and v < minimum:
        raise ConfigError(f"{section}.{key} must be >= {minimum}, got {raw}", line)
    return v


def _parse_float(section, key, raw, line, positive=False, nonnegative=False):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key} must be a number, got {raw!r}", line)
    if positive and not v > 0:
        raise ConfigError(f"{section}.{key} must be positive, got {raw}", line)
    if nonnegative and v < 0:
        raise ConfigError(f"{section}.{key} must be non-negative, got {raw}", line)
    return v


def _parse_bool(section, key, raw, line):
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{section}.{key} must be true or false, got {raw!r}", line)


def _parse_value(section, key, raw, line):
    if key == "command":
        if raw not in COMMANDS:
            raise ConfigError(
                f"command must be one of {', '.join(COMMANDS)}, got {raw!r}", line
            )
        return raw
    if (section, key) == ("grid", "n"):
        return _parse_int(section, key, raw, line, minimum=1)
    if (section, key) == ("grid", "axes"):
        parts = [p for p in raw.replace(",", " ").split() if p]
        axes = tuple(_parse_int(section, key, p, line) for p in parts)
        if not axes or len(set(axes)) != len(axes):
            raise ConfigError(f"grid.axes must be distinct axis indices, got {raw!r}", line)
        if any(a < 0 or a >= DIM for a in axes):
            raise ConfigError(f"grid.axes entries must lie in 0..6, got {raw!r}", line)
        return tuple(sorted(axes))
    if (section, key) == ("grid", "lengths"):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if len(parts) != DIM:
            raise ConfigError(f"grid.lengths needs exactly 7 values, got {len(parts)}", line)
        return tuple(_parse_float(section, key, p, line, positive=True) for p in parts)
    if (section, key) == ("initial", "kind"):
        if raw not in ("flat", "perturbed"):
            raise ConfigError(f"initial.kind must be flat or perturbed, got {raw!r}", line)
        return raw
    if (section, key) == ("initial", "seed"):
        return _parse_int(section, key, raw, line, minimum=0)
    if (section, key) == ("initial", "amplitude"):
        return _parse_float(section, key, raw, line, nonnegative=True)
    if (section, key) in (("initial", "kmax"), ("initial", "modes")):
        return _parse_int(section, key, raw, line, minimum=1)
    if (section, key) == ("flow", "A"):
        if raw == "auto":
            return "auto"
        return _parse_float(section, key, raw, line, nonnegative=True)
    if (section, key) == ("flow", "dt"):
        if raw == "auto":
            return "auto"
        return _parse_float(section, key, raw, line, positive=True)
    if (section, key) == ("flow", "t_end"):
        return _parse_float(section, key, raw, line, nonnegative=True)
    if (section, key) == ("flow", "steps"):
        return _parse_int(section, key, raw, line, minimum=0)
    if (section, key) == ("flow", "variant"):
        if raw not in ("modified", "original"):
            raise ConfigError(f"flow.variant must be modified or original, got {raw!r}", line)
        return raw
    if (section, key) == ("flow", "gauge"):
        return _parse_bool(section, key, raw, line)
    if (section, key) == ("flow", "recon_tol"):
        return _parse_float(section, key, raw, line, positive=True)
    if (section, key) in (("flow", "recon_max_iter"), ("flow", "diag_every")):
        return _parse_int(section, key, raw, line, minimum=1)
    if (section, key) == ("flow", "snapshot_every"):
        return _parse_int(section, key, raw, line, minimum=0)
    if (section, key) == ("flow", "blowup_max"):
        return _parse_float(section, key, raw, line, positive=True)
    if (section, key) == ("output", "dir"):
        if not raw:
            raise ConfigError("output.dir must not be empty", line)
        return raw
    raise AssertionError(f"unhandled key {section}.{key}")


def parse_config(text: str) -> RunSpec:
    """Parse sectioned key=value text into a RunSpec.

    Lines are key = value, [section] headers, blank lines, or comments
    (# or ;).  The only top-level key is command; every other key lives in
    one of [grid], [initial], [flow], [output].  Unknown sections, unknown
    keys, duplicates and invalid values are all rejected with the
    offending line number.
    """
    spec = RunSpec()
    section: str | None = None
    seen: set[tuple[str | None, str]] = set()
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        stripped = rawline.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno)
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise ConfigError(
                    f"unknown section [{name}]; expected one of "
                    + ", ".join(f"[{s}]" for s in _SECTIONS),
                    lineno,
                )
            section = name
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected key = value, got {stripped!r}", lineno)
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.split("#", 1)[0].split(";", 1)[0].strip()
        where = (section, key)
        if where not in _KEY_MAP:
            place = f"[{section}]" if section else "the top level"
            raise ConfigError(f"unknown key {key!r} in {place}", lineno)
        if where in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        seen.add(where)
        setattr(spec, _KEY_MAP[where], _parse_value(section, key, raw, lineno))
    if spec.steps is not None and spec.t_end != 0.0:
        raise ConfigError("flow.steps and flow.t_end are mutually exclusive")
    return spec


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_config(spec: RunSpec) -> str:
    """Canonical text form; parse_config(emit_config(s)) == s."""
    lines = [f"command = {spec.command}", ""]
    by_section: dict[str, list[str]] = {s: [] for s in _SECTIONS}
    for (section, key), field_name in _KEY_MAP.items():
        if section is None:
            continue
        value = getattr(spec, field_name)
        if value is None:
            continue
        by_section[section].append(f"{key} = {_fmt(value)}")
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        lines.extend(by_section[section])
        lines.append("")
    return "\n".join(lines)


def _import_modules():
    import numpy as np

    from . import algebra, coflow, fields, symbols, torsion

    return np, algebra, coflow, fields, symbols, torsion


def build_grid(spec: RunSpec):
    _, _, _, fields, _, _ = _import_modules()
    sizes = tuple(spec.n if ax in spec.axes else 1 for ax in range(DIM))
    return fields.Grid(sizes, spec.lengths)


def build_structure(spec: RunSpec, grid):
    _, algebra, coflow, _, _, _ = _import_modules()
    if spec.kind == "flat":
        return algebra.standard_structure(grid.sizes)
    return coflow.perturbed_initial_data(
        grid, spec.amplitude, spec.seed, spec.kmax, spec.modes
    )


def resolve_flow_config(spec: RunSpec, s, grid):
    """FlowConfig with auto knobs resolved; returns (config, n_steps)."""
    _, _, coflow, _, _, _ = _import_modules()
    dt = 0.1 * grid.min_active_spacing**2 if spec.dt == "auto" else spec.dt
    if spec.A == "auto":
        a = coflow.default_flow_constant(s, grid) if spec.variant == "modified" else 0.0
    else:
        a = spec.A
    t_end = spec.steps * dt if spec.steps is not None else spec.t_end
    cfg = coflow.FlowConfig(
        A=a,
        dt=dt,
        t_end=t_end,
        variant=spec.variant,
        gauge=spec.gauge,
        recon_tol=spec.recon_tol,
        recon_max_iter=spec.recon_max_iter,
        diag_every=spec.diag_every,
        snapshot_every=spec.snapshot_every,
        blowup_max=spec.blowup_max,
    )
    return cfg, max(0, int(round(t_end / dt)))


def _check(name, norm, threshold, kind="algebraic", **extra):
    rec = {
        "identity": name,
        "norm": float(norm),
        "threshold": float(threshold),
        "kind": kind,
        "pass": bool(norm <= threshold),
    }
    rec.update(extra)
    return rec


def _rms(x):
    np = _import_modules()[0]
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def contraction_records(s_point, s_batch, threshold=1e-12):
    _, algebra, _, _, _, _ = _import_modules()
    records = []
    for label, st in (("standard", s_point), ("sampled", s_batch)):
        if st is None:
            continue
        for name, norm in algebra.verify_contractions(st).items():
            records.append(
                _check(f"contraction_{name}_{label}", norm, threshold)
            )
    return records


def projector_records(rng, threshold=1e-11):
    np, algebra, _, _, _, _ = _import_modules()
    from ._packing import NCOMP

    s = algebra.standard_structure()
    records = []

    cols = {"two_vec": [], "two_comp": [], "three_scal": [], "three_vec": [],
            "three_sym": []}
    for i in range(NCOMP[2]):
        e = np.zeros(NCOMP[2])
        e[i] = 1.0
        dec = algebra.project(s, e, 2)
        cols["two_vec"].append(algebra.interior(dec.X, s.phi, 3))
        cols["two_comp"].append(dec.w14)
    for i in range(NCOMP[3]):
        e = np.zeros(NCOMP[3])
        e[i] = 1.0
        dec = algebra.project(s, e, 3)
        cols["three_scal"].append(dec.f[None] * s.phi)
        cols["three_vec"].append(algebra.interior(dec.X, s.psi, 4))
        h0 = dec.h - (np.trace(dec.h) / DIM) * np.eye(DIM)
        cols["three_sym"].append(algebra.i_phi(s, h0))
    expected = {"two_vec": 7, "two_comp": 14, "three_scal": 1,
                "three_vec": 7, "three_sym": 27}
    for name, c in cols.items():
        rank = int(np.linalg.matrix_rank(np.array(c).T, tol=1e-10))
        records.append(
            _check(f"projector_rank_{name}", abs(rank - expected[name]), 0.0,
                   rank=rank, expected_rank=expected[name])
        )

    batch = 200
    sp = algebra.standard_structure((batch,))
    two = rng.uniform(-1.0, 1.0, (batch, NCOMP[2]))
    dec2 = algebra.project(sp, two, 2)
    records.append(_check(
        "projector_two_form_completeness",
        np.max(np.abs(algebra.reassemble(sp, dec2, 2) - two)), threshold))
    records.append(_check(
        "projector_two_form_orthogonality",
        np.max(np.abs(algebra.form_inner(
            sp, algebra.interior(dec2.X, sp.phi, 3), dec2.w14, 2))), threshold))
    three = rng.uniform(-1.0, 1.0, (batch, NCOMP[3]))
    dec3 = algebra.project(sp, three, 3)
    records.append(_check(
        "projector_three_form_completeness",
        np.max(np.abs(algebra.reassemble(sp, dec3, 3) - three)), threshold))
    x = rng.uniform(-1.0, 1.0, (batch, DIM))
    records.append(_check(
        "projector_vector_roundtrip",
        np.max(np.abs(algebra.project(sp, algebra.interior(x, sp.psi, 4), 3).X - x)),
        threshold))
    h = rng.uniform(-1.0, 1.0, (batch, DIM, DIM))
    h = 0.5 * (h + np.swapaxes(h, -1, -2))
    records.append(_check(
        "projector_symmetric_roundtrip",
        np.max(np.abs(algebra.project(sp, algebra.i_phi(sp, h), 3).h - h)),
        threshold))
    return records


def complex_records(spec: RunSpec, grid, s, threshold=1e-11, stokes_threshold=1e-12):
    np, algebra, coflow, fields, _, torsion = _import_modules()

    records = []
    rng = np.random.default_rng(spec.seed + 101)
    for k in range(1, 6):
        a = coflow.random_mode_form(grid, k, 1.0, rng, 1)
        dda = fields.exterior_derivative(
            fields.exterior_derivative(a, grid, k), grid, k + 1
        )
        records.append(_check(f"complex_dd_zero_{k}form", np.max(np.abs(dda)), threshold))
    six = coflow.random_mode_form(grid, 6, 1.0, rng, 1)
    dsix = fields.exterior_derivative(six, grid, 6)
    records.append(_check(
        "complex_stokes_top_degree",
        abs(float(np.sum(dsix[..., 0])) * grid.cell_volume), stokes_threshold))

    T = torsion.torsion_from_dphi_coclosed(s, grid, tol=1e-7)
    a_value = 1.5 * max(0.0, float(np.max(np.einsum("...ab,...ab->...", s.g_inv, T))))
    for variant in ("original", "modified"):
        rhs = coflow.coflow_rhs(s, grid, T, a_value, variant)
        records.append(_check(
            f"complex_flow_rhs_closed_{variant}",
            np.max(np.abs(fields.exterior_derivative(rhs, grid, 4))), threshold))
    rhs = coflow.gauged_rhs(s, grid, algebra.standard_structure(grid.sizes).psi,
                            T, a_value)
    records.append(_check(
        "complex_flow_rhs_closed_gauged",
        np.max(np.abs(fields.exterior_derivative(rhs, grid, 4))), threshold))
    return records


def torsion_residual_fields(s, grid):
    """RMS-normed residuals of the co-closed torsion identities, plus the
    scale of each identity's own terms (for relative reporting)."""
    np, _, _, fields, _, torsion = _import_modules()

    gamma = fields.christoffels(s, grid)
    T = torsion.torsion_from_dphi_coclosed(s, grid, tol=1e-7)
    return _torsion_residuals_for(s, grid, T, gamma)


def _torsion_residuals_for(s, grid, T, gamma):
    np, _, _, fields, _, torsion = _import_modules()

    trT = np.einsum("...ab,...ab->...", s.g_inv, T)
    out = {}
    div_t = fields.divergence_sym2(s, grid, T, gamma)
    gtr = fields.gradient(trT, grid)
    out["torsion_divergence_is_trace_gradient"] = (
        _rms(div_t - gtr), max(_rms(div_t), _rms(gtr)))
    c = fields.curl_sym2(s, grid, T, gamma)
    out["torsion_curl_symmetric"] = (
        _rms(0.5 * (c - np.swapaxes(c, -1, -2))), _rms(c))
    ric_t, scal_t = torsion.ricci_coclosed(s, grid, T, gamma)
    ric_m, scal_m = fields.ricci(s, grid, gamma)
    out["ricci_torsion_vs_connection"] = (
        _rms(ric_t - ric_m), max(_rms(ric_t), _rms(ric_m)))
    out["scalar_curvature_torsion_vs_connection"] = (
        _rms(scal_t - scal_m), max(_rms(scal_t), _rms(scal_m)))
    lap3 = torsion.laplacian_phi_decomposition(s, grid, T, gamma)
    hh3 = fields.hodge_laplacian(s, grid, s.phi, 3)
    out["laplacian_phi_torsion_vs_hodge"] = (
        _rms(lap3 - hh3), max(_rms(lap3), _rms(hh3)))
    lap4 = torsion.laplacian_psi_form(s, grid, T, gamma)
    hh4 = fields.hodge_laplacian(s, grid, s.psi, 4)
    out["laplacian_psi_torsion_vs_hodge"] = (
        _rms(lap4 - hh4), max(_rms(lap4), _rms(hh4)))
    return out


def torsion_order_records(spec: RunSpec, grid, s, min_order=3.5):
    """Identity residuals at the spec grid and its refinement, with
    measured convergence orders."""
    np = _import_modules()[0]

    coarse = torsion_residual_fields(s, grid)
    fine_grid = grid.refined(2)
    s_fine = build_structure(spec, fine_grid)
    fine = torsion_residual_fields(s_fine, fine_grid)
    records = []
    for name in coarse:
        rc, _ = coarse[name]
        rf, _ = fine[name]
        order = float(np.log2(rc / rf)) if rf > 0 else float("inf")
        records.append({
            "identity": name,
            "norm": rc,
            "norm_refined": rf,
            "order": order,
            "min_order": min_order,
            "kind": "finite_difference",
            "pass": bool(order >= min_order),
        })
    return records


def torsion_flat_records(s, grid, threshold=1e-10):
    records = []
    for name, (res, _) in torsion_residual_fields(s, grid).items():
        records.append(_check(name, res, threshold, kind="finite_difference"))
    return records


def _sample_points(np, algebra, s, count, seed):
    from ._packing import NCOMP

    pts = s.phi.reshape(-1, NCOMP[3])
    idx = np.random.default_rng(seed).choice(pts.shape[0], size=count,
                                             replace=pts.shape[0] < count)
    return algebra.G2Structure(pts[idx])


def _faulted_standard(np, algebra):
    """Structure whose stored 4-form has the wrong sign; every identity
    that touches the pair (phi, psi) must now fail."""
    s = algebra.standard_structure()
    return algebra.G2Structure(s.phi, g=s.g, sqrt_det_g=s.sqrt_det_g, psi=-s.psi)


def cmd_verify(spec: RunSpec, out_dir: str, inject_fault: str | None = None) -> int:
    np, algebra, _, _, _, _ = _import_modules()

    t0 = time.time()
    grid = build_grid(spec)
    s = build_structure(spec, grid)
    rng = np.random.default_rng(spec.seed + 7)

    if inject_fault == "psi-sign":
        point = _faulted_standard(np, algebra)
    else:
        point = algebra.standard_structure()
    batch = _sample_points(np, algebra, s, 100, spec.seed + 17)

    records = contraction_records(point, batch)
    records += projector_records(rng)
    records += complex_records(spec, grid, s)
    if spec.kind == "flat":
        records += torsion_flat_records(s, grid)
    else:
        records += torsion_order_records(spec, grid, s)

    ok = all(r["pass"] for r in records)
    report = {
        "command": "verify",
        "grid": list(grid.sizes),
        "initial": {"kind": spec.kind, "seed": spec.seed,
                    "amplitude": spec.amplitude},
        "injected_fault": inject_fault,
        "checks": records,
        "pass": ok,
        "runtime_seconds": time.time() - t0,
    }
    _write_report(out_dir, spec, grid, report, "verify_report.json")
    failed = [r["identity"] for r in records if not r["pass"]]
    if failed:
        print(f"verify: FAIL ({len(failed)}/{len(records)} checks): "
              + ", ".join(failed[:6]) + ("..." if len(failed) > 6 else ""))
        return 1
    print(f"verify: all {len(records)} checks passed "
          f"({report['runtime_seconds']:.1f}s)")
    return 0


def cmd_flow(spec: RunSpec, out_dir: str) -> int:
    _, _, coflow, fields, _, _ = _import_modules()

    grid = build_grid(spec)
    s = build_structure(spec, grid)
    cfg, n_steps = resolve_flow_config(spec, s, grid)
    os.makedirs(out_dir, exist_ok=True)

    counter = {"i": 0}

    def on_snapshot(state):
        fld = fields.Field(grid, ("form", 4), state.psi)
        path = os.path.join(out_dir, f"snapshot_{counter['i']:06d}.g2s")
        fields.write_snapshot(path, fld, state.t, {
            "convention_fingerprint": coflow.convention_fingerprint(),
            "variant": cfg.variant,
        })
        counter["i"] += 1

    state0 = coflow.FlowState(t=0.0, psi=s.psi, structure=s)
    blowup = False
    error = None
    rows = []
    try:
        final, rows = coflow.run(state0, grid, cfg, on_snapshot)
        v_final = rows[-1].V
    except (coflow.BlowUpError, coflow.NoConvergenceError) as exc:
        blowup = isinstance(exc, coflow.BlowUpError)
        error = str(exc)
        v_final = float("nan")

    if rows:
        coflow.write_diagnostics_csv(os.path.join(out_dir, "diagnostics.csv"), rows)
    upper = (4.0 / 3.0) * cfg.A
    slack = 1e-12
    violations = sum(
        1 for r in rows if r.trT_min < -slack or r.trT_max > upper + slack
    )
    meta = coflow.run_metadata(grid, cfg, extra={
        "command": "flow",
        "seed": spec.seed,
        "steps": n_steps,
        "config_text": emit_config(spec),
    })
    coflow.write_metadata(os.path.join(out_dir, "run_metadata.json"), meta)
    flag = "yes" if blowup else "no"
    print(f"flow: final V = {v_final:.12g}, TrT window violations = "
          f"{violations}/{len(rows)} rows, blow-up = {flag}")
    if error is not None:
        print(f"flow: aborted: {error}", file=sys.stderr)
        return 1
    return 0


def temporal_order_study(spec: RunSpec, base_steps: int = 4):
    """Self-convergence of the integrator under dt halving: integrate the
    same horizon with dt, dt/2, dt/4 and compare final 4-forms."""
    np, _, coflow, _, _, _ = _import_modules()

    grid = build_grid(spec)
    s = build_structure(spec, grid)
    cfg, _ = resolve_flow_config(spec, s, grid)
    dt0 = cfg.dt
    horizon = base_steps * dt0
    finals = []
    for divisor in (1, 2, 4):
        cfg_r = replace(cfg, dt=dt0 / divisor, t_end=horizon,
                        diag_every=10**9, snapshot_every=0)
        state0 = coflow.FlowState(t=0.0, psi=s.psi, structure=s)
        final, _ = coflow.run(state0, grid, cfg_r)
        finals.append(final.psi)
    e1 = float(np.max(np.abs(finals[0] - finals[1])))
    e2 = float(np.max(np.abs(finals[1] - finals[2])))
    order = float(np.log2(e1 / e2)) if e2 > 0 else float("inf")
    return {"dt": dt0, "horizon": horizon, "coarse_gap": e1,
            "fine_gap": e2, "order": order}


def cmd_converge(spec: RunSpec, out_dir: str) -> int:
    t0 = time.time()
    grid = build_grid(spec)
    s = build_structure(spec, grid)
    spatial = torsion_order_records(spec, grid, s)
    temporal = temporal_order_study(spec)
    temporal["min_order"] = 3.5
    temporal["pass"] = bool(temporal["order"] >= 3.5)
    ok = all(r["pass"] for r in spatial) and temporal["pass"]
    report = {
        "command": "converge",
        "grid": list(grid.sizes),
        "spatial": spatial,
        "temporal": temporal,
        "pass": ok,
        "runtime_seconds": time.time() - t0,
    }
    _write_report(out_dir, spec, grid, report, "converge_report.json")
    worst = min(r["order"] for r in spatial)
    print(f"converge: spatial orders >= {worst:.2f}, temporal order "
          f"{temporal['order']:.2f} ({report['runtime_seconds']:.1f}s) "
          + ("PASS" if ok else "FAIL"))
    return 0 if ok else 1


def cmd_symbols(spec: RunSpec, out_dir: str) -> int:
    _, _, _, _, symbols, _ = _import_modules()

    t0 = time.time()
    cert = symbols.certificate(seed=spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    symbols.write_certificate(os.path.join(out_dir, "symbol_certificate.json"), cert)
    checks = {
        "modified_nonnegative": cert["modified"]["min_value"] >= -1e-12,
        "modified_conformal_zero": abs(
            cert["modified"]["conformal_direction_value"]) <= 1e-12,
        "modified_constrained_positive": (
            cert["modified"]["constrained"]["min_scaled"] > 0.0),
        "unmodified_indefinite": (
            cert["unmodified"]["negative_sample"]["value"] < 0.0
            < cert["unmodified"]["positive_sample"]["value"]),
        "gauge_strictly_positive": cert["gauge_flow"]["min_value"] > 0.0,
        "linearization_agreement": (
            cert["linearization_agreement"]["traceless_max_rel_gap"] <= 1e-10),
        "homogeneity_degree_two": cert["homogeneity_max_residual"] <= 1e-12,
    }
    report = {
        "command": "symbols",
        "checks": [{"identity": k, "pass": bool(v)} for k, v in checks.items()],
        "pass": all(checks.values()),
        "runtime_seconds": time.time() - t0,
    }
    grid = build_grid(spec)
    _write_report(out_dir, spec, grid, report, "symbols_report.json")
    print(
        "symbols: modified min {:.3e}, unmodified negative fraction {:.3f}, "
        "gauge min {:.3e} ({:.1f}s) {}".format(
            cert["modified"]["min_value"],
            cert["unmodified"]["negative_fraction"],
            cert["gauge_flow"]["min_value"],
            report["runtime_seconds"],
            "PASS" if report["pass"] else "FAIL",
        )
    )
    return 0 if report["pass"] else 1


def cmd_variation(spec: RunSpec, out_dir: str) -> int:
    np, algebra, coflow, _, _, _ = _import_modules()

    t0 = time.time()
    grid = build_grid(spec)
    rng = np.random.default_rng(spec.seed + 23)
    # Amplitude keeps the centered-difference's cubic term in the flat
    # response below the 1e-10 vanishing bar.
    eta = coflow.random_mode_form(grid, 3, 0.1, rng, spec.kmax, spec.modes)

    s_flat = algebra.standard_structure(grid.sizes)
    m_flat, p_flat = coflow.volume_first_variation(s_flat, grid, eta)
    s_pert = coflow.perturbed_initial_data(
        grid, spec.amplitude, spec.seed, spec.kmax, spec.modes
    )
    m, p = coflow.volume_first_variation(s_pert, grid, eta)
    rel = abs(m - p) / max(abs(p), 1e-300)
    checks = [
        _check("variation_flat_vanishes", abs(m_flat), 1e-10,
               kind="finite_difference", measured=m_flat, predicted=p_flat),
        _check("variation_matches_pairing", rel, 1e-4,
               kind="finite_difference", measured=m, predicted=p),
    ]
    report = {
        "command": "variation",
        "grid": list(grid.sizes),
        "checks": checks,
        "pass": all(c["pass"] for c in checks),
        "runtime_seconds": time.time() - t0,
    }
    _write_report(out_dir, spec, grid, report, "variation_report.json")
    print(f"variation: flat {abs(m_flat):.3e}, perturbed relative gap "
          f"{rel:.3e} ({report['runtime_seconds']:.1f}s) "
          + ("PASS" if report["pass"] else "FAIL"))
    return 0 if report["pass"] else 1


def _write_report(out_dir, spec, grid, report, filename):
    """Report JSON plus the run-metadata JSON every command must leave."""
    _, _, coflow, _, _, _ = _import_modules()

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, filename), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    cfg = coflow.FlowConfig(
        A=spec.A if isinstance(spec.A, float) else 0.0,
        dt=spec.dt if isinstance(spec.dt, float) else None,
        t_end=spec.t_end,
        variant=spec.variant,
        gauge=spec.gauge,
    )
    meta = coflow.run_metadata(grid, cfg, extra={
        "command": report["command"],
        "seed": spec.seed,
        "config_text": emit_config(spec),
    })
    coflow.write_metadata(os.path.join(out_dir, "run_metadata.json"), meta)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="g2flow",
        description="Identity suites, coflow runs, convergence studies and "
        "symbol certificates for G2-structures on the flat 7-torus.",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="overrides the command key of the config")
    parser.add_argument("--config", metavar="PATH",
                        help="sectioned key=value configuration file")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="overrides initial.seed")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS/OpenMP threads (set before numpy loads)")
    parser.add_argument("--out", metavar="DIR", help="overrides output.dir")
    parser.add_argument("--inject-fault", choices=["psi-sign"],
                        help="verify test mode: corrupt the standard "
                        "structure and expect the suite to catch it")
    args = parser.parse_args(argv)

    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)

    text = ""
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            print(f"g2flow: error: cannot read config: {exc}", file=sys.stderr)
            return 2
    try:
        spec = parse_config(text)
    except ConfigError as exc:
        print(f"g2flow: config error: {exc}", file=sys.stderr)
        return 2

    if args.command is not None:
        spec.command = args.command
    if args.seed is not None:
        spec.seed = args.seed
    out_dir = args.out if args.out is not None else spec.out_dir
    if args.inject_fault is not None and spec.command != "verify":
        parser.error("--inject-fault only applies to the verify command")

    try:
        if spec.command == "verify":
            return cmd_verify(spec, out_dir, args.inject_fault)
        if spec.command == "flow":
            return cmd_flow(spec, out_dir)
        if spec.command == "converge":
            return cmd_converge(spec, out_dir)
        if spec.command == "symbols":
            return cmd_symbols(spec, out_dir)
        if spec.command == "variation":
            return cmd_variation(spec, out_dir)
    except ConfigError as exc:
        print(f"g2flow: config error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {spec.command!r}")


if __name__ == "__main__":
    sys.exit(main())
