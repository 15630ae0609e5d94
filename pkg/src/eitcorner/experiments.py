"""Monte Carlo realizations of the generic-injectivity statements and parameter sweeps.

Every sample draws from its own stream ``default_rng([seed, index])`` so the
outcome of sample ``i`` does not depend on how many samples run or in which
order they are scheduled.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from .conductivity import ConductivityField, PerturbationSpace, as_matrix
from .corner import (
    bracket_roots,
    corner_reduction,
    determinant_condition,
    trapezoid_angle_condition,
)
from .forward import ForwardModel, SigmaBasis, make_mesh
from .geometry import (
    Decomposition,
    build_lateral_decomposition,
    build_parallelogram_decomposition,
    build_trapezoid_decomposition,
    build_trapezoid_domain,
    find_exposed_corners,
    parallelogram_cell,
    parallelogram_grid_size,
    rationality_check,
    shared_corner_test,
)
from .inverse import InverseProblem, injectivity_certificate

MODES = ("parallelogram", "trapezoid")


@dataclass(frozen=True)
class SampleConfig:
    """Settings of a Monte Carlo run.

    Parameters
    ----------
    mode : {"parallelogram", "trapezoid"}
        ``parallelogram`` draws ``r ~ U(0, 1]`` and one angle ``phi ~ U(0, 2pi]``
        per perturbed cell on a fixed background; ``trapezoid`` draws
        ``r ~ U(0, 1]`` and ``theta ~ U(0, pi)`` and rebuilds the domain.
    n_samples, rng_seed : int
    theta : float
        Frame angle of the parallelogram background (ignored in trapezoid mode).
    r0 : float
        Background step. In trapezoid mode it is a fraction of the lateral height.
    q : float
        Slide of the inverted trapezoid (trapezoid mode).
    gamma0 : 2x2 nested list
        Constant background tensor.
    n_cells : int
        Perturbed cells per sample, picked at random from the perturbation tiling.
    target_h, grading : mesh settings
    per_segment : int
        Measurement points per Σ segment.
    threshold : float
        A sample passes when ``sigma_min > threshold * sigma_max``.
    certify : bool
        Skip the FEM certificate when false (condition flags only).
    threads : int
        Samples evaluated concurrently.
    """

    mode: str = "parallelogram"
    n_samples: int = 50
    rng_seed: int = 0
    theta: float = math.pi / 2
    r0: float = 1 / math.sqrt(2)
    q: float = 0.3
    gamma0: tuple = ((1.0, 0.0), (0.0, 1.0))
    n_cells: int = 2
    target_h: float = 0.1
    grading: int = 0
    per_segment: int = 6
    threshold: float = 1e-8
    certify: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.n_cells < 1:
            raise ValueError("n_cells must be at least 1")
        if not (self.threshold >= 0):
            raise ValueError("threshold must be non-negative")
        object.__setattr__(self, "gamma0", tuple(tuple(float(v) for v in row) for row in as_matrix(self.gamma0)))

    @classmethod
    def from_json(cls, d: dict) -> "SampleConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["gamma0"] = [list(r) for r in self.gamma0]
        return d


@dataclass
class SampleOutcome:
    """One sample: drawn parameters, sufficient-condition flags and the certificate."""

    index: int
    r: float
    theta: float
    phis: tuple
    cells: tuple  # grid indices of the perturbed cells
    determinant_ok: bool | None
    determinant_min: float | None
    angle_ok: bool | None
    shared_corner: bool
    sigma_min: float | None
    sigma_max: float | None
    passed: bool | None
    error: str = ""

    @property
    def flags_ok(self) -> bool:
        return (self.determinant_ok is not False) and (self.angle_ok is not False) and not self.shared_corner

    @property
    def verdict(self) -> str:
        if self.error:
            return "error"
        if self.passed is None:
            return "unchecked"
        return "pass" if self.passed else "fail"


CSV_FIELDS = ("index", "r", "theta", "phis", "cells", "determinant_ok", "determinant_min", "angle_ok",
              "shared_corner", "sigma_min", "sigma_max", "verdict", "error")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def outcomes_csv(outcomes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for o in outcomes:
        w.writerow([
            o.index, _fmt(o.r), _fmt(o.theta), " ".join(repr(p) for p in o.phis),
            " ".join(f"{a}:{b}" for a, b in o.cells), _fmt(o.determinant_ok), _fmt(o.determinant_min),
            _fmt(o.angle_ok), _fmt(o.shared_corner), _fmt(o.sigma_min), _fmt(o.sigma_max), o.verdict, o.error,
        ])
    return buf.getvalue()


@dataclass(frozen=True)
class MonteCarloSummary:
    n_samples: int
    n_generic: int  # samples whose condition flags all pass
    n_flagged: int
    n_errors: int
    n_pass: int  # generic samples with a passing certificate
    pass_fraction: float | None
    ci_low: float | None
    ci_high: float | None
    flag_fraction: float  # fraction of all samples with every flag passing

    def to_json(self) -> dict:
        return asdict(self)


def summarize(outcomes, confidence: float = 0.95) -> MonteCarloSummary:
    """Pass fraction over generic samples with a Clopper-Pearson interval."""
    outcomes = list(outcomes)
    generic = [o for o in outcomes if o.flags_ok and not o.error]
    checked = [o for o in generic if o.passed is not None]
    n_pass = sum(1 for o in checked if o.passed)
    if checked:
        ci = binomtest(n_pass, len(checked)).proportion_ci(confidence_level=confidence, method="exact")
        frac, lo, hi = n_pass / len(checked), float(ci.low), float(ci.high)
    else:
        frac = lo = hi = None
    return MonteCarloSummary(
        len(outcomes), len(generic), sum(1 for o in outcomes if not o.flags_ok), sum(1 for o in outcomes if o.error),
        n_pass, frac, lo, hi, sum(1 for o in outcomes if o.flags_ok) / len(outcomes),
    )


# ---------------------------------------------------------------------------
# Per-sample pipeline
# ---------------------------------------------------------------------------


def _unit_open(rng) -> float:
    """A draw from U(0, 1]."""
    return 1.0 - rng.random()


def _corner_values(gamma0: np.ndarray, cells, phis, boundary, theta: float):
    """Relative determinant values at the exposed corners of every cell.

    A cell without an exposed corner is evaluated at the frame angle ``theta``,
    the corner it would expose after extending the domain.
    """
    corners = find_exposed_corners(cells, [c.id for c in cells], boundary=boundary)
    by_cell = {c.id: [] for c in cells}
    for ec in corners:
        by_cell[ec.cell_id].append(ec)
    values = []
    for c, phi in zip(cells, phis):
        for angle in [ec.corner_angle for ec in by_cell[c.id]] or [theta]:
            red = corner_reduction(gamma0, angle)
            values.append(determinant_condition(red, phi) / max(red.amplitude, 1e-300))
    return values, corners


def _pick_cells(rng, n_total: int, n_cells: int) -> np.ndarray:
    return np.sort(rng.choice(n_total, size=min(n_cells, n_total), replace=False))


def _certify(bg: Decomposition, basis: SigmaBasis, gamma0, cells, mode, phis, cfg: SampleConfig):
    mesh = make_mesh([bg], basis, cfg.target_h, extra_cells=cells, grading=cfg.grading)
    space = PerturbationSpace(cells, mode, phis)
    problem = InverseProblem(ForwardModel(mesh, basis), ConductivityField.constant(bg, gamma0), space)
    cert = injectivity_certificate(problem)
    return cert.sigma_min, cert.sigma_max


def parallelogram_background(cfg: SampleConfig) -> tuple[Decomposition, SigmaBasis]:
    bg = build_parallelogram_decomposition(cfg.r0, cfg.theta)
    return bg, SigmaBasis.from_decomposition(bg, per_segment=cfg.per_segment)


def run_parallelogram_sample(cfg: SampleConfig, index: int, bg=None, basis=None, r=None, phis=None,
                             cells=None) -> SampleOutcome:
    """One parallelogram-mode sample; ``r``, ``phis`` and ``cells`` override the draws."""
    rng = np.random.default_rng([cfg.rng_seed, index])
    if bg is None:
        bg, basis = parallelogram_background(cfg)
    r = _unit_open(rng) if r is None else float(r)
    n = parallelogram_grid_size(r)
    if cells is None:
        cells = [(int(k // n), int(k % n)) for k in _pick_cells(rng, n * n, cfg.n_cells)]
    # only the angles of realized cells are drawn
    draws = [2 * math.pi * _unit_open(rng) for _ in cells]
    phis = tuple(draws if phis is None else (float(p) for p in phis))
    geo = [parallelogram_cell(r, cfg.theta, i, j, k) for k, (i, j) in enumerate(cells)]
    g0 = as_matrix(cfg.gamma0)
    out = SampleOutcome(index, r, cfg.theta, phis, tuple(cells), None, None, None, False, None, None, None)
    try:
        values, _ = _corner_values(g0, geo, phis, bg.domain, cfg.theta)
        out.determinant_min = float(min(np.abs(values))) if values else None
        out.determinant_ok = bool(values) and out.determinant_min > 1e-12
        report = shared_corner_test(bg, geo)
        out.shared_corner = report.any_shared or rationality_check(r / cfg.r0).flagged
        if cfg.certify:
            out.sigma_min, out.sigma_max = _certify(bg, basis, g0, geo, "parallelogram", phis, cfg)
            out.passed = out.sigma_min > cfg.threshold * out.sigma_max
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def run_trapezoid_sample(cfg: SampleConfig, index: int, r=None, theta=None) -> SampleOutcome:
    """One trapezoid-mode sample; ``r`` and ``theta`` override the draws."""
    rng = np.random.default_rng([cfg.rng_seed, index])
    r = _unit_open(rng) if r is None else float(r)
    if theta is None:
        theta = 0.0
        while theta == 0.0:
            theta = float(rng.uniform(0.0, math.pi))
    out = SampleOutcome(index, r, float(theta), (), (), None, None, None, False, None, None, None)
    try:
        dom = build_trapezoid_domain(1, theta, cfg.q)
        bg = build_lateral_decomposition(dom, cfg.r0 * dom.lateral_height)
        pert = build_trapezoid_decomposition(dom, r)
        picks = _pick_cells(rng, len(pert.cells), cfg.n_cells)
        geo = [pert.cells[k] for k in picks]
        out.cells = tuple((int(k), 0) for k in picks)
        g0 = as_matrix(cfg.gamma0)
        # the checker covers both corner angles theta and pi - theta
        out.angle_ok = trapezoid_angle_condition(g0, theta).passed
        out.shared_corner = shared_corner_test(bg, pert).flagged
        if cfg.certify:
            basis = SigmaBasis.from_decomposition(bg, per_segment=cfg.per_segment)
            out.sigma_min, out.sigma_max = _certify(bg, basis, g0, geo, "trapezoid", (), cfg)
            out.passed = out.sigma_min > cfg.threshold * out.sigma_max
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def run_monte_carlo(cfg: SampleConfig) -> tuple[list[SampleOutcome], MonteCarloSummary]:
    """Run every sample of ``cfg``; per-sample failures are recorded, not raised."""
    if cfg.mode == "parallelogram":
        bg, basis = parallelogram_background(cfg)

        def one(i):
            return run_parallelogram_sample(cfg, i, bg, basis)
    else:
        def one(i):
            return run_trapezoid_sample(cfg, i)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            outcomes = list(pool.map(one, range(cfg.n_samples)))
    else:
        outcomes = [one(i) for i in range(cfg.n_samples)]
    return outcomes, summarize(outcomes)


def summary_json(cfg: SampleConfig, summary: MonteCarloSummary) -> str:
    return json.dumps({"config": cfg.to_json(), "summary": summary.to_json()}, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    x: float
    determinant: float | None = None
    shared_corner: bool | None = None
    sigma_min: float | None = None


@dataclass(frozen=True)
class SweepTable:
    variable: str
    rows: tuple
    roots: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.variable, "determinant", "shared_corner", "sigma_min"])
        for row in self.rows:
            w.writerow([repr(row.x), _fmt(row.determinant), _fmt(row.shared_corner), _fmt(row.sigma_min)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"variable": self.variable, "roots": list(self.roots), "meta": self.meta,
                "rows": [asdict(r) for r in self.rows]}


def _one_cell_problem(r: float, theta: float, r0: float, gamma0, cell_ij, target_h: float, per_segment: int,
                      grading: int = 0):
    bg = build_parallelogram_decomposition(r0, theta)
    basis = SigmaBasis.from_decomposition(bg, per_segment=per_segment)
    cell = parallelogram_cell(r, theta, *cell_ij, 0)
    mesh = make_mesh([bg], basis, target_h, extra_cells=[cell], grading=grading)
    return bg, cell, ForwardModel(mesh, basis), ConductivityField.constant(bg, gamma0)


def angle_sweep(gamma0_cell, theta: float, n_grid: int, certify: dict | None = None, xtol: float = 1e-12) -> SweepTable:
    """Determinant of the angle condition over a uniform grid on (0, 2pi] and its roots.

    ``certify`` optionally holds ``r``, ``r0``, ``cell`` (grid index),
    ``target_h`` and ``per_segment`` of a one-cell parallelogram problem whose
    sigma_min is recorded at every grid angle.
    """
    if n_grid < 8:
        raise ValueError("n_grid must be at least 8")
    red = corner_reduction(gamma0_cell, theta)
    grid = 2 * math.pi * np.arange(1, n_grid + 1) / n_grid
    sig = [None] * n_grid
    if certify is not None:
        c = {"r": 0.37, "r0": 1 / math.sqrt(2), "cell": (1, 1), "target_h": 0.1, "per_segment": 6, **certify}
        _, cell, model, gamma = _one_cell_problem(c["r"], theta, c["r0"], gamma0_cell, tuple(c["cell"]),
                                                  c["target_h"], c["per_segment"])
        for k, phi in enumerate(grid):
            problem = InverseProblem(model, gamma, PerturbationSpace([cell], "parallelogram", [phi]))
            sig[k] = injectivity_certificate(problem).sigma_min
    roots = bracket_roots(lambda p: determinant_condition(red, p), 0.0, 2 * math.pi, n_grid, xtol=xtol)
    rows = tuple(SweepRow(float(p), determinant_condition(red, p), None, s) for p, s in zip(grid, sig))
    return SweepTable("phi", rows, tuple(float(x) for x in roots),
                      {"theta": theta, "p": red.p, "q": red.q_det, "alpha": red.alpha})


def ratio_sweep(r_values, r0: float, gamma0=((1.0, 0.0), (0.0, 1.0)), theta: float = math.pi / 2, phi: float = 0.7,
                cell=(0, 0), certify: bool = True, target_h: float = 0.1, per_segment: int = 6,
                tol: float = 1e-9, max_grid: int = 64) -> SweepTable:
    """Shared-corner flag and one-cell sigma_min as the perturbation step ``r`` varies.

    The flag tests every corner of the full perturbation tiling against the
    background edges; ``max_grid`` bounds the tiling size.
    """
    bg = build_parallelogram_decomposition(r0, theta)
    rows = []
    for r in r_values:
        r = float(r)
        if parallelogram_grid_size(r) > max_grid:
            raise ValueError(f"r = {r} gives more than {max_grid} cells per side")
        pert = build_parallelogram_decomposition(r, theta)
        flag = shared_corner_test(bg, pert, tol=tol).flagged
        s = None
        if certify:
            _, c, model, gamma = _one_cell_problem(r, theta, r0, gamma0, cell, target_h, per_segment)
            s = injectivity_certificate(InverseProblem(model, gamma, PerturbationSpace([c], "parallelogram", [phi]))).sigma_min
        rows.append(SweepRow(r, None, flag, s))
    return SweepTable("r", tuple(rows), (), {"r0": r0, "theta": theta, "phi": phi})
