"""Command-line entry point.

Every command is a pure function of its configuration and seed: numerics come
from an optional JSON config, command-line flags override it, and outputs are
written with sorted keys and full float precision so two runs produce the same
bytes.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
``diagnostic.json`` is written to the output directory).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conductivity import ConductivityField, PerturbationSpace, as_matrix
from .corner import (
    CornerDomain,
    QuadratureError,
    corner_reduction,
    determinant_roots,
    lemma41_extract,
    lemma42_extract,
    path_table_csv,
)
from .experiments import SampleConfig, angle_sweep, outcomes_csv, ratio_sweep, run_monte_carlo, summary_json
from .femcore import CompatibilityError
from .forward import ForwardModel, SigmaBasis, make_mesh, taylor_remainders
from .geometry import (
    Decomposition,
    build_lateral_decomposition,
    build_parallelogram_decomposition,
    build_trapezoid_decomposition,
    build_trapezoid_domain,
    parallelogram_cell,
    parallelogram_grid_size,
)
from .inverse import (
    DivergenceError,
    InverseCrimeError,
    InverseProblem,
    IterationConfig,
    NonAdmissibleError,
    injectivity_certificate,
    lipschitz_probe,
    reconstruct,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "EITCORNER_SEED"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _merge(cfg: dict, args, keys) -> dict:
    """Config values overridden by every flag given on the command line."""
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return 0


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


_K_TERM = re.compile(r"^([+-]?)(\d*\.?\d*(?:[eE][+-]?\d+)?)\*?k$")


def parse_tensor_entries(text, k: float) -> np.ndarray:
    """``h11,h12,h22`` as numbers or multiples of ``k`` (``-k``, ``2k``, ``0.5*k``)."""
    parts = text if isinstance(text, (list, tuple)) else str(text).split(",")
    if len(parts) != 3:
        raise ConfigError("tensor needs three entries h11,h12,h22")
    vals = []
    for p in parts:
        if isinstance(p, (int, float)):
            vals.append(float(p))
            continue
        s = p.strip().replace(" ", "")
        m = _K_TERM.match(s)
        try:
            if m:
                coef = float(m.group(2)) if m.group(2) else 1.0
                vals.append((-coef if m.group(1) == "-" else coef) * k)
            else:
                vals.append(float(s))
        except ValueError as exc:
            raise ConfigError(f"cannot parse tensor entry {p!r}") from exc
    return np.array([[vals[0], vals[1]], [vals[1], vals[2]]])


def _tensor(value) -> np.ndarray:
    try:
        if isinstance(value, str):
            v = _floats(value)
            if len(v) == 3:
                return np.array([[v[0], v[1]], [v[1], v[2]]])
            return np.array(v, dtype=float).reshape(2, 2)
        return as_matrix(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"cannot interpret tensor {value!r}") from exc


# ---------------------------------------------------------------------------
# Problem assembly shared by forward, frechet, certify and reconstruct
# ---------------------------------------------------------------------------

PROBLEM_KEYS = ("kind", "r0", "theta", "pairs", "q", "r", "cells", "phis", "gamma0", "h", "grading",
                "per_segment", "spacing", "gram")


def _background(cfg: dict):
    kind = cfg.get("kind", "parallelogram")
    theta = float(cfg.get("theta", math.pi / 2))
    if kind == "parallelogram":
        r0 = float(cfg.get("r0", 1 / math.sqrt(2)))
        return kind, build_parallelogram_decomposition(r0, theta), None
    if kind == "trapezoid":
        dom = build_trapezoid_domain(int(cfg.get("pairs", 1)), theta, float(cfg.get("q", 0.3)))
        r0 = float(cfg.get("r0", 0.37 * dom.lateral_height))
        return kind, build_lateral_decomposition(dom, r0), dom
    raise ConfigError(f"unknown domain kind {kind!r}")


def _cells(cfg: dict, kind: str, bg: Decomposition, dom):
    """Perturbed cells: grid pairs ``i:j`` for parallelogram tilings, indices for trapezoid tilings."""
    r = cfg.get("r")
    if r is None:
        raise ConfigError("perturbation step r is required")
    r = float(r)
    spec = cfg.get("cells", "0" if kind == "trapezoid" else "0:0")
    items = spec if isinstance(spec, list) else [s for s in str(spec).replace(" ", ",").split(",") if s]
    if kind == "parallelogram":
        n = parallelogram_grid_size(r)
        out = []
        for k, it in enumerate(items):
            i, j = (it if isinstance(it, (list, tuple)) else str(it).split(":"))
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigError(f"cell {i}:{j} outside the {n}x{n} perturbation grid")
            out.append(parallelogram_cell(r, bg.frame.theta, i, j, k))
        return out
    pert = build_trapezoid_decomposition(dom, r)
    idx = [int(it) for it in items]
    if any(not 0 <= i < len(pert.cells) for i in idx):
        raise ConfigError(f"cell index outside 0..{len(pert.cells) - 1}")
    return [pert.cells[i] for i in idx]


def _gamma0(cfg: dict, bg: Decomposition):
    g = cfg.get("gamma0", [[1.0, 0.0], [0.0, 1.0]])
    arr = np.asarray(g if not isinstance(g, str) else _tensor(g), dtype=float)
    if arr.shape == (2, 2):
        return ConductivityField.constant(bg, arr)
    if arr.shape == (len(bg.cells), 2, 2):
        return ConductivityField(bg, arr)
    raise ConfigError("gamma0 must be one 2x2 tensor or one per background cell")


def _basis(cfg: dict, bg: Decomposition) -> SigmaBasis:
    spacing = cfg.get("spacing")
    per_segment = cfg.get("per_segment")
    if spacing is None and per_segment is None:
        per_segment = 6
    return SigmaBasis.from_decomposition(
        bg, per_segment=None if per_segment is None else int(per_segment),
        spacing=None if spacing is None else float(spacing), gram_mode=cfg.get("gram", "l2"),
    )


def build_problem(cfg: dict, h=None, threads: int = 1) -> tuple[InverseProblem, dict]:
    kind, bg, dom = _background(cfg)
    cells = _cells(cfg, kind, bg, dom)
    mode = "parallelogram" if kind == "parallelogram" else "trapezoid"
    phis = _floats(cfg.get("phis", ",".join(["0.7"] * len(cells)))) if mode == "parallelogram" else ()
    if mode == "parallelogram" and len(phis) != len(cells):
        raise ConfigError("one angle per perturbed cell is required")
    basis = _basis(cfg, bg)
    mesh = make_mesh([bg], basis, float(h if h is not None else cfg.get("h", 0.1)), extra_cells=cells,
                     grading=int(cfg.get("grading", 0)))
    space = PerturbationSpace(cells, mode, phis)
    problem = InverseProblem(ForwardModel(mesh, basis, threads), _gamma0(cfg, bg), space)
    meta = {"kind": kind, "n_nodes": mesh.n_nodes, "n_triangles": mesh.n_triangles,
            "mesh_signature": mesh.signature, "dim": space.dim, "n_neumann": basis.n_neumann}
    return problem, meta


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_tile(args) -> int:
    cfg = _merge(_load_config(args), args, ("kind", "r", "theta", "pairs", "q", "r0"))
    kind = cfg.get("kind", "parallelogram")
    if cfg.get("theta") is None:
        raise ConfigError("--theta is required")
    theta = float(cfg["theta"])
    if kind == "parallelogram":
        if cfg.get("r") is None:
            raise ConfigError("--r is required for parallelogram tilings")
        out = build_parallelogram_decomposition(float(cfg["r"]), theta).to_json()
    elif kind in ("trapezoid", "lateral"):
        dom = build_trapezoid_domain(int(cfg.get("pairs", 1)), theta, float(cfg.get("q", 0.3)))
        if kind == "lateral":
            if cfg.get("r0") is None:
                raise ConfigError("--r0 is required for lateral tilings")
            out = build_lateral_decomposition(dom, float(cfg["r0"])).to_json()
        elif cfg.get("r") is not None:
            out = build_trapezoid_decomposition(dom, float(cfg["r"])).to_json()
        else:
            out = {"kind": "trapezoid-domain", "n_pairs": dom.n_pairs, "theta": dom.theta, "q": dom.q,
                   "outline": dom.outline.tolist(), "sigma": [[list(p), list(q)] for p, q in dom.sigma],
                   "pieces": [{"vertices": v.tolist(), "upright": u, "offset": o} for v, u, o in dom.pieces]}
    else:
        raise ConfigError(f"unknown tiling kind {kind!r}")
    _write(Path(args.out), dumps(out))
    return EXIT_OK


def _problem_cfg(args) -> dict:
    return _merge(_load_config(args), args, PROBLEM_KEYS)


def cmd_forward(args) -> int:
    cfg = _problem_cfg(args)
    problem, meta = build_problem(cfg, threads=args.threads)
    x = np.zeros(problem.dim) if cfg.get("coeffs") is None and args.coeffs is None else np.array(
        _floats(args.coeffs if args.coeffs is not None else cfg["coeffs"]))
    if x.shape != (problem.dim,):
        raise ConfigError(f"expected {problem.dim} coefficients")
    m = problem.forward(x)
    out = Path(args.out)
    _write(out / "nd_map.csv", m.to_csv())
    _write(out / "nd_map.json", dumps({**m.to_json(), "meta": meta, "coeffs": x,
                                       "self_adjointness_defect": m.self_adjointness_defect()}))
    return EXIT_OK


def cmd_frechet(args) -> int:
    cfg = _problem_cfg(args)
    seed = _seed(args, cfg)
    problem, meta = build_problem(cfg, threads=args.threads)
    rng = np.random.default_rng(seed)
    d = np.array(_floats(args.direction)) if args.direction is not None else rng.uniform(-1, 1, problem.dim)
    if d.shape != (problem.dim,):
        raise ConfigError(f"expected {problem.dim} direction coefficients")
    H = problem.tensors(d) - problem.tensors(np.zeros(problem.dim))
    model = problem.model
    gamma = problem.tensors(np.zeros(problem.dim))
    F = model.frechet(gamma, H)
    rem, slope = taylor_remainders(model, gamma, H)
    out = Path(args.out)
    _write(out / "frechet.csv", F.to_csv())
    _write(out / "frechet.json", dumps({**F.to_json(), "meta": meta, "direction": d, "seed": seed,
                                        "taylor_remainders": rem, "taylor_slope": slope}))
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _problem_cfg(args)
    seed = _seed(args, cfg)
    problem, meta = build_problem(cfg, threads=args.threads)
    cert = injectivity_certificate(problem, box=bool(args.box) and problem.space.mode == "parallelogram")
    report = {"certificate": cert.to_json(), "meta": meta, "passes": cert.passes(args.threshold),
              "threshold": args.threshold}
    if args.lipschitz_pairs:
        probe = lipschitz_probe(problem, np.zeros(problem.dim), args.delta, args.lipschitz_pairs, seed, cert)
        report["lipschitz"] = probe.to_json()
    _write(Path(args.out) / "certificate.json", dumps(report))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _merge(_problem_cfg(args), args, ("data_h", "scheme", "max_iters", "mu", "lam", "tol", "contrast"))
    seed = _seed(args, cfg)
    h = float(cfg.get("h", 0.1))
    data_h = float(cfg.get("data_h", h / 2))
    problem, meta = build_problem(cfg, threads=args.threads)
    rng = np.random.default_rng(seed)
    if args.truth is not None or "truth" in cfg:
        truth = np.array(_floats(args.truth if args.truth is not None else cfg["truth"]))
    else:
        c = float(cfg.get("contrast", 0.3))
        truth = rng.uniform(-c, c, problem.dim)
    if truth.shape != (problem.dim,):
        raise ConfigError(f"expected {problem.dim} truth coefficients")
    if data_h == h:
        data_problem = problem
    else:
        data_problem, _ = build_problem(cfg, h=data_h, threads=args.threads)
    data = data_problem.forward(truth)
    schemes = ["landweber", "levenberg-marquardt"] if cfg.get("scheme", "both") == "both" else [cfg["scheme"]]
    out = Path(args.out)
    report = {"meta": meta, "truth": truth, "seed": seed, "data_h": data_h, "runs": {}}
    scale = problem.space.sup_norm(truth)
    for scheme in schemes:
        ic = IterationConfig(
            scheme=scheme, mu=cfg.get("mu"), lam=float(cfg.get("lam", 1e-2)),
            max_iters=int(cfg.get("max_iters", 500 if scheme == "landweber" else 30)),
            tol=float(cfg.get("tol", 1e-10)),
        )
        try:
            x, trace = reconstruct(problem, data, ic, truth=truth, allow_inverse_crime=args.allow_inverse_crime)
        except DivergenceError as exc:
            _write(out / f"trace_{scheme}.csv", exc.trace.to_csv())
            raise
        _write(out / f"trace_{scheme}.csv", trace.to_csv())
        report["runs"][scheme] = {
            "estimate": x, "iterations": len(trace), "final_residual": trace.residual[-1],
            "final_relative_error": problem.sup_distance(x, truth) / scale if scale > 0 else 0.0,
        }
    _write(out / "reconstruction.json", dumps(report))
    return EXIT_OK


def cmd_corner(args) -> int:
    cfg = _merge(_load_config(args), args, ("mode", "theta", "k", "epsilon", "h", "gamma0"))
    mode = cfg.get("mode", "lemma41")
    eps = float(cfg.get("epsilon", 0.3))
    if cfg.get("k") is not None:
        k = float(cfg["k"])
    elif cfg.get("theta") is not None:
        k = 1.0 / math.tan(float(cfg["theta"]))
    else:
        k = 1.0
    out = Path(args.out)
    if mode == "reduction":
        theta = float(cfg.get("theta", math.atan2(1.0, k)))
        red = corner_reduction(_tensor(cfg.get("gamma0", "1,0,1")), theta)
        roots = [] if red.degenerate else determinant_roots(red)
        _write(out / "corner.json", dumps({"mode": mode, "reduction": red.to_json(), "roots": roots}))
        return EXIT_OK
    if cfg.get("h") is None:
        raise ConfigError("--h is required")
    H = parse_tensor_entries(cfg["h"], k)
    if mode == "lemma41":
        dom = CornerDomain(eps, k)
        v = lemma41_extract(H, dom, numeric=args.numeric)
        report = {"mode": mode, "domain": dom.to_json(), **v.to_json()}
        if args.paths:
            for path in ("bottom", "corner"):
                _write(out / f"path_{path}.csv", path_table_csv(H, dom, path))
    elif mode == "lemma42":
        dom = CornerDomain(eps, k, "double")
        v = lemma42_extract(H, dom, numeric=args.numeric)
        report = {"mode": mode, "domain": dom.to_json(), **v.to_json()}
    else:
        raise ConfigError(f"unknown corner mode {mode!r}")
    _write(out / "corner.json", dumps(report))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _merge(_load_config(args), args, ("kind", "gamma0", "theta", "n_grid", "r_values", "r0", "phi", "h"))
    kind = cfg.get("kind", "angle")
    theta = float(cfg.get("theta", math.pi / 2))
    g0 = _tensor(cfg.get("gamma0", "1,0,1"))
    if kind == "angle":
        certify = {"target_h": float(cfg.get("h", 0.1))} if args.certify else None
        table = angle_sweep(g0, theta, int(cfg.get("n_grid", 64)), certify=certify)
    elif kind == "ratio":
        if cfg.get("r_values") is None:
            raise ConfigError("--r-values is required for ratio sweeps")
        table = ratio_sweep(_floats(cfg["r_values"]), float(cfg.get("r0", 1 / math.sqrt(2))), g0, theta,
                            float(cfg.get("phi", 0.7)), certify=bool(args.certify), target_h=float(cfg.get("h", 0.1)))
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    out = Path(args.out)
    _write(out / f"sweep_{kind}.csv", table.to_csv())
    _write(out / f"sweep_{kind}.json", dumps(table.to_json()))
    return EXIT_OK


MC_FLAGS = ("mode", "n_samples", "theta", "r0", "q", "n_cells", "target_h", "grading", "per_segment", "threshold")


def cmd_monte_carlo(args) -> int:
    raw = _load_config(args)
    cfg = _merge(raw, args, MC_FLAGS)
    cfg.pop("seed", None)
    cfg["rng_seed"] = _seed(args, raw)
    cfg["threads"] = args.threads
    if args.no_certify:
        cfg["certify"] = False
    try:
        sc = SampleConfig.from_json(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    outcomes, summary = run_monte_carlo(sc)
    out = Path(args.out)
    _write(out / "samples.csv", outcomes_csv(outcomes))
    _write(out / "summary.json", summary_json(sc, summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for independent solves")
    p.add_argument("-v", "--verbose", action="store_true", help="report progress on stderr")


def _problem_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("problem")
    g.add_argument("--kind", choices=("parallelogram", "trapezoid"), help="background domain kind")
    g.add_argument("--theta", type=float, help="frame angle")
    g.add_argument("--r0", type=float, help="background step")
    g.add_argument("--pairs", type=int, help="trapezoid pairs")
    g.add_argument("--q", type=float, help="trapezoid slide")
    g.add_argument("--r", type=float, help="perturbation step")
    g.add_argument("--cells", help="perturbed cells: i:j,... (parallelogram) or k,... (trapezoid)")
    g.add_argument("--phis", help="comma-separated cell angles (parallelogram mode)")
    g.add_argument("--gamma0", help="background tensor m11,m12,m22")
    g.add_argument("--h", type=float, help="mesh size")
    g.add_argument("--grading", type=int, help="mesh grading levels")
    g.add_argument("--per-segment", dest="per_segment", type=int, help="measurement points per Σ segment")
    g.add_argument("--spacing", type=float, help="measurement point spacing along Σ")
    g.add_argument("--gram", choices=("l2", "fractional"), help="measurement inner product")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eitcorner", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="write a decomposition as JSON")
    _common(p, "output JSON file")
    p.add_argument("--kind", choices=("parallelogram", "trapezoid", "lateral"))
    p.add_argument("--r", type=float, help="tiling step")
    p.add_argument("--r0", type=float, help="lateral strip step")
    p.add_argument("--theta", type=float, help="frame angle")
    p.add_argument("--pairs", type=int, help="trapezoid pairs")
    p.add_argument("--q", type=float, help="trapezoid slide")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("forward", help="localized Neumann-to-Dirichlet map")
    _common(p)
    _problem_flags(p)
    p.add_argument("--coeffs", help="perturbation coefficients (default: background only)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("frechet", help="Fréchet derivative along a perturbation direction")
    _common(p)
    _problem_flags(p)
    p.add_argument("--direction", help="direction coefficients (default: seeded random)")
    p.set_defaults(func=cmd_frechet)

    p = sub.add_parser("certify", help="injectivity certificate of the derivative")
    _common(p)
    _problem_flags(p)
    p.add_argument("--box", action="store_true", help="also compute the exact box minimum")
    p.add_argument("--threshold", type=float, default=1e-8, help="relative pass threshold")
    p.add_argument("--lipschitz-pairs", dest="lipschitz_pairs", type=int, default=0, help="Lipschitz probe pairs")
    p.add_argument("--delta", type=float, default=1e-6, help="Lipschitz probe radius")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("reconstruct", help="Landweber and Levenberg-Marquardt from synthetic data")
    _common(p)
    _problem_flags(p)
    p.add_argument("--data-h", dest="data_h", type=float, help="data mesh size (default h/2)")
    p.add_argument("--scheme", choices=("landweber", "levenberg-marquardt", "both"))
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--mu", type=float, help="Landweber step")
    p.add_argument("--lam", type=float, help="initial LM damping")
    p.add_argument("--tol", type=float, help="residual stopping tolerance")
    p.add_argument("--truth", help="true coefficients (default: seeded uniform in ±contrast)")
    p.add_argument("--contrast", type=float, help="bound of the random truth")
    p.add_argument("--allow-inverse-crime", dest="allow_inverse_crime", action="store_true",
                   help="permit data generated on the inversion mesh")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("corner", help="corner integral asymptotics and verdicts")
    _common(p)
    p.add_argument("--mode", choices=("lemma41", "lemma42", "reduction"))
    p.add_argument("--h", help="perturbation h11,h12,h22; entries may be multiples of k (e.g. 1,-k,-1)")
    p.add_argument("--k", type=float, help="slant k = cot(theta)")
    p.add_argument("--theta", type=float, help="corner angle (used when --k is absent)")
    p.add_argument("--epsilon", type=float, help="corner domain size")
    p.add_argument("--gamma0", help="background tensor for --mode reduction")
    p.add_argument("--numeric", action="store_true", help="add quadrature log-fit slopes")
    p.add_argument("--paths", action="store_true", help="write the approach-path tables")
    p.set_defaults(func=cmd_corner)

    p = sub.add_parser("sweep", help="angle or grid-ratio sweep")
    _common(p)
    p.add_argument("--kind", choices=("angle", "ratio"))
    p.add_argument("--gamma0", help="background tensor m11,m12,m22")
    p.add_argument("--theta", type=float)
    p.add_argument("--n-grid", dest="n_grid", type=int)
    p.add_argument("--r-values", dest="r_values", help="comma-separated perturbation steps")
    p.add_argument("--r0", type=float)
    p.add_argument("--phi", type=float, help="cell angle for ratio sweeps")
    p.add_argument("--h", type=float, help="mesh size for sigma_min")
    p.add_argument("--certify", action="store_true", help="record one-cell sigma_min")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("monte-carlo", help="seeded Monte Carlo over random tilings")
    _common(p)
    p.add_argument("--mode", choices=("parallelogram", "trapezoid"))
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--r0", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--n-cells", dest="n_cells", type=int)
    p.add_argument("--target-h", dest="target_h", type=float)
    p.add_argument("--grading", type=int)
    p.add_argument("--per-segment", dest="per_segment", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-certify", dest="no_certify", action="store_true", help="condition flags only")
    p.set_defaults(func=cmd_monte_carlo)
    return parser


NUMERIC_ERRORS = (np.linalg.LinAlgError, DivergenceError, QuadratureError, NonAdmissibleError, CompatibilityError,
                  FloatingPointError, ArithmeticError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InverseCrimeError as exc:
        print(f"error: {exc} (use --allow-inverse-crime to override)", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        diag = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        try:
            _write(Path(args.out) / "diagnostic.json" if args.command != "tile" else Path(args.out + ".diagnostic.json"),
                   dumps(diag))
        except OSError:
            pass
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        parser.print_usage(sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
