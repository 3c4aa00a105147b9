"""Experiment runner: JSON configs, CSV results, fits, SVG plots and presets.

Exit codes: 0 success, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import constructive_bounds as cb
from .dyn_core import DiscreteSystem
from .entropy_estimators import (
    GrowthFit,
    SampleGrid,
    diameter_cover_count,
    estimate_weak_critical_s,
    fit_growth,
    greedy_cover_count,
    greedy_separated_count,
)
from .model_flows import (
    ActionAngleSystem,
    EllipticNormalForm,
    KroneckerFlow,
    ModelError,
    RotatorPendulum,
    action_angle_system,
    default_pmodel,
    default_pmodel_system,
    elliptic_system,
    kronecker_system,
    planar_system,
    product_system,
    rotator_pendulum_system,
)

__all__ = [
    "ConfigError",
    "OrphanRowError",
    "ExperimentSpec",
    "ResultRow",
    "ExperimentResult",
    "ClaimRow",
    "CSV_HEADER",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_VERIFY",
    "PRESETS",
    "build_system",
    "load_spec",
    "run_experiment",
    "fit_and_plot",
    "render_svg",
    "load_rows",
    "compare_presets",
    "main",
]

CSV_HEADER = ("experiment", "system", "kind", "N", "epsilon", "count", "seconds")
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3
SCHEMA = 1
ESTIMATORS = {"G": greedy_cover_count, "S": greedy_separated_count, "D": diameter_cover_count}


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` and ``line`` locate the problem."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field, self.line = field, line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class OrphanRowError(ValueError):
    """A result row whose experiment hash has no matching summary."""


# ---------------------------------------------------------------------------
# systems


def _action_angle(desc: dict) -> ActionAngleSystem:
    ham = desc.get("hamiltonian", "quadratic")
    bounds = np.asarray(desc.get("bounds", [[1.0, 2.0]]), float)
    n = bounds.shape[0]
    axes = [np.linspace(lo, hi, 33) for lo, hi in bounds]
    S = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=-1)
    if ham == "quadratic":
        c = float(desc.get("coefficient", 1.0))
        return ActionAngleSystem(
            lambda I: 0.5 * c * np.sum(np.asarray(I) ** 2, axis=-1),
            lambda I: c * np.asarray(I, float),
            S, n, "action-angle", {"hamiltonian": ham, "coefficient": c, "bounds": bounds.tolist()},
        )
    if ham == "constant":
        w = np.asarray(desc.get("frequency", [math.sqrt(2) - 1] * n), float)
        if w.size != n:
            raise ConfigError("frequency length must match bounds", "system.frequency")
        return ActionAngleSystem(
            lambda I: np.asarray(I, float) @ w,
            lambda I: np.broadcast_to(w, np.shape(I)).copy(),
            S, n, "action-angle", {"hamiltonian": ham, "frequency": w.tolist(), "bounds": bounds.tolist()},
        )
    raise ConfigError(f"unknown hamiltonian '{ham}' (quadratic, constant)", "system.hamiltonian")


_PMODEL_KEYS = {"p", "u_star", "a", "lambda", "mu_slope", "sigma0", "sigma_slope", "xi_variant", "plateau_time"}


def _pmodel_params(desc: dict, extra=()) -> dict:
    params = {k: v for k, v in desc.items() if k != "kind"}
    unknown = set(params) - _PMODEL_KEYS - set(extra)
    if unknown:
        raise ConfigError(f"unknown p-model parameters {sorted(unknown)}", "system")
    return params


def build_system(desc: dict) -> DiscreteSystem:
    """DiscreteSystem from a descriptor ``{"kind": ..., parameters}``."""
    kind = desc.get("kind")
    try:
        if kind == "kronecker":
            return kronecker_system(KroneckerFlow(tuple(desc.get("frequency", (1.0, math.sqrt(2))))))
        if kind == "action-angle":
            return action_angle_system(_action_angle(desc))
        if kind == "pmodel-planar":
            return planar_system(default_pmodel(**_pmodel_params(desc)))
        if kind == "pmodel-product":
            return product_system(default_pmodel_system(**_pmodel_params(desc, ("alpha0", "alpha_slope"))))
        if kind == "rotator-pendulum":
            return rotator_pendulum_system(RotatorPendulum(float(desc.get("step_size", 1 / 256)), int(desc.get("order", 4))))
        if kind == "elliptic":
            wI, wJ, tw = float(desc.get("omega_I", 1.0)), float(desc.get("omega_J", 0.5)), float(desc.get("twist", 1.0))
            nf = EllipticNormalForm(lambda I, J: wI + 0 * I, lambda I, J: wJ + tw * J, ((0.0, 1.0), (0.0, 1.0)))
            return elliptic_system(nf)
    except (ModelError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "system") from exc
    raise ConfigError(f"unknown system kind '{kind}'", "system.kind")


def _planar_model(desc: dict):
    if desc.get("kind") not in ("pmodel-planar", "pmodel-product"):
        raise ConfigError("certificates need a p-model system", "system.kind")
    return default_pmodel(**_pmodel_params(desc, ("alpha0", "alpha_slope") if desc["kind"] == "pmodel-product" else ()))


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: a system, radii, an N ladder and what to run on them."""

    system: dict
    epsilons: tuple = ()
    ns: tuple = ()
    grid: dict = field(default_factory=lambda: {"factor": 0.25})
    estimators: tuple = ()
    certificates: dict = field(default_factory=dict)
    weak: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)
    claims: tuple = ()
    output_dir: str = "polyent-out"
    seed: int = 0
    name: str = "experiment"

    @classmethod
    def from_dict(cls, data: dict, source: str = "") -> "ExperimentSpec":
        def fail(msg, fld):
            raise ConfigError(msg, fld, _line_of(source, fld.split(".")[-1]))

        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        if data.get("schema", SCHEMA) != SCHEMA:
            fail(f"unsupported schema {data.get('schema')}", "schema")
        known = {f for f in cls.__dataclass_fields__} | {"schema"}
        unknown = sorted(set(data) - known)
        if unknown:
            fail(f"unknown fields {unknown}", unknown[0])
        if not isinstance(data.get("system"), dict) or "kind" not in data["system"]:
            fail("system must be an object with a 'kind'", "system")
        eps = tuple(float(e) for e in data.get("epsilons", ()))
        if any(not 0 < e < 1 for e in eps):
            fail("epsilons must lie in (0, 1)", "epsilons")
        ns = tuple(int(n) for n in data.get("ns", ()))
        if any(n < 1 for n in ns):
            fail("N values must be >= 1", "ns")
        est = tuple(data.get("estimators", ()))
        if any(e not in ESTIMATORS for e in est):
            fail(f"estimators must be among {sorted(ESTIMATORS)}", "estimators")
        if est and (not eps or not ns):
            fail("estimators need epsilons and ns", "estimators")
        certs = dict(data.get("certificates", {}))
        for kind, c in certs.items():
            if kind not in ("lower", "upper"):
                fail(f"unknown certificate '{kind}'", "certificates")
            if "epsilon" not in c or "N" not in c:
                fail("certificate needs 'epsilon' and 'N'", f"certificates.{kind}")
        grid = dict(data.get("grid", {"factor": 0.25}))
        if "factor" in grid and not 0 < float(grid["factor"]) <= 0.25:
            fail("grid factor must lie in (0, 0.25]", "grid.factor")
        spec = cls(
            system=dict(data["system"]), epsilons=eps, ns=ns, grid=grid, estimators=est,
            certificates=certs, weak=dict(data.get("weak", {})), simulate=dict(data.get("simulate", {})),
            claims=tuple(data.get("claims", ())), output_dir=str(data.get("output_dir", "polyent-out")),
            seed=int(data.get("seed", 0)), name=str(data.get("name", "experiment")),
        )
        try:
            build_system(spec.system)
            if certs:
                _planar_model(spec.system)
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], exc.field, _line_of(source, "system")) from exc
        return spec

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA, "name": self.name, "system": self.system, "epsilons": list(self.epsilons),
            "ns": list(self.ns), "grid": self.grid, "estimators": list(self.estimators),
            "certificates": self.certificates, "weak": self.weak, "simulate": self.simulate,
            "claims": list(self.claims), "output_dir": self.output_dir, "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        body = self.to_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def system_label(self) -> str:
        return self.system["kind"]


def _line_of(source: str, key: str) -> int | None:
    if not source:
        return None
    m = re.search(rf'"{re.escape(key)}"\s*:', source)
    return source.count("\n", 0, m.start()) + 1 if m else None


def load_spec(path: str | os.PathLike) -> ExperimentSpec:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, None, exc.lineno) from exc
    return ExperimentSpec.from_dict(data, text)


def make_grid(spec: ExperimentSpec, sys: DiscreteSystem, epsilon: float) -> SampleGrid:
    rule = spec.grid
    dim = sys.space.dim
    factors = rule.get("factors", [rule.get("factor", 0.25)] * dim)
    if len(factors) != dim:
        raise ConfigError(f"grid factors need {dim} entries", "grid.factors")
    bounds = rule.get("real_bounds")
    return SampleGrid.regular(sys.space, tuple(float(f) * epsilon for f in factors), bounds)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    system: str
    kind: str
    N: int
    epsilon: float
    count: int
    seconds: float

    def as_csv(self) -> list:
        return [self.experiment, self.system, self.kind, self.N, repr(float(self.epsilon)), self.count, f"{self.seconds:.3f}"]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list
    fits: dict
    verifications: list
    weak: list
    exit_code: int
    paths: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)


def _cache_dir() -> Path:
    return Path(os.environ.get("POLYENT_CACHE_DIR", Path.home() / ".cache" / "polyent"))


def _cell_count(spec, sys, grid, kind, N, eps, use_cache) -> tuple[int, float]:
    key = hashlib.sha256(json.dumps([sys.key, grid.key, kind, N, eps]).encode()).hexdigest()[:20]
    path = _cache_dir() / spec.hash / f"{key}.json"
    if use_cache and path.exists():
        data = json.loads(path.read_text())
        return int(data["count"]), float(data["seconds"])
    t0 = time.perf_counter()
    rec = ESTIMATORS[kind](sys, grid, N, eps)
    out = (int(rec.count), time.perf_counter() - t0)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"count": out[0], "seconds": out[1]}))
    return out


def _run_estimators(spec, sys, threads, use_cache) -> list:
    cells = [(eps, N) for eps in spec.epsilons for N in spec.ns]
    grids = {eps: make_grid(spec, sys, eps) for eps in spec.epsilons}

    def work(cell):
        eps, N = cell
        return [
            ResultRow(spec.hash, spec.system_label, kind, N, eps, *_cell_count(spec, sys, grids[eps], kind, N, eps, use_cache))
            for kind in spec.estimators
        ]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(work, cells))
    else:
        chunks = [work(c) for c in cells]
    return [row for chunk in chunks for row in chunk]


def _run_certificates(spec, out: Path | None) -> tuple[list, list, list]:
    rows, reports, diagnostics = [], [], []
    m = _planar_model(spec.system)
    for kind, c in sorted(spec.certificates.items()):
        eps = float(c["epsilon"])
        verify = bool(c.get("verify", True))
        plan = None
        for N in [int(n) for n in c["N"]]:
            t0 = time.perf_counter()
            if kind == "lower":
                cert = cb.build_lower_bound_set(m, N, eps)
                report = None
                if verify:
                    cert, report = cb.verify_separated(planar_system(m), cert)
                count = cert.size
                extra = {"required": N * N / 108}
                passed = report is None or (report.passed and count >= N * N / 108)
            else:
                alpha = None
                if spec.system["kind"] == "pmodel-product":
                    alpha = default_pmodel_system(**_pmodel_params(spec.system, ("alpha0", "alpha_slope"))).alpha
                plan = plan or cb.compute_kappa(m, eps, alpha)
                cert = cb.build_upper_bound_cover(m, N, eps, plan)
                diagnostics.extend(cert.diagnostics)
                report = cb.verify_cover(None, None, cert) if verify else None
                count = cert.planar_count
                extra = {"product_count": cert.product_count, "alpha_bound": cert.alpha_bound()}
                passed = report is None or report.passed
            seconds = time.perf_counter() - t0
            rows.append(ResultRow(spec.hash, spec.system_label, kind, N, eps, int(count), seconds))
            entry = {"kind": kind, "N": N, "epsilon": eps, "count": int(count), "verified": verify, "passed": bool(passed), **extra}
            if report is not None:
                entry["report"] = _report_dict(report)
            reports.append(entry)
            if out is not None:
                doc = cert.to_dict()
                doc["verification"] = entry
                (out / f"certificate-{kind}-N{N}.json").write_text(json.dumps(doc, default=_json_default))
    return rows, reports, diagnostics


def _report_dict(report) -> dict:
    d = dict(report.__dict__)
    return json.loads(json.dumps(d, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    return str(obj)


def _run_weak(spec, sys) -> list:
    out = []
    ladder = tuple(spec.weak.get("ladder", (8, 16, 32, 64)))
    for eps in spec.weak.get("epsilons", spec.epsilons):
        grid = make_grid(spec, sys, eps)
        est = estimate_weak_critical_s(sys, grid, eps, ladder)
        out.append({"epsilon": eps, "s_c": est.s_c, "interval": list(est.interval), "flags": list(est.flags)})
    return out


def _simulate(spec, sys, out: Path | None) -> Path | None:
    cfg = spec.simulate
    N = int(cfg.get("N", 64))
    if "points" in cfg:
        pts = np.asarray(cfg["points"], float)
    else:
        rng = np.random.default_rng(spec.seed)
        n = int(cfg.get("n_points", 4))
        cols = [rng.random(n) for _ in range(sys.space.n_angles)]
        cols += [lo + (hi - lo) * rng.random(n) for lo, hi in sys.space.real_bounds]
        pts = np.stack(cols, axis=-1)
    orbits = sys.orbit_block(pts, N)
    if out is None:
        return None
    path = out / "orbits.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point", "t"] + [f"x{j}" for j in range(sys.space.dim)])
        for i in range(orbits.shape[0]):
            for t in range(orbits.shape[1]):
                w.writerow([i, t] + [repr(float(v)) for v in orbits[i, t]])
    return path


def _write_rows(path: Path, rows: Sequence[ResultRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    path.write_text(buf.getvalue())


def load_rows(path: str | os.PathLike, known_hashes: set | None = None) -> list[ResultRow]:
    """Read a results CSV; rows whose experiment hash is not known are rejected."""
    path = Path(path)
    if known_hashes is None:
        known_hashes = set()
        for s in path.parent.glob("summary*.json"):
            known_hashes.add(json.loads(s.read_text())["experiment"])
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            row = ResultRow(rec[0], rec[1], rec[2], int(rec[3]), float(rec[4]), int(rec[5]), float(rec[6]))
            if row.experiment not in known_hashes:
                raise OrphanRowError(f"line {line_no}: experiment {row.experiment} has no summary")
            rows.append(row)
    return rows


def _group(rows) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.system, r.kind, r.epsilon), []).append(r)
    return groups


def run_experiment(spec: ExperimentSpec, threads: int = 1, use_cache: bool = True, write: bool = True) -> ExperimentResult:
    """Run everything the experiment enables; exit code 0 iff all verifications pass."""
    out = Path(spec.output_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sys_ = build_system(spec.system)
    rows = _run_estimators(spec, sys_, threads, use_cache) if spec.estimators else []
    verifications, diagnostics = [], []
    if spec.certificates:
        crow, verifications, diagnostics = _run_certificates(spec, out)
        rows += crow
    weak = _run_weak(spec, sys_) if spec.weak else []
    paths = {}
    if spec.simulate:
        p = _simulate(spec, sys_, out)
        if p is not None:
            paths["orbits"] = str(p)
    fits = {}
    for (system, kind, eps), group in sorted(_group(rows).items()):
        if len({r.N for r in group}) >= 4:
            svg = out / f"fit-{system}-{kind}-{eps:g}.svg" if out is not None else None
            fits[(system, kind, eps)] = fit_and_plot(group, svg)[0]
    code = EXIT_OK if all(v["passed"] for v in verifications) else EXIT_VERIFY
    if out is not None:
        _write_rows(out / "results.csv", rows)
        paths["csv"] = str(out / "results.csv")
        summary = {
            "schema": SCHEMA, "experiment": spec.hash, "spec": spec.to_dict(),
            "fits": [{"system": s, "kind": k, "epsilon": e, **f.__dict__} for (s, k, e), f in fits.items()],
            "verifications": verifications, "weak": weak, "diagnostics": sorted(set(diagnostics)), "exit_code": code,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
        paths["summary"] = str(out / "summary.json")
    return ExperimentResult(spec, rows, fits, verifications, weak, code, paths, sorted(set(diagnostics)))


# ---------------------------------------------------------------------------
# fits and plots


def fit_and_plot(rows: Sequence[ResultRow], svg_path: str | os.PathLike | None = None) -> tuple[GrowthFit, str | None]:
    """Least-squares log-log fit of count against N, optionally drawn as SVG."""
    keys = {(r.system, r.kind, r.epsilon) for r in rows}
    if len(keys) != 1:
        raise ValueError("rows must share system, kind and epsilon")
    if len(rows) < 4:
        raise ValueError("need at least 4 rows")
    rows = sorted(rows, key=lambda r: r.N)
    fit = fit_growth([r.N for r in rows], [r.count for r in rows])
    if svg_path is None:
        return fit, None
    system, kind, eps = keys.pop()
    Path(svg_path).write_text(render_svg([r.N for r in rows], [r.count for r in rows], fit, f"{system} {kind} eps={eps:g}"))
    return fit, str(svg_path)


def render_svg(ns, counts, fit: GrowthFit, title: str) -> str:
    """Self-contained log-log scatter with the fitted line."""
    W, H, pad = 480, 360, 56
    x = np.log10(np.asarray(ns, float))
    y = np.log10(np.asarray(counts, float))
    x0, x1 = x.min() - 0.05, x.max() + 0.05
    y0, y1 = min(y.min(), (fit.slope * np.log(10) * x0 + fit.intercept) / np.log(10)) - 0.1, y.max() + 0.1
    if y1 - y0 < 0.5:
        y0, y1 = y0 - 0.25, y1 + 0.25

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{_esc(title)}</text>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
    ]
    for n in ns:
        v = math.log10(n)
        parts.append(f'<text x="{px(v):.1f}" y="{H - pad + 16}" text-anchor="middle" font-family="sans-serif" font-size="10">{n}</text>')
    for e in range(math.floor(y0), math.ceil(y1) + 1):
        if y0 <= e <= y1:
            parts.append(f'<text x="{pad - 6}" y="{py(e) + 3:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">1e{e}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="11">N (log)</text>')
    parts.append(f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle" font-family="sans-serif" font-size="11">count (log)</text>')
    lx = np.array([x0, x1])
    ly = (fit.slope * lx * np.log(10) + fit.intercept) / np.log(10)
    parts.append(f'<line x1="{px(lx[0]):.1f}" y1="{py(ly[0]):.1f}" x2="{px(lx[1]):.1f}" y2="{py(ly[1]):.1f}" stroke="#c03030" stroke-width="1.5"/>')
    for a, b in zip(x, y):
        parts.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="3.5" fill="#2050a0"/>')
    parts.append(
        f'<text x="{pad + 8}" y="{pad + 4}" font-family="sans-serif" font-size="12">slope {fit.slope:.3f}, R2 {fit.r_squared:.4f}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ---------------------------------------------------------------------------
# presets


_LADDER = (32, 64, 128, 256, 512, 1024)

PRESETS: dict = {
    "csubman-rank1": {
        "name": "csubman-rank1",
        "system": {"kind": "action-angle", "hamiltonian": "quadratic", "bounds": [[1.0, 2.0]]},
        "epsilons": [0.05], "ns": list(_LADDER),
        # the sub-band is invariant, and a union's exponent is the max over its parts
        "grid": {"factors": [0.25, 1 / 4096], "real_bounds": [[1.0, 1.025]]},
        "estimators": ["G"],
        "claims": [
            {"type": "slope", "kind": "G", "epsilon": 0.05, "band": [0.8, 1.2]},
            {"type": "r2", "kind": "G", "epsilon": 0.05, "min": 0.98},
        ],
    },
    "isometry-rank0": {
        "name": "isometry-rank0",
        "system": {"kind": "action-angle", "hamiltonian": "constant", "bounds": [[1.0, 2.0]]},
        "epsilons": [0.05], "ns": list(_LADDER), "grid": {"factor": 0.25}, "estimators": ["G"],
        "claims": [{"type": "slope", "kind": "G", "epsilon": 0.05, "band": [-0.05, 0.1]}],
    },
    "pmodel-lower": {
        "name": "pmodel-lower",
        "system": {"kind": "pmodel-planar"},
        "certificates": {"lower": {"epsilon": 0.1, "N": [36, 108, 216]}},
        "claims": [{"type": "certificate", "kind": "lower"}],
    },
    "pmodel-upper": {
        "name": "pmodel-upper",
        "system": {"kind": "pmodel-planar", "xi_variant": "tame-plateau"},
        "certificates": {"upper": {"epsilon": 0.05, "N": [128, 256, 512, 1024, 2048]}},
        "claims": [
            {"type": "certificate", "kind": "upper"},
            {"type": "slope", "kind": "upper", "epsilon": 0.05, "band": [1.8, 2.2]},
        ],
    },
}


@dataclass(frozen=True)
class ClaimRow:
    preset: str
    claim: str
    value: str
    target: str
    passed: bool


def _evaluate(spec: ExperimentSpec, res: ExperimentResult) -> list[ClaimRow]:
    out = []
    for c in spec.claims:
        t = c["type"]
        if t in ("slope", "r2"):
            fit = res.fits.get((spec.system_label, c["kind"], float(c["epsilon"])))
            if fit is None:
                out.append(ClaimRow(spec.name, f"{t} {c['kind']}", "missing", "", False))
                continue
            if t == "slope":
                lo, hi = c["band"]
                out.append(ClaimRow(spec.name, f"slope {c['kind']}", f"{fit.slope:.3f}", f"[{lo}, {hi}]", lo <= fit.slope <= hi))
            else:
                out.append(ClaimRow(spec.name, f"r2 {c['kind']}", f"{fit.r_squared:.4f}", f">= {c['min']}", fit.r_squared >= c["min"]))
        elif t == "certificate":
            for v in res.verifications:
                if v["kind"] != c["kind"]:
                    continue
                need = f">= {v['required']:.1f} points, verified" if "required" in v else "verified"
                out.append(ClaimRow(spec.name, f"{v['kind']} N={v['N']}", str(v["count"]), need, v["passed"]))
        else:
            out.append(ClaimRow(spec.name, t, "unknown claim", "", False))
    return out


def compare_presets(items: Sequence = tuple(PRESETS), threads: int = 1, use_cache: bool = True, output_dir: str | None = None) -> list[ClaimRow]:
    """Run presets (names, dicts or specs) and evaluate each claim."""
    rows = []
    for item in items:
        if isinstance(item, str):
            if item not in PRESETS:
                raise ConfigError(f"unknown preset '{item}'", "preset")
            spec = ExperimentSpec.from_dict(PRESETS[item])
        elif isinstance(item, dict):
            spec = ExperimentSpec.from_dict(item)
        else:
            spec = item
        if output_dir is not None:
            spec = replace(spec, output_dir=str(Path(output_dir) / spec.name))
        try:
            res = run_experiment(spec, threads, use_cache, write=output_dir is not None)
        except (cb.CertificateError, ModelError, ValueError) as exc:
            rows.append(ClaimRow(spec.name, "run", f"error: {exc}", "completes", False))
            continue
        rows.extend(_evaluate(spec, res))
    return rows


def format_claims(rows: Sequence[ClaimRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "claim", "value", "target", "result"])
    for r in rows:
        w.writerow([r.preset, r.claim, r.value, r.target, "pass" if r.passed else "fail"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--preset", help=f"bundled preset: {', '.join(PRESETS)}")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--no-cache", action="store_true", help="recompute cached counts")
    p = argparse.ArgumentParser(prog="polyent", description="Polynomial entropy experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write orbit segments to CSV")
    sub.add_parser("estimate", parents=[common], help="greedy counts and growth fits")
    sub.add_parser("certify", parents=[common], help="constructive bounds with verification")
    sub.add_parser("weak", parents=[common], help="weak critical exponent")
    rep = sub.add_parser("report", parents=[common], help="fits and plots from a results CSV")
    rep.add_argument("--input", help="results CSV (default: <out>/results.csv)")
    sub.add_parser("presets", parents=[common], help="run bundled presets and check their claims")
    return p


def _spec_from_args(args) -> ExperimentSpec:
    if args.config:
        spec = load_spec(args.config)
    elif args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset '{args.preset}'", "preset")
        spec = ExperimentSpec.from_dict(PRESETS[args.preset])
    else:
        raise ConfigError("give --config or --preset")
    if args.out:
        spec = replace(spec, output_dir=args.out)
    return spec


_SECTIONS = {
    "simulate": ("simulate",),
    "estimate": ("estimators",),
    "certify": ("certificates",),
    "weak": ("weak",),
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "presets":
            names = [args.preset] if args.preset else list(PRESETS)
            rows = compare_presets(names, args.threads, not args.no_cache, args.out)
            table = format_claims(rows)
            sys.stdout.write(table)
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "presets.csv").write_text(table)
            return EXIT_OK if all(r.passed for r in rows) else EXIT_VERIFY
        if args.command == "report":
            src = Path(args.input) if args.input else Path(args.out or ".") / "results.csv"
            rows = load_rows(src)
            out = Path(args.out) if args.out else src.parent
            out.mkdir(parents=True, exist_ok=True)
            for (system, kind, eps), group in sorted(_group(rows).items()):
                if len({r.N for r in group}) < 4:
                    continue
                fit, path = fit_and_plot(group, out / f"fit-{system}-{kind}-{eps:g}.svg")
                print(f"{system},{kind},{eps:g},slope={fit.slope:.4f},r2={fit.r_squared:.4f},{path}")
            return EXIT_OK
        spec = _spec_from_args(args)
        keep = _SECTIONS[args.command]
        cleared = {
            "estimators": () if "estimators" not in keep else spec.estimators,
            "certificates": {} if "certificates" not in keep else spec.certificates,
            "weak": {} if "weak" not in keep else spec.weak,
            "simulate": {} if "simulate" not in keep else spec.simulate,
        }
        if args.command == "weak" and not spec.weak:
            cleared["weak"] = {"epsilons": list(spec.epsilons)}
        if args.command == "simulate" and not spec.simulate:
            cleared["simulate"] = {"N": 64}
        res = run_experiment(replace(spec, **cleared), args.threads, not args.no_cache)
        for key, fit in res.fits.items():
            print(f"{key[0]},{key[1]},{key[2]:g},slope={fit.slope:.4f},r2={fit.r_squared:.4f}")
        for v in res.verifications:
            print(f"{v['kind']},N={v['N']},count={v['count']},{'pass' if v['passed'] else 'FAIL'}")
        for w in res.weak:
            print(f"weak,eps={w['epsilon']:g},s_c={w['s_c']:.3f},flags={'|'.join(w['flags']) or '-'}")
        for d in res.diagnostics:
            print(f"note: {d}", file=sys.stderr)
        return res.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OrphanRowError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except cb.CertificateError as exc:
        print(f"certificate error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    raise SystemExit(main())
