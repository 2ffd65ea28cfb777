"""Command line driver: configuration, staged runs, manifests and reports.

Every subcommand reads one JSON experiment file, validates it against
:data:`CONFIG_SCHEMA` (unknown keys are rejected by name) and writes its
outputs into an artifact directory:

* JSON for summaries, CSV for series and tables, and the flat binary layout
  of :func:`soliton_lab.grid_model.write_field` for fields;
* ``manifest.json`` listing every file in the directory with its SHA-256,
  and per stage the input hash, the output files and the wall time.

Outputs are deterministic: floats are written with ``repr`` (shortest
round-trip form), JSON keys are sorted and every randomized check draws
from ``numpy.random.default_rng(seed)``.  Wall times live only in the
manifest.

Worker counts are capped by ``--jobs``; the ``SOLITON_LAB_THREADS``
environment variable overrides it.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
import traceback
from importlib import resources
from typing import Callable, Dict, List, Optional

import jsonschema
import numpy as np

from .grid_model import (auto_absorber_strength, grid_from_config, l2_norm, model_from_config,
                         thread_count, write_field)

logger = logging.getLogger("soliton_lab")

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT_POS = {"type": "integer", "minimum": 1}


def _block(properties: dict, required=()) -> dict:
    return {"type": "object", "properties": properties, "additionalProperties": False,
            "required": list(required)}


CONFIG_SCHEMA = _block({
    "name": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "grid": _block({
        "kind": {"enum": ["line1d", "radial3d"]},
        "n": _INT_POS,
        "L": _POS,
        "laplacian_order": {"enum": ["spectral", 2, 4, 6]},
    }),
    "model": _block({
        "kappa": _NUM,
        "q": _POS,
        "potential": {"oneOf": [
            {"enum": ["none"]},
            _block({"type": {"const": "none"}}, ["type"]),
            _block({"type": {"const": "gaussian_well"}, "depth": _NUM, "width": _POS},
                   ["type", "depth", "width"]),
            _block({"type": {"const": "table"}, "path": {"type": "string"}}, ["type", "path"]),
        ]},
    }),
    "ground_state": _block({
        "omega0": _POS,
        "omega_range": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
        "samples": {"type": "integer", "minimum": 2},
        "parity": {"enum": [None, "even", "full"]},
    }),
    "spectrum": _block({
        "omegas": {"type": "array", "items": _POS, "minItems": 1},
        "window": {"type": ["array", "null"], "items": _NUM, "minItems": 2, "maxItems": 2},
        "tolerance": {"type": ["number", "null"]},
        "family_half_width": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "family_nodes": {"type": "integer", "minimum": 3},
    }),
    "brackets": _block({
        "n_states": _INT_POS,
        "n_pairs": _INT_POS,
    }),
    "normal_form": _block({
        "r_target": {"type": ["integer", "null"], "minimum": 3},
        "rho_degree": {"type": "integer", "minimum": 0, "maximum": 1},
    }),
    "fgr": _block({
        "epsilon0": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "absorber": {"oneOf": [{"enum": ["auto", None]}, {"type": "number", "minimum": 0}]},
        "h11_samples": {"type": "integer", "minimum": 200},
        "h11_threshold": _POS,
        "zeta": {"type": ["array", "null"], "items": _NUM},
    }),
    "simulate": _block({
        "T": _POS,
        "dt": _POS,
        "scheme": {"enum": ["strang_split", "rk4_full"]},
        "record_every": _INT_POS,
        "z0": {"type": "array", "items": _NUM},
        "theta0": _NUM,
        "absorber_strength": {"oneOf": [{"const": "auto"}, {"type": "number", "minimum": 0}]},
        "absorber_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "fit_window": {"type": ["array", "null"], "items": _NUM, "minItems": 2, "maxItems": 2},
    }),
})

DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "grid": {"kind": "line1d", "n": 512, "L": 40.0},
    "model": {"kappa": 1.0, "q": 1.0, "potential": "none"},
    "ground_state": {"omega0": 1.0, "omega_range": [0.5, 2.0], "samples": 16, "parity": None},
    "spectrum": {"omegas": None, "window": None, "tolerance": None,
                 "family_half_width": None, "family_nodes": 7},
    "brackets": {"n_states": 10, "n_pairs": 50},
    "normal_form": {"r_target": None, "rho_degree": 1},
    "fgr": {"epsilon0": None, "absorber": "auto", "h11_samples": 200, "h11_threshold": 1e-6,
            "zeta": None},
    "simulate": {"T": 100.0, "dt": 0.01, "scheme": "strang_split", "record_every": 100,
                 "z0": [], "theta0": 0.0, "absorber_strength": "auto", "absorber_fraction": 0.2,
                 "fit_window": None},
}


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


def validate_config(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with defaults filled in."""
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<top level>"
        if err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            unknown = sorted(k for k in err.instance if k not in allowed)
            where = ".".join([*(str(p) for p in err.absolute_path), unknown[0]])
            raise ConfigError(f"unknown configuration key '{where}'")
        raise ConfigError(f"invalid value for '{where}': {err.message}")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(copy.deepcopy(value))
        else:
            cfg[key] = copy.deepcopy(value)
    if cfg["spectrum"]["omegas"] is None:
        cfg["spectrum"]["omegas"] = [cfg["ground_state"]["omega0"]]
    return cfg


def load_experiment(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    return validate_config(raw)


def bundled_config_path(name: str) -> str:
    """Path of a configuration shipped with the package (``sech1d.json`` or ``well1d.json``)."""
    return str(resources.files("soliton_lab").joinpath("configs", name))


# ---------------------------------------------------------------------------
# Deterministic writers
# ---------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return [_clean(obj.real), _clean(obj.imag)]
    return obj


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: str, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        col = [r[j] for r in body]
        try:
            out[name] = np.array([float(v) if v not in ("", "true", "false") else
                                  (1.0 if v == "true" else 0.0 if v == "false" else np.nan)
                                  for v in col])
        except ValueError:
            out[name] = np.array(col, dtype=object)
    return out


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(_clean(obj), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Shared computational context
# ---------------------------------------------------------------------------

class Context:
    """Lazily built objects shared between stages of one run."""

    def __init__(self, cfg: dict, out_dir: str, jobs: Optional[int] = None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.jobs = thread_count(jobs)
        self.grid = grid_from_config(cfg)
        self.model = model_from_config(cfg, self.grid)
        self.omega0 = float(cfg["ground_state"]["omega0"])
        self.parity = cfg["ground_state"]["parity"]
        self._cache: Dict[str, object] = {}
        self.results: Dict[str, dict] = {}

    def _get(self, key: str, build: Callable):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def ground_state(self):
        from .ground_state import solve_ground_state
        return self._get("gs", lambda: solve_ground_state(self.model, self.grid, self.omega0,
                                                          parity=self.parity))

    @property
    def operator(self):
        from .linearization import assemble
        return self._get("Hop", lambda: assemble(self.ground_state, self.model))

    @property
    def spectral(self):
        from .linearization import discrete_spectrum
        window = self.cfg["spectrum"]["window"]
        return self._get("spec", lambda: discrete_spectrum(self.operator, self.ground_state, self.model,
                                                           window, parity=self.parity))

    @property
    def family(self):
        from .linearization import SpectralFamily
        sc = self.cfg["spectrum"]
        return self._get("family", lambda: SpectralFamily(self.model, self.omega0,
                                                          half_width=sc["family_half_width"],
                                                          n_nodes=sc["family_nodes"],
                                                          parity=self.parity))

    @property
    def birkhoff(self):
        from .normal_form import birkhoff_drive, expand_hamiltonian

        def build():
            nf = self.cfg["normal_form"]
            spec = self.spectral
            r_target = nf["r_target"] or (2 * spec.N + 1 if spec.m else 3)
            H0 = expand_hamiltonian(self.ground_state, spec, self.model, self.grid,
                                    r_max=r_target, rho_degree=nf["rho_degree"], Hop=self.operator)
            return birkhoff_drive(H0, r_target=r_target)
        return self._get("birkhoff", build)

    def path(self, *parts: str) -> str:
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_ground_state(ctx: Context) -> List[str]:
    from .ground_state import check_H5_H6, continue_family
    gsc = ctx.cfg["ground_state"]
    fam = continue_family(ctx.model, ctx.grid, gsc["omega_range"], gsc["samples"],
                          parity=ctx.parity)
    files = ["ground_state/family.csv"]
    write_csv(ctx.path(files[0]), ["omega", "q", "e", "d", "residual"],
              [(g.omega, g.q, g.e, g.d, g.residual) for g in fam.samples])
    for i, g in enumerate(fam.samples):
        name = f"ground_state/phi_{i:03d}.bin"
        write_field(ctx.path(name), g.phi, ctx.grid)
        files.append(name)
    rep = check_H5_H6(fam, ctx.model, ctx.grid, parity=ctx.parity)
    ctx.results["ground_state"] = {
        "H5": rep.h5, "H6": rep.h6_all, "truncated": fam.truncated, "diagnostic": fam.diagnostic,
        "qprime": list(fam.qprime), "omegas": list(fam.omegas),
        "lplus_lowest": [list(v) for v in rep.lplus_lowest],
        "lminus_phi_residual": rep.lminus_phi_residual,
    }
    files.append("ground_state/hypotheses.json")
    write_json(ctx.path(files[-1]), ctx.results["ground_state"])
    return files


def stage_spectrum(ctx: Context) -> List[str]:
    from .linearization import check_H7_to_H10, spectral_data
    sc = ctx.cfg["spectrum"]
    rows, files, reports = [], ["spectrum/spectrum.csv"], []
    for i, om in enumerate(sc["omegas"]):
        om = float(om)
        if abs(om - ctx.omega0) < 1e-14:
            sd = ctx.spectral
        else:
            sd = spectral_data(ctx.model, om, parity=ctx.parity, window=sc["window"])
        rep = check_H7_to_H10(sd, om, tol=sc["tolerance"])
        reports.append({"omega": om, **rep.as_dict(),
                        "unstable": [list(map(float, (e.real, e.imag))) for e in sd.unstable_eigs]})
        verdicts = (rep.h7, rep.h8, rep.h9, rep.h10)
        if sd.m == 0:
            rows.append((om, "", "", "", *verdicts))
        for j in range(sd.m):
            rows.append((om, j, sd.lambdas[j], sd.N_js[j], *verdicts))
            name = f"spectrum/xi_{i:02d}_{j:02d}.bin"
            write_field(ctx.path(name), sd.xis[j], ctx.grid)
            files.append(name)
    write_csv(ctx.path(files[0]), ["omega", "j", "lambda", "N", "H7", "H8", "H9", "H10"], rows)
    ctx.results["spectrum"] = {"reports": reports}
    files.append("spectrum/spectrum.json")
    write_json(ctx.path(files[-1]), ctx.results["spectrum"])
    return files


def stage_hypotheses(ctx: Context) -> List[str]:
    """Collect the standing-assumption verdicts at omega0 into one table."""
    gs = ctx.results.get("ground_state")
    sp = ctx.results.get("spectrum")
    verdicts = {}
    if gs is not None:
        verdicts["H5"] = gs["H5"]
        verdicts["H6"] = gs["H6"]
    if sp is not None:
        at0 = min(sp["reports"], key=lambda r: abs(r["omega"] - ctx.omega0))
        for key in ("H7", "H8", "H9", "H10"):
            verdicts[key] = at0[key]
        verdicts["lambdas"] = at0["lambdas"]
        verdicts["N_js"] = at0["N_js"]
    ctx.results["hypotheses"] = verdicts
    write_json(ctx.path("hypotheses.json"), verdicts)
    return ["hypotheses.json"]


def stage_brackets(ctx: Context) -> List[str]:
    from .modulation import symplectic_suite
    bc = ctx.cfg["brackets"]
    checks = symplectic_suite(ctx.family, n_states=bc["n_states"], seed=ctx.cfg["seed"],
                              n_pairs=bc["n_pairs"])
    write_csv(ctx.path("brackets/brackets.csv"), ["identity", "max_error", "tolerance", "passed"],
              [(c.name, c.max_error, c.tolerance, c.passed) for c in checks])
    ctx.results["brackets"] = {"all_passed": all(c.passed for c in checks)}
    return ["brackets/brackets.csv"]


def stage_normal_form(ctx: Context) -> List[str]:
    res = ctx.birkhoff
    out = res.as_dict()
    out["lambdas"] = list(ctx.spectral.lambdas)
    out["omega0"] = ctx.omega0
    out["r_target"] = max([r["degree"] for r in out["degrees"]], default=None)
    ctx.results["normal_form"] = out
    write_json(ctx.path("normal_form/normal_form.json"), out)
    return ["normal_form/normal_form.json"]


def stage_fgr(ctx: Context) -> List[str]:
    from .fgr import check_H11, decay_rate, direct_decay_rate, gamma_from_forms, level_forms
    fc = ctx.cfg["fgr"]
    spec = ctx.spectral
    inputs = ctx.birkhoff.fgr_inputs
    out: Dict[str, object] = {"m": spec.m, "lambdas": list(spec.lambdas)}
    if inputs.is_empty() or spec.m == 0:
        out.update({"levels": [], "Gamma": 0.0, "H11": False, "note": "no internal modes"})
    else:
        forms = level_forms(ctx.operator, inputs, fc["epsilon0"], fc["absorber"], ctx.jobs)
        zeta = np.asarray(fc["zeta"] if fc["zeta"] is not None else np.eye(spec.m)[0], complex)
        if zeta.shape != (spec.m,):
            raise ConfigError(f"invalid value for 'fgr.zeta': expected {spec.m} entries")
        res = gamma_from_forms(forms, zeta)
        h11 = check_H11(ctx.operator, spec, inputs, n_samples=fc["h11_samples"],
                        threshold=fc["h11_threshold"], seed=ctx.cfg["seed"], forms=forms)
        out.update(res.as_dict())
        out["zeta"] = [[z.real, z.imag] for z in zeta]
        out["levels"] = [{"r": r, "Gamma": g, "extrapolation_error": 2 * r * lf.error,
                          "converged": lf.converged, "H11": h11.verdict}
                         for r, g, lf in zip(res.r, res.level_gammas, forms)]
        out["H11"] = h11.verdict
        out["H11_report"] = h11.as_dict()
        if spec.m == 1:
            out["Gamma_z"] = decay_rate(res, spec.lambdas)
            if spec.N == 1:
                direct, err = direct_decay_rate(ctx.operator, spec, ctx.model, fc["epsilon0"],
                                                fc["absorber"])
                out["Gamma_z_direct"] = direct
                out["Gamma_z_direct_error"] = err
    ctx.results["fgr"] = out
    write_json(ctx.path("fgr/fgr.json"), out)
    return ["fgr/fgr.json"]


def _sim_config(ctx: Context, record_every: Optional[int] = None):
    from .dynamics import SimConfig
    sc = ctx.cfg["simulate"]
    spec = ctx.spectral
    z0 = np.asarray(sc["z0"], complex)
    if len(z0) not in (0, spec.m):
        raise ConfigError(f"invalid value for 'simulate.z0': expected {spec.m} entries")
    strength = sc["absorber_strength"]
    if strength == "auto":
        if spec.m:
            r = (spec.N + 1) * float(spec.lambdas[0])
            k = math.sqrt(max(r - ctx.omega0, 1e-6))
        else:
            k = math.sqrt(ctx.omega0)
        strength = auto_absorber_strength(k, ctx.grid, sc["absorber_fraction"])
    return SimConfig(T=float(sc["T"]), dt=float(sc["dt"]), scheme=sc["scheme"],
                     record_every=int(record_every or sc["record_every"]),
                     z0=z0 if len(z0) else None, theta0=float(sc["theta0"]),
                     absorber_strength=float(strength), absorber_fraction=float(sc["absorber_fraction"]))


def stage_simulate(ctx: Context, record_every: Optional[int] = None) -> List[str]:
    from .dynamics import evolve, extract_scattering, fit_decay, initial_state
    fam = ctx.family
    simcfg = _sim_config(ctx, record_every)
    rec = evolve(initial_state(fam, simcfg), ctx.model, ctx.grid, simcfg, fam)
    arr = rec.arrays()
    m = fam.m
    t = arr["times"]
    header = ["t", "mass", "absorbed", "energy", "theta", "omega"]
    header += [f"z{j}_{part}" for j in range(m) for part in ("re", "im")]
    header += ["abs_z", "local_decay", "f_norm", "l6_norm", "strichartz_running"]
    Z = arr["z"] if m else np.zeros((len(t), 0))
    zabs = rec.zabs
    rows = []
    for i in range(len(t)):
        zparts = [v for j in range(m) for v in (Z[i, j].real, Z[i, j].imag)]
        rows.append([t[i], arr["mass"][i], arr["absorbed"][i], arr["energy"][i], arr["theta"][i],
                     arr["omega"][i], *zparts, zabs[i], arr["local_decay"][i], arr["f_norm"][i],
                     arr["l6_norm"][i], arr["strichartz_running"][i]])
    write_csv(ctx.path("simulate/record.csv"), header, rows)
    m0 = rec.initial_mass
    budget = np.asarray(arr["mass"]) + np.asarray(arr["absorbed"]) - m0
    energy_drift = np.abs(np.asarray(arr["energy"]) - arr["energy"][0])
    summary = {
        "status": rec.status, "n_records": len(t), "T": simcfg.T, "dt": simcfg.dt,
        "scheme": simcfg.scheme, "absorber_strength": simcfg.absorber_strength,
        "initial_mass": m0,
        "conservation": {"max_mass_error": float(np.max(np.abs(budget))),
                         "max_relative_mass_error": float(np.max(np.abs(budget)) / m0),
                         "max_energy_drift": float(np.max(energy_drift))},
    }
    if m and rec.status == "ok":
        win = ctx.cfg["simulate"]["fit_window"]
        fit = fit_decay(t, zabs, fam.reference.N, tuple(win) if win else None)
        summary["decay_fit"] = {"status": fit.status, "Gamma_fit": fit.Gamma_fit,
                                "exponent_fit": fit.exponent_fit, "r2": fit.r2,
                                "r2_linear": fit.r2_linear, "window": list(fit.window),
                                "expected_exponent": -1.0 / (2 * fam.reference.N)}
        fgr = ctx.results.get("fgr", {})
        if "Gamma_z" in fgr and fit.status == "ok":
            summary["decay_fit"]["Gamma_predicted"] = fgr["Gamma_z"]
            summary["decay_fit"]["relative_difference"] = abs(fit.Gamma_fit - fgr["Gamma_z"]) / fgr["Gamma_z"]
    if rec.status == "ok":
        sc = extract_scattering(rec, fam)
        summary["scattering"] = {"omega_plus": sc.omega_plus, "f_plus_norm": sc.f_plus_norm,
                                 "radiated_mass": sc.radiated_mass,
                                 "relation_residual": sc.relation_residual,
                                 "relative_residual": sc.relative_residual,
                                 "trend_monotone": sc.trend_monotone}
    ctx.results["simulate"] = summary
    write_json(ctx.path("simulate/summary.json"), summary)
    if rec.final_field is not None:
        write_field(ctx.path("simulate/final_field.bin"), rec.final_field[0], ctx.grid)
        return ["simulate/record.csv", "simulate/summary.json", "simulate/final_field.bin"]
    return ["simulate/record.csv", "simulate/summary.json"]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

REPORT_INPUTS = {
    "ground-state": "ground_state/hypotheses.json",
    "spectrum": "spectrum/spectrum.json",
    "hypotheses": "hypotheses.json",
    "normal-form": "normal_form/normal_form.json",
    "fgr": "fgr/fgr.json",
    "simulate": "simulate/summary.json",
}


def _verdict(flag) -> str:
    return "PASS" if flag else "FAIL"


def report(artifact_dir: str) -> List[str]:
    """Write report.txt and the plot-data CSVs; returns the files written (relative paths)."""
    def load(rel):
        p = os.path.join(artifact_dir, rel)
        if not os.path.exists(p):
            return None
        with open(p) as fh:
            return json.load(fh)

    data = {stage: load(rel) for stage, rel in REPORT_INPUTS.items()}
    missing = [s for s, d in data.items() if d is None]
    lines = ["soliton_lab report", ""]
    if missing:
        lines.append("missing stages: " + ", ".join(missing))
        lines.append("")
    hyp = data["hypotheses"] or {}
    gs = data["ground-state"] or {}
    for key in ("H5", "H6"):
        val = hyp.get(key, gs.get(key))
        if val is not None:
            lines.append(f"{key}: {_verdict(val)}")
    for key in ("H7", "H8", "H9", "H10"):
        if key in hyp:
            lines.append(f"{key}: {_verdict(hyp[key])}")
    fgr = data["fgr"]
    if fgr is not None:
        lines.append(f"H11: {_verdict(fgr.get('H11'))}")
    if "lambdas" in hyp:
        lines.append("")
        lines.append("internal eigenvalues (j, lambda_j, N_j):")
        if not hyp["lambdas"]:
            lines.append("  none")
        for j, (lam, N) in enumerate(zip(hyp["lambdas"], hyp["N_js"])):
            lines.append(f"  {j}  {lam:.10g}  {N}")
    if fgr is not None:
        lines.append("")
        gamma = float(fgr.get("Gamma", 0.0))
        lines.append(f"Gamma = {gamma:.10g}")
        if "Gamma_z" in fgr:
            lines.append(f"Gamma_z = {fgr['Gamma_z']:.10g}")
        lines.append(f"Gamma ≥ 0: {_verdict(gamma >= 0.0)}")
    sim = data["simulate"]
    if sim is not None:
        lines.append("")
        lines.append(f"simulation status: {sim['status']}")
        cons = sim["conservation"]
        lines.append(f"max relative mass error (flux corrected): {cons['max_relative_mass_error']:.3e}")
        fit = sim.get("decay_fit")
        if fit is not None:
            lines.append(f"decay fit: status {fit['status']}, exponent {_num(fit['exponent_fit'])}, "
                         f"r2 {_num(fit['r2'])}, Gamma_fit {_num(fit['Gamma_fit'])}")
            if "relative_difference" in fit:
                lines.append(f"Gamma_fit vs prediction: relative difference {fit['relative_difference']:.3e}")
        scat = sim.get("scattering")
        if scat is not None:
            lines.append(f"scattering: omega_plus {scat['omega_plus']:.10g}, "
                         f"relative residual {_num(scat['relative_residual'])}, "
                         f"omega trend monotone {scat['trend_monotone']}")
    written = ["report.txt"]
    with open(os.path.join(artifact_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.makedirs(os.path.join(artifact_dir, "plots"), exist_ok=True)
    rec_path = os.path.join(artifact_dir, "simulate", "record.csv")
    if os.path.exists(rec_path):
        rec = read_csv(rec_path)
        t, za = rec["t"], rec["abs_z"]
        with np.errstate(divide="ignore"):
            inv = np.where(za > 0, 1.0 / np.maximum(za, 1e-300) ** 2, np.nan)
        for name, col, values in (("abs_z", "abs_z", za), ("inv_abs_z2", "inv_abs_z2", inv),
                                  ("local_decay", "local_decay", rec["local_decay"])):
            rel = f"plots/{name}.csv"
            write_csv(os.path.join(artifact_dir, rel), ["t", col],
                      [(ti, (vi if math.isfinite(vi) else None)) for ti, vi in zip(t, values)])
            written.append(rel)
    fam_path = os.path.join(artifact_dir, "ground_state", "family.csv")
    if os.path.exists(fam_path):
        fam = read_csv(fam_path)
        write_csv(os.path.join(artifact_dir, "plots", "q_omega.csv"), ["omega", "q"],
                  zip(fam["omega"], fam["q"]))
        written.append("plots/q_omega.csv")
    return written


def _num(x) -> str:
    return "n/a" if x is None else f"{x:.6g}"


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

STAGES: Dict[str, Callable] = {
    "ground-state": stage_ground_state,
    "spectrum": stage_spectrum,
    "hypotheses": stage_hypotheses,
    "brackets-check": stage_brackets,
    "normal-form": stage_normal_form,
    "fgr": stage_fgr,
    "simulate": stage_simulate,
}

PIPELINE = ["ground-state", "spectrum", "hypotheses", "normal-form", "fgr", "simulate"]

STAGE_CONFIG_BLOCKS = {
    "ground-state": ["grid", "model", "ground_state"],
    "spectrum": ["grid", "model", "ground_state", "spectrum"],
    "hypotheses": ["grid", "model", "ground_state", "spectrum"],
    "brackets-check": ["grid", "model", "ground_state", "spectrum", "brackets", "seed"],
    "normal-form": ["grid", "model", "ground_state", "spectrum", "normal_form"],
    "fgr": ["grid", "model", "ground_state", "spectrum", "normal_form", "fgr", "seed"],
    "simulate": ["grid", "model", "ground_state", "spectrum", "fgr", "simulate"],
}


def write_manifest(out_dir: str, entries: List[dict], config_hash: str) -> None:
    """Manifest listing every file in ``out_dir`` plus per-stage records."""
    files = []
    for root, _, names in os.walk(out_dir):
        for nm in names:
            rel = os.path.relpath(os.path.join(root, nm), out_dir).replace(os.sep, "/")
            if rel == "manifest.json":
                continue
            files.append({"path": rel, "sha256": file_hash(os.path.join(out_dir, rel))})
    files.sort(key=lambda f: f["path"])
    files.append({"path": "manifest.json", "sha256": None})
    write_json(os.path.join(out_dir, "manifest.json"),
               {"config_hash": config_hash, "stages": entries, "files": files})


def run_stages(cfg: dict, out_dir: str, stages: List[str], jobs: Optional[int] = None,
               record_every: Optional[int] = None, with_report: bool = False) -> int:
    """Run ``stages`` in order; a failing stage halts the run with a failure record."""
    os.makedirs(out_dir, exist_ok=True)
    ctx = Context(cfg, out_dir, jobs)
    config_hash = _canonical_hash(cfg)
    entries: List[dict] = []
    upstream: List[str] = []
    status = 0
    for name in stages:
        t0 = time.perf_counter()
        blocks = {b: cfg[b] for b in STAGE_CONFIG_BLOCKS[name]}
        input_hash = _canonical_hash({"stage": name, "config": blocks, "upstream": upstream})
        try:
            fn = STAGES[name]
            files = fn(ctx, record_every) if name == "simulate" else fn(ctx)
        except Exception as exc:   # any stage error halts the run
            logger.error("stage %s failed: %s", name, exc)
            failure = {"stage": name, "error_type": type(exc).__name__, "message": str(exc),
                       "traceback": traceback.format_exc().splitlines()[-6:]}
            write_json(os.path.join(out_dir, "failure.json"), failure)
            entries.append({"stage": name, "status": "failed", "input_hash": input_hash,
                            "outputs": ["failure.json"], "wall_time": time.perf_counter() - t0})
            status = 1
            break
        upstream = upstream + [file_hash(os.path.join(out_dir, f)) for f in files]
        entries.append({"stage": name, "status": "ok", "input_hash": input_hash, "outputs": files,
                        "wall_time": time.perf_counter() - t0})
        logger.info("stage %s done in %.1f s", name, entries[-1]["wall_time"])
    if with_report:
        t0 = time.perf_counter()
        files = report(out_dir)
        entries.append({"stage": "report", "status": "ok",
                        "input_hash": _canonical_hash({"stage": "report", "upstream": upstream}),
                        "outputs": files, "wall_time": time.perf_counter() - t0})
    write_manifest(out_dir, entries, config_hash)
    return status


def _refresh_manifest(out_dir: str, written: List[str]) -> None:
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        write_manifest(out_dir, [{"stage": "report", "status": "ok", "outputs": written}], "")
        return
    with open(path) as fh:
        man = json.load(fh)
    stages = [e for e in man.get("stages", []) if e.get("stage") != "report"]
    stages.append({"stage": "report", "status": "ok", "outputs": written})
    write_manifest(out_dir, stages, man.get("config_hash", ""))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soliton-lab",
                                description="Ground states, spectra, normal forms, radiation damping "
                                            "and simulations for NLS solitons with a potential.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="artifacts"):
        sp.add_argument("--config", required=True,
                        help="experiment JSON, or the name of a bundled config (sech1d.json, well1d.json)")
        sp.add_argument("--out-dir", default=out_default, help="artifact directory")
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker cap (SOLITON_LAB_THREADS overrides)")

    for name, help_text in (("ground-state", "ground-state family, q(omega) and H5/H6"),
                            ("spectrum", "internal eigenvalues and H7-H10"),
                            ("brackets-check", "symplectic identity suite"),
                            ("normal-form", "Birkhoff normal form tables and FGR inputs"),
                            ("fgr", "Fermi golden rule coefficient and H11"),
                            ("simulate", "time evolution with modulation diagnostics"),
                            ("pipeline", "all stages followed by the report")):
        sp = sub.add_parser(name, help=help_text)
        common(sp)
        if name in ("simulate", "pipeline"):
            sp.add_argument("--record-every", type=int, default=None,
                            help="steps between records (overrides the config)")
    rp = sub.add_parser("report", help="summarize an artifact directory")
    rp.add_argument("artifact_dir")
    return p


def _resolve_config(arg: str) -> str:
    if os.path.exists(arg):
        return arg
    bundled = bundled_config_path(arg if arg.endswith(".json") else arg + ".json")
    if os.path.exists(bundled):
        return bundled
    raise ConfigError(f"configuration file {arg!r} not found")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        if not os.path.isdir(args.artifact_dir):
            print(f"error: {args.artifact_dir} is not a directory", file=sys.stderr)
            return 2
        written = report(args.artifact_dir)
        _refresh_manifest(args.artifact_dir, written)
        with open(os.path.join(args.artifact_dir, "report.txt")) as fh:
            sys.stdout.write(fh.read())
        return 0
    try:
        cfg = load_experiment(_resolve_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    record_every = getattr(args, "record_every", None)
    if args.command == "pipeline":
        status = run_stages(cfg, args.out_dir, PIPELINE, args.jobs, record_every, with_report=True)
    else:
        deps = {"hypotheses": ["ground-state", "spectrum"]}
        stages = deps.get(args.command, []) + [args.command]
        status = run_stages(cfg, args.out_dir, stages, args.jobs, record_every)
    if status:
        print(f"failed; see {os.path.join(args.out_dir, 'failure.json')}", file=sys.stderr)
    return status


if __name__ == "__main__":   # pragma: no cover
    sys.exit(main())
