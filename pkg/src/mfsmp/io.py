"""Run configuration, CSV artifacts and reproducibility manifests."""

from __future__ import annotations

import copy
import csv
import json
import os
from pathlib import Path

import numpy as np

from . import __version__

OUTPUT_ENV = "MFSMP_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# configuration schema

DEFAULTS = {
    "model": {"name": "lq", "params": {}},
    "grid": {"T": 1.0, "N_t": 50},
    "N_p": 10_000,
    "seed": 0,
    "workers": 1,
    "policy": {"features": ["1", "t", "Y"], "theta0": "zeros", "file": None},
    "constraint": {"type": "box", "lower": [-5.0], "upper": [5.0]},
    "basis": {"degree": 2},
    "picard": {"max_sweeps": 25, "damping": 0.5, "tol": 1e-6},
    "optimizer": {"max_iters": 50, "step0": 1.0, "beta": 0.5, "c1": 1e-4, "grad_tol": 1e-6,
                  "residual_tol": None, "max_backtracks": 30, "max_failures": 5},
    "gradient_check": {"eps": 1e-3},
    "verify": {"scope": None},
    "export": {"particles": 200},
    "output_dir": "mfsmp_out",
}

# section -> allowed keys (None: scalar key)
_SECTIONS = {k: (set(v) if isinstance(v, dict) and k != "constraint" else None)
             for k, v in DEFAULTS.items()}
_CONSTRAINT_KEYS = {"box": {"type", "lower", "upper"}, "ball": {"type", "radius", "center"}}


def _num(value, key, *, integer=False, positive=False, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not np.isfinite(value):
        raise ConfigError(f"{key}: must be finite")
    if positive and not value > 0:
        raise ConfigError(f"{key}: must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def resolve_config(raw: dict) -> dict:
    """Validate a configuration dict and fill in defaults; never mutates ``raw``."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    raw = copy.deepcopy(raw)
    if "tool" in raw and "config" in raw:  # a manifest from a previous run
        raw = raw["config"]
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"{key}: unknown key")
        allowed = _SECTIONS[key]
        if key == "constraint":
            if not isinstance(val, dict):
                raise ConfigError("constraint: expected an object")
            kind = val.get("type", "box")
            if kind not in _CONSTRAINT_KEYS:
                raise ConfigError(f"constraint.type: unknown constraint type {kind!r}")
            for sub in val:
                if sub not in _CONSTRAINT_KEYS[kind]:
                    raise ConfigError(f"constraint.{sub}: unknown key")
            cfg[key] = dict(val, type=kind)
        elif allowed is None:
            cfg[key] = val
        else:
            if not isinstance(val, dict):
                raise ConfigError(f"{key}: expected an object")
            for sub, sv in val.items():
                if sub not in allowed:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                cfg[key][sub] = sv
    _check(cfg)
    return cfg


def _check(cfg):
    from .model import BUILTIN_MODELS

    m = cfg["model"]
    if m["name"] not in BUILTIN_MODELS:
        raise ConfigError(f"model.name: unknown model {m['name']!r}")
    if not isinstance(m["params"], dict):
        raise ConfigError("model.params: expected an object")
    for k, v in m["params"].items():
        _num(v, f"model.params.{k}")
    cfg["grid"]["T"] = _num(cfg["grid"]["T"], "grid.T", positive=True)
    cfg["grid"]["N_t"] = _num(cfg["grid"]["N_t"], "grid.N_t", integer=True, minimum=1)
    cfg["N_p"] = _num(cfg["N_p"], "N_p", integer=True, minimum=2)
    cfg["seed"] = _num(cfg["seed"], "seed", integer=True, minimum=0)
    cfg["workers"] = _num(cfg["workers"], "workers", integer=True, minimum=1)
    pol = cfg["policy"]
    if not isinstance(pol["features"], list) or not pol["features"]:
        raise ConfigError("policy.features: expected a non-empty list of feature names")
    from .forward import TimeGrid, expand_features
    try:
        expand_features(pol["features"], TimeGrid(1.0, 1))
    except ValueError as exc:
        raise ConfigError(f"policy.features: {exc}") from None
    th = pol["theta0"]
    if th != "zeros":
        if not isinstance(th, list):
            raise ConfigError("policy.theta0: expected \"zeros\" or a list of numbers")
        pol["theta0"] = [_num(v, "policy.theta0") for v in th]
    if pol["file"] is not None and not isinstance(pol["file"], str):
        raise ConfigError("policy.file: expected a path string")
    c = cfg["constraint"]
    if c["type"] == "box":
        for side in ("lower", "upper"):
            v = c.get(side, DEFAULTS["constraint"][side])
            v = v if isinstance(v, list) else [v]
            c[side] = [_num(x, f"constraint.{side}") for x in v]
        if len(c["lower"]) != len(c["upper"]):
            raise ConfigError("constraint.lower: length differs from constraint.upper")
        if any(lo > up for lo, up in zip(c["lower"], c["upper"])):
            raise ConfigError("constraint.lower: exceeds constraint.upper")
    else:
        if "radius" not in c:
            raise ConfigError("constraint.radius: required for a ball")
        c["radius"] = _num(c["radius"], "constraint.radius", minimum=0.0)
        if c.get("center") is not None:
            c["center"] = [_num(x, "constraint.center") for x in c["center"]]
    cfg["basis"]["degree"] = _num(cfg["basis"]["degree"], "basis.degree", integer=True, minimum=0)
    pc = cfg["picard"]
    pc["max_sweeps"] = _num(pc["max_sweeps"], "picard.max_sweeps", integer=True, minimum=1)
    pc["damping"] = _num(pc["damping"], "picard.damping", positive=True)
    if pc["damping"] > 1:
        raise ConfigError("picard.damping: must lie in (0, 1]")
    pc["tol"] = _num(pc["tol"], "picard.tol", positive=True)
    oc = cfg["optimizer"]
    oc["max_iters"] = _num(oc["max_iters"], "optimizer.max_iters", integer=True, minimum=1)
    oc["max_backtracks"] = _num(oc["max_backtracks"], "optimizer.max_backtracks", integer=True,
                                minimum=0)
    oc["max_failures"] = _num(oc["max_failures"], "optimizer.max_failures", integer=True, minimum=1)
    for k in ("step0", "grad_tol"):
        oc[k] = _num(oc[k], f"optimizer.{k}", positive=True)
    oc["residual_tol"] = _num(oc["residual_tol"], "optimizer.residual_tol", positive=True,
                              allow_none=True)
    for k in ("beta", "c1"):
        oc[k] = _num(oc[k], f"optimizer.{k}", positive=True)
        if oc[k] >= 1:
            raise ConfigError(f"optimizer.{k}: must lie in (0, 1)")
    cfg["gradient_check"]["eps"] = _num(cfg["gradient_check"]["eps"], "gradient_check.eps",
                                        positive=True)
    sc = cfg["verify"]["scope"]
    if sc is not None and not (isinstance(sc, list) and all(isinstance(s, str) for s in sc)):
        raise ConfigError("verify.scope: expected a list of module names or null")
    cfg["export"]["particles"] = _num(cfg["export"]["particles"], "export.particles",
                                      integer=True, minimum=0)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("output_dir: expected a non-empty path string")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return resolve_config(raw)


def output_dir(cfg, override=None) -> Path:
    out = override or os.environ.get(OUTPUT_ENV) or cfg["output_dir"]
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(path, cfg, subcommand, extra=None):
    doc = {"tool": "mfsmp", "version": __version__, "subcommand": subcommand, "config": cfg}
    if extra:
        doc["results"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# CSV artifacts


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def _cols(prefix, d):
    return [prefix] if d == 1 else [f"{prefix}{i + 1}" for i in range(d)]


def _take(N_p, limit):
    return range(N_p if limit is None else min(N_p, limit))


def export_forward(path, fwd, particles=None):
    n, k = fwd.x.shape[2], fwd.u.shape[2]
    header = ["particle", "node", "t"] + _cols("x", n) + ["rho"] + _cols("u", k) + ["W", "Y"]
    W, t = fwd.W, fwd.grid.t
    rows = ([j, i, t[i], *fwd.x[j, i], fwd.rho[j, i], *fwd.u[j, i], W[j, i], fwd.Y[j, i]]
            for j in _take(fwd.N_p, particles) for i in range(fwd.grid.N_t + 1))
    write_csv(path, header, rows)


def export_backward(path, fwd, bwd, particles=None):
    m = bwd.y.shape[2]
    header = ["particle", "node", "t"] + _cols("y", m) + _cols("z1_", m) + _cols("z2_", m)
    t = fwd.grid.t
    rows = ([j, i, t[i], *bwd.y[j, i], *bwd.z1[j, i], *bwd.z2[j, i]]
            for j in _take(fwd.N_p, particles) for i in range(fwd.grid.N_t + 1))
    write_csv(path, header, rows)


def export_adjoint(path, fwd, adj, particles=None):
    n, m = adj.p.shape[2], adj.k.shape[2]
    header = (["particle", "node", "t"] + _cols("p", n) + _cols("q1_", n) + _cols("q2_", n)
              + _cols("k", m) + ["r", "R1", "R2"])
    t = fwd.grid.t
    rows = ([j, i, t[i], *adj.p[j, i], *adj.q1[j, i], *adj.q2[j, i], *adj.k[j, i],
             adj.r[j, i], adj.R1[j, i], adj.R2[j, i]]
            for j in _take(fwd.N_p, particles) for i in range(fwd.grid.N_t + 1))
    write_csv(path, header, rows)


def export_picard(path, trace):
    write_csv(path, ["sweep", "residual"], ((i + 1, float(r)) for i, r in enumerate(trace)))


def export_gradient(path, fwd, gf, residual):
    """Node-wise particle mean of the conditional gradient and the normalised residual."""
    k = gf.G.shape[2]
    t = fwd.grid.t
    G = gf.G.mean(axis=0)
    rows = ([i, t[i], *G[i], residual[i]] for i in range(fwd.grid.N_t))
    write_csv(path, ["node", "t"] + _cols("G", k) + ["residual"], rows)


def export_trace(path, trace):
    write_csv(path, ["iter", "J", "se", "grad_norm", "step", "residual", "seconds"],
              trace.as_rows())


def save_policy(path, policy):
    with open(path, "w") as fh:
        json.dump(policy.to_dict(), fh, indent=2)
        fh.write("\n")


def load_policy(path):
    from .forward import ControlPolicy
    from .model import constraint_from_dict

    with open(path) as fh:
        doc = json.load(fh)
    U = constraint_from_dict(doc["constraint"], len(doc["constraint"].get("lower", [0]))
                             if doc["constraint"]["type"] == "box"
                             else len(doc["constraint"]["center"]))
    return ControlPolicy(tuple(doc["features"]), np.array(doc["theta"]), U)
