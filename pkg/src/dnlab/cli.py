"""Command-line front door.

Every run writes its outputs plus ``manifest.json`` (files with SHA-256 and
suite verdicts) to ``--out``.  Exit status: 0 all suites pass, 1 a suite
failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import ConfigurationError, DNLabError, ManifestError
from .geometry import (ExponentialShrink, MetricField, UniformShrink, WavyShrink, anisotropic_perturbation,
                       build_annulus, build_disk, build_disk_with_inclusion, composite_metric, nested_family,
                       read_mesh, write_mesh)
from .geometry.mesh import CORE
from .reports import ManifestWriter, summarize

COMMANDS = ("mesh", "dn", "verify-identities", "evolve", "runge", "probe", "stability", "recurrence", "report")
NAMED_MESHES = ("disk", "annulus", "inclusion")

# flags that may also come from the [run] section
_FLAG_KEYS = {"mesh": str, "resolution": int, "seed": int, "out": str, "tol": float, "parallel": int}


class UsageError(DNLabError):
    """Bad command line or configuration (exit status 2)."""


# ------------------------------------------------------------------ config
def load_config(path):
    """Read an INI file; returns ``{section: {key: value}}``.  Empty files are rejected."""
    if not os.path.exists(path):
        raise UsageError(f"config file {path} does not exist")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as C are case-sensitive
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    data = {s: dict(cp[s]) for s in cp.sections()}
    if not any(data.values()):
        raise UsageError(f"config file {path} is empty")
    return data


class Settings:
    """Command-line flags layered over the ``[run]`` section and per-command sections."""

    def __init__(self, args, config):
        self.args = args
        self.config = config or {}

    def get(self, key, default=None, cast=str, section=None):
        v = getattr(self.args, key.replace("-", "_"), None) if section is None else None
        if v is not None:
            return v
        for sec in ([section] if section else []) + ["run"]:
            if sec in self.config and key in self.config[sec]:
                raw = self.config[sec][key]
                try:
                    return _cast(raw, cast)
                except ValueError as exc:
                    raise UsageError(f"[{sec}] {key} = {raw!r} is not a valid {cast.__name__}") from exc
        return default

    def as_dict(self):
        out = {k: self.get(k) for k in _FLAG_KEYS if k != "out"}
        out.update({f"{s}.{k}": v for s, kv in sorted(self.config.items()) for k, v in sorted(kv.items())})
        return out


def _cast(raw, cast):
    if cast is list:
        return [float(x) for x in raw.replace(",", " ").split()]
    if cast is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return cast(raw)


# --------------------------------------------------------------- geometry
def make_mesh(name, resolution):
    """Named reference geometries or a mesh file."""
    if name == "disk":
        return build_disk(1.0, resolution, sigma1_radius=0.5)
    if name == "annulus":
        return build_annulus(0.5, 1.0, resolution, sigma1_radius=0.75)
    if name == "inclusion":
        return build_disk_with_inclusion(1.0, (0.2, 0.0), 0.25, resolution)
    if os.path.exists(name):
        return read_mesh(name)
    raise UsageError(f"unknown mesh {name!r}: use one of {NAMED_MESHES} or a mesh file path")


def perturbed_metric(mesh, g, contrast, direction=((1.0, 0.0), (0.0, 0.0))):
    """``g + contrast * direction`` on the inclusion, or on the core if there is none."""
    from .geometry.mesh import INCLUSION

    if np.any(mesh.regions == INCLUSION):
        return anisotropic_perturbation(mesh, g, np.asarray(direction), contrast)
    h = MetricField(g.tensors + contrast * np.asarray(direction)[None, :, :])
    return composite_metric(g, h, mesh, regions=tuple(sorted(CORE)))


def _theta(mesh, loop="outer"):
    xy = mesh.nodes[mesh.loop(loop)]
    c = xy.mean(axis=0)
    return np.arctan2(xy[:, 1] - c[1], xy[:, 0] - c[0])


# --------------------------------------------------------------- commands
def cmd_mesh(st, mw):
    from .geometry.mesh import INCLUSION

    mesh = make_mesh(st.get("mesh", "disk"), st.get("resolution", 64, int))
    mesh.check()
    write_mesh(mw.path("mesh.tmesh"), mesh)
    mw.suite("mesh", True, "mesh.tmesh", nodes=mesh.n_nodes, triangles=mesh.n_triangles,
             euler=mesh.euler_characteristic, inclusion=bool(np.any(mesh.regions == INCLUSION)))


def cmd_dn(st, mw):
    from .dn import assemble_stiffness, dn_map, write_dn_csv

    mesh = make_mesh(st.get("mesh", "disk"), st.get("resolution", 64, int))
    tol = st.get("tol", 1e-10, float)
    g = MetricField.euclidean(mesh.n_triangles)
    c = st.get("contrast", 0.0, float, section="metric")
    metric = perturbed_metric(mesh, g, c) if c else g
    op = dn_map(assemble_stiffness(mesh, metric), ("outer",))
    write_dn_csv(mw.path("dn.csv"), op)
    sym = op.symmetry_defect()
    rows = float(np.abs(op.form_matrix.sum(axis=1)).max() / np.abs(op.form_matrix).max())
    th = _theta(mesh)
    ray = [float(op.rayleigh(np.cos(k * th))) for k in (1, 2, 4)]
    mw.suite("dn_map", sym <= tol and rows <= tol, "dn.csv", symmetry_defect=sym, constant_defect=rows,
             rayleigh_k1=ray[0], rayleigh_k2=ray[1], rayleigh_k4=ray[2])


def _identity_run(mesh_name, res, seed, tol, trials):
    from .identities import run_suite

    mesh = make_mesh(mesh_name, res)
    g = MetricField.euclidean(mesh.n_triangles)
    h = perturbed_metric(mesh, g, 0.5)
    return run_suite(mesh, g, h, trials=trials, seed=seed, tol=tol)


def cmd_verify_identities(st, mw):
    from .identities import spectral_gap_check

    name = st.get("mesh", "disk")
    res = st.get("resolution", 32, int)
    seed = st.get("seed", 0, int)
    tol = st.get("tol", 1e-9, float)
    trials = st.get("trials", 50, int, section="identities")
    resolutions = [res, 2 * res]
    par = max(1, st.get("parallel", 1, int))
    with ThreadPoolExecutor(max_workers=par) as ex:
        runs = list(ex.map(lambda r: _identity_run(name, r, seed, tol, trials), resolutions))
    reports = [rep for run in runs for rep in run]
    gap = spectral_gap_check(resolution=res, levels=2)
    lines = [r.to_json() for r in reports] + [gap.to_json()]
    mw.write_text("identities.jsonl", "\n".join(lines) + "\n")
    for ident in dict.fromkeys(r.identity for r in reports):
        rs = [r for r in reports if r.identity == ident]
        mw.suite(ident, all(r.passed for r in rs), "identities.jsonl", max_rel=max(r.rel for r in rs),
                 resolutions=[r.resolution for r in rs])
    mw.suite("spectral_gap", gap.passed, "identities.jsonl", gap=min(gap.details["gaps"]), constant=gap.abs)


def cmd_evolve(st, mw):
    from .evolution import level_operators, rayleigh_trace, tautological_residual

    res = st.get("resolution", 64, int)
    levels = st.get("levels", 16, int, section="evolve")
    t_end = st.get("t_end", 0.5, float, section="evolve")
    prof_name = st.get("profile", "exponential", str, section="evolve")
    profiles = {"uniform": UniformShrink(), "exponential": ExponentialShrink(), "wavy": WavyShrink()}
    if prof_name not in profiles:
        raise UsageError(f"unknown profile {prof_name!r}: use one of {sorted(profiles)}")
    base = build_disk(1.0, res)
    fam = nested_family(base, levels, profiles[prof_name], t_end=t_end)
    th = fam.theta
    f = np.cos(th)
    ops = level_operators(fam)
    tr = rayleigh_trace(fam, f, operators=ops, C1=st.get("C1", 1.0, float, section="evolve"))
    tr.write_csv(mw.path("evolution.csv"))
    mw.suite("rayleigh_trace", bool(np.all(np.isfinite(tr.lam))), "evolution.csv",
             lambda0=float(tr.lam[0]), lambda_end=float(tr.lam[-1]), C1=tr.constants["C1"], C2=tr.constants["C2"])
    coarse = nested_family(base, levels // 2, profiles[prof_name], t_end=t_end)
    r1 = tautological_residual(coarse, f)[1].max()
    r2 = tautological_residual(fam, f)[1].max()
    ratio = float(r1 / r2)
    mw.write_text("tautological.json", json.dumps({"levels": [levels // 2, levels], "residual": [r1, r2],
                                                   "ratio": ratio}, sort_keys=True) + "\n")
    ok = 2 * 0.7 <= ratio <= 2 * 1.3 or prof_name == "uniform"
    mw.suite("tautological", ok, "tautological.json", residual=float(r2), halving_ratio=ratio)


def cmd_runge(st, mw):
    from .runge import (adjoint_lower_bound_experiment, fit_alpha, fit_envelope_sigma0, reference_operators,
                        runge_iterate, tent)
    from .errors import FitError

    res = st.get("resolution", 32, int)
    eps_list = st.get("eps", [0.5, 0.3, 0.2], list, section="runge")
    max_iter = st.get("max_iter", 1000, int, section="runge")
    ops = reference_operators(res)
    const = adjoint_lower_bound_experiment(ops)
    const.C = st.get("C", 1.0, float, section="runge")
    f = tent(_theta(ops.split.mesh, "sigma1"))
    eps = min(eps_list)
    tr = runge_iterate(f, eps, const, ops, max_iter=max_iter)
    tr.write_csv(mw.path("runge.csv"))
    const.sigma0 = fit_envelope_sigma0(tr)
    rel = tr.relative_residual
    costs = [tr.cost[int(np.argmax(rel <= e))] if np.any(rel <= e) else float("nan") for e in eps_list]
    try:
        const.alpha = fit_alpha(eps_list, costs, const.sigma0) if not any(map(math.isnan, costs)) else None
    except FitError:
        const.alpha = None
    mw.write_text("constants.json", const.to_json() + "\n")
    mw.suite("runge", tr.converged and tr.monotone(), "runge.csv", iterations=len(tr.mu),
             final_relative_residual=float(rel[-1]), K=const.K, sigma0=const.sigma0, alpha=const.alpha)


def cmd_probe(st, mw):
    from .probe import probe_frequency_ladder

    res = st.get("resolution", 2048, int)
    ks = st.get("k", [50.0, 100.0, 200.0], list, section="probe")
    r0 = st.get("r0", 0.2, float, section="probe")
    mesh = build_disk(0.5, res)
    g = MetricField.euclidean(mesh.n_triangles)
    h = MetricField.constant(mesh.n_triangles, np.diag([4.0, 1.0]))
    ladder = probe_frequency_ladder(g, h, mesh, 0.5, math.pi / 2, r0, ks, loop="outer")
    lines = ["k,ratio,target,deviation,pairing"]
    lines += [",".join(repr(float(x)) for x in (k, e.ratio, e.target, e.deviation, e.pairing))
              for k, e in zip(ks, ladder)]
    mw.write_text("probe.csv", "\n".join(lines) + "\n")
    dev = [e.deviation for e in ladder]
    ok = dev[-1] <= 0.1 and all(b <= a for a, b in zip(dev, dev[1:]))
    mw.suite("probe_ratio", ok, "probe.csv", final_ratio=float(ladder[-1].ratio), final_deviation=float(dev[-1]))


def cmd_stability(st, mw):
    from .probe import fit_json, log_stability_fit, stability_sweep

    res = st.get("resolution", 64, int)
    contrasts = st.get("contrasts", [0.05, 0.1, 0.2, 0.4, 0.8], list, section="stability")
    pipeline = st.get("pipeline", False, bool, section="stability")
    mesh = make_mesh(st.get("mesh", "inclusion"), res)
    g = MetricField.euclidean(mesh.n_triangles)
    curve = stability_sweep(mesh, g, np.diag([1.0, 0.0]), contrasts, pipeline=pipeline)
    curve.write_csv(mw.path("curve.csv"))
    fc = log_stability_fit(curve)
    mw.write_text("fit.json", fit_json(fc) + "\n")
    inc = bool(np.all(np.diff(curve.norms) > 0))
    mw.suite("stability", inc and fc.provenance["inequality_holds"], "curve.csv", C1=fc.C1, C2=fc.C2,
             max_norm=float(curve.norms.max()))


def cmd_recurrence(st, mw):
    from .runge import li_bounds, recurrence_sandwich_check, recurrence_simulate

    sigma0 = st.get("sigma0", 4.0, float, section="recurrence")
    C = st.get("C", 0.1, float, section="recurrence")
    steps = st.get("steps", 100000, int, section="recurrence")
    stride = st.get("stride", 1000, int, section="recurrence")
    rep = recurrence_sandwich_check(sigma0, C, steps)
    sig = recurrence_simulate(sigma0, C, steps).sigma
    lo = li_bounds(sigma0, C, len(sig) - 1)
    idx = sorted(set(range(0, len(sig), stride)) | {len(sig) - 1})
    lines = ["k,sigma,lower,upper"] + [f"{k},{sig[k]!r},{lo[k]!r},{lo[k] + 1!r}" for k in idx]
    mw.write_text("recurrence.csv", "\n".join(lines) + "\n")
    mw.suite("recurrence_sandwich", rep.passed and rep.roundtrip <= 1e-8, "recurrence.csv", steps=rep.steps,
             lower_slack=rep.lower_slack, upper_slack=rep.upper_slack, roundtrip=rep.roundtrip)


RUNNERS = {"mesh": cmd_mesh, "dn": cmd_dn, "verify-identities": cmd_verify_identities, "evolve": cmd_evolve,
           "runge": cmd_runge, "probe": cmd_probe, "stability": cmd_stability, "recurrence": cmd_recurrence}


# ------------------------------------------------------------------ parser
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file ([run] plus per-command sections)")
    common.add_argument("--mesh", help="disk, annulus, inclusion or a mesh file")
    common.add_argument("--resolution", type=int, help="boundary nodes on the outer loop")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--tol", type=float, help="pass/fail tolerance")
    common.add_argument("--parallel", type=int, help="worker threads where a command supports them")
    p = argparse.ArgumentParser(prog="dnlab", description="DN-map numerics on triangulated surfaces.",
                                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "report":
            sp.add_argument("manifest", nargs="?", help="manifest.json or run directory")
            sp.add_argument("--verify", action="store_true", help="re-hash listed files")
    return p


def _validate(st):
    res = st.get("resolution", None, int)
    tol = st.get("tol", None, float)
    par = st.get("parallel", None, int)
    if res is not None and res < 16:
        raise UsageError("--resolution must be at least 16")
    if tol is not None and not tol > 0:
        raise UsageError("--tol must be positive")
    if par is not None and par < 1:
        raise UsageError("--parallel must be at least 1")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        config = load_config(args.config) if args.config else {}
        st = Settings(args, config)
        command = args.command or config.get("run", {}).get("command")
        if command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("no command given")
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command!r}")
        _validate(st)
        if command == "report":
            target = getattr(args, "manifest", None) or st.get("out")
            if not target:
                raise UsageError("report needs a manifest path")
            lines = summarize(target, verify=getattr(args, "verify", False))
            print("\n".join(lines))
            return 0 if all(ln.startswith("PASS") for ln in lines) else 1
        seed = st.get("seed", 0, int)
        np.random.seed(seed % (2 ** 32))
        out = st.get("out", os.path.join("runs", command))
        mw = ManifestWriter(out, command, st.as_dict())
        RUNNERS[command](st, mw)
        path = mw.close()
    except (UsageError, ConfigurationError, ManifestError) as exc:
        print(f"dnlab: error: {exc}", file=sys.stderr)
        return 2
    for line in summarize(path):
        print(line)
    if not mw.passed:
        bad = mw.failing()[0]
        print(f"dnlab: suite {bad['name']} failed; see {os.path.join(out, bad['report'] or 'manifest.json')}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
