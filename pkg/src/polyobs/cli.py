"""Command-line entry point: ``polyobs {discretize,synth,simulate,verify}``.

Exit codes: 0 success, 1 I/O or schema error, 2 singular descriptor /
constant-descriptor requirement / schedule or dimension error, 3 synthesis
infeasible or solver failure, 4 certificate re-check failed, 5 a verification
check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .discretize import discretize_document
from .errors import (CertificateCheckFailed, ModelError, NonConstantE, SimulationError,
                     SingularDescriptorError, SynthesisError)
from .model import load_model, save_model
from .nonlinearity import SLOPE_BOUNDS
from .observer import ObserverGains, Scenario, sidecar_path, simulate
from .sdp import SolverOptions, write_sdpa
from .synthesis import ObjectiveWeights, SynthesisCertificate, build, synthesize
from .verification import SUITES, run_suite

logger = logging.getLogger("polyobs")

OUT_ENV = "POLYOBS_OUT"
DEFAULT_OUT = "polyobs_out"
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}", 1) from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {what} {path}: {exc}", 1) from None


def _load(fn, path, what):
    try:
        return fn(path)
    except FileNotFoundError:
        raise CliError(f"{what} file not found: {path}", 1) from None
    except (SingularDescriptorError, NonConstantE) as exc:
        raise CliError(f"{what}: {exc}", 2) from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, ModelError) as exc:
        raise CliError(f"cannot load {what} {path}: {exc}", 1) from None


def _out_dir(args):
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", 1) from None
    return out


def write_manifest(out, command, inputs, outputs, options, seed=None):
    doc = {
        "command": command,
        "toolkit_version": __version__,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
        "options": options,
        "seed": seed,
    }
    path = Path(out) / MANIFEST
    # One manifest per directory: earlier runs into the same directory are kept.
    if path.exists():
        try:
            prev = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            prev = None
        if isinstance(prev, dict):
            doc["previous"] = prev.pop("previous", []) + [prev]
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def check_manifest(manifest_path, files):
    """Every given file named in the manifest must match its recorded hash."""
    doc = _read_json(manifest_path, "manifest")
    recorded = {**{Path(k).name: v for k, v in doc.get("inputs", {}).items()}, **doc.get("outputs", {})}
    for f in files:
        name = Path(f).name
        if name in recorded and recorded[name] != sha256(f):
            raise CliError(f"{f} does not match the hash recorded in {manifest_path}", 1)


# --- commands ---------------------------------------------------------------------

def cmd_discretize(args):
    doc = _read_json(args.model, "model")
    try:
        system, margins = discretize_document(doc, args.ts)
    except SingularDescriptorError as exc:
        raise CliError(str(exc), 2) from None
    except ModelError as exc:
        raise CliError(str(exc), 1) from None
    out = _out_dir(args)
    path = out / "model.json"
    save_model(system, path)
    for i, m in enumerate(margins):
        print(f"vertex {i + 1}: sigma_min(E_c - theta A_c) = {m:.6g}")
    print(f"wrote {path}")
    write_manifest(out, "discretize", [args.model], [path], {"ts": args.ts if args.ts is not None else doc.get("T_s")})
    return 0


def _summary(system, cert):
    st = cert.stats
    lines = [
        f"variant          {cert.variant}",
        f"status           {st.get('status')}",
        f"kappa_v          {cert.kappa_v:.6g}",
        f"kappa_w          {cert.kappa_w:.6g}",
        f"kappa_psi        {cert.kappa_psi:.6g}",
        f"objective        {st.get('objective'):.6g}",
        f"epsilon          {cert.epsilon:g}",
        f"blocks           {st.get('num_blocks')} (variables {st.get('num_vars')})",
        f"min block margin {st.get('min_block_margin'):.3e}",
        f"iterations       {st.get('iterations')}",
        f"wall time        {st.get('wall_time_s'):.2f} s",
        f"sigma_lower      {st.get('sigma_lower'):.6g}",
    ]
    if system.nonlinearity in SLOPE_BOUNDS:
        lo, hi = SLOPE_BOUNDS[system.nonlinearity]
        lines.append(f"nonlinearity     {system.nonlinearity} (slope in [{lo:g}, {hi:g}])")
    return "\n".join(lines) + "\n"


def cmd_synth(args):
    system = _load(load_model, args.model, "model")
    try:
        weights = ObjectiveWeights.parse(args.weights).normalized()
    except (ModelError, ValueError) as exc:
        raise CliError(f"bad --weights: {exc}", 1) from None
    kw = dict(constant_parameter=args.constant_parameter, diagonal_multipliers=args.diagonal_multipliers)
    opts = SolverOptions(tol=args.tol, max_iter=args.max_iter)
    try:
        built = build(system, args.variant, weights, args.epsilon, **kw) if args.dump_sdpa else None
        cert = synthesize(system, args.variant, weights, args.epsilon, opts, **kw)
    except NonConstantE as exc:
        raise CliError(str(exc), 2) from None
    except CertificateCheckFailed as exc:
        raise CliError(f"certificate check failed: {exc}", 4) from None
    except SynthesisError as exc:
        raise CliError(f"synthesis failed ({exc.status}): {exc}", 3) from None
    except ModelError as exc:
        raise CliError(str(exc), 1) from None
    out = _out_dir(args)
    outputs = []
    if built is not None:
        outputs.append(out / "problem.dat-s")
        write_sdpa(built.problem, outputs[-1])
    cert_path, summary_path = out / "certificate.json", out / "summary.txt"
    cert.save(cert_path)
    text = _summary(system, cert)
    summary_path.write_text(text, encoding="utf-8")
    print(text, end="")
    write_manifest(out, "synth", [args.model], outputs + [cert_path, summary_path],
                   {"variant": args.variant, "weights": weights.as_array().tolist(), "epsilon": args.epsilon,
                    "tol": args.tol, "max_iter": args.max_iter, **kw})
    return 0


def cmd_simulate(args):
    system = _load(load_model, args.model, "model")
    cert = _load(SynthesisCertificate.load, args.certificate, "certificate")
    scenario = _load(Scenario.load, args.scenario, "scenario")
    overrides = {k: v for k, v in (("horizon", args.horizon), ("seed", args.seed)) if v is not None}
    try:
        scenario = replace(scenario, **overrides)
        gains = ObserverGains(cert)
        traj = simulate(system, gains, scenario)
    except CertificateCheckFailed as exc:
        raise CliError(f"certificate unusable: {exc}", 4) from None
    except (ModelError, SimulationError) as exc:
        raise CliError(str(exc), 2) from None
    out = _out_dir(args)
    csv_path, meta_path = traj.save(out / "trajectory.csv")
    series_path = out / "plot_series.json"
    series_path.write_text(json.dumps(traj.plot_series()) + "\n", encoding="utf-8")
    e = np.linalg.norm(traj.e, axis=1)
    print(f"steps {len(traj) - 1}, final |e| = {e[-1]:.3e}, max |e| = {e.max():.3e}")
    print(f"wrote {csv_path}")
    write_manifest(out, "simulate", [args.model, args.certificate, args.scenario],
                   [csv_path, meta_path, series_path], {"horizon": scenario.horizon}, seed=scenario.seed)
    return 0


def cmd_verify(args):
    from .observer import Trajectory

    inputs = [args.model, args.certificate] + ([args.trajectory] if args.trajectory else [])
    for f in inputs:
        if not Path(f).exists():
            raise CliError(f"file not found: {f}", 1)
    if args.manifest:
        extra = [sidecar_path(args.trajectory)] if args.trajectory and sidecar_path(args.trajectory).exists() else []
        check_manifest(args.manifest, inputs + extra)
    system = _load(load_model, args.model, "model")
    cert = _load(SynthesisCertificate.load, args.certificate, "certificate")
    traj = _load(Trajectory.load, args.trajectory, "trajectory") if args.trajectory else None
    if args.suite == "trajectory" and traj is None:
        raise CliError("--suite trajectory needs a trajectory file", 1)
    try:
        report = run_suite(args.suite, system, cert, traj, seed=args.seed)
    except NonConstantE as exc:
        raise CliError(str(exc), 2) from None
    except ModelError as exc:
        raise CliError(str(exc), 1) from None
    out = _out_dir(args)
    path = out / "report.json"
    report.save(path)
    for r in report.reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  (worst margin {r.worst_margin:.3e})")
    write_manifest(out, "verify", inputs, [path], {"suite": args.suite}, seed=args.seed)
    return report.exit_code


# --- parser -----------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="polyobs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def out_flag(p):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    p = sub.add_parser("discretize", help="Tustin-discretize a continuous-time model")
    p.add_argument("model")
    p.add_argument("--ts", type=float, help="sampling period in seconds (default: the model's T_s)")
    out_flag(p)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("synth", help="synthesize observer gains")
    p.add_argument("model")
    p.add_argument("--variant", choices=("thm1", "thm2"), default="thm1")
    p.add_argument("--weights", default="1,5,0.01", help="c_v,c_w,c_psi (normalized internally)")
    p.add_argument("--epsilon", type=float, default=1e-6, help="strict LMI margin")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--constant-parameter", action="store_true", help="only the j = i blocks")
    p.add_argument("--diagonal-multipliers", action="store_true")
    p.add_argument("--dump-sdpa", action="store_true", help="also write the SDP in SDPA sparse format")
    out_flag(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="simulate plant and observer")
    p.add_argument("model")
    p.add_argument("certificate")
    p.add_argument("scenario")
    p.add_argument("--horizon", type=int, help="override the scenario horizon")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    out_flag(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run verification checks")
    p.add_argument("model")
    p.add_argument("certificate")
    p.add_argument("trajectory", nargs="?")
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--manifest", help="manifest whose recorded hashes the inputs must match")
    p.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    out_flag(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
