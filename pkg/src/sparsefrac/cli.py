"""Command-line front end: ``sparsefrac solve|table|check``.

Config grammar (line oriented, ``#`` or ``;`` start a comment)::

    [section]
    key = value

Sections and keys are those printed by ``sparsefrac --print-config``; every
key is optional and unknown sections or keys are rejected with their line
number.  Lists are comma separated, ``none`` leaves an optional value unset.

[experiment]  preset, sweep (gamma | p), gamma_list, p_list, N_list, N_ref,
              checkpoints, support_tol
[problem]     overrides of the preset: alpha, beta, gamma, p, s, a, N, M, T, lo, hi, pattern
[mm]          L, b, eps0, eps_decay, eps_min, tol, max_outer, max_l
[newton]      inner solver settings
[quadrature]  stiffness quadrature orders
[output]      dir, verbosity

Exit codes: 0 success, 1 configuration error (nothing written), 2 solver did
not converge (partial outputs kept).  SPARSEFRAC_THREADS caps the BLAS
thread count.
"""

from __future__ import annotations

import os

if os.environ.get("SPARSEFRAC_THREADS"):
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["SPARSEFRAC_THREADS"])

import argparse
import sys
from dataclasses import dataclass, field, fields, replace

from .analysis import (MESH_FOOTER, ExperimentSpec, build_problem, convergence_rows, dump_fields,
                       preset_config, run_mesh_study, run_support_sweep, write_table)
from .fracnorm import QuadConfig
from .mm import MmConfig, OuterLoopError, mm_solve
from .subqp import NewtonConfig


class ConfigError(ValueError):
    pass


MM_KEYS = ("L", "b", "eps0", "eps_decay", "eps_min", "tol", "max_outer", "max_l")
OVERRIDE_TYPES = dict(alpha=float, beta=float, gamma=float, p=float, s=float, a=float, N=int, M=int, T=float,
                      lo=float, hi=float, pattern=str)
LIST_KEYS = dict(gamma_list=float, p_list=float, N_list=int, checkpoints=int)


@dataclass
class RunConfig:
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    sweep: str = "gamma"
    mm: MmConfig = field(default_factory=preset_config)
    quad: QuadConfig = field(default_factory=QuadConfig)
    out: str = "out"
    verbosity: int = 1


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind, text):
    if kind is bool:
        return _bool(text)
    if kind is int:
        return int(float(text)) if float(text).is_integer() else int(text)
    return kind(text)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse the key = value grammar; raises ConfigError citing the line."""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            current = line[1:-1].strip()
            if current not in ("experiment", "problem", "mm", "newton", "quadrature", "output"):
                raise ConfigError(f"{where}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{where}: key outside of any section")
        key, value = (x.strip() for x in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, where)
    return _build(sections)


def _build(sections) -> RunConfig:
    def take(sec, allowed):
        out = {}
        for key, (value, where) in sections.get(sec, {}).items():
            if key not in allowed:
                raise ConfigError(f"{where}: unknown key {key!r} in [{sec}]")
            kind = allowed[key]
            try:
                if value.lower() == "none":
                    out[key] = None
                elif kind in ("list_float", "list_int"):
                    conv = float if kind == "list_float" else int
                    out[key] = [_convert(conv, v) for v in value.split(",") if v.strip()]
                else:
                    out[key] = _convert(kind, value)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
        return out

    exp_types = dict(preset=str, sweep=str, N_ref=int, support_tol=float,
                     **{k: "list_float" if t is float else "list_int" for k, t in LIST_KEYS.items()})
    exp = take("experiment", exp_types)
    overrides = take("problem", OVERRIDE_TYPES)
    mm = take("mm", {f.name: f.type_ for f in _fields(MmConfig) if f.name in MM_KEYS})
    newton = take("newton", {f.name: f.type_ for f in _fields(NewtonConfig)})
    quad = take("quadrature", {f.name: f.type_ for f in _fields(QuadConfig)})
    output = take("output", dict(dir=str, verbosity=int))
    try:
        sweep = exp.pop("sweep", None)
        spec = ExperimentSpec(overrides={k: v for k, v in overrides.items()}, **exp)
        if sweep is None:
            sweep = "p" if spec.parameters()["dim"] == 2 else "gamma"
        if sweep not in ("gamma", "p"):
            raise ValueError(f"sweep must be 'gamma' or 'p', got {sweep!r}")
        mmc = preset_config(support_tol=spec.support_tol, **mm)
        mmc = replace(mmc, newton=NewtonConfig(**newton))
        return RunConfig(spec, sweep, mmc, QuadConfig(**quad), output.get("dir") or "out",
                         output.get("verbosity", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


@dataclass
class _Field:
    name: str
    type_: type


def _fields(cls):
    types = {"int": int, "float": float, "bool": bool, "str": str}
    return [_Field(f.name, types.get(f.type if isinstance(f.type, str) else f.type.__name__, float))
            for f in fields(cls) if (f.type if isinstance(f.type, str) else f.type.__name__) in types]


def format_config(cfg: RunConfig) -> str:
    """Effective configuration in the grammar accepted by ``parse_config``."""
    e = cfg.experiment
    params = e.parameters()
    lines = ["[experiment]", f"preset = {e.preset}", f"sweep = {cfg.sweep}"]
    for k in LIST_KEYS:
        lines.append(f"{k} = " + ", ".join(repr(v) for v in getattr(e, k)))
    lines += [f"N_ref = {e.N_ref}", f"support_tol = {e.support_tol!r}", "", "[problem]"]
    for k in OVERRIDE_TYPES:
        v = params.get(k)
        lines.append(f"{k} = {'none' if v is None else (v if isinstance(v, str) else repr(v))}")
    lines += ["", "[mm]"] + [f"{k} = {getattr(cfg.mm, k)!r}" for k in MM_KEYS]
    lines += ["", "[newton]"] + [f"{f.name} = {getattr(cfg.mm.newton, f.name)!r}" for f in _fields(NewtonConfig)]
    lines += ["", "[quadrature]"] + [f"{f.name} = {getattr(cfg.quad, f.name)!r}" for f in _fields(QuadConfig)]
    lines += ["", "[output]", f"dir = {cfg.out}", f"verbosity = {cfg.verbosity}", ""]
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, str(path))


def _say(cfg, level, msg):
    if cfg.verbosity >= level:
        print(msg, flush=True)


def _problem(cfg: RunConfig):
    try:
        return build_problem(cfg.experiment, cfg.quad)
    except ValueError as exc:
        raise ConfigError(f"invalid problem: {exc}") from None


def cmd_solve(cfg: RunConfig, out: str) -> int:
    spec = _problem(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(format_config(cfg))

    def progress(k, state, rec):
        _say(cfg, 2, f"k={k:4d} eps={rec.eps:.2e} L={rec.L:g} phi_eps={rec.phi_eps:.8f} "
                     f"du={rec.du:.2e} dw={rec.dw:.2e}")

    try:
        state, rep = mm_solve(spec, cfg.mm, callback=progress)
        code = 0 if rep.converged else 2
    except OuterLoopError as exc:
        state, rep, code = exc.state, exc.report, 2
    rep.write_csv(os.path.join(out, "report.csv"))
    if state is not None:
        dump_fields(state, spec.mesh, spec.grid, os.path.join(out, "fields"), u_d=spec.u_d)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"converged = {rep.converged}\n")
        fh.write(f"iterations = {len(rep.records)}\n")
        fh.write(f"message = {rep.message}\n")
        for name in ("final_phi0", "final_phi_eps", "final_eps", "support_spacetime", "support_spatial"):
            fh.write(f"{name} = {getattr(rep, name)!r}\n")
        if rep.stationarity is not None:
            for k, v in rep.stationarity.as_dict().items():
                fh.write(f"stationarity.{k} = {v!r}\n")
    _say(cfg, 1, f"{'converged' if code == 0 else 'NOT converged'} after {len(rep.records)} iterations; "
                 f"Phi0 = {rep.final_phi0:.6f}, vanish fraction = {100 * rep.support_spacetime:.1f}% "
                 f"(space-time), {100 * rep.support_spatial:.1f}% (spatial)")
    if rep.message:
        _say(cfg, 1, rep.message)
    return code


def cmd_table(cfg: RunConfig, kind: str, out: str) -> int:
    _problem(cfg)  # fail on a bad configuration before any solve
    show = lambda row: _say(cfg, 2, str(row))
    if kind == "support":
        rows = run_support_sweep(cfg.experiment, cfg.sweep, cfg.mm, cfg.quad, progress=show)
        footer = (f"vanish fractions with |u| <= {cfg.experiment.support_tol:g} * max|u_d|; "
                  "cell convention and nodal (lumped mass) convention")
        ok = all(r.converged for r in rows)
    elif kind == "convergence":
        spec = _problem(cfg)
        _, rep = mm_solve(spec, cfg.mm, keep_history=True)
        rows = convergence_rows(spec, cfg.mm, rep, cfg.experiment.checkpoints)
        footer = "reference = final iterate; phi_eps at the iterate's own eps, errors with phi0"
        ok = rep.converged
    elif kind == "mesh":
        rows = run_mesh_study(cfg.experiment, cfg.mm, cfg.quad, progress=show)
        footer = MESH_FOOTER
        ok = all(r.converged for r in rows)
    else:
        raise ConfigError(f"unknown table kind {kind!r}")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"table_{kind}.csv")
    write_table(rows, path, footer)
    _say(cfg, 1, f"wrote {path} ({len(rows)} rows)")
    return 0 if ok else 2


def cmd_check() -> int:
    from .checks import run_checks

    results = run_checks()
    for name, ok, detail, secs in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} {secs:6.2f}s  {detail}")
    failed = [r[0] for r in results if not r[1]]
    print(f"{len(results) - len(failed)}/{len(results)} invariants hold"
          + (f"; failing: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0


def build_parser():
    ap = argparse.ArgumentParser(prog="sparsefrac", description=__doc__.split("\n\n")[0])
    ap.add_argument("--print-config", action="store_true",
                    help="print the effective configuration (defaults, or the given config) and exit")
    sub = ap.add_subparsers(dest="command")
    p = sub.add_parser("solve", help="run one solve")
    p.add_argument("config", nargs="?")
    p.add_argument("--out")
    p.add_argument("--print-config", action="store_true", dest="print_config_sub")
    t = sub.add_parser("table", help="produce a support, convergence or mesh table")
    t.add_argument("config", nargs="?")
    t.add_argument("--kind", choices=("support", "convergence", "mesh"), required=True)
    t.add_argument("--out")
    t.add_argument("--print-config", action="store_true", dest="print_config_sub")
    sub.add_parser("check", help="run the fast invariant suite")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check":
        return cmd_check()
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.print_config or getattr(args, "print_config_sub", False):
        sys.stdout.write(format_config(cfg))
        return 0
    if args.command is None:
        build_parser().print_help()
        return 1
    out = args.out or cfg.out
    try:
        if args.command == "solve":
            return cmd_solve(cfg, out)
        return cmd_table(cfg, args.kind, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
