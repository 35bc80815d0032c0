"""``sqhard`` command line.  Exit codes: 0 ok, 1 domain failure, 2 usage or I/O error."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, io, matcher, multivariate as mv, relu, sq
from .flow import FlowError
from .io import FormatError, InstanceFile
from .matcher import NewtonError, StageError
from .piecewise import relu_correlation
from .verify import verify_instance

OK, FAIL, USAGE = 0, 1, 2
DOMAIN_ERRORS = (StageError, NewtonError, FlowError, relu.RoundingError, mv.PackingError,
                 sq.ExperimentError, sq.NotReducibleError)


class Output:
    def __init__(self, quiet: bool, as_json: bool):
        self.quiet, self.as_json = quiet, as_json

    def emit(self, doc: dict, summary: str):
        if self.as_json:
            sys.stdout.write(io.dumps(doc))
        elif not self.quiet:
            print(summary)


def _positive(kind):
    def parse(text):
        val = kind(text)
        if not val > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqhard", description=__doc__)
    p.add_argument("--version", action="version", version=f"sqhard {__version__}")
    p.add_argument("--schema", choices=io.SCHEMA_NAMES, help="print a bundled JSON schema and exit")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--quiet", action="store_true", help="no summary on stdout")
    mode.add_argument("--json", action="store_true", help="print the primary JSON output on stdout")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    c = sub.add_parser("construct-ltf", help="halfspace-hard sign function")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--tol", type=_positive(float), default=1e-10)
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("construct-relu", help="ReLU-hard sign function")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--tol", type=_positive(float), default=1e-10)
    c.add_argument("--delta", type=_positive(float), default=relu.DELTA)
    c.add_argument("--rng-seed", type=int, required=True)
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("verify", help="recompute every invariant of an instance file")
    c.add_argument("instance", type=Path)
    c.add_argument("--report", type=Path)

    c = sub.add_parser("pack", help="near-orthogonal unit vectors")
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--bound", type=_positive(float), required=True)
    c.add_argument("--rng-seed", type=int, required=True)
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("sample", help="labeled samples from a hidden-direction instance")
    c.add_argument("--instance", type=Path, required=True)
    c.add_argument("--pack", type=Path, required=True)
    c.add_argument("--direction-index", type=int, default=0)
    c.add_argument("--n", type=_positive(int), required=True)
    c.add_argument("--rng-seed", type=int, required=True)
    c.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("attack", help="monomial battery (and optional known-direction statistic)")
    c.add_argument("--samples", type=Path, required=True)
    c.add_argument("--degree", type=int, required=True)
    c.add_argument("--alpha", type=_positive(float), default=sq.ALPHA)
    c.add_argument("--pack", type=Path, help="pack holding the direction for the oracle attack")
    c.add_argument("--direction-index", type=int, default=0)
    c.add_argument("--oracle-degree", type=int)
    c.add_argument("--report", type=Path, required=True)

    c = sub.add_parser("sqdim", help="SQ-dimension certificate for a family over a pack")
    c.add_argument("--instance", type=Path, required=True)
    c.add_argument("--pack", type=Path, required=True)
    c.add_argument("--report", type=Path, required=True)

    c = sub.add_parser("run", help="full experiment from a TOML config")
    c.add_argument("--config", type=Path, required=True)
    c.add_argument("--report", type=Path)
    return p


def _instance_file(task, k, f, scale_C, rc, report, argv, seeds) -> InstanceFile:
    return InstanceFile(task, k, f, scale_C, rc, report, io.provenance(argv, seeds))


def cmd_construct_ltf(a, out: Output, argv) -> int:
    if not 1 <= a.k <= matcher.K_CAP:
        raise _Usage(f"--k must lie in [1, {matcher.K_CAP}]")
    f, report = matcher.construct_ltf_hard(a.k, a.tol)
    doc = _instance_file("ltf", a.k, f, 1.0, relu_correlation(f), report, argv, {})
    io.save_instance(a.out, doc)
    out.emit(doc.to_dict(), f"ltf k={a.k}: {f.piece_count} pieces, breakpoints {list(f.breakpoints)}")
    return OK


def cmd_construct_relu(a, out: Output, argv) -> int:
    if not 1 <= a.k <= relu.K_CAP:
        raise _Usage(f"--k must lie in [1, {relu.K_CAP}]")
    inst = relu.construct_relu_hard(a.k, a.tol, a.delta, a.rng_seed)
    doc = _instance_file("relu", a.k, inst.f, inst.scale_C, inst.relu_corr, inst.report, argv,
                         {"rng_seed": a.rng_seed})
    io.save_instance(a.out, doc)
    out.emit(doc.to_dict(), f"relu k={a.k}: {inst.f.piece_count} pieces, relu_corr {inst.relu_corr:.6g}, "
                            f"scale_C {inst.scale_C:.6g}")
    return OK


def cmd_verify(a, out: Output, argv) -> int:
    rep = verify_instance(io.load_instance(a.instance))
    doc = rep.to_dict()
    if a.report:
        io.write_json(a.report, doc, "verification")
    out.emit(doc, rep.render())
    return OK if rep.passed else FAIL


def cmd_pack(a, out: Output, argv) -> int:
    if a.d < 2 or a.m < 1:
        raise _Usage("need --d >= 2 and --m >= 1")
    pack = mv.packing(a.d, a.m, a.bound, a.rng_seed)
    doc = io.pack_to_dict(pack, a.bound, io.provenance(argv, {"rng_seed": a.rng_seed}))
    io.write_json(a.out, doc, "pack")
    out.emit(doc, f"pack d={a.d} m={a.m}: max |<u,v>| = {pack.max_abs_inner:.6g} (bound {a.bound:g}), "
                  f"implied c = {pack.c_param:.4g}")
    return OK


def _direction(pack: mv.PackingSet, index: int):
    if not 0 <= index < pack.m:
        raise _Usage(f"--direction-index must lie in [0, {pack.m - 1}]")
    return pack.vectors[index]


def cmd_sample(a, out: Output, argv) -> int:
    doc = io.load_instance(a.instance)
    v = _direction(io.load_pack(a.pack), a.direction_index)
    inst = mv.HiddenDirectionInstance(doc.f, v, doc.task, doc.scale_C)
    batch = mv.sample_labeled(inst, a.n, a.rng_seed)
    io.write_samples(a.out, batch.x, batch.y)
    out.emit({"n": a.n, "d": inst.d, "out": str(a.out)}, f"wrote {a.n} samples in R^{inst.d} to {a.out}")
    return OK


def cmd_attack(a, out: Output, argv) -> int:
    x, y = io.read_samples(a.samples)
    battery = sq.moment_attack(x, y, a.degree, alpha=a.alpha)
    doc = {"schema_version": io.SCHEMA_VERSION, "moment_attack": battery.to_dict(),
           "provenance": io.provenance(argv)}
    summary = (f"battery degree <= {a.degree}: {battery.count} queries, max |z| = {battery.max_abs_z:.4g}, "
               f"threshold {battery.threshold:.4g}, {'DETECTED' if battery.detected else 'no detection'}")
    if a.pack is not None:
        if a.oracle_degree is None:
            raise _Usage("--oracle-degree is required with --pack")
        v = _direction(io.load_pack(a.pack), a.direction_index)
        z = sq.oracle_attack(x, y, v, a.oracle_degree)
        doc["oracle_attack"] = {"degree": a.oracle_degree, "z": z, "detected": abs(z) > 5.0}
        summary += f"\noracle degree {a.oracle_degree}: z = {z:.4g}"
    io.write_json(a.report, doc, "attack")
    out.emit(doc, summary)
    return OK


def cmd_sqdim(a, out: Output, argv) -> int:
    doc = io.load_instance(a.instance)
    cert = sq.sq_dim_certificate(doc.f, io.load_pack(a.pack))
    ok = cert.rho_max <= 1.0 / cert.s
    rep = {"schema_version": io.SCHEMA_VERSION, **cert.to_dict(), "matrix_property": ok,
           "provenance": io.provenance(argv)}
    io.write_json(a.report, rep, "certificate")
    out.emit(rep, f"m={cert.m} rho_max={cert.rho_max:.4g} s={cert.s} budget={cert.budget:.4g} "
                  f"queries at tolerance {cert.tolerance:.4g}")
    return OK if ok else FAIL


def load_config(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise FormatError(f"{path}: {err}") from err


def cmd_run(a, out: Output, argv) -> int:
    cfg = load_config(a.config)
    base = a.config.parent
    inst = cfg.get("instance", {})
    if "path" in inst:
        inst["path"] = str(base / inst["path"])
    report = sq.run_experiment(cfg)
    io.validate(json.loads(io.dumps(report)), "report")
    if a.report:
        io.write_json(a.report, report, "report")
    rows = "\n".join(f"{'PASS' if r['pass'] else 'FAIL'}  {r['name']}: {r['value']:.4g} vs {r['bound']:.4g}"
                     for r in report["transition"])
    out.emit(report, rows)
    return OK if report["pass"] else FAIL


COMMANDS = {"construct-ltf": cmd_construct_ltf, "construct-relu": cmd_construct_relu, "verify": cmd_verify,
            "pack": cmd_pack, "sample": cmd_sample, "attack": cmd_attack, "sqdim": cmd_sqdim, "run": cmd_run}


class _Usage(Exception):
    pass


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    if a.schema:
        sys.stdout.write(json.dumps(io.schema(a.schema), indent=2) + "\n")
        return OK
    if a.command is None:
        parser.print_usage(sys.stderr)
        return USAGE
    out = Output(a.quiet, a.json)
    try:
        return COMMANDS[a.command](a, out, ["sqhard", *argv])
    except _Usage as err:
        print(f"sqhard {a.command}: {err}", file=sys.stderr)
        return USAGE
    except (FormatError, OSError) as err:
        print(f"sqhard {a.command}: {err}", file=sys.stderr)
        return USAGE
    except DOMAIN_ERRORS as err:
        print(f"sqhard {a.command}: {err}", file=sys.stderr)
        return FAIL
    except ValueError as err:
        print(f"sqhard {a.command}: {err}", file=sys.stderr)
        return FAIL


if __name__ == "__main__":
    sys.exit(main())
