"""Command-line entry point (``fedglasso``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .data import GroupMeta, load_dataset, make_partition, read_sidecar, save_dataset, shard_dataset
from .distributed import SolveAborted
from .genio import GenotypeParseError, qc_filter, read_genotype_file, read_response, to_design
from .lqm import LqmError, Master, SiteThread, TcpTransport, in_process_master
from .path import run_path
from .pathcore import PathModels
from .selection import (SelectionError, frequency_select, generate_synthetic, stability_select,
                        write_ranking_csv)
from .solvers import SolveOptions

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_PROTOCOL = 0, 2, 3, 4

log = logging.getLogger("fedglasso")


class ConfigError(Exception):
    pass


_QUIET = False


def _emit(event, force=False):
    if _QUIET and not force:
        return
    sys.stderr.write(json.dumps(event, default=float) + "\n")
    sys.stderr.flush()


def _progress(args):
    return None if args.quiet else _emit


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    data = generate_synthetic(args.n, args.p, args.group_size, args.active, args.snr, args.seed)
    meta = GroupMeta(list(data.partition.sizes), "sqrt_size",
                     extra={"planted_groups": data.planted, "snr": args.snr, "seed": args.seed})
    save_dataset(args.out, data.design, meta)
    _emit({"event": "synth", "out": str(args.out), "n": args.n, "p": args.p, "planted": data.planted})
    return EXIT_OK


def cmd_ingest(args):
    geno = read_genotype_file(args.vcf)
    pheno = args.response or Path(str(args.vcf) + ".pheno")
    if not Path(pheno).exists():
        raise ConfigError(f"no phenotype file (looked for {pheno}); pass --response")
    y = read_response(pheno, geno.samples)
    qc = qc_filter(geno, args.maf, args.gq)
    if qc.values.shape[1] == 0:
        raise ConfigError("quality control removed every SNP")
    design, part = to_design(qc, y, args.group_size, args.weight_rule)
    meta = GroupMeta(list(part.sizes), args.weight_rule, feature_ids=qc.genotypes.rs_ids,
                     extra={"source": str(args.vcf)})
    save_dataset(args.out, design, meta)
    report = Path(str(args.out) + ".qc.json")
    qc.report.save(report)
    _emit({"event": "ingest", "samples": design.rows, "snps_in": geno.shape[1], "snps_kept": design.cols,
           "groups": part.group_count, "dropped": len(qc.report.dropped), "report": str(report)})
    return EXIT_OK


def _opts(args):
    return SolveOptions(max_epochs=args.max_epochs, seed=args.seed, gap_tol=args.gap_tol)


def _finish_path(pm, out):
    pm.save(out)
    _emit({"event": "done", "out": str(out), "lambdas": len(pm.lambdas), "partial": pm.partial})
    return EXIT_NONCONVERGED if pm.partial else EXIT_OK


def cmd_path(args):
    design, part, meta = load_dataset(args.data)
    if args.solver == "dbcd":
        split = args.split or [design.rows]
        source = in_process_master(shard_dataset(design, split), part)
    else:
        source = design
    pm = run_path(source, part, args.lambdas, args.lmin_ratio, args.screen, args.solver, _opts(args),
                  args.gap_tol, progress=_progress(args), feature_ids=meta.feature_ids)
    return _finish_path(pm, args.out)


def cmd_sites(args):
    design, part, _ = load_dataset(args.data)
    shards = shard_dataset(design, args.split)
    threads = [SiteThread(s, part, args.host, args.listen_base + i if args.listen_base else 0)
               for i, s in enumerate(shards)]
    for t in threads:
        t.start()
    addrs = [f"{t.address[0]}:{t.address[1]}" for t in threads]
    _emit({"event": "sites", "addresses": addrs, "rows": [s.local_rows for s in shards]})
    print(",".join(addrs), flush=True)
    for t in threads:
        t.join()
    errors = [t.error for t in threads if t.error is not None]
    if errors:
        raise LqmError(f"site service failed: {errors[0]}")
    return EXIT_OK


def _plan_partition(plan, base):
    spec = plan.get("partition")
    if spec is None:
        raise ConfigError("plan needs a 'partition' entry (sidecar path or group_sizes)")
    if isinstance(spec, str):
        meta = read_sidecar(base / spec)
        return meta.partition(), meta.feature_ids
    return make_partition(spec["group_sizes"], spec.get("weight_rule", "sqrt_size"), spec.get("weights")), None


def cmd_master(args):
    plan_path = Path(args.plan)
    try:
        plan = json.loads(plan_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan is not valid JSON: {exc}") from exc
    part, feature_ids = _plan_partition(plan, plan_path.parent)
    known = {"partition", "lambdas", "lmin_ratio", "screen", "seed", "gap_tol", "max_epochs", "timeout", "out"}
    extra = set(plan) - known
    if extra:
        raise ConfigError(f"unknown plan keys {sorted(extra)}")
    out = args.out = args.out or plan.get("out")
    if not out:
        raise ConfigError("no output path (plan 'out' or --out)")
    timeout = float(plan.get("timeout", 30))
    opts = SolveOptions(max_epochs=int(plan.get("max_epochs", 10_000)), seed=int(plan.get("seed", 0)),
                        gap_tol=float(plan.get("gap_tol", 1e-8)))
    master = Master(TcpTransport(args.sites, timeout), timeout=timeout)
    try:
        pm = run_path(master, part, int(plan.get("lambdas", 100)), float(plan.get("lmin_ratio", 0.1)),
                      plan.get("screen", "ddpp"), "dbcd", opts, opts.gap_tol, progress=_progress(args),
                      feature_ids=feature_ids)
    finally:
        try:
            master.close()
        except LqmError:
            pass
    return _finish_path(pm, out)


def cmd_select(args):
    pm = PathModels.load(args.models)
    sel = frequency_select(pm, args.top_k)
    ids = np.array(pm.feature_ids) if pm.feature_ids is not None else None
    groups = [g for g in sel.ranking if sel.counts[g] > 0]
    write_ranking_csv(args.out, pm.partition, groups, sel.counts, "count", ids)
    _emit({"event": "select", "out": str(args.out), "groups": len(groups), "columns": int(sel.columns.size)})
    return EXIT_OK


def cmd_stability(args):
    design, part, meta = load_dataset(args.data)
    rep = stability_select(design, part, args.subsamples, args.q_cap, args.lambdas, args.lmin_ratio,
                           seed=args.seed, n_jobs=args.jobs)
    ids = np.array(meta.feature_ids) if meta.feature_ids is not None else None
    write_ranking_csv(args.out, part, rep.ranking, rep.selection_probability, "probability", ids)
    _emit({"event": "stability", "out": str(args.out), "subsamples": rep.subsample_count,
           "seeds": rep.seeds})
    return EXIT_OK


def cmd_bench(args):
    rows = bench_mod.bench(args.p_list, args.modes, n=args.n, count=args.lambdas, lmin_ratio=args.lmin_ratio,
                           seed=args.seed, distributed=args.distributed, progress=_progress(args))
    print(bench_mod.format_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="fedglasso", description="Federated group-Lasso feature selection.")
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress progress records on stderr")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-model synthetic dataset")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--p", type=int, default=10_000)
    p.add_argument("--group-size", type=int, default=20)
    p.add_argument("--active", type=int, default=5)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="VCF subset -> QC -> GLFS dataset")
    p.add_argument("--vcf", required=True)
    p.add_argument("--response", help="phenotype file (default: VCF path + '.pheno')")
    p.add_argument("--maf", type=float, default=0.05)
    p.add_argument("--gq", type=int, default=45)
    p.add_argument("--group-size", type=int, default=20)
    p.add_argument("--weight-rule", choices=("sqrt_size", "unit"), default="sqrt_size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    def solver_flags(p, lmin):
        p.add_argument("--lambdas", type=int, default=100)
        p.add_argument("--lmin-ratio", type=float, default=lmin)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--gap-tol", type=float, default=1e-8)
        p.add_argument("--max-epochs", type=int, default=10_000)

    p = sub.add_parser("path", help="solve a regularisation path")
    p.add_argument("--data", required=True)
    solver_flags(p, 0.1)
    p.add_argument("--screen", choices=("none", "strong", "ddpp"), default="ddpp")
    p.add_argument("--solver", choices=("bcd", "fista", "admm", "dbcd"), default="bcd")
    p.add_argument("--split", type=_int_list, help="rows per simulated site (dbcd only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("sites", help="serve dataset shards as site services")
    p.add_argument("--data", required=True)
    p.add_argument("--split", type=_int_list, required=True)
    p.add_argument("--listen-base", type=int, default=0, help="first port (0: pick free ports)")
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_sites)

    p = sub.add_parser("master", help="run a federated path against site services")
    p.add_argument("--sites", type=_str_list, required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("select", help="frequency ranking from a saved path")
    p.add_argument("--models", required=True)
    p.add_argument("--top-k", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("stability", help="stability selection over half-sample paths")
    p.add_argument("--data", required=True)
    p.add_argument("--subsamples", type=int, default=100)
    p.add_argument("--q-cap", type=int, default=50)
    p.add_argument("--lambdas", type=int, default=100)
    p.add_argument("--lmin-ratio", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("bench", help="time ddpp / plain / admm paths")
    p.add_argument("--p-list", type=_int_list, default=[10_000, 50_000])
    p.add_argument("--modes", type=_str_list, default=list(bench_mod.MODES))
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--lambdas", type=int, default=100)
    p.add_argument("--lmin-ratio", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distributed", action="store_true", help="use in-process sites and dbcd")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    global _QUIET
    args = build_parser().parse_args(argv)
    _QUIET = args.quiet
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (SolveAborted, LqmError, ConnectionError) as exc:
        _emit({"event": "error", "kind": "protocol", "message": str(exc)}, force=True)
        partial = getattr(exc, "path", None)
        out = getattr(args, "out", None)
        if partial is not None and out:
            partial.save(out)
            _emit({"event": "partial", "out": str(out), "lambdas": len(partial.lambdas)}, force=True)
        return EXIT_PROTOCOL
    except (ConfigError, SelectionError, GenotypeParseError, ValueError, OSError, KeyError) as exc:
        _emit({"event": "error", "kind": "config", "message": str(exc)}, force=True)
        return EXIT_CONFIG
    _emit({"event": "exit", "code": code, "seconds": time.perf_counter() - t0})
    return code


if __name__ == "__main__":
    sys.exit(main())
