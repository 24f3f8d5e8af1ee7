"""``voronoi-pool`` command line: synthetic data, pooling, gradient checks, training, evaluation, analysis.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure
(divergence, tolerance breach, non-finite descriptor).
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import cell_statistics, effective_rank, matrix_rank, mean_off_diagonal, w2_matrix
from .config import ConfigError, RunConfig, load_config
from .formats import (CovarianceDump, DescriptorDB, FormatError, ModelCheckpoint, load_model, read_db,
                      read_dump, read_scans, save_model, write_db, write_dump, write_scans)
from .gradcheck import TOL_CORE, TOL_SVDPI, format_result, run_gradcheck
from .linalg import ConvergenceError
from .metrics import build_run, f1_max, map_at_k, mrr, recall_at, roc_points
from .pipeline import PipelineError, PipelineSpec, describe, parse_ablations
from .synth import generate, split_heldout
from .train import train_toy
from .whitening import DEFAULT_EPS, sigma_for

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
METRICS = ("r@1", "r@1pct", "map@10", "f1max", "mrr", "roc")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    _log("resolved config:\n" + cfg.dumps().rstrip())


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------- gen-synth

def cmd_gen_synth(args) -> int:
    overrides = {k: getattr(args, k) for k in ("places", "views", "locations", "noise") if getattr(args, k) is not None}
    if args.hetero:
        overrides["hetero"] = True
    cfg = _resolve_config(args).with_overrides(**overrides)
    out = _out_dir(args)
    _log_config(cfg, out)
    scans = generate(cfg)
    path = out / args.name
    write_scans(path, scans, flags=1 if cfg.hetero else 0)
    _write_csv(out / "positions.csv", ["id", "place", "view", "x", "y", "z"],
               ([int(i), int(p), int(v), *map(_fmt, pos)]
                for i, p, v, pos in zip(scans.ids, scans.places, scans.views, scans.positions)))
    print(f"wrote {len(scans)} scans ({cfg.places} places x {cfg.views} views) to {path}")
    return EXIT_OK


# ---------------------------------------------------------------- pool

def _pool(ckpt: ModelCheckpoint, scans, eps: float, sigma: float, ablate=frozenset(), dump: bool = False):
    spec = PipelineSpec(sigma, eps, frozenset(ablate))
    details: list | None = [] if dump else None
    try:
        desc = describe(ckpt.nets, scans.data, spec, scans.ids, details)
    except PipelineError as exc:
        raise NumericFailure(str(exc)) from exc
    if not np.all(np.isfinite(desc)):
        bad = int(scans.ids[np.flatnonzero(~np.isfinite(desc).all(axis=1))[0]])
        raise NumericFailure(f"scan {bad}: non-finite descriptor")
    return desc, details


def cmd_pool(args) -> int:
    cfg = _resolve_config(args)
    ckpt = load_model(args.model)
    scans = read_scans(args.scans)
    if args.split != "all":
        db, q = split_heldout(scans)
        scans = db if args.split == "database" else q
    eps = ckpt.eps if args.eps is None else args.eps
    sigma = ckpt.sigma if args.sigma is None else sigma_for(args.sigma, ckpt.nets.M)
    ablate = parse_ablations(args.ablate)
    if args.dump_covariances and "whiten" in ablate:
        raise UsageError("--dump-covariances needs the whitening stage (drop --ablate whiten)")
    out = _out_dir(args)
    _log_config(cfg, out)
    t0 = time.perf_counter()
    desc, details = _pool(ckpt, scans, eps, sigma, ablate, args.dump_covariances)
    elapsed = time.perf_counter() - t0
    db = DescriptorDB(scans.ids, scans.positions, desc, ckpt.nets.C, ckpt.nets.M)
    write_db(out / args.name, db)
    print(f"pooled {len(scans)} scans into {out / args.name} (dims {db.dims}, sigma {sigma:g}, eps {eps:g}, "
          f"{elapsed / max(len(scans), 1) * 1e3:.2f} ms/scan)")
    if args.dump_covariances:
        dump = CovarianceDump(
            ids=scans.ids, rho=np.array([d["rho"] for d in details]),
            pooled=np.stack([d["pooled"] for d in details]),
            whitened=np.stack([d["whitened"] for d in details]),
            sample_cov=np.stack([d["sample_cov"] for d in details]),
            shrunk=np.stack([d["shrunk"] for d in details]),
            decomposed=np.stack([(d["eigvecs"] * d["eigvals"]) @ d["eigvecs"].T for d in details]))
        write_dump(out / args.dump_name, dump)
        print(f"wrote covariance dump {out / args.dump_name}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    seed0 = 0 if args.seed is None else args.seed
    lines, ok = [], True
    for seed in range(seed0, seed0 + args.num_seeds):
        res = run_gradcheck(seed, args.h, args.tolerance_core, args.tolerance_svdpi,
                            svdpi_backward=not args.no_svdpi_backward)
        lines.extend(format_result(res))
        ok &= res.ok
        if not res.ok:
            bad = next(p for p in res.paths if not p.ok)
            name, err = bad.report.worst()
            lines.append(f"  worst offender: {bad.name} path, parameter {name}, rel err {err:.3e}")
    lines.append("gradcheck: " + ("PASS" if ok else "FAIL"))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    (_out_dir(args) / "gradcheck.txt").write_text(text, encoding="utf-8")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- train-toy

def cmd_train_toy(args) -> int:
    cfg = _resolve_config(args)
    overrides = {"epochs": args.epochs, "lr": args.lr}
    cfg = cfg.with_overrides(**overrides)
    scans = read_scans(args.scans)
    if scans.data.shape[1] != cfg.C_in:
        raise UsageError(f"scans have C_in={scans.data.shape[1]} but the config says C_in={cfg.C_in}")
    ablate = parse_ablations(args.ablate)
    out = _out_dir(args)
    _log_config(cfg, out)
    if ablate:
        _log(f"ablations: {','.join(sorted(ablate))}")

    def report(e):
        _log(f"epoch {e.epoch:3d}  loss {e.mean_loss:.6f}  val R@1 {e.val_r1:.4f}  val MAP@10 {e.val_map10:.4f}")

    res = train_toy(cfg, scans, ablate, max_steps=args.max_steps, max_grad_norm=args.max_grad_norm,
                    validate=not args.no_validate, on_epoch=report)
    _write_csv(out / "loss.csv", ["epoch", "mean_loss", "val_r1", "val_map10"],
               ([e.epoch, _fmt(e.mean_loss), _fmt(e.val_r1), _fmt(e.val_map10)] for e in res.epochs))
    _write_csv(out / "steps.csv", ["step", "epoch", "batch_seed", "loss", "grad_norm", "rho_min", "rho_max"],
               ([s.step, s.epoch, s.batch_seed, _fmt(s.loss), _fmt(s.grad_norm), _fmt(s.rho_min), _fmt(s.rho_max)]
                for s in res.steps))
    if res.diverged:
        print(f"diverged: {res.divergence}")
        return EXIT_NUMERIC
    save_model(out / args.name, ModelCheckpoint(res.nets, cfg.sigma, cfg.eps))
    gmax = max((s.grad_norm for s in res.steps), default=0.0)
    print(f"trained {len(res.steps)} steps; final loss {res.epochs[-1].mean_loss:.6f}; "
          f"max grad norm {gmax:.3e}; model written to {out / args.name}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def compute_metrics(run, wanted) -> list[tuple[str, float]]:
    rows = []
    d1, lab = run.top1()
    for m in wanted:
        if m == "r@1":
            rows.append((m, recall_at(run, k=1)))
        elif m == "r@1pct":
            rows.append((m, recall_at(run, pct=0.01)))
        elif m == "map@10":
            rows.append((m, map_at_k(run, 10)))
        elif m == "mrr":
            rows.append((m, mrr(run)))
        elif m == "f1max":
            res = f1_max(d1, lab)
            rows.extend([(m, res.f1), ("f1max_threshold", res.threshold)])
        elif m == "roc":
            rows.append(("roc_auc", roc_points(d1, lab).auc()))
    return rows


def cmd_eval(args) -> int:
    wanted = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in METRICS]
    if unknown:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {','.join(METRICS)}")
    db = read_db(args.db)
    q = read_db(args.queries)
    if db.dims != q.dims:
        raise UsageError(f"descriptor dims differ: database {db.dims}, queries {q.dims}")
    run = build_run(q.descriptors.astype(np.float64), db.descriptors.astype(np.float64), q.positions,
                    db.positions, args.radius, q.ids, db.ids, exclude_self=args.exclude_self)
    if len(run) == 0:
        raise NumericFailure("no query has a relevant database entry within the radius")
    rows = compute_metrics(run, wanted)
    out = _out_dir(args)
    _write_csv(out / args.name, ["metric", "value"], ((m, _fmt(v)) for m, v in rows))
    if "roc" in wanted:
        d1, lab = run.top1()
        curve = roc_points(d1, lab)
        _write_csv(out / "roc.csv", ["fpr", "tpr"], ((_fmt(a), _fmt(b)) for a, b in curve.points()))
    width = max(len(m) for m, _ in rows)
    print(f"{len(run)} queries ({len(run.excluded)} without a true match skipped), "
          f"{run.n_db} database entries, radius {args.radius:g} m")
    for m, v in rows:
        print(f"  {m:<{width}}  {v:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- analyze

def _median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=np.float64)))


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    if args.mode == "ranks":
        if not args.dump:
            raise UsageError("analyze ranks needs --dump FILE, the covariance dump written by "
                             "'pool --dump-covariances'")
        dump = read_dump(args.dump)
        eps = args.eps
        C = dump.sample_cov.shape[1]
        rows = []
        stages = ("sample_cov", "shrunk_eps", "decomposed")
        for k in range(len(dump)):
            mats = (dump.sample_cov[k], dump.shrunk[k] + eps * np.eye(C), dump.decomposed[k])
            row = [int(dump.ids[k]), _fmt(dump.rho[k])]
            for m in mats:
                row += [matrix_rank(m), _fmt(effective_rank(m))]
            rows.append(row)
        header = ["id", "rho"] + [f"{s}_{kind}" for s in stages for kind in ("rank", "eff_rank")]
        _write_csv(out / "ranks.csv", header, rows)
        print(f"{len(rows)} instances, C={C}")
        for i, s in enumerate(stages):
            print(f"  {s:<11} median rank {_median([r[2 + 2 * i] for r in rows]):g}  "
                  f"median effective rank {_median([float(r[3 + 2 * i]) for r in rows]):.3f}")
        return EXIT_OK

    sets: list[tuple[str, np.ndarray]] = []
    if args.dump:
        dump = read_dump(args.dump)
        sets += [("whitened", dump.whitened), ("unwhitened", dump.pooled)]
    for path in args.db or []:
        sets.append((Path(path).stem, read_db(path).matrices()))
    if not sets:
        raise UsageError("analyze w2 needs --dump FILE (whitened and un-whitened side by side) and/or --db FILE")
    summary = []
    for label, stack in sets:
        W = w2_matrix(cell_statistics(stack))
        _write_csv(out / f"w2_{label}.csv", [f"cell{j}" for j in range(W.shape[0])],
                   ([_fmt(x) for x in row] for row in W))
        summary.append((label, mean_off_diagonal(W)))
    _write_csv(out / "w2_summary.csv", ["set", "mean_off_diagonal_w2"], ((s, _fmt(v)) for s, v in summary))
    for label, v in summary:
        print(f"  {label:<12} mean off-diagonal W2 {v:.6f}")
    if args.dump:
        print(f"  ratio whitened / unwhitened {summary[0][1] / summary[1][1]:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> _Parser:
        # accepted before or after the subcommand; the sub-level copies must not
        # overwrite a value given at the top level with their defaults
        g = _Parser(add_help=False)
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g.add_argument("--config", help="run config file (key = value lines)", **kw)
        g.add_argument("--seed", type=int, help="override the config seed", **kw)
        g.add_argument("--out", help="output directory (default: current)", **(kw or {"default": "."}))
        return g

    common = global_flags(suppress=True)
    p = _Parser(prog="voronoi-pool", description=__doc__.splitlines()[0], parents=[global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic scan set")
    g.add_argument("--places", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--locations", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--hetero", action="store_true", help="heterogeneous-cell variant (gain, offset, feature types)")
    g.add_argument("--name", default="scans.vwsc")
    g.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("pool", parents=[common], help="compute descriptors for a scan set")
    s.add_argument("--model", required=True)
    s.add_argument("--scans", required=True)
    s.add_argument("--eps", type=float, help=f"whitening epsilon (default: from model, normally {DEFAULT_EPS:g})")
    s.add_argument("--sigma", help="sqrt_m | m | positive number (default: from model)")
    s.add_argument("--split", choices=("all", "database", "query"), default="all",
                   help="database = all but the last view of each place; query = the last view")
    s.add_argument("--ablate", help="comma list of: whiten")
    s.add_argument("--dump-covariances", action="store_true")
    s.add_argument("--name", default="descriptors.vwdb")
    s.add_argument("--dump-name", default="covariances.vwcv")
    s.set_defaults(func=cmd_pool)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tolerance-core", type=float, default=TOL_CORE)
    c.add_argument("--tolerance-svdpi", type=float, default=TOL_SVDPI)
    c.add_argument("--num-seeds", type=int, default=1, help="check seeds seed .. seed+n-1")
    c.add_argument("--no-svdpi-backward", action="store_true",
                   help="pass no gradient through the eigendecomposition (expected to fail)")
    c.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", parents=[common], help="triplet training on a synthetic scan set")
    t.add_argument("--scans", required=True)
    t.add_argument("--ablate", help="comma list of: rblw, svdpi, whiten")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--max-grad-norm", type=float, help="treat a larger gradient norm as divergence")
    t.add_argument("--no-validate", action="store_true")
    t.add_argument("--name", default="model.vwmd")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", parents=[common], help="retrieval metrics for queries against a database")
    e.add_argument("--db", required=True)
    e.add_argument("--queries", required=True)
    e.add_argument("--radius", type=float, default=3.0)
    e.add_argument("--metrics", default=",".join(METRICS))
    e.add_argument("--exclude-self", action="store_true", help="never match a query to the entry with its id")
    e.add_argument("--name", default="report.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", parents=[common], help="rank or W2 reports")
    a.add_argument("mode", choices=("ranks", "w2"))
    a.add_argument("--dump", help="covariance dump from 'pool --dump-covariances'")
    a.add_argument("--db", action="append", help="descriptor DB (repeatable, w2 mode)")
    a.add_argument("--eps", type=float, default=DEFAULT_EPS)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", None) is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        return args.func(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (ConfigError, FormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError, ArithmeticError, ConvergenceError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
