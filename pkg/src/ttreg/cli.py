"""Command-line interface: ``ttreg {simulate,fit,cv,test,bench,convert}``.

Exit status is 0 on success, 1 for usage, input or format problems and 2
for numerical failures.  Errors go to stderr as ``error: <CODE>: <message>``
with ``CODE`` one of ``E_USAGE``, ``E_IO``, ``E_FORMAT``, ``E_NUMERICAL``
or ``E_INACTIVE`` (tested coefficient not selected by the fit).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as tio
from .config import ConfigError, load_config
from .covariance import DegenerateDataError
from .estimators import METHODS, center, cross_validate, fit
from .inference import FLAVORS, asymptotic_cov, coef_index, confidence_interval, wald_test
from .simbench import MODELS, SimConfig, generate, run_grid

USAGE, NUMERICAL = 1, 2

# config keys whose argparse destination differs from the key
_DEST = {"lambda": "lam"}


class CLIError(Exception):
    def __init__(self, code: str, message: str, status: int = USAGE):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("E_USAGE", message)


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return vals


def _dims(text: str) -> tuple[int, ...]:
    vals = _int_list(text)
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("dims must be positive integers")
    return vals


def _seed(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")


def _fit_flags(p, method=True):
    if method:
        p.add_argument("--method", default="ost", choices=METHODS)
    p.add_argument("--nu", type=_float, default=4.0, help="degrees of freedom used by the fit; 'inf' allowed")
    p.add_argument("--lambda-apl", dest="lambda_apl", type=_float, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--penalty", choices=("lasso", "group"), default="lasso")
    p.add_argument("--split", choices=("reuse", "two-batch"), default="reuse")
    p.add_argument("--no-center", dest="center", action="store_false", help="skip centering of X and Y")
    p.add_argument("--pilot", choices=("ols", "apl"), default="ols",
                   help="OST penalty weights from the OLS (default) or APL fit")


def _sim_flags(p):
    p.add_argument("--model", default="M1", choices=MODELS)
    p.add_argument("--dims", type=_dims, default=(32, 32))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--rho", type=_float, default=0.5)
    p.add_argument("--nu-data", dest="nu_data", type=_float, default=4.0)
    p.add_argument("--b", type=_float, default=None)
    p.add_argument("--s", type=_float, default=0.03)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttreg", description="Sparse and robust tensor-response regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw one simulated dataset and its truth")
    _sim_flags(p)
    _seed(p)
    p.add_argument("--index", type=int, default=0, help="replicate index within the seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit one estimator")
    p.add_argument("--data", required=True)
    _fit_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=_float, default=None)
    g.add_argument("--cv", action="store_true", help="select lambda by cross-validation (default)")
    _seed(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cv", help="write the cross-validation path")
    p.add_argument("--data", required=True)
    _fit_flags(p)
    _seed(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("test", help="Wald test and intervals for coefficients of a saved fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", default=None, help="dataset directory (default: the one recorded in the fit)")
    p.add_argument("--coef", type=_int_list, action="append", required=True,
                   help="1-based coordinate j1,...,jM,k; repeat for a joint test")
    p.add_argument("--value", type=_float, action="append", default=None,
                   help="hypothesized value per --coef (one value is broadcast)")
    p.add_argument("--flavor", default="OST", type=str.upper, choices=FLAVORS)
    p.add_argument("--nu", type=_float, default=None, help="nu for the covariance (default: the fit's)")
    p.add_argument("--level", type=_float, default=0.95)
    p.add_argument("--bonferroni", type=int, default=1, help="divide the significance level by m")
    p.add_argument("--out", default=None, help="directory for test.json (default: the fit directory)")

    p = sub.add_parser("bench", help="replicate grid of simulations, written as CSV")
    _sim_flags(p)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--methods", default="ost,apn,apl,ols")
    p.add_argument("--nu", type=_float, default=4.0, help="nu used by OST and APT fits")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--penalty", choices=("lasso", "group"), default=None,
                   help="default: group for M4 models, lasso otherwise")
    _seed(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("convert", help="convert between CSV matrices and tensor files by extension")
    p.add_argument("src")
    p.add_argument("dst")
    return parser


def _apply_config(parser, sub_parser, args, argv):
    """Reparse with config values as defaults so explicit flags keep priority."""
    doc = load_config(args.config)
    dests = {a.dest for a in sub_parser._actions}
    bad = sorted(k for k in doc if _DEST.get(k, k) not in dests)
    if bad:
        raise ConfigError(f"config keys not used by '{args.command}': {', '.join(bad)}")
    sub_parser.set_defaults(**{_DEST.get(k, k): v for k, v in doc.items()})
    return parser.parse_args(argv)


def _parse(argv):
    parser = build_parser()
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    for sp in subs.values():
        if not any(a.dest == "config" for a in sp._actions):
            sp.add_argument("--config", default=None, help="JSON run configuration")
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        args = _apply_config(parser, subs[args.command], args, argv)
    return args


def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose",)}


def _dataset(path, do_center):
    ds = tio.load_dataset(path)
    return center(ds) if do_center else ds


def _fit_kwargs(args, method):
    kw = {}
    if method in ("ols", "tols"):
        return kw
    kw.update(kind=args.penalty, folds=args.folds, seed=args.seed)
    if method in ("ost", "apt"):
        kw["nu"] = args.nu
    if method in ("ost", "host"):
        kw["lam_apl"] = args.lambda_apl
    if method == "ost":
        kw["pilot"] = args.pilot
    if method == "host":
        kw["split"] = args.split
    return kw


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = SimConfig(args.model, args.dims, args.n, args.rho, args.nu_data, args.b, args.s, args.seed, 1)
    ds, btrue, _ = generate(cfg, args.index)
    tio.save_dataset(args.out, ds, btrue)
    tio.write_manifest(args.out, "simulate", _resolved(args))
    print(f"wrote {cfg.model} dataset n={ds.n} q={ds.q} dims={'x'.join(map(str, ds.dims))} to {args.out}")


def cmd_fit(args):
    ds = _dataset(args.data, args.center)
    method = args.method
    kw = _fit_kwargs(args, method)
    if method not in ("ols", "tols"):
        kw["lam"] = args.lam
    res = fit(ds, method, **kw)
    cv = res.info.get("cv")
    extra = {
        "data": str(Path(args.data).resolve()),
        "centered": bool(args.center),
        "lambda_selected_by_cv": cv is not None,
    }
    tio.save_fit(args.out, res, extra)
    tio.write_manifest(args.out, "fit", _resolved(args))
    lam = "NA" if res.lam is None else tio.format_float(res.lam)
    print(f"method={method} lambda={lam} active={res.active_set().size} converged={str(res.converged).lower()}")


def cmd_cv(args):
    ds = _dataset(args.data, args.center)
    if args.method in ("ols", "tols"):
        raise CLIError("E_USAGE", f"method {args.method} has no tuning parameter")
    lam_apl = args.lambda_apl
    if args.method in ("ost", "host") and lam_apl is None:
        lam_apl = cross_validate(ds, "apl", None, args.folds, args.seed, args.penalty).lam
    nu = math.inf if args.method == "apn" else args.nu
    kw = {"lam_apl": lam_apl, "split": args.split} if args.method in ("ost", "host") else {}
    if args.method == "ost":
        kw["pilot"] = args.pilot
    res = cross_validate(ds, args.method, None, args.folds, args.seed, args.penalty, nu, **kw)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    rows = [(lam, err, lam == res.lam) for lam, err in zip(res.lambdas, res.errors)]
    tio.write_csv(Path(args.out) / "cv.csv", ["lambda", "cv_error", "selected"], rows)
    tio.write_manifest(args.out, "cv", _resolved(args), {"lambda_selected": res.lam, "lambda_apl": lam_apl})
    print(f"lambda={tio.format_float(res.lam)}")


def cmd_test(args):
    fit_dir = Path(args.fit)
    res = tio.load_fit(fit_dir)
    meta = tio.json.loads((fit_dir / "fit.json").read_text())
    data = args.data or meta.get("data")
    if data is None:
        raise CLIError("E_USAGE", "no --data given and the fit does not record its dataset")
    ds = _dataset(data, meta.get("centered", True))
    if ds.dims != res.dims or ds.q != res.b_hat.shape[-1]:
        raise CLIError("E_FORMAT", "dataset and fit have different shapes")
    if args.bonferroni < 1:
        raise CLIError("E_USAGE", "--bonferroni needs m >= 1")
    if not 0 < args.level < 1:
        raise CLIError("E_USAGE", "--level must lie in (0, 1)")
    idx = []
    for c in args.coef:
        zero_based = tuple(v - 1 for v in c)
        if any(v < 0 for v in zero_based) or len(c) != len(ds.dims) + 1 or \
                any(v >= d for v, d in zip(zero_based, ds.dims + (ds.q,))):
            raise CLIError("E_USAGE", f"coordinate {','.join(map(str, c))} is outside {ds.dims + (ds.q,)}")
        idx.append(coef_index(zero_based, ds.dims))
    values = args.value if args.value is not None else [0.0]
    if len(values) == 1:
        values = values * len(idx)
    if len(values) != len(idx):
        raise CLIError("E_USAGE", "give one --value or one per --coef")
    active = set(res.active_set().tolist())
    missing = [i for i, c in zip(idx, args.coef) if i not in active]
    if missing:
        raise CLIError("E_INACTIVE", "coefficient not selected by the fit; the Wald test needs an active coordinate",
                       NUMERICAL)
    nu = args.nu
    if nu is None:
        nu = res.nu_used if res.nu_used is not None else 4.0
    cov = asymptotic_cov(res, ds.x, args.flavor, nu)
    tr = wald_test(res, cov, ds.n, idx, values)
    alpha = (1 - args.level) / args.bonferroni
    vec_b = res.b_hat.reshape(-1, order="F")
    coefs = []
    for c, i in zip(args.coef, idx):
        lo, hi = confidence_interval(res, cov, ds.n, i, 1 - alpha)
        coefs.append({"coef": list(c), "estimate": float(vec_b[i]), "ci": [lo, hi],
                      "se": math.sqrt(cov.matrix[cov.position(i), cov.position(i)] / ds.n)})
    doc = {"statistic": tr.statistic, "df": tr.df, "p_value": tr.p_value, "hypothesis": tr.hypothesis,
           "alpha": alpha, "reject": bool(tr.p_value < alpha), "flavor": cov.flavor, "nu": nu,
           "coefficients": coefs}
    out = Path(args.out) if args.out else fit_dir
    tio.write_json(out / "test.json", doc)
    tio.write_manifest(out, "test", _resolved(args), name="test_manifest.json")
    print(f"statistic={tio.format_float(tr.statistic)} df={tr.df} p_value={tio.format_float(tr.p_value)} "
          f"reject={str(doc['reject']).lower()}")


BENCH_HEADER = ["model", "method", "n", "nu_data", "nu_fit", "seed", "replicates", "failures",
                "ree_mean", "ree_se", "tpr_mean", "tpr_se", "fpr_mean", "fpr_se"]


def bench_rows(reports, nu_fit):
    """CSV rows for a list of reports; wall-clock time is left out so output is reproducible."""
    rows = []
    for r in reports:
        c = r.config
        n = c["n"] if c["n"] is not None else SimConfig(c["model"]).sample_size
        rows.append([r.model, r.method, n, c["nu"], nu_fit if r.method in ("ost", "apt") else "NA", c["seed"],
                     r.replicates, r.failures, r.ree_mean, r.ree_se, r.tpr_mean, r.tpr_se, r.fpr_mean, r.fpr_se])
    return rows


def cmd_bench(args):
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if not methods or unknown:
        raise CLIError("E_USAGE", f"unknown methods {unknown}; choose from {', '.join(METHODS)}")
    if args.reps < 1 or args.jobs < 1:
        raise CLIError("E_USAGE", "--reps and --jobs must be positive")
    cfg = SimConfig(args.model, args.dims, args.n, args.rho, args.nu_data, args.b, args.s, args.seed, args.reps)
    fit_kwargs = {}
    for m in methods:
        kw = {}
        if m not in ("ols", "tols"):
            kw["folds"] = args.folds
            if args.penalty is not None:
                kw["kind"] = args.penalty
        if m in ("ost", "apt"):
            kw["nu"] = args.nu
        fit_kwargs[m] = kw
    reports = run_grid([cfg], methods, args.jobs, fit_kwargs)
    out = Path(args.out)
    tio.write_csv(out / "bench.csv", BENCH_HEADER, bench_rows(reports, args.nu))
    tio.write_manifest(out, "bench", _resolved(args))
    sys.stdout.write(tio.csv_text(BENCH_HEADER, bench_rows(reports, args.nu)).replace("\r\n", "\n"))


def cmd_convert(args):
    src, dst = Path(args.src), Path(args.dst)
    kinds = (src.suffix.lower(), dst.suffix.lower())
    if kinds == (".csv", ".ttr"):
        tio.write_tensor(dst, tio.read_matrix_csv(src))
    elif kinds == (".ttr", ".csv"):
        tio.write_matrix_csv(dst, tio.read_tensor(src))
    else:
        raise CLIError("E_USAGE", "convert needs one .csv and one .ttr path")
    tio.write_manifest(dst.parent, "convert", _resolved(args), name=dst.name + ".manifest.json")


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "cv": cmd_cv, "test": cmd_test,
            "bench": cmd_bench, "convert": cmd_convert}


def _classify(exc: Exception) -> CLIError:
    if isinstance(exc, CLIError):
        return exc
    if isinstance(exc, (np.linalg.LinAlgError, DegenerateDataError, ArithmeticError)):
        return CLIError("E_NUMERICAL", str(exc), NUMERICAL)
    if isinstance(exc, (tio.FormatError, ConfigError)):
        return CLIError("E_FORMAT", str(exc))
    if isinstance(exc, OSError):
        return CLIError("E_IO", str(exc))
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return CLIError("E_USAGE", str(exc))
    raise exc


def main(argv=None) -> int:
    try:
        args = _parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except Exception as exc:
        err = _classify(exc)
        print(f"error: {err.code}: {err}", file=sys.stderr)
        return err.status
    return 0


if __name__ == "__main__":
    sys.exit(main())
