"""Command-line front end: ``icph <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Errors are reported on stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import fields, replace
from importlib import resources

import numpy as np

from .core import Dataset, EqualVariances, LowerBound
from .discovery import DiscoveryOptions, discover
from .errors import (
    DataError,
    EmptyEnvironment,
    ICPHError,
    MissingColumn,
    NonNumericValue,
    NumericalError,
    ParseError,
)
from .estimation import FitOptions, fit
from .experiments import KINDS, ExperimentConfig, run_experiment, strip_runtime
from .invariance import DEFAULT_TEST_PARAMETERS, test_equality_multi_degree, test_equality_sr
from .simulate import GENERATORS, ScmSpec, reconstruct_states, simulate

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# input / output
# ---------------------------------------------------------------------------


def ingest_csv(path, response="Y", env_column="env", predictors=None, delimiter=",", ignore=()):
    """Read a delimited file into a :class:`Dataset`.

    Environment labels are mapped to ``1..K`` in order of first appearance.
    ``predictors=None`` takes every column other than the response, the
    environment column and ``ignore``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise ParseError("empty file", line=1, column=None)
    header = [h.strip() for h in rows[0]]
    for name in [response, env_column, *(predictors or [])]:
        if name not in header:
            raise MissingColumn(f"column {name!r} not in header")
    if predictors is None:
        skip = {response, env_column, *ignore}
        predictors = [h for h in header if h not in skip]
    cols = [header.index(response), *(header.index(p) for p in predictors)]
    env_col = header.index(env_column)
    body = np.empty((len(rows) - 1, len(cols)))
    env_raw = []
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=line, column=None)
        for k, c in enumerate(cols):
            body[i, k] = _number(row[c], line, header[c])
        label = _number(row[env_col], line, env_column)
        if label != round(label):
            raise NonNumericValue(f"environment label {row[env_col]!r} is not an integer",
                                  line=line, column=env_column)
        env_raw.append(int(label))
    if body.shape[0] == 0:
        raise EmptyEnvironment("file has no data rows")
    mapping = {}
    for label in env_raw:
        mapping.setdefault(label, len(mapping) + 1)
    env = np.array([mapping[v] for v in env_raw], dtype=int)
    return Dataset(body[:, 0], body[:, 1:].reshape(body.shape[0], -1), env, tuple(predictors))


def _number(text, line, column):
    try:
        v = float(text)
    except ValueError:
        raise NonNumericValue(f"non-numeric value {text!r}", line=line, column=column) from None
    if not math.isfinite(v):
        raise NonNumericValue(f"non-finite value {text!r}", line=line, column=column)
    return v


def write_dataset_csv(data: Dataset, stream, delimiter=",", extra=None):
    """Write ``Y, predictors..., env[, extra...]``; floats round-trip exactly."""
    extra = extra or {}
    w = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    w.writerow(["Y", *data.predictor_names, "env", *extra])
    cols = [data.y, *data.x.T, data.env, *extra.values()]
    for vals in zip(*cols):
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in vals])


def _clean(obj):
    # JSON output must stay finite: non-finite numbers become null
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def rows_to_csv(rows, delimiter=",") -> str:
    buf = io.StringIO()
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    w = csv.DictWriter(buf, fieldnames=keys, delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in _clean(r).items()})
    return buf.getvalue()


def load_schema(name: str) -> dict:
    text = resources.files("icph.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _emit(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _degrees(text):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("number of states must be positive")
    return tuple(vals)


def _name_list(text):
    return [] if text is None else [v.strip() for v in str(text).split(",") if v.strip()]


def _data_args(p, with_predictors=True):
    p.add_argument("input", help="delimited input file with a header row")
    p.add_argument("--response", default="Y")
    p.add_argument("--env-column", default="env")
    if with_predictors:
        p.add_argument("--predictors", type=_name_list, default=None,
                       help="comma list; default: all other columns")
    p.add_argument("--ignore", type=_name_list, default=[])
    p.add_argument("--delimiter", default=",")


def _model_args(p):
    p.add_argument("--model", choices=("IID", "HMM"), default="IID")
    p.add_argument("--method", choices=("EM", "NLM"), default="NLM")
    p.add_argument("--variance-constraint", choices=("lower-bound", "equality"), default="lower-bound")
    p.add_argument("--lower-bound", type=float, default=1e-4)
    p.add_argument("--number-of-states", type=_degrees, default=(2,))
    p.add_argument("--intercept", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--no-intercept", dest="intercept", action="store_false")
    p.add_argument("--num-restarts", type=int, default=5)
    p.add_argument("--max-iterations", type=int, default=20000)


def _test_args(p):
    p.add_argument("--test-parameters", type=_name_list, default=list(DEFAULT_TEST_PARAMETERS))
    p.add_argument("--alpha", type=float, default=0.05)


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="default: $ICPH_SEED or 0")
    p.add_argument("--output", default=None, help="output path; default stdout")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--threads", type=int, default=None, help="worker processes; default: logical cores")
    p.add_argument("--config", default=None, help="flat key=value file; flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icph", description="Switching-regression invariance tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a switching regression")
    _data_args(p)
    _model_args(p)
    p.add_argument("--per-environment", action="store_true", help="fit each environment separately")
    _common(p)

    p = sub.add_parser("test-equality", help="test equality of models across environments")
    _data_args(p, with_predictors=False)
    p.add_argument("--set", type=_name_list, default=None,
                   help="comma list of predictors in S; empty string for the empty set")
    _model_args(p)
    _test_args(p)
    _common(p)

    p = sub.add_parser("discover", help="run ICPH over all predictor subsets")
    _data_args(p)
    _model_args(p)
    _test_args(p)
    p.add_argument("--screening-k", type=int, default=None)
    p.add_argument("--max-subset-size", type=int, default=None)
    _common(p)

    p = sub.add_parser("simulate", help="draw a data set from a built-in SCM")
    p.add_argument("--generator", choices=GENERATORS, default="three_env_scm")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--delta-beta", type=float, default=1.5)
    p.add_argument("--num-states", type=int, default=2)
    p.add_argument("--num-extra", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--block-size", type=int, default=1)
    p.add_argument("--states-output", default=None, help="also write the latent path here")
    p.add_argument("--delimiter", default=",")
    _common(p)
    p.set_defaults(format="csv")

    p = sub.add_parser("decode", help="reconstruct latent states")
    _data_args(p)
    _model_args(p)
    p.add_argument("--group-column", default=None, help="decode jointly within groups")
    p.add_argument("--environment", type=int, default=None, help="only rows of this environment")
    _common(p)

    p = sub.add_parser("experiment", help="run a Monte-Carlo experiment family")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override an experiment setting, e.g. reps=20 or n_values=100,300")
    p.add_argument("--timing", action="store_true", help="keep the runtime_s column")
    _common(p)
    return parser


def _read_config(path) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {i}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(cfg) - set(known) - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        # re-parse with file values as defaults so explicit flags still win
        for key, value in cfg.items():
            action = known[key]
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = _bool(value)
            elif action.type is not None:
                try:
                    value = action.type(value)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from None
            sub.set_defaults(**{key: value})
        args = parser.parse_args(argv)
    if args.seed is None:
        env_seed = os.environ.get("ICPH_SEED")
        try:
            args.seed = int(env_seed) if env_seed else 0
        except ValueError:
            raise UsageError("ICPH_SEED must be an integer") from None
    if args.threads is None:
        args.threads = os.cpu_count() or 1
    if args.threads < 1:
        raise UsageError("--threads must be positive")
    return args


def _fit_options(args, num_states=None) -> FitOptions:
    constraint = EqualVariances() if args.variance_constraint == "equality" else LowerBound(args.lower_bound)
    return FitOptions(
        method=args.method,
        model=args.model,
        constraint=constraint,
        num_states=num_states or args.number_of_states[0],
        intercept=args.intercept,
        num_restarts=args.num_restarts,
        max_iterations=args.max_iterations,
        seed=args.seed,
    )


def _load(args):
    return ingest_csv(args.input, args.response, args.env_column,
                      getattr(args, "predictors", None), args.delimiter, args.ignore)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _single_degree(args, what):
    if len(args.number_of_states) > 1:
        raise UsageError(f"{what} takes a single --number-of-states")


def cmd_fit(args):
    _single_degree(args, "fit")
    data = _load(args)
    opts = _fit_options(args)
    if args.per_environment:
        parts = [(e, *data.env_data(e)) for e in range(1, data.num_envs + 1)]
    else:
        parts = [(None, data.y, data.x)]
    out = []
    for e, y, x in parts:
        res = fit(y, x, opts)
        d = res.to_dict(data.predictor_names)
        d["environment"] = e
        out.append(d)
    if args.format == "csv":
        return rows_to_csv([_flat_fit(d) for d in out], args.delimiter)
    return dumps({"command": "fit", "model": args.model, "method": args.method, "fits": out})


def _flat_fit(d):
    row = {k: v for k, v in d.items() if k not in ("parameters", "fisher")}
    row.update(d["parameters"])
    return row


def cmd_test_equality(args):
    data = _load(args)
    names = list(data.predictor_names)
    chosen = args.set if args.set is not None else names
    missing = [c for c in chosen if c not in names]
    if missing:
        raise MissingColumn(f"predictors not in data: {', '.join(missing)}")
    S = tuple(sorted(names.index(c) for c in chosen))
    opts = _fit_options(args)
    if len(args.number_of_states) > 1:
        res = test_equality_multi_degree(data, S, opts, args.number_of_states, args.test_parameters)
    else:
        res = test_equality_sr(data, S, opts, args.test_parameters)
    out = {"command": "test-equality", "set": [names[j] for j in S], "alpha": args.alpha,
           "reject": bool(res.p_value <= args.alpha), **res.to_dict()}
    if args.format == "csv":
        return rows_to_csv([{"set": " ".join(out["set"]), "p_value": out["p_value"],
                             "reject": out["reject"]}], args.delimiter)
    return dumps(out)


def cmd_discover(args):
    data = _load(args)
    degrees = args.number_of_states
    options = DiscoveryOptions(
        fit=_fit_options(args),
        alpha=args.alpha,
        test_parameters=tuple(args.test_parameters),
        degrees=degrees if len(degrees) > 1 else None,
        screening_k=args.screening_k,
        max_subset_size=args.max_subset_size,
        workers=args.threads,
    )
    res = discover(data, options)
    out = {"command": "discover", "number_of_states": list(degrees), **res.to_dict()}
    if args.format == "csv":
        rows = [{"set": " ".join(s["set"]), "p_value": s["p_value"], "floored": s["floored"]}
                for s in out["set_pvalues"]]
        return rows_to_csv(rows, args.delimiter)
    return dumps(out)


def cmd_simulate(args):
    spec = ScmSpec(args.generator, n=args.n, seed=args.seed, delta_beta=args.delta_beta,
                   num_states=args.num_states, num_extra=args.num_extra, delta=args.delta,
                   block_size=args.block_size)
    sim = simulate(spec)
    if args.states_output:
        with open(args.states_output, "w", encoding="utf-8", newline="") as fh:
            fh.write("H\n" + "".join(f"{v!r}\n" for v in np.asarray(sim.states).tolist()))
    if args.format == "json":
        d = sim.data
        return dumps({
            "command": "simulate",
            "generator": args.generator,
            "seed": args.seed,
            "columns": ["Y", *d.predictor_names, "env"],
            "y": d.y, "x": d.x, "env": d.env,
        })
    buf = io.StringIO()
    write_dataset_csv(sim.data, buf, args.delimiter)
    return buf.getvalue()


def cmd_decode(args):
    _single_degree(args, "decode")
    data = _load(args)
    if args.group_column is not None:
        groups = ingest_csv(args.input, args.group_column, args.env_column, [], args.delimiter).y
    else:
        groups = None
    idx = np.arange(data.n) if args.environment is None else data.env_indices(args.environment)
    if idx.size == 0:
        raise EmptyEnvironment(f"environment {args.environment} has no rows")
    y, x = data.y[idx], data.x[idx]
    res = fit(y, x, _fit_options(args))
    states = reconstruct_states(res, y, x, None if groups is None else groups[idx])
    if args.format == "csv":
        return rows_to_csv([{"row": int(i) + 1, "state": int(s)} for i, s in zip(idx, states)],
                           args.delimiter)
    return dumps({"command": "decode", "rows": (idx + 1).tolist(), "states": states.tolist(),
                  "grouped": groups is not None, "fit": res.to_dict(data.predictor_names)})


def _coerce(field_type, default, text):
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        sample = default[0] if default else ""
        conv = type(sample) if isinstance(sample, (int, float)) else str
        if conv is int and any("." in p for p in parts):
            conv = float
        return tuple(conv(p) for p in parts)
    return type(default)(text)


def cmd_experiment(args):
    defaults = ExperimentConfig()
    known = {f.name: f for f in fields(ExperimentConfig)}
    updates = {"seed": args.seed, "workers": args.threads}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in known:
            raise UsageError(f"unknown experiment setting {key!r}")
        try:
            updates[key] = _coerce(known[key].type, getattr(defaults, key), value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    try:
        config = replace(defaults, **updates)
    except ICPHError as exc:
        raise UsageError(str(exc)) from None
    rows = run_experiment(args.kind, config)
    if not args.timing:
        rows = strip_runtime(rows)
    if args.format == "csv":
        return rows_to_csv(rows, getattr(args, "delimiter", ","))
    return dumps({"command": "experiment", "kind": args.kind, "rows": rows})


COMMANDS = {
    "fit": cmd_fit,
    "test-equality": cmd_test_equality,
    "discover": cmd_discover,
    "simulate": cmd_simulate,
    "decode": cmd_decode,
    "experiment": cmd_experiment,
}


def _report(kind, code, message, **extra):
    line = {"error": kind, "exit_code": code, "message": message, **extra}
    sys.stderr.write(json.dumps(_clean(line), sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        return _report("UsageError", EXIT_USAGE, str(exc))
    if args.verbose:
        import logging
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO, stream=sys.stderr)
    if not hasattr(args, "delimiter"):
        args.delimiter = ","
    try:
        text = COMMANDS[args.command](args)
    except UsageError as exc:
        return _report("UsageError", EXIT_USAGE, str(exc))
    except ParseError as exc:
        return _report(type(exc).__name__, EXIT_DATA, str(exc),
                       line=getattr(exc, "line", None), column=getattr(exc, "column", None))
    except (DataError, ValueError) as exc:
        code = EXIT_DATA if isinstance(exc, DataError) else EXIT_USAGE
        return _report(type(exc).__name__, code, str(exc))
    except NumericalError as exc:
        return _report(type(exc).__name__, EXIT_NUMERIC, str(exc))
    except ICPHError as exc:
        return _report(type(exc).__name__, EXIT_NUMERIC, str(exc))
    except OSError as exc:
        return _report("IOError", EXIT_DATA, str(exc))
    _emit(text, args.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
