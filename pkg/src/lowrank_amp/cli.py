"""Command-line harness: lowrank-amp {gen,amp,se,phase,spectral,compare}.

One JSON config per experiment, overridable with ``--set key=value``
(dotted keys, JSON values). Every artifact carries the resolved config:
JSON outputs under "config", CSV outputs as a leading ``# config:`` line.

Exit codes: 0 success (non-convergence included, it is reported), 2 invalid
config, 3 I/O failure, 4 numerical divergence.
"""
import argparse
import copy
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .amp import T_MIN, run_amp_uv, run_amp_xkx
from .channels import make_channel
from .errors import DivergenceError, DomainError, GridRangeError, NumericalError, ParameterError
from .instances import generate_uv, generate_xkx, load_instance, save_instance
from .priors import CommunityPrior, make_prior
from .spectral import spectral_compare
from .state_evolution import (
    QuadratureSpec, SeState, init_state, init_state_uv, make_bank, se_fixed_point,
    se_fixed_point_uv, se_free_energy_uv, se_free_energy_xkx, se_mse,
)
from .transitions import iterate_b, make_scalar_bank, transition_report

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
THREADS_ENV = "LOWRANK_AMP_THREADS"

DEFAULTS = {
    "model": "xkx",
    "n": 1000,
    "alpha": 1.0,
    "seed": 0,
    "K": "identity",
    "prior": {"kind": "community", "rank": 2},
    "channel": {"kind": "gaussian", "variance": 0.1},
    "amp": {"init": "uninformative", "damping": 0.0, "t_min": T_MIN, "t_max": 1000, "tol": 1e-6},
    "se": {"tol": 1e-9, "t_max": 10000},
    "quad": {"method": "monte-carlo", "n_samples": 100000, "nodes": 20, "seed": 0},
    "branches": ["uninformative"],
    "rescale": False,
    "k": None,
}


class ConfigError(ParameterError):
    pass


# ---------------------------------------------------------------- config

def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _set_path(cfg, dotted, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping", field=dotted)
    node[keys[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides=(), seed=None):
    cfg = {}
    if path:
        with open(path) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}", field="config") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object", field="config")
    cfg = _merge(DEFAULTS, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", field="--set")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _positive_int(cfg, key, minimum=1):
    val = cfg.get(key)
    if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}", field=key)
    return int(val)


def _K(cfg, r):
    K = cfg.get("K", "identity")
    if isinstance(K, str):
        if K != "identity":
            raise ConfigError("K must be 'identity' or an r x r matrix", field="K")
        return np.eye(r)
    K = np.asarray(K, dtype=float)
    if K.shape != (r, r) or not np.allclose(K, K.T):
        raise ConfigError(f"K must be a symmetric {r}x{r} matrix", field="K")
    return K


def delta_values(cfg):
    """Delta grid from ``delta_sweep`` ({values} or {start, stop, count, spacing}) or ``delta``."""
    sweep = cfg.get("delta_sweep")
    if sweep is None:
        if "delta" in cfg:
            vals = [float(cfg["delta"])]
        elif "delta" in cfg.get("channel", {}):
            vals = [float(cfg["channel"]["delta"])]
        else:
            raise ConfigError("need delta or delta_sweep", field="delta_sweep")
    elif "values" in sweep:
        vals = [float(v) for v in sweep["values"]]
    else:
        try:
            start, stop, count = float(sweep["start"]), float(sweep["stop"]), int(sweep["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("delta_sweep needs start, stop, count", field="delta_sweep") from exc
        spacing = sweep.get("spacing", "linear")
        if spacing == "linear":
            vals = np.linspace(start, stop, count).tolist()
        elif spacing == "log":
            if start <= 0:
                raise ConfigError("log spacing needs start > 0", field="delta_sweep.start")
            vals = np.geomspace(start, stop, count).tolist()
        else:
            raise ConfigError(f"unknown spacing {spacing!r}", field="delta_sweep.spacing")
    if not vals or any(not (np.isfinite(v) and v > 0) for v in vals):
        raise ConfigError("every delta must be > 0", field="delta_sweep")
    return vals


def _quad(cfg):
    q = cfg.get("quad", {})
    return QuadratureSpec(q.get("method", "monte-carlo"), int(q.get("n_samples", 100000)),
                          int(q.get("nodes", 20)), int(q.get("seed", 0)), bool(q.get("fresh", False)))


def _channel_for(cfg, delta=None, spec=None):
    spec = dict(spec if spec is not None else cfg["channel"])
    if delta is not None:
        for key in ("variance", "mu", "scale", "lambda"):
            spec.pop(key, None)
        spec["delta"] = float(delta)
    return make_channel(spec)


def build_instance(cfg, delta=None, channel_spec=None):
    model = cfg.get("model", "xkx")
    n = _positive_int(cfg, "n", 2)
    seed = int(cfg.get("seed", 0))
    prior = make_prior(cfg["prior"])
    channel = _channel_for(cfg, delta, channel_spec)
    if model == "xkx":
        return generate_xkx(prior, channel, _K(cfg, prior.rank), n, seed)
    if model == "uv":
        prior_v = make_prior(cfg.get("prior_v", cfg["prior"]))
        return generate_uv(prior, prior_v, channel, n, float(cfg.get("alpha", 1.0)), seed)
    raise ConfigError(f"unknown model {model!r}", field="model")


def _validate_amp(cfg):
    a = cfg["amp"]
    if a.get("init") not in ("uninformative", "informative"):
        raise ConfigError("amp.init must be uninformative or informative", field="amp.init")
    if not 0 <= float(a.get("damping", 0)) < 1:
        raise ConfigError("amp.damping must satisfy 0 <= gamma < 1", field="amp.damping")
    if int(a.get("t_max", 1)) < 1 or int(a.get("t_min", 0)) < 0:
        raise ConfigError("amp.t_min >= 0 and amp.t_max >= 1 required", field="amp.t_max")
    if not float(a.get("tol", 1e-6)) > 0:
        raise ConfigError("amp.tol must be > 0", field="amp.tol")


def validate(cmd, cfg):
    """Resolve every object the command needs so errors surface before any work."""
    if cmd in ("gen", "amp", "compare", "spectral") and not cfg.get("instance"):
        _positive_int(cfg, "n", 2)
        prior = make_prior(cfg["prior"])
        if cfg.get("model", "xkx") == "xkx":
            _K(cfg, prior.rank)
        elif cfg.get("model") == "uv":
            make_prior(cfg.get("prior_v", cfg["prior"]))
            if not float(cfg.get("alpha", 1.0)) > 0:
                raise ConfigError("alpha must be > 0", field="alpha")
        else:
            raise ConfigError(f"unknown model {cfg.get('model')!r}", field="model")
        if "delta_sweep" in cfg:
            for d in delta_values(cfg):
                _channel_for(cfg, d)
        elif cmd != "compare":
            _channel_for(cfg)
    if cmd in ("amp", "compare"):
        _validate_amp(cfg)
    if cmd == "compare":
        if not cfg.get("channels"):
            raise ConfigError("compare needs a list of channels", field="channels")
        for d in delta_values(cfg):
            for spec in cfg["channels"]:
                _channel_for(cfg, d, spec)
    if cmd == "se":
        make_prior(cfg["prior"])
        delta_values(cfg)
        _quad(cfg)
        for b in cfg.get("branches", []):
            if b not in ("uninformative", "informative"):
                raise ConfigError(f"unknown branch {b!r}", field="branches")
    if cmd == "phase":
        rs = cfg.get("r_list")
        if not rs or any(int(r) < 2 for r in rs):
            raise ConfigError("r_list must hold integers >= 2", field="r_list")
        if cfg.get("grid_points") is not None:
            _positive_int(cfg, "grid_points", 2)
    if cmd == "spectral":
        k = cfg.get("k")
        if k is not None and not 1 <= int(k) <= 10:
            raise ConfigError("k must lie in 1..10", field="k")


# ---------------------------------------------------------------- output

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def emit_json(payload, cfg, out):
    doc = _jsonable(dict(payload, config=cfg))
    _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)


def emit_csv(rows, columns, cfg, out):
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(_jsonable(cfg), sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    _write(buf.getvalue(), out)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return v


def _write(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _threads(args):
    if args.threads is not None:
        return max(1, int(args.threads))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer", field=THREADS_ENV)
    return 1


def _pool_map(fn, items, threads):
    # per-item determinism makes the result independent of the pool size
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, args):
    if not args.out:
        raise ConfigError("gen needs --out", field="--out")
    inst = build_instance(cfg)
    save_instance(inst, args.out, blind=bool(cfg.get("blind", False)))
    summary = {"model": inst.model, "shape": list(inst.Y.shape), "rank": inst.r,
               "delta": inst.delta, "seed": inst.seed, "path": args.out}
    print(json.dumps(_jsonable(summary), sort_keys=True), file=sys.stderr)
    return EXIT_OK


def _amp_kwargs(cfg):
    a = cfg["amp"]
    return dict(init=a.get("init", "uninformative"), damping=float(a.get("damping", 0.0)),
                t_min=int(a.get("t_min", T_MIN)), t_max=int(a.get("t_max", 1000)),
                tol=float(a.get("tol", 1e-6)), seed=int(cfg.get("seed", 0)))


def _run_amp(inst, cfg, trace=False):
    kw = _amp_kwargs(cfg)
    if inst.model == "xkx":
        return run_amp_xkx(inst, trace=trace, **kw)
    return run_amp_uv(inst, trace=trace, **kw)


def _amp_point(job):
    cfg, delta = job
    inst = build_instance(cfg, delta)
    rep = _run_amp(inst, cfg)
    d = rep.to_dict()
    d["delta"] = inst.delta
    return d


def _adopt_instance(cfg):
    # generation settings come from the file, not from the defaults
    inst = load_instance(cfg["instance"])
    for key in ("model", "n", "alpha", "prior", "prior_v", "channel", "K", "delta_sweep"):
        cfg.pop(key, None)
    cfg["instance_config"] = inst.config()
    return inst


def cmd_amp(cfg, args):
    if cfg.get("instance"):
        inst = _adopt_instance(cfg)
        rep = _run_amp(inst, cfg, trace=bool(args.trace))
        runs = [dict(rep.to_dict(), delta=inst.delta)]
        if args.trace:
            cols = ["t", "diff", "mse", "overlap"]
            emit_csv(rep.trace, cols, cfg, args.trace)
    elif "delta_sweep" in cfg:
        runs = _pool_map(_amp_point, [(cfg, d) for d in delta_values(cfg)], _threads(args))
    else:
        inst = build_instance(cfg)
        rep = _run_amp(inst, cfg, trace=bool(args.trace))
        runs = [dict(rep.to_dict(), delta=inst.delta)]
        if args.trace:
            emit_csv(rep.trace, ["t", "diff", "mse", "overlap"], cfg, args.trace)
    emit_json({"runs": runs}, cfg, args.out)
    return EXIT_DIVERGED if any(r["diverged"] for r in runs) else EXIT_OK


def _symmetric_state(b, r):
    Q = (1 - b) / r**2 * np.ones((r, r)) + b / r * np.eye(r)
    return SeState(Q, Q.copy())


def _se_point(job):
    cfg, delta, branch = job
    prior = make_prior(cfg["prior"])
    quad = _quad(cfg)
    se_cfg = cfg.get("se", {})
    tol, t_max = float(se_cfg.get("tol", 1e-9)), int(se_cfg.get("t_max", 10000))
    row = {"delta": delta, "branch": branch}
    if cfg.get("model", "xkx") == "uv":
        prior_v = make_prior(cfg.get("prior_v", cfg["prior"]))
        alpha = float(cfg.get("alpha", 1.0))
        init = init_state_uv(prior, prior_v, branch)
        st, ok = se_fixed_point_uv(prior, prior_v, alpha, delta, quad, init, tol, t_max)
        fe = se_free_energy_uv(st, prior, prior_v, alpha, delta,
                               make_bank(prior, quad, "se-u"), make_bank(prior_v, quad, "se-v"))
        row.update(b_or_trQ=float(np.trace(st.Q_u)),
                   mse=float(np.trace(prior.second_moment()) - 2 * np.trace(st.M_u) + np.trace(st.Q_u)),
                   free_energy=fe.value, converged=ok, iterations=st.t)
        return row
    K = _K(cfg, prior.rank)
    if isinstance(prior, CommunityPrior) and np.allclose(K, np.eye(prior.rank)) and prior.rank >= 2:
        r = prior.rank
        bank = make_scalar_bank(r, quad.n_samples, quad.seed)
        res = iterate_b(r, delta, 1e-6 if branch == "uninformative" else 1.0, bank, tol, t_max)
        fe = se_free_energy_xkx(_symmetric_state(res.b, r), prior, K, delta, make_bank(prior, quad))
        row.update(b_or_trQ=res.b, mse=res.mse, free_energy=fe.value,
                   converged=res.converged, iterations=res.iterations)
    else:
        st, ok = se_fixed_point(prior, K, delta, quad, init_state(prior, branch), tol, t_max)
        fe = se_free_energy_xkx(st, prior, K, delta, make_bank(prior, quad))
        row.update(b_or_trQ=float(np.trace(st.Q)), mse=se_mse(st, prior), free_energy=fe.value,
                   converged=ok, iterations=st.t)
    if cfg.get("rescale"):
        row["delta_times_r2"] = delta * prior.rank**2
    return row


def cmd_se(cfg, args):
    jobs = [(cfg, d, b) for b in cfg.get("branches", ["uninformative"]) for d in delta_values(cfg)]
    rows = _pool_map(_se_point, jobs, _threads(args))
    cols = ["delta", "b_or_trQ", "mse", "free_energy", "converged", "iterations", "branch"]
    if cfg.get("rescale"):
        cols.append("delta_times_r2")
    emit_csv(rows, cols, cfg, args.out)
    return EXIT_OK


def _phase_point(job):
    cfg, r = job
    grid = None
    if cfg.get("grid_points"):
        from .transitions import default_grid
        grid = default_grid(r, int(cfg["grid_points"]))
    rep = transition_report(r, x_grid=grid, n_samples=cfg.get("n_samples"), seed=int(cfg.get("seed", 0)))
    return rep.to_row()


def cmd_phase(cfg, args):
    rows = _pool_map(_phase_point, [(cfg, int(r)) for r in cfg["r_list"]], _threads(args))
    cols = ["r", "delta_c", "delta_static", "delta_spinodal", "order",
            "static_times_4rlogr", "spinodal_times_2rlogr"]
    emit_csv(rows, cols, cfg, args.out)
    return EXIT_OK


def cmd_spectral(cfg, args):
    inst = _adopt_instance(cfg) if cfg.get("instance") else build_instance(cfg)
    k = cfg.get("k")
    sp = cfg.get("spectral", {})
    rows = spectral_compare(inst, None if k is None else int(k), float(sp.get("tol", 1e-6)),
                            int(sp.get("max_iter", 1000)), int(cfg.get("seed", 0)))
    emit_csv(rows, ["matrix_kind", "index", "eigenvalue", "overlap"], cfg, args.out)
    return EXIT_OK


def _compare_point(job):
    cfg, delta, spec = job
    inst = build_instance(cfg, delta, spec)
    rep = _run_amp(inst, cfg)
    m = rep.metrics
    return {"delta": delta, "channel": spec.get("kind"), "mse": m.get("mse", m.get("mse_u")),
            "overlap": m.get("overlap"), "free_energy": rep.free_energy,
            "converged": rep.converged, "iterations": rep.iterations, "diverged": rep.diverged}


def cmd_compare(cfg, args):
    jobs = [(cfg, d, spec) for d in delta_values(cfg) for spec in cfg["channels"]]
    rows = _pool_map(_compare_point, jobs, _threads(args))
    emit_csv(rows, ["delta", "channel", "mse", "overlap", "free_energy", "converged", "iterations"],
             cfg, args.out)
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


COMMANDS = {"gen": cmd_gen, "amp": cmd_amp, "se": cmd_se, "phase": cmd_phase,
            "spectral": cmd_spectral, "compare": cmd_compare}


def build_parser():
    parser = argparse.ArgumentParser(prog="lowrank-amp", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker processes for sweeps (env {THREADS_ENV})")
    parser.add_argument("--out", default=None, help="output path (stdout if omitted)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", default=None, help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted key, JSON value)")
        if name in ("amp", "spectral"):
            p.add_argument("--instance", default=None, help="instance file from `gen`")
        if name == "amp":
            p.add_argument("--trace", default=None, help="per-iteration trace CSV path")
        if name == "spectral":
            p.add_argument("--k", type=int, default=None)
        if name == "se":
            p.add_argument("--rescale", action="store_true", help="add a delta*r^2 column")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if getattr(args, "instance", None):
            cfg["instance"] = args.instance
        if getattr(args, "k", None) is not None:
            cfg["k"] = args.k
        if getattr(args, "rescale", False):
            cfg["rescale"] = True
        cfg["command"] = args.command
        validate(args.command, cfg)
        return COMMANDS[args.command](cfg, args)
    except (ParameterError, DomainError, GridRangeError) as exc:
        field = getattr(exc, "field", None)
        print(f"error: {exc}" + (f" [{field}]" if field else ""), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
