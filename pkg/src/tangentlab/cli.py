"""Command-line experiment harness.

Every subcommand reads an optional JSON config (``--config``), applies flag
overrides (flags win), validates against a strict schema (unknown keys are
rejected), runs, and writes CSV tables plus ``meta.json`` and
``resolved_config.json`` into ``--out``.  Outputs are a deterministic
function of the resolved config; feeding the emitted resolved config back
reproduces them byte for byte.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
divergence.  Nothing is written on failure.

``--threads`` (or the TANGENTLAB_THREADS environment variable) caps worker
threads and, when set before numerics load, the BLAS pool as well.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

# ---------------------------------------------------------------------------
# config schemas
# ---------------------------------------------------------------------------

_DATA_SCHEMA = {
    "kind": "synthetic",      # synthetic | synthetic-classes | csv
    "n0": 4,
    "n_out": 1,
    "count": 16,
    "test_count": 8,
    "classes": 3,
    "path": "",
    "normalize": False,
}

_ARCH_SCHEMA = {
    "hidden_widths": [64],
    "activation": "relu",
    "sigma_w2": 2.0,
    "sigma_b2": 0.1,
    "param_mode": "ntk",
}

_OPT_SCHEMA = {
    "kind": "gd",
    "eta": None,              # null -> eta_fraction * stability scale
    "eta_fraction": 0.5,
    "beta": 0.9,
    "batch_size": None,
    "steps": 100,
    "loss": "mse",
    "record_every": 10,
}

_COMMON = {
    "seed": 0,
    "threads": None,
    "data": _DATA_SCHEMA,
    "arch": _ARCH_SCHEMA,
    "opt": _OPT_SCHEMA,
}


def _with(**extra):
    out = json.loads(json.dumps(_COMMON))
    out.update(extra)
    return out


SCHEMAS = {
    "kernels": _with(),
    "kernel-convergence": _with(
        widths=[64, 256], num_samples=[8, 32], nngp_estimator="features"
    ),
    "drift-sweep": _with(widths=[64, 128]),
    "train-compare": _with(),
    "error-vs-width": _with(widths=[64, 128]),
    "predictive-distribution": _with(
        ensemble=20, num_alphas=10, dtype="float32", backend="auto"
    ),
    "readout-gp": _with(t_min=0.1, t_max=1000.0, num_times=12),
    "xent-compare": _with(),
    "momentum-compare": _with(etas=[1e-2, 1e-3], time_horizon=3.0, num_records=10),
}

_RUNNERS = {
    "kernels": "run_kernels",
    "kernel-convergence": "run_kernel_convergence",
    "drift-sweep": "run_drift_sweep",
    "train-compare": "run_train_compare",
    "error-vs-width": "run_error_vs_width",
    "predictive-distribution": "run_predictive_distribution",
    "readout-gp": "run_readout_gp",
    "xent-compare": "run_xent_compare",
    "momentum-compare": "run_momentum_compare",
}


def _merge_checked(schema, override, path=""):
    """Deep-merge override into schema defaults, rejecting unknown keys."""
    from .errors import ConfigError

    out = {}
    for key, default in schema.items():
        out[key] = json.loads(json.dumps(default))
    for key, value in override.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            out[key] = _merge_checked(schema[key], value, path=f"{path}{key}.")
        else:
            out[key] = value
    return out


def _apply_set(cfg, dotted, raw):
    from .errors import ConfigError

    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        node[keys[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        node[keys[-1]] = raw


def _format_value(v) -> str:
    import numpy as np

    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _emit(out_dir: str, tables: dict, cfg: dict, info: dict, subcommand: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    staged = {}
    for name, (fields, rows) in tables.items():
        lines = [",".join(fields)]
        lines.extend(",".join(_format_value(v) for v in row) for row in rows)
        staged[name] = "\n".join(lines) + "\n"
    resolved = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    digest = hashlib.sha256(resolved.encode()).hexdigest()
    from . import __version__

    meta = json.dumps(
        {
            "subcommand": subcommand,
            "config_sha256": digest,
            "version": __version__,
            "info": info,
            "outputs": sorted(staged),
        },
        indent=2,
        sort_keys=True,
        default=str,
    ) + "\n"
    # all writes staged in memory first: a failed run leaves no partial files
    for name, payload in staged.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            fh.write(payload)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        fh.write(resolved)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        fh.write(meta)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tangentlab",
        description=(
            "Kernel, linearized-dynamics, and training-agreement experiments "
            "for fully-connected networks. Output schemas: see each "
            "subcommand's CSV header row; columns are stable across versions."
        ),
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SCHEMAS:
        p = sub.add_parser(name, help=f"{name} experiment")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, help="cap worker threads")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config entry by dotted path (JSON-parsed value)",
        )
    return parser


def _threads_from_argv(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return os.environ.get("TANGENTLAB_THREADS")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    threads = _threads_from_argv(argv)
    if threads:
        # cap the BLAS pool too; only effective before numpy loads
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))

    args = _parser().parse_args(argv)
    from .errors import ConfigError, DivergenceError, TangentLabError

    try:
        override = {}
        if args.config:
            with open(args.config, "r", encoding="utf-8") as fh:
                override = json.load(fh)
        cfg = _merge_checked(SCHEMAS[args.subcommand], override)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            _apply_set(cfg, *item.split("=", 1))
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads

        from . import experiments

        runner = getattr(experiments, _RUNNERS[args.subcommand])
        tables, info = runner(cfg)
        _emit(args.out, tables, cfg, info, args.subcommand)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except TangentLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
