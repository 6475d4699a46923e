"""Command-line entry point: ``dualq <stage> --config PATH``.

Stages gen-env, collect, fit, improve and evaluate work inside one run
directory and can be re-run on their own; ``run`` executes all of them with
a manifest, ``sweep`` and ``verify`` write their own result directories.
Set ``DUALQ_LOG_LEVEL`` (e.g. ``DEBUG``) for more output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import harness
from .exceptions import DualQError, StageError

log = logging.getLogger("dualq")

STAGES = ("gen-env", "collect", "fit", "improve", "evaluate")
COMMANDS = STAGES + ("run", "sweep", "verify")
PRESET_PREFIX = "preset:"


def _load(spec):
    if spec.startswith(PRESET_PREFIX):
        name = spec[len(PRESET_PREFIX):]
        ref = resources.files("dualq").joinpath("resources").joinpath(f"{name}.yaml")
        if not ref.is_file():
            raise harness.ConfigError(f"no bundled preset named {name!r}")
        with resources.as_file(ref) as path:
            return harness.load_config(path)
    return harness.load_config(spec)


def build_parser():
    p = argparse.ArgumentParser(prog="dualq", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True,
                   help=f"YAML experiment config, or {PRESET_PREFIX}default / {PRESET_PREFIX}token")
    p.add_argument("--stage", choices=STAGES,
                   help="with 'run', execute only this stage inside an existing run directory")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    p.add_argument("--out", help="output directory (overrides the config's output_dir)")
    return p


def _summary(rows):
    for mode, got in rows.items():
        for r in sorted(got, key=harness.MetricsRow.sort_key):
            print(f"{mode}\t{r.method}\tseed={r.seed}\tL={r.L}\tavg_return={r.avg_return:.6g}")


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DUALQ_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args.config).with_overrides(args.seed_offset, args.out)
        out = Path(cfg.output_dir)
        if args.command == "run" and args.stage is None:
            _summary(harness.run_experiment(cfg))
        elif args.command in STAGES or args.command == "run":
            name = args.stage or args.command
            if args.stage and args.command not in ("run", args.stage):
                raise harness.ConfigError(f"--stage {args.stage} conflicts with command {args.command}")
            rows = harness.run_stage(cfg, name, out)
            if name == "evaluate":
                _summary(rows)
        elif args.command == "sweep":
            res = harness.sweep_sampling_size(cfg, out_dir=out)
            for m in ("standard", "dual"):
                rho, p = res.spearman[m]
                curve = " ".join(f"{v:.4g}" for v in res.curve(m))
                print(f"{m}\tcurve(L=0,{','.join(map(str, res.Ls))})={curve}\tspearman={rho:.3f}")
            for L, p in res.dual_vs_standard.items():
                print(f"dual>standard\tL={L}\tp={p:.4g}")
        elif args.command == "verify":
            for row in harness.run_verify(cfg, out_dir=out):
                print(f"seed={row['seed']}\t{row['check']}\tok={row['ok']}\tvalue={row['value']:.6g}")
    except StageError as exc:
        print(f"dualq: {exc}", file=sys.stderr)
        return 1
    except (DualQError, OSError) as exc:
        print(f"dualq: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
