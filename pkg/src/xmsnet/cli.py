"""``xms`` command line: gen-data, train, eval, gradcheck, sweep.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import gradcases, harness
from .checkpoint import CheckpointError
from .data import SceneError
from .tensor import NumericalError, ShapeError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("gen-data", "train", "eval", "gradcheck", "sweep")

log = logging.getLogger("xmsnet")


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are validation failures, not argparse's default exit code 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xms", description="XMSNet desk-scale harness")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted override, e.g. train.steps=10 (repeatable)")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def load_run_config(path: str, seed: int | None, out: str | None, overrides: list[str]) -> harness.RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise harness.ValidationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise harness.ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise harness.ValidationError("config root must be a JSON object")
    harness.apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return harness.RunConfig.from_dict(raw)


def cmd_gen_data(cfg: harness.RunConfig, out: Path) -> dict:
    return harness.generate_dataset(cfg.data, Path(cfg.data.root))


def cmd_train(cfg, out):
    return harness.run_train(cfg, out)


def cmd_eval(cfg, out):
    return harness.run_eval(cfg, out)


def cmd_gradcheck(cfg, out):
    sec = cfg.gradcheck
    rows = gradcases.run(sec.selector, cfg.seed, sec.eps, sec.max_coords)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(gradcases.format_table(rows))
    failed = [r["op"] for r in rows if not r["passed"]]
    if failed:
        raise NumericalFailure(f"gradient check failed for: {', '.join(failed)}")
    return {"checked": len(rows)}


def cmd_sweep(cfg, out):
    rows = harness.run_sweep(cfg, out)
    return {"rows": len(rows)}


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, args.out, args.overrides)
        out = Path(cfg.out)
        harness.persist_config(cfg, out)
        result = HANDLERS[args.command](cfg, out)
    except (NumericalError, NumericalFailure) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (harness.ValidationError, CheckpointError, SceneError, ShapeError, KeyError,
            FileNotFoundError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
