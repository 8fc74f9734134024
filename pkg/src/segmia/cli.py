"""Command-line front end for the experiment pipeline.

Every subcommand is idempotent given identical inputs. Success exits 0;
failures print one JSON object to stderr and exit nonzero (2 for bad
configuration or arguments, 1 for stage failures).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import default_config, load_config
from .errors import ConfigError, StageError
from .experiment import STAGES, run_experiment

_STAGE_BY_NAME = dict(STAGES)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit; keep errors as JSON
        raise ConfigError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS,
                        help="experiment config file (defaults apply when omitted)")
    common.add_argument("--seed", metavar="U64", type=int, default=argparse.SUPPRESS,
                        help="override the master seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                        help="override the output directory")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="suppress progress output")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="segmia", parents=[common],
                     description="membership-inference experiments on segmentation models")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    descriptions = {
        "gen-data": "generate scene pools and the membership split",
        "train-victim": "train the victim segmentation model",
        "train-shadow": "train the shadow segmentation model",
        "train-attacker": "train the patch and pixel attackers",
        "attack": "score victim-in/victim-out images without a defense",
        "defend-sweep": "train defense variants and score each defended victim",
        "report": "recompute metrics, curves, and the run ledger from artifacts",
        "run": "full pipeline: all stages in order",
    }
    for name, text in descriptions.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _emit_error(category: str, message: str, stage: str | None = None) -> None:
    payload = {"error": category, "message": message}
    if stage is not None:
        payload["stage"] = stage
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _resolve_config(ns: argparse.Namespace):
    path = getattr(ns, "config", None)
    config = default_config() if path is None else load_config(path)
    seed = getattr(ns, "seed", None)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    out = getattr(ns, "out", None)
    if out is not None:
        config = dataclasses.replace(config, out_dir=out)
    return config


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else int(exc.code)
    except ConfigError as exc:
        _emit_error("usage", str(exc))
        return 2

    quiet = getattr(ns, "quiet", False)
    try:
        config = _resolve_config(ns)
        out = Path(config.out_dir)
        if ns.command == "run":
            def progress(stage):
                if not quiet:
                    print(f"[{stage}]", flush=True)

            run_experiment(config, out, progress)
        else:
            if not quiet:
                print(f"[{ns.command}]", flush=True)
            stage = _STAGE_BY_NAME[ns.command]
            try:
                stage(config, out)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(f"stage {ns.command} failed: {exc}", stage=ns.command) from exc
        if not quiet and ns.command in ("run", "report"):
            print(f"reports written to {out / 'reports'}")
        return 0
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return 2
    except StageError as exc:
        _emit_error("stage", str(exc), stage=exc.stage)
        return 1
    except Exception as exc:  # pragma: no cover - last-resort guard
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
