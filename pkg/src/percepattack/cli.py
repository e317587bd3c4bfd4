"""Command-line front end.

The CLI is a thin client of the HTTP service: it builds a request, posts it
to `--server` (or to the bundled app in-process when no server is given), and
renders the response into report files. Every behavior is therefore reachable
through the service and the library with identical results.

Progress and diagnostics go to stderr; data goes to files and stdout. Exit
codes: 0 success, 2 configuration error, 3 runtime failure. The PA_SEED
environment variable overrides --seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx

from . import __version__
from .bench import ATTACK_NAMES
from .metrics import METRIC_NAMES
from .reports import write_benchmark_files, write_transfer_files

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette's own deprecation class is not a DeprecationWarning subclass
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        response = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise _CliError(f"request failed: {exc}", EXIT_RUNTIME) from exc
    if response.status_code >= 500:
        raise _CliError(f"server error: {response.text}", EXIT_RUNTIME)
    if response.status_code >= 400:
        raise _CliError(f"invalid request: {response.text}", EXIT_CONFIG)
    return response.json()


def _parse_resize(text: str | None):
    if text is None:
        return None
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise _CliError(f"--resize expects HxW, got {text!r}", EXIT_CONFIG) from exc


def _dataset_spec(args) -> dict:
    return {
        "path": args.dataset,
        "format": args.format,
        "resize": _parse_resize(args.resize),
        "unanimous_only": not args.include_ambiguous,
    }


def _metric_spec(name: str, weights: str | None) -> dict:
    return {"name": name, "weights_path": weights}


def _seed(args) -> int:
    env = os.environ.get("PA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise _CliError(f"PA_SEED must be an integer, got {env!r}", EXIT_CONFIG) from exc
    return args.seed


def _add_dataset_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--dataset", required=True, help="manifest CSV or BAPPS-style root")
    sub.add_argument("--format", choices=("manifest", "bapps"), default="manifest")
    sub.add_argument("--resize", default=None, metavar="HxW",
                     help="bilinear-resize images on load, e.g. 64x64")
    sub.add_argument("--include-ambiguous", action="store_true",
                     help="keep samples without a unanimous human vote")


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--server", default=None,
                     help="base URL of a running service; default runs in-process")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--out", default=None, help="directory for report files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="percepattack",
        description="Rank-flip attacks and 2AFC benchmarks for image-similarity metrics",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    acc = commands.add_parser("accuracy", help="2AFC accuracy of a metric on a dataset")
    _add_dataset_flags(acc)
    _add_common_flags(acc)
    acc.add_argument("--metric", choices=METRIC_NAMES, default="l2")
    acc.add_argument("--weights", default=None, help="PAMW weights file for the conv metric")
    acc.add_argument("--with-margins", action="store_true",
                     help="also report mean |s_0 - s_1| per agreement bucket")

    atk = commands.add_parser("attack", help="run one attack over a dataset")
    atk.add_argument("attack", choices=ATTACK_NAMES)
    _add_dataset_flags(atk)
    _add_common_flags(atk)
    atk.add_argument("--metric", choices=METRIC_NAMES, default="l2")
    atk.add_argument("--weights", default=None)
    atk.add_argument("--eps", type=float, default=0.03)
    atk.add_argument("--alpha", type=float, default=0.001)
    atk.add_argument("--iters", type=int, default=30)
    atk.add_argument("--max-eps", type=float, default=0.05)
    atk.add_argument("--eps-step", type=float, default=1e-4)
    atk.add_argument("--alpha-rank", type=float, default=50.0)
    atk.add_argument("--beta-flow", type=float, default=0.05)
    atk.add_argument("--stadv-iters", type=int, default=250)
    atk.add_argument("--pgd-k", type=int, default=10)
    atk.add_argument("--de-pop", type=int, default=80)
    atk.add_argument("--de-gens", type=int, default=75)

    tr = commands.add_parser("transfer", help="white-box attack on a source metric, "
                                              "transferred to target metrics")
    _add_dataset_flags(tr)
    _add_common_flags(tr)
    tr.add_argument("--source", choices=METRIC_NAMES, required=True)
    tr.add_argument("--source-weights", default=None)
    tr.add_argument("--target", action="append", required=True, metavar="NAME[=WEIGHTS]",
                    help="target metric; repeatable; conv targets take NAME=weights.pamw")
    tr.add_argument("--combine-k", type=int, action="append", default=None,
                    help="stAdv+PGD(k) stage; repeatable (default 5 10 15 20)")
    tr.add_argument("--pgd-transfer-k", type=int, action="append", default=None,
                    help="plain fixed-k PGD stage; repeatable (default 10 20)")
    tr.add_argument("--rmse-cap", type=float, default=3.0)
    tr.add_argument("--alpha-rank", type=float, default=50.0)
    tr.add_argument("--beta-flow", type=float, default=0.05)
    tr.add_argument("--stadv-iters", type=int, default=250)

    gc = commands.add_parser("gradcheck", help="finite-difference check of a metric gradient")
    _add_common_flags(gc)
    gc.add_argument("--metric", choices=METRIC_NAMES, default="ssim")
    gc.add_argument("--weights", default=None)
    gc.add_argument("--size", default="16x16", metavar="HxW")
    gc.add_argument("--channels", type=int, choices=(1, 3), default=3)

    return parser


def _cmd_accuracy(client, args) -> int:
    payload = {
        "dataset": _dataset_spec(args),
        "metric": _metric_spec(args.metric, args.weights),
        "threads": args.threads,
        "with_margins": args.with_margins,
    }
    result = _post(client, "/v1/accuracy", payload)
    print(f"metric={result['metric']} n={result['n_samples']} accuracy={result['accuracy']}")
    if result.get("margins"):
        for bucket, value in sorted(result["margins"].items()):
            print(f"margin[{bucket}]={value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_attack(client, args) -> int:
    payload = {
        "dataset": _dataset_spec(args),
        "metric": _metric_spec(args.metric, args.weights),
        "attack": {
            "name": args.attack,
            "eps": args.eps,
            "alpha": args.alpha,
            "max_iters": args.iters,
            "max_eps": args.max_eps,
            "eps_step": args.eps_step,
            "alpha_rank": args.alpha_rank,
            "beta_flow": args.beta_flow,
            "stadv_iterations": args.stadv_iters,
            "pgd_k": args.pgd_k,
            "de_population": args.de_pop,
            "de_generations": args.de_gens,
        },
        "seed": _seed(args),
        "threads": args.threads,
    }
    result = _post(client, "/v1/attack", payload)
    for row in result["summary"]:
        print(f"bucket={row['bucket']} total={row['total']} flipped={row['flipped']}"
              f" flip_rate={row['flip_rate']}")
    if args.out:
        files = write_benchmark_files(result, args.out)
        print("wrote:", " ".join(str(f) for f in files), file=sys.stderr)
    return EXIT_OK


def _parse_target(text: str) -> dict:
    name, _, weights = text.partition("=")
    if name not in METRIC_NAMES:
        raise _CliError(
            f"unknown target metric {name!r}; available: {', '.join(METRIC_NAMES)}", EXIT_CONFIG
        )
    return {"name": name, "weights_path": weights or None}


def _cmd_transfer(client, args) -> int:
    payload = {
        "dataset": _dataset_spec(args),
        "source": _metric_spec(args.source, args.source_weights),
        "targets": [_parse_target(t) for t in args.target],
        "combine_ks": args.combine_k if args.combine_k is not None else [5, 10, 15, 20],
        "plain_pgd_ks": args.pgd_transfer_k if args.pgd_transfer_k is not None else [10, 20],
        "rmse_cap": args.rmse_cap,
        "seed": _seed(args),
        "threads": args.threads,
        "stadv": {
            "name": "stadv",
            "alpha_rank": args.alpha_rank,
            "beta_flow": args.beta_flow,
            "stadv_iterations": args.stadv_iters,
        },
    }
    result = _post(client, "/v1/transfer", payload)
    print(f"source={result['source']} agree={result['n_source_agree']}/{result['n_total']}"
          f" stadv_success={result['n_stadv_success']} kept={result['n_kept']}")
    for row in result["summary"]:
        print(f"target={row['target']} variant={row['variant']}"
              f" flipped={row['flipped']}/{row['accurate']}")
    if args.out:
        files = write_transfer_files(result, args.out)
        print("wrote:", " ".join(str(f) for f in files), file=sys.stderr)
    return EXIT_OK


def _cmd_gradcheck(client, args) -> int:
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise _CliError(f"--size expects HxW, got {args.size!r}", EXIT_CONFIG) from exc
    payload = {
        "metric": _metric_spec(args.metric, args.weights),
        "seed": _seed(args),
        "height": h,
        "width": w,
        "channels": args.channels,
    }
    result = _post(client, "/v1/gradcheck", payload)
    print(f"metric={result['metric']} seed={result['seed']}"
          f" max_relative_error={result['max_relative_error']} passed={result['passed']}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if result["passed"] else EXIT_RUNTIME


_COMMANDS = {
    "accuracy": _cmd_accuracy,
    "attack": _cmd_attack,
    "transfer": _cmd_transfer,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _make_client(args.server) as client:
            return _COMMANDS[args.command](client, args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
