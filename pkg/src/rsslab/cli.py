"""Command-line entry point.

Subcommands: pretrain, probe, eval, selfcheck, suite. Human-readable tables
go to stdout, diagnostics to stderr; machine consumers read the files
(manifest.json, metrics.csv, report.csv, weights). Exit codes: 0 success,
1 selfcheck failure, 2 configuration/flag errors, 3 non-finite loss,
4 weight-format errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_run_config, parse_eps_fraction
from .errors import ConfigError, FormatError, InvalidSpec, NonFiniteLoss, RsslabError
from .evaluation import evaluate, probe_features, train_probe
from .models import Encoder, LinearHead, load_params, save_params
from .seeding import derive
from .training import pretrain

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_FORMAT = 4

DEFAULT_EPS = ("4/255", "8/255", "16/255")


def _parse_protocol(text: str) -> tuple[str, int]:
    if text == "central":
        return "central", 1
    if text.startswith("agg:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad protocol {text!r}") from None
        if n < 1:
            raise ConfigError("aggregation count must be >= 1")
        return "aggregate", n
    raise ConfigError(f"unknown protocol {text!r}; use central or agg:N")


def _load_encoder(run_cfg, weights: str) -> Encoder:
    path = Path(weights)
    if not path.exists():
        raise FormatError(f"weights file not found: {path}")
    store = load_params(path)
    spec = run_cfg.encoder_spec()
    expected = {f"w{i}" for i in range(len(spec.layer_dims()))}
    expected |= {f"b{i}" for i in range(len(spec.layer_dims()))}
    if set(store.names()) != expected:
        raise FormatError(f"weight tensors {store.names()} do not match the "
                          f"configured encoder layers")
    return Encoder(spec, store)


def _run_id_for(weights: str) -> str:
    manifest = Path(weights).parent / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text()).get("run_id", Path(weights).stem)
        except json.JSONDecodeError:
            pass
    return Path(weights).stem


def _print_table(rows):
    print(f"{'epsilon':>10} {'clean':>8} {'robust':>8}  protocol")
    for r in rows:
        eps = f"{r['epsilon_num']}/{r['epsilon_den']}"
        proto = r["protocol"] if r["protocol"] == "central" else f"agg:{r['n']}"
        probe = " r-LE" if r["robust_probe"] else ""
        print(f"{eps:>10} {r['clean_acc']:8.4f} {r['robust_acc']:8.4f}  {proto}{probe}")


def cmd_pretrain(args) -> int:
    run_cfg = load_run_config(args.config)
    out_dir = Path(args.out or run_cfg.out_dir or "runs/pretrain")
    train_cfg = run_cfg.train_config(args.seed)
    train, test = run_cfg.dataset.load(args.seed)
    encoder, manifest = pretrain(train, train_cfg, out_dir, holdout=test)
    print(f"run {manifest.run_id}: {manifest.optimizer_steps} optimizer steps, "
          f"{manifest.wall_seconds:.1f}s wall clock")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_probe(args) -> int:
    run_cfg = load_run_config(args.config)
    out_dir = Path(args.out or run_cfg.out_dir or Path(args.weights).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    protocol, n = _parse_protocol(args.protocol) if args.protocol else (None, None)
    probe_cfg = run_cfg.probe_config(args.seed, protocol=protocol, n=n,
                                     robust=args.robust or None)
    encoder = _load_encoder(run_cfg, args.weights)
    train, test = run_cfg.dataset.load(args.seed)
    head = train_probe(encoder, train, probe_cfg, run_cfg.augment)
    tag = f"{probe_cfg.protocol}{probe_cfg.n if probe_cfg.protocol == 'aggregate' else ''}"
    tag += "-rle" if probe_cfg.robust else ""
    head_path = out_dir / f"head-{tag}.rssl1"
    save_params(head.store, head_path)
    eps = [parse_eps_fraction(e) for e in (args.eps or DEFAULT_EPS)]
    rows = evaluate(encoder, head, test, probe_cfg, run_cfg.augment, eps,
                    attack_through_views=args.attack_per_view,
                    run_id=_run_id_for(args.weights),
                    report_path=out_dir / "report.csv")
    _print_table(rows)
    print(f"head saved to {head_path}; rows appended to {out_dir / 'report.csv'}",
          file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    run_cfg = load_run_config(args.config)
    out_dir = Path(args.out or run_cfg.out_dir or Path(args.weights).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    protocol, n = _parse_protocol(args.protocol) if args.protocol else (None, None)
    probe_cfg = run_cfg.probe_config(args.seed, protocol=protocol, n=n,
                                     robust=args.robust or None)
    encoder = _load_encoder(run_cfg, args.weights)
    head_store = load_params(args.head)
    if sorted(head_store.names()) != ["b", "w"]:
        raise FormatError("head file must hold exactly tensors 'w' and 'b'")
    head = LinearHead(head_store)
    _, test = run_cfg.dataset.load(args.seed)
    eps = [parse_eps_fraction(e) for e in (args.eps or DEFAULT_EPS)]
    rows = evaluate(encoder, head, test, probe_cfg, run_cfg.augment, eps,
                    attack_through_views=args.attack_per_view,
                    run_id=_run_id_for(args.weights),
                    report_path=out_dir / "report.csv")
    _print_table(rows)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    return run_selfcheck(inject_fault=args.inject_fault)


def cmd_suite(args) -> int:
    from .experiments import run_suite
    report = run_suite(args.preset, seed=args.seed, out_dir=args.out)
    print(report.summary_text)
    return EXIT_OK if report.complete else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsslab",
        description="Adversarially robust self-supervised learning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run one pretraining scheme")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="fit a linear probe on frozen weights, then evaluate")
    p.add_argument("--weights", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", default=None, help="central or agg:N")
    p.add_argument("--robust", action="store_true", help="adversarial probe training (r-LE)")
    p.add_argument("--eps", action="append", help="attack budget a/b; repeatable")
    p.add_argument("--attack-per-view", action="store_true",
                   help="perturb each view independently instead of the source image")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("eval", help="evaluate an existing probe head")
    p.add_argument("--weights", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", default=None)
    p.add_argument("--robust", action="store_true",
                   help="tag report rows as robust-probe results")
    p.add_argument("--eps", action="append")
    p.add_argument("--attack-per-view", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selfcheck", help="run built-in numeric verification suites")
    p.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("suite", help="run a canned experiment preset")
    p.add_argument("--preset", required=True,
                   help="preset name or path to a preset JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_suite)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, InvalidSpec, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except RsslabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
