"""Command-line experiment runner.

Every subcommand reads the flat config (``--config``), applies ``--set``
overrides, then ``--seed`` / ``--output-dir``, and writes deterministic CSV
into the output directory, which must already exist.

Exit codes: 0 success, 1 invalid configuration or parameters, 2 inconclusive
patch verdict under ``--strict``.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path as FsPath

from .channels import CalibrationError, ChannelError
from .config import ConfigError, ExperimentConfig, SCHEMA, derive_int, derive_rng, keys_with_prefix
from .evaluation import gen_message, reports_csv, run_channel, sweep_d
from .fingerprint import (SYNTHETIC_VICTIMS, detect_patch, fingerprint_csv, fingerprint_runs,
                          leave_one_out, pairwise_means, patch_csv, read_victim_csv, synthetic_victim)
from .spectre import SpectreScenario, parse_secret, spectre_csv
from .timing import ascii_histogram, histogram_rows, path_samples

GEOMETRY = ("dsb", "lsd", "l1i")
COMMON = ("seed", "output_dir")

KEYS = {
    "histogram": keys_with_prefix(*COMMON, "cost", "noise", "histogram"),
    "channel": keys_with_prefix(*COMMON, *GEOMETRY, "cost", "noise", "channel"),
    "sweep-d": keys_with_prefix(*COMMON, *GEOMETRY, "cost", "noise", "channel"),
    "spectre": keys_with_prefix(*COMMON, *GEOMETRY, "cost", "noise", "spectre"),
    "patch": keys_with_prefix(*COMMON, *GEOMETRY, "cost", "noise", "patch"),
    "fingerprint": keys_with_prefix(*COMMON, *GEOMETRY, "cost", "fingerprint"),
}

HELP = {
    "histogram": "per-path delivery-time histogram",
    "channel": "calibrate one covert channel and send a message",
    "sweep-d": "channel transmission for every d in channel.d_min..channel.d_max",
    "spectre": "recover a secret through the transient-execution gadget",
    "patch": "detect whether the LSD is enabled (runs both settings)",
    "fingerprint": "classify victims from the attacker's IPC trace",
}


class Inconclusive(Exception):
    pass


def _epilog(cmd: str) -> str:
    lines = ["config keys read:"]
    lines += [f"  {k:<36} {SCHEMA[k].help} (default: {SCHEMA[k].default})" for k in KEYS[cmd]]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable; wins over --config)")
    common.add_argument("--seed", type=int, help="root seed (wins over --set seed=...)")
    common.add_argument("--output-dir", help="existing directory for CSV output")

    parser = argparse.ArgumentParser(prog="frontsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, text in HELP.items():
        p = sub.add_parser(cmd, parents=[common], help=text, description=text, epilog=_epilog(cmd),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if cmd == "spectre":
            p.add_argument("--secret", help="hex string or 'random' (overrides spectre.secret)")
        if cmd == "patch":
            p.add_argument("--strict", action="store_true", help="exit 2 if any verdict is inconclusive")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.apply_overrides(args.set)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.output_dir is not None:
        cfg.set("output_dir", args.output_dir)
    if getattr(args, "secret", None):
        cfg.set("spectre.secret", args.secret)
    return cfg


def _out(cfg: ExperimentConfig, name: str) -> FsPath:
    d = FsPath(cfg["output_dir"])
    if not d.is_dir():
        raise ConfigError(f"output directory {d} does not exist")
    return d / name


def _write(path: FsPath, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc.strerror}") from None


def cmd_histogram(cfg: ExperimentConfig) -> str:
    out = _out(cfg, "histogram.csv")
    model = cfg.cost_model()
    samples = path_samples(model, cfg["histogram.samples"], derive_rng(cfg["seed"], "histogram"))
    rows = histogram_rows(samples, cfg["histogram.bin_width"])
    _write(out, "bin_low,bin_high,count,path_label\n"
           + "".join(f"{lo},{hi},{n},{lab}\n" for lo, hi, n, lab in rows))
    return ascii_histogram(rows)


def _message(cfg: ExperimentConfig):
    return gen_message(cfg["channel.pattern"], cfg["channel.length"], derive_int(cfg["seed"], "message"))


def cmd_channel(cfg: ExperimentConfig) -> str:
    out = _out(cfg, "channel.csv")
    params = cfg.channel_params()
    factory = cfg.frontend_factory()
    params.validate(factory().dsb_geom)
    report, tx = run_channel(params, cfg.cost_model(), _message(cfg), cfg["seed"], factory,
                             cfg["channel.calibration_bits"], derive_rng(cfg["seed"], "channel"))
    _write(out, reports_csv([report]))
    _write(_out(cfg, "counters.csv"), tx.counters.csv_row())
    return (f"{report.variant}: {report.bits_sent} bits, error rate {report.error_rate:.4f}, "
            f"{report.tr_rate_kbps:.2f} kbps\n")


def cmd_sweep_d(cfg: ExperimentConfig) -> str:
    out = _out(cfg, "sweep_d.csv")
    params = cfg.channel_params()
    reports, skipped = sweep_d(params.variant, range(cfg["channel.d_min"], cfg["channel.d_max"] + 1),
                               params, cfg.cost_model(), _message(cfg), cfg["seed"],
                               cfg.frontend_factory(), cfg["channel.calibration_bits"])
    _write(out, reports_csv(reports))
    text = "".join(f"d={r.d}: error rate {r.error_rate:.4f}, {r.tr_rate_kbps:.2f} kbps\n" for r in reports)
    text += "".join(f"d={d}: skipped ({why})\n" for d, why in skipped)
    return text


def cmd_spectre(cfg: ExperimentConfig) -> str:
    out = _out(cfg, "spectre.csv")
    secret = parse_secret(cfg["spectre.secret"], derive_rng(cfg["seed"], "spectre", "secret"),
                          chunks=cfg["dsb.sets"])
    factory = cfg.frontend_factory()
    fe = factory()
    scenario = SpectreScenario(secret, cfg["spectre.train_iterations"], fe.dsb_geom)
    results = scenario.run(fe, cfg.cost_model(), derive_rng(cfg["seed"], "spectre", "noise"))
    _write(out, spectre_csv(scenario, results))
    hits = sum(r.recovered == s for r, s in zip(results, secret))
    return f"recovered {hits}/{len(secret)} chunks, added L1I misses {sum(r.added_l1i_misses for r in results)}\n"


def cmd_patch(cfg: ExperimentConfig, strict: bool = False) -> str:
    out = _out(cfg, "patch.csv")
    model = cfg.cost_model()
    rows = []
    for enabled in (True, False):
        rng = derive_rng(cfg["seed"], "patch", int(enabled))
        factory = cfg.frontend_factory(lsd_enabled=enabled)
        for _ in range(cfg["patch.trials"]):
            rows.append((enabled, detect_patch(factory, model, 1, rng, iterations=cfg["patch.iterations"])))
    _write(out, patch_csv(rows))
    summary = Counter((e, v.verdict) for e, v in rows)
    text = "".join(f"lsd.enabled={str(e).lower()}: {v} x{n}\n" for (e, v), n in sorted(summary.items()))
    if strict and any(v.verdict == "inconclusive" for _, v in rows):
        raise Inconclusive(text)
    return text


def cmd_fingerprint(cfg: ExperimentConfig) -> str:
    out = _out(cfg, "fingerprint.csv")
    src = cfg["fingerprint.victims"]
    if src == "synthetic":
        victims = [synthetic_victim(n, cfg["fingerprint.duration_s"]) for n in sorted(SYNTHETIC_VICTIMS)]
    else:
        try:
            victims = [read_victim_csv(p.strip()) for p in src.split(",") if p.strip()]
        except OSError as exc:
            raise ConfigError(f"cannot read victim trace: {exc}") from None
    root = cfg["seed"]
    runs = fingerprint_runs(victims, cfg.cost_model(), cfg["fingerprint.runs"],
                            lambda name, r: derive_rng(root, "fingerprint", name, r),
                            cfg["fingerprint.sampling_hz"], cfg["fingerprint.mite_capacity"],
                            cfg["fingerprint.jitter"], cfg["fingerprint.partitioned"])
    rows = leave_one_out(runs)
    _write(out, fingerprint_csv(rows))
    intra, inter = pairwise_means(runs)
    labels = sorted(runs)
    confusion = Counter((r.probe_label, r.predicted) for r in rows)
    lines = ["actual \\ predicted: " + " ".join(labels)]
    lines += [f"{a}: " + " ".join(str(confusion[(a, p)]) for p in labels) for a in labels]
    lines.append(f"correct {sum(r.correct for r in rows)}/{len(rows)}, "
                 f"mean intra {intra:.4f}, mean inter {inter:.4f}")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "histogram": cmd_histogram,
    "channel": cmd_channel,
    "sweep-d": cmd_sweep_d,
    "spectre": cmd_spectre,
    "fingerprint": cmd_fingerprint,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "patch":
            text = cmd_patch(cfg, args.strict)
        else:
            text = COMMANDS[args.command](cfg)
    except Inconclusive as exc:
        sys.stdout.write(str(exc))
        print("error: inconclusive patch verdict", file=sys.stderr)
        return 2
    except (ConfigError, ChannelError, CalibrationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
