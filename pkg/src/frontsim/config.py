"""Flat ``key = value`` experiment configuration.

The file is a plain list of dotted keys (``dsb.ways = 8``); ``#`` starts a
comment.  Every key has a typed default in :data:`SCHEMA`, and unknown keys
are rejected.  Command-line ``--set key=value`` overrides win over the file,
which wins over the defaults.

All randomness derives from the single root ``seed``: :func:`derive_rng`
mixes in a label (CRC32 of each string part) through numpy's
``SeedSequence.spawn_key``, so each sub-experiment has its own stream that
does not depend on what else ran.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path as FsPath
from typing import Any, Callable, Mapping

import numpy as np

from .channels import ChannelParams
from .frontend import DsbGeometry, Frontend, L1iGeometry, LsdGeometry
from .timing import RAPL_INTERVAL_S, CostModel

_SECTION = "experiment"


@dataclass(frozen=True)
class Key:
    type: str  # int, float, bool, str, int? (int or "auto")
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "seed": Key("int", 0, "root random seed"),
    "output_dir": Key("str", "out", "directory for CSV output"),
    "dsb.sets": Key("int", 32, "DSB sets"),
    "dsb.ways": Key("int", 8, "DSB ways per set (N)"),
    "dsb.uops_per_line": Key("int", 6, "micro-ops per DSB line"),
    "lsd.capacity": Key("int", 64, "LSD capacity in micro-ops"),
    "lsd.enabled": Key("bool", True, "LSD enabled (false models the newer microcode)"),
    "lsd.warmup": Key("int", 2, "identical iterations before the LSD captures a loop"),
    "l1i.size": Key("int", 32768, "L1I size in bytes"),
    "l1i.ways": Key("int", 8, "L1I ways"),
    "l1i.line": Key("int", 64, "L1I line size in bytes"),
    "cost.lsd": Key("int", 6, "cycles per block delivered by the LSD"),
    "cost.dsb": Key("int", 5, "cycles per block delivered by the DSB"),
    "cost.mite": Key("int", 16, "cycles per block decoded by MITE"),
    "cost.lsd_to_dsb": Key("int", 6, "LSD to DSB switch penalty"),
    "cost.dsb_to_mite": Key("int", 10, "DSB to MITE switch penalty"),
    "cost.lcp_stall": Key("int", 3, "stall cycles per LCP instruction after a plain one"),
    "cost.energy_lsd": Key("float", 1.0, "energy per micro-op from the LSD"),
    "cost.energy_dsb": Key("float", 2.0, "energy per micro-op from the DSB"),
    "cost.energy_mite": Key("float", 4.0, "energy per micro-op from MITE"),
    "cost.core_freq_hz": Key("float", 2.7e9, "core clock for cycles-to-seconds"),
    "noise.sigma": Key("float", 0.0, "Gaussian timing noise per block, cycles"),
    "channel.variant": Key("str", "nonmt_evict", "mt_evict|mt_misalign|nonmt_evict|nonmt_misalign|slow_switch"),
    "channel.stealth": Key("str", "fast", "stealthy|fast (non-MT variants)"),
    "channel.d": Key("int?", "auto", "receiver blocks (auto: 6 eviction, 5 misalignment)"),
    "channel.M": Key("int", 8, "total ways used by misalignment variants"),
    "channel.p": Key("int?", "auto", "receiver iterations per bit"),
    "channel.q": Key("int?", "auto", "sender iterations per bit"),
    "channel.r": Key("int", 16, "LCP/plain add pairs for slow-switch"),
    "channel.set": Key("int", 0, "target DSB set x"),
    "channel.alternate_set": Key("int?", "auto", "alternate set y (auto: x+1 mod sets)"),
    "channel.alpha": Key("float", 0.5, "threshold position between the two calibration means"),
    "channel.measure": Key("str", "timing", "timing|power"),
    "channel.rapl_interval_s": Key("float", RAPL_INTERVAL_S, "energy counter update interval"),
    "channel.enclave": Key("bool", False, "enclave mode"),
    "channel.enclave.entry_exit_cycles": Key("int", 8000, "enclave entry+exit cycles per bit"),
    "channel.enclave.iterations": Key("int", 1000, "p = q in enclave mode"),
    "channel.pattern": Key("str", "alternating", "all0|all1|alternating|random"),
    "channel.length": Key("int", 1000, "message length in bits"),
    "channel.calibration_bits": Key("int", 32, "alternating bits used for calibration"),
    "channel.d_min": Key("int", 1, "first d of sweep-d"),
    "channel.d_max": Key("int", 8, "last d of sweep-d"),
    "histogram.samples": Key("int", 10000, "samples per path"),
    "histogram.bin_width": Key("int", 1, "bin width in cycles"),
    "spectre.secret": Key("str", "random", "hex string or 'random' (32 chunks)"),
    "spectre.train_iterations": Key("int", 0, "branch training rounds (no predictor is modelled)"),
    "patch.trials": Key("int", 100, "independent trials per LSD setting"),
    "patch.iterations": Key("int", 50, "timed loop iterations per trial"),
    "fingerprint.sampling_hz": Key("float", 10.0, "attacker IPC sampling rate"),
    "fingerprint.mite_capacity": Key("float", 4e8, "legacy decoder capacity, micro-ops per second"),
    "fingerprint.jitter": Key("float", 0.02, "relative IPC measurement jitter"),
    "fingerprint.runs": Key("int", 3, "runs per victim"),
    "fingerprint.duration_s": Key("float", 3.0, "length of each run"),
    "fingerprint.partitioned": Key("bool", True, "partition DSB and LSD between the two threads"),
    "fingerprint.victims": Key("str", "synthetic", "'synthetic' or comma-separated victim CSV paths"),
}


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


def _parse(key: str, raw: Any) -> Any:
    spec = SCHEMA[key]
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if spec.type == "int":
            return _int(raw)
        if spec.type == "int?":
            return "auto" if raw == "auto" else _int(raw)
        if spec.type == "float":
            return float(raw)
        if spec.type == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {spec.type}") from None


def _int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        return int(raw, 0)  # 0x.. literals


def _format(key: str, value: Any) -> str:
    if SCHEMA[key].type == "bool":
        return "true" if value else "false"
    if SCHEMA[key].type == "float":
        return repr(float(value))
    return str(value)


class ExperimentConfig:
    """Typed view over the flat key space."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = {k: v.default for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def optional(self, key: str) -> int | None:
        v = self.values[key]
        return None if v == "auto" else v

    # -- text form -----------------------------------------------------------------

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                           inline_comment_prefixes=("#",), delimiters=("=",))
        parser.optionxform = str  # keys are case-sensitive (channel.M)
        try:
            parser.read_string(f"[{_SECTION}]\n{text}")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        return cls(dict(parser[_SECTION]))

    @classmethod
    def load(cls, path: str | FsPath) -> ExperimentConfig:
        try:
            text = FsPath(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.loads(text)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(k, v)}\n" for k, v in self.values.items())

    def apply_overrides(self, pairs: list[str]) -> None:
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)

    # -- builders ----------------------------------------------------------------------

    def dsb_geometry(self) -> DsbGeometry:
        return DsbGeometry(self["dsb.sets"], self["dsb.ways"], self["dsb.uops_per_line"])

    def frontend_factory(self, lsd_enabled: bool | None = None) -> Callable[[], Frontend]:
        try:
            dsb = self.dsb_geometry()
            lsd = LsdGeometry(self["lsd.capacity"],
                              self["lsd.enabled"] if lsd_enabled is None else lsd_enabled,
                              self["lsd.warmup"])
            l1i = L1iGeometry(self["l1i.size"], self["l1i.ways"], self["l1i.line"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return partial(Frontend, dsb, lsd, l1i, self["cost.lcp_stall"])

    def cost_model(self) -> CostModel:
        try:
            return CostModel(self["cost.lsd"], self["cost.dsb"], self["cost.mite"],
                             self["cost.lsd_to_dsb"], self["cost.dsb_to_mite"], self["cost.lcp_stall"],
                             self["cost.energy_lsd"], self["cost.energy_dsb"], self["cost.energy_mite"],
                             self["noise.sigma"], self["cost.core_freq_hz"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def channel_params(self, **overrides) -> ChannelParams:
        params = ChannelParams(
            variant=self["channel.variant"], stealth=self["channel.stealth"],
            d=self.optional("channel.d"), M=self["channel.M"],
            p=self.optional("channel.p"), q=self.optional("channel.q"), r=self["channel.r"],
            target_set=self["channel.set"], alternate_set=self.optional("channel.alternate_set"),
            enclave=self["channel.enclave"],
            entry_exit_cycles=self["channel.enclave.entry_exit_cycles"],
            enclave_iterations=self["channel.enclave.iterations"],
            threshold_alpha=self["channel.alpha"], measure=self["channel.measure"],
            rapl_interval_s=self["channel.rapl_interval_s"])
        return replace(params, **overrides) if overrides else params


def derive_seed(root: int, *labels: str | int) -> np.random.SeedSequence:
    key = tuple(zlib.crc32(l.encode()) if isinstance(l, str) else int(l) for l in labels)
    return np.random.SeedSequence(root, spawn_key=key)


def derive_rng(root: int, *labels: str | int) -> np.random.Generator:
    """Independent generator for the sub-experiment named by ``labels``."""
    return np.random.default_rng(derive_seed(root, *labels))


def derive_int(root: int, *labels: str | int) -> int:
    """A 32-bit integer seed for the named sub-experiment (for seeds echoed in CSVs)."""
    return int(derive_seed(root, *labels).generate_state(1)[0])


def keys_with_prefix(*prefixes: str) -> list[str]:
    return [k for k in SCHEMA if any(k == p or k.startswith(p + ".") for p in prefixes)]
