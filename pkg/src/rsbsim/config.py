"""Flat key=value configuration with a typed registry.

Every tunable has a dotted name, a type, a default and a help string; the
same registry drives the file parser, the CLI flag generator and the
reproducibility echo. Unknown keys are rejected, not ignored - silently
dropped settings are how experiments stop meaning what they say.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import CoreConfig
from .kernel import SchedConfig
from .mem import CacheConfig

__all__ = ["ConfigError", "Config", "REGISTRY", "parse_file", "echo"]

_PANGRAM = "The quick brown fox jumps over the lazy dog"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class _Key:
    name: str
    type: type
    default: object
    help: str


def _k(name: str, default, help: str) -> _Key:
    return _Key(name, type(default), default, help)


REGISTRY: dict[str, _Key] = {k.name: k for k in [
    _k("rsb.size", 16, "return-stack entries"),
    _k("rsb.variant", "cyclic", "underflow policy: cyclic, stop or btb"),
    _k("btb.size", 256, "branch-target-buffer entries"),
    _k("cache.line_size", 64, "bytes per cache line"),
    _k("cache.l1_sets", 64, "L1 sets"),
    _k("cache.l1_ways", 8, "L1 ways"),
    _k("cache.llc_sets", 512, "last-level sets"),
    _k("cache.llc_ways", 16, "last-level ways"),
    _k("cache.lat_l1", 4, "L1 hit latency, cycles"),
    _k("cache.lat_llc", 40, "last-level hit latency, cycles"),
    _k("cache.lat_mem", 200, "memory latency, cycles"),
    _k("core.max_spec_depth", 8, "nested speculative frames"),
    _k("core.max_spec_instructions", 64, "speculation-nest instruction budget"),
    _k("core.min_spec_on_hit", 2, "instructions always granted to a frame"),
    _k("sched.quantum", 10_000, "time slice, cycles"),
    _k("sched.jitter", 0.0, "probability of a random scheduling pick"),
    _k("sched.kernel_rsb_pushes", 3, "RSB entries a context switch overwrites"),
    _k("sched.flush_rsb_on_switch", False, "refill the whole RSB on switches"),
    _k("time.cycles_per_ms", 1000, "simulated cycles per millisecond"),
    _k("input.text", _PANGRAM, "text typed into the victim"),
    _k("input.sentences", 1, "how many times the text is typed"),
    _k("input.start_ms", 1, "first keystroke time"),
    _k("input.cadence_ms", 50, "keystroke spacing"),
    _k("noise.flip_prob", 0.0, "probability of flipping a probe verdict"),
    _k("harden.retpoline", False, "rewrite victim returns through trampolines"),
    _k("harden.fence_after_call", False, "serialise at every return site"),
    _k("engine.fast", True, "use the compiled system loop where available"),
    _k("inproc.secret", _PANGRAM, "secret text outside the sandbox"),
    _k("inproc.nbytes", 0, "bytes to recover (0 = all)"),
    _k("inproc.trials", 1, "runs per byte (majority voting)"),
    _k("inproc.mode", "direct", "sandbox dispatch: direct or indirect"),
    _k("inproc.a_depth", 64, "outer recursion depth"),
    _k("inproc.b_depth", 0, "inner recursion depth (0 = rsb.size)"),
]}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: _Key, raw: str):
    if key.type is bool:
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key.name}: expected a boolean, got {raw!r}")
    if key.type is int:
        try:
            return int(raw.strip(), 0)
        except ValueError:
            raise ConfigError(f"{key.name}: expected an integer, got {raw!r}")
    if key.type is float:
        try:
            return float(raw.strip())
        except ValueError:
            raise ConfigError(f"{key.name}: expected a number, got {raw!r}")
    return raw.strip()


class Config:
    """Registry-validated settings with defaults."""

    def __init__(self, overrides: dict[str, object] | None = None):
        self._values: dict[str, object] = {
            name: key.default for name, key in REGISTRY.items()}
        if overrides:
            for name, value in overrides.items():
                self.set(name, value)

    def set(self, name: str, value) -> None:
        if name not in REGISTRY:
            raise ConfigError(f"unknown setting {name!r}")
        key = REGISTRY[name]
        if isinstance(value, str) and key.type is not str:
            value = _convert(key, value)
        if key.type is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, key.type):
            raise ConfigError(
                f"{name}: expected {key.type.__name__}, got {type(value).__name__}")
        self._values[name] = value

    def __getitem__(self, name: str):
        if name not in REGISTRY:
            raise ConfigError(f"unknown setting {name!r}")
        return self._values[name]

    def cache(self) -> CacheConfig:
        return CacheConfig(
            line_size=self["cache.line_size"],
            l1_sets=self["cache.l1_sets"], l1_ways=self["cache.l1_ways"],
            llc_sets=self["cache.llc_sets"], llc_ways=self["cache.llc_ways"],
            lat_l1=self["cache.lat_l1"], lat_llc=self["cache.lat_llc"],
            lat_mem=self["cache.lat_mem"])

    def core(self) -> CoreConfig:
        return CoreConfig(
            max_spec_depth=self["core.max_spec_depth"],
            max_spec_instructions=self["core.max_spec_instructions"],
            min_spec_on_hit=self["core.min_spec_on_hit"])

    def sched(self) -> SchedConfig:
        return SchedConfig(
            quantum=self["sched.quantum"],
            jitter=self["sched.jitter"],
            kernel_rsb_pushes=self["sched.kernel_rsb_pushes"],
            flush_rsb_on_switch=self["sched.flush_rsb_on_switch"],
            cycles_per_ms=self["time.cycles_per_ms"])


def parse_file(path: str, into: Config | None = None) -> Config:
    """Read `key = value` lines; '#' starts a comment; blank lines ignored."""
    cfg = into or Config()
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            name, _, value = line.partition("=")
            try:
                # the file format has no quoting, so values are stripped
                cfg.set(name.strip(), value.strip())
            except ConfigError as e:
                raise ConfigError(f"{path}:{line_no}: {e}") from None
    return cfg


def echo(cfg: Config) -> str:
    """Full settings dump, suitable for reproducing a run."""
    lines = [f"{name} = {cfg[name]}" for name in sorted(REGISTRY)]
    return "\n".join(lines) + "\n"
