"""Flat key = value config files with an #include mechanism.

Lines starting with ``#include`` pull in another file (path relative to the
including file); any other ``#`` line is a comment.  Later assignments win,
so an including file can override what it includes.  Keys are dotted for
grouping (``bucket.control.share``); values are plain strings until a typed
getter parses them.
"""

from __future__ import annotations

import os
from typing import Mapping, Sequence

from .auctionsim import BucketConfig, Cap, HfcRules, SimConfig
from .errors import ConfigError
from .events import (
    DEFAULT_SECTION_SHARES,
    DEFAULT_VALUE_SHARES,
    FeatureSchema,
    GeneratorConfig,
    default_fatigue_curve,
    default_schema,
)
from .freqtrack import WINDOW_NAMES, FrequencyConfig
from .model import BinningVector, HyperParams, SfcSettings


class ConfigMap:
    """Parsed key/value pairs with typed, error-naming accessors."""

    def __init__(self, data: dict[str, str], source: str = "<config>"):
        self.data = data
        self.source = source

    def __contains__(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default: str | None = None) -> str | None:
        return self.data.get(key, default)

    def _require(self, key: str) -> str:
        if key not in self.data:
            raise ConfigError(f"{self.source}: missing required key {key!r}")
        return self.data[key]

    def str(self, key: str, default: str | None = None) -> str:
        if default is None:
            return self._require(key)
        return self.data.get(key, default)

    def int(self, key: str, default: int | None = None) -> int:
        raw = self._require(key) if default is None else self.data.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: key {key!r} must be an integer, got {raw!r}") from None

    def float(self, key: str, default: float | None = None) -> float:
        raw = self._require(key) if default is None else self.data.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: key {key!r} must be a number, got {raw!r}") from None

    def bool(self, key: str, default: bool | None = None) -> bool:
        raw = self._require(key) if default is None else self.data.get(key)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"{self.source}: key {key!r} must be on/off, got {raw!r}")

    def floats(self, key: str) -> tuple[float, ...]:
        raw = self._require(key)
        try:
            return tuple(float(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"{self.source}: key {key!r} must be comma-separated numbers") from None

    def keys_with_prefix(self, prefix: str) -> list[str]:
        return [k for k in self.data if k.startswith(prefix)]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    data: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key = value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        data[key.strip()] = value.strip()
    return data


def load_config(path: str, _stack: tuple[str, ...] = ()) -> ConfigMap:
    """Load a config file, resolving #include directives depth-first."""
    path = os.path.abspath(path)
    if path in _stack:
        raise ConfigError(f"#include cycle through {path}")
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    data: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        body_lines = []
        for line in fh:
            stripped = line.strip()
            if stripped.startswith("#include"):
                target = stripped[len("#include"):].strip()
                if not target:
                    raise ConfigError(f"{path}: #include without a path")
                included = load_config(
                    os.path.join(os.path.dirname(path), target), _stack + (path,)
                )
                data.update(included.data)
            else:
                body_lines.append(line)
    data.update(parse_config_text("".join(body_lines), source=path))
    return ConfigMap(data, source=path)


# -- typed builders ----------------------------------------------------------


def schema_from_config(cfg: ConfigMap) -> FeatureSchema:
    if cfg.raw("schema", "default") == "default" and not cfg.keys_with_prefix("feature."):
        return default_schema()
    features = []
    for key in cfg.data:
        if key.startswith("feature.") and not key.endswith(".shares"):
            name = key[len("feature."):]
            features.append((name, tuple(cfg.data[key].split("|"))))
    sections = tuple(cfg.str("sections", "mail,home,articles,apps,web").split(","))
    return FeatureSchema(tuple(features), sections)


def generator_config_from(cfg: ConfigMap, seed_override: int | None = None) -> GeneratorConfig:
    schema = schema_from_config(cfg)
    using_default_schema = cfg.raw("schema", "default") == "default" and not cfg.keys_with_prefix("feature.")

    value_shares: dict[str, tuple[float, ...]] = {}
    for key in cfg.keys_with_prefix("feature."):
        if key.endswith(".shares"):
            name = key[len("feature."):-len(".shares")]
            value_shares[name] = cfg.floats(key)
    if not value_shares and using_default_schema:
        value_shares = dict(DEFAULT_VALUE_SHARES)

    section_shares: tuple[float, ...] | None = None
    if "section.shares" in cfg:
        section_shares = cfg.floats("section.shares")
    elif using_default_schema:
        section_shares = DEFAULT_SECTION_SHARES

    raw_curve = cfg.raw("fatigue_curve", "default")
    curve = default_fatigue_curve() if raw_curve == "default" else cfg.floats("fatigue_curve")

    return GeneratorConfig(
        schema=schema,
        n_users=cfg.int("n_users"),
        n_advertisers=cfg.int("n_advertisers"),
        n_campaigns=cfg.int("n_campaigns"),
        n_creatives=cfg.int("n_creatives"),
        days=cfg.int("days"),
        events_per_day=cfg.int("events_per_day"),
        base_ctr=cfg.float("base_ctr"),
        affinity_scale=cfg.float("affinity_scale", 0.3),
        fatigue_curve=curve,
        seed=seed_override if seed_override is not None else cfg.int("seed", 0),
        value_shares=value_shares or None,
        section_shares=section_shares,
        fatigue_window_days=cfg.int("fatigue_window_days", 7),
    )


def _window_days(raw: str, source: str) -> int:
    if raw in WINDOW_NAMES:
        return WINDOW_NAMES[raw]
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{source}: window must be day/week/month or a day count, got {raw!r}") from None


def hyperparams_from(cfg: ConfigMap) -> HyperParams:
    freq = FrequencyConfig(
        ad_feature=cfg.str("sfc.ad_feature", "campaign"),
        window_days=_window_days(cfg.str("sfc.window", "week"), cfg.source),
    )
    maybe = lambda key: cfg.float(key) if key in cfg else None
    return HyperParams(
        o=cfg.int("o", 2),
        s=cfg.int("s", 1),
        eta0=cfg.float("eta0", 0.1),
        alpha=cfg.float("alpha", 1.0),
        beta=cfg.float("beta", 0.6),
        lam=cfg.float("lambda", 1e-6),
        binning=BinningVector(cfg.int("bins", 26)),
        sfc=SfcSettings(freq=freq, weight_category=cfg.str("sfc.weights", "global")),
        init_scale=cfg.float("init_scale", 0.01),
        sfc_eta0=maybe("sfc.eta0"),
        sfc_alpha=maybe("sfc.alpha"),
        sfc_beta=maybe("sfc.beta"),
    )


def hfc_rules_from(cfg: ConfigMap) -> HfcRules:
    return HfcRules(
        campaign_cap=Cap(cfg.int("hfc.campaign_views", 5), cfg.int("hfc.campaign_days", 7)),
        creative_cap=Cap(cfg.int("hfc.creative_views", 2), cfg.int("hfc.creative_days", 1)),
    )


def sim_config_from(cfg: ConfigMap, seed_override: int | None = None) -> SimConfig:
    generator = generator_config_from(cfg, seed_override=seed_override)
    names_raw = cfg.raw("bucket.names")
    if names_raw:
        names = [n.strip() for n in names_raw.split(",")]
    else:
        names = sorted(
            {k.split(".")[1] for k in cfg.keys_with_prefix("bucket.") if k.count(".") == 2}
        )
    if not names:
        raise ConfigError(f"{cfg.source}: no buckets defined")
    buckets = []
    default_share = 1.0 / len(names)
    for name in names:
        buckets.append(
            BucketConfig(
                name=name,
                sfc_enabled=cfg.bool(f"bucket.{name}.sfc", False),
                hfc_enabled=cfg.bool(f"bucket.{name}.hfc", True),
                traffic_share=cfg.float(f"bucket.{name}.share", default_share),
                model_kind=cfg.str(f"bucket.{name}.model", "learned"),
                constant_pctr=cfg.float(f"bucket.{name}.constant_pctr", 0.1),
                online_training=cfg.bool(f"bucket.{name}.online", True),
            )
        )
    return SimConfig(
        generator=generator,
        buckets=tuple(buckets),
        hp=hyperparams_from(cfg),
        rules=hfc_rules_from(cfg),
        floor_ratio=cfg.float("floor_ratio", 0.1),
        bid_sigma=cfg.float("bid_sigma", 0.25),
        seed=generator.seed,
        collect_scored=cfg.bool("collect_scored", False),
    )
