"""Impression-event data model, event-log IO, and synthetic traffic generation.

Event logs are line-oriented, tab-separated ASCII with a ``#schema`` header
naming the user feature types, their value sets, and the serving sections --
greppable and diffable by design.  The synthetic generator emits served
impressions whose click labels are Bernoulli draws against a configurable
ground-truth model: a base CTR, a per-(user segment, campaign) affinity
multiplier, and a fatigue curve over the user's prior campaign views inside
a rolling window.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .freqtrack import SECONDS_PER_DAY, FrequencyState
from .rng import stable_normal, substream

#: Ground-truth probabilities are clamped into [CTR_EPS, 1 - CTR_EPS].
CTR_EPS = 1e-6

_FORBIDDEN_CHARS = ("\t", "\n", "|", "=", ",")


def _check_token(kind: str, token: str) -> None:
    if not token:
        raise SchemaError(f"empty {kind}")
    for ch in _FORBIDDEN_CHARS:
        if ch in token:
            raise SchemaError(f"{kind} {token!r} contains forbidden character {ch!r}")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered user feature types, serving sections, and optional extra ad features.

    Ads always carry the advertiser -> campaign -> creative hierarchy, so only
    the *extra* (multi-value, open-vocabulary) ad features are declared here
    by name.  An explicit "unknown" value is an ordinary member of a user
    feature's value set.
    """

    user_features: tuple[tuple[str, tuple[str, ...]], ...]
    sections: tuple[str, ...]
    ad_extra_features: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.user_features) < 2:
            raise SchemaError("pairwise construction needs at least two user feature types")
        seen: set[str] = set()
        for name, values in self.user_features:
            _check_token("feature name", name)
            if name in seen:
                raise SchemaError(f"duplicate user feature type {name!r}")
            seen.add(name)
            if not values:
                raise SchemaError(f"user feature {name!r} has an empty value set")
            if len(set(values)) != len(values):
                raise SchemaError(f"user feature {name!r} has duplicate values")
            for v in values:
                _check_token(f"value of {name!r}", v)
        if not self.sections:
            raise SchemaError("schema needs at least one section")
        for s in self.sections:
            _check_token("section", s)
        if len(set(self.sections)) != len(self.sections):
            raise SchemaError("duplicate section ids")
        for name in self.ad_extra_features:
            _check_token("extra ad feature name", name)

    @property
    def K(self) -> int:
        """Number of user feature types."""
        return len(self.user_features)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.user_features)

    def values_of(self, name: str) -> tuple[str, ...]:
        for fname, values in self.user_features:
            if fname == name:
                return values
        raise SchemaError(f"unknown user feature type {name!r}")

    def validate_profile(self, profile: "UserProfile") -> None:
        if len(profile.feature_values) != self.K:
            raise SchemaError(
                f"profile has {len(profile.feature_values)} feature values, schema has {self.K}"
            )
        for (name, values), v in zip(self.user_features, profile.feature_values):
            if v not in values:
                raise SchemaError(f"value {v!r} not in feature {name!r} value set")

    def header_line(self) -> str:
        parts = ["#schema"]
        parts.extend(f"{name}={'|'.join(values)}" for name, values in self.user_features)
        parts.append(f"sections={','.join(self.sections)}")
        if self.ad_extra_features:
            parts.append(f"extras={','.join(self.ad_extra_features)}")
        return "\t".join(parts)

    @classmethod
    def from_header_line(cls, line: str) -> "FeatureSchema":
        parts = line.rstrip("\n").split("\t")
        if not parts or parts[0] != "#schema":
            raise ParseError("event log must start with a #schema header", line_no=1)
        features: list[tuple[str, tuple[str, ...]]] = []
        sections: tuple[str, ...] = ()
        extras: tuple[str, ...] = ()
        for token in parts[1:]:
            if "=" not in token:
                raise ParseError(f"malformed schema token {token!r}", line_no=1)
            name, _, payload = token.partition("=")
            if name == "sections":
                sections = tuple(payload.split(","))
            elif name == "extras":
                extras = tuple(payload.split(","))
            else:
                features.append((name, tuple(payload.split("|"))))
        try:
            return cls(tuple(features), sections, extras)
        except SchemaError as exc:
            raise ParseError(f"invalid schema header: {exc}", line_no=1) from exc

    def hash(self) -> str:
        """Stable 12-hex-digit digest of the schema, for snapshot compatibility checks."""
        return hashlib.sha256(self.header_line().encode("ascii")).hexdigest()[:12]


@dataclass(frozen=True, slots=True)
class UserProfile:
    """One user as the model sees it: an opaque id plus one value per feature type."""

    user_id: str
    feature_values: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class AdIdentity:
    """One ad: its hierarchy ids plus optional multi-value extra features."""

    creative_id: str
    campaign_id: str
    advertiser_id: str
    extra_features: tuple[tuple[str, tuple[str, ...]], ...] = ()


@dataclass(frozen=True, slots=True)
class ImpressionEvent:
    """One served impression: the atom of training, statistics, and simulation."""

    user: UserProfile
    ad: AdIdentity
    timestamp: int
    section_id: str
    click: int

    def __post_init__(self):
        if self.click not in (0, 1):
            raise SchemaError(f"click must be 0 or 1, got {self.click!r}")
        if self.timestamp < 0:
            raise SchemaError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass(frozen=True, slots=True)
class Opportunity:
    """A serving opportunity: a user arriving at a section, before any ad is chosen."""

    timestamp: int
    user: UserProfile
    section_id: str


# ---------------------------------------------------------------------------
# Event-log IO
#
# Line format (tab separated, fixed order):
#   timestamp  user_id  <K user feature values>  advertiser_id  campaign_id
#   creative_id  section_id  click
# ---------------------------------------------------------------------------


def write_event_line(event: ImpressionEvent) -> str:
    """Canonical single-line encoding of one event (no trailing newline)."""
    fields = [
        str(event.timestamp),
        event.user.user_id,
        *event.user.feature_values,
        event.ad.advertiser_id,
        event.ad.campaign_id,
        event.ad.creative_id,
        event.section_id,
        str(event.click),
    ]
    return "\t".join(fields)


def parse_event_line(schema: FeatureSchema, line: str, line_no: int = 0) -> ImpressionEvent:
    """Decode one event-log line; inverse of :func:`write_event_line`.

    Raises :class:`ParseError` naming the line and field for malformed field
    counts, unknown feature values, non-integer timestamps, and labels
    outside {0, 1}.
    """
    parts = line.rstrip("\n").split("\t")
    k = schema.K
    expected = 7 + k
    if len(parts) != expected:
        raise ParseError(f"expected {expected} fields, got {len(parts)}", line_no=line_no)
    try:
        timestamp = int(parts[0])
    except ValueError:
        raise ParseError(f"non-integer timestamp {parts[0]!r}", line_no=line_no, field="timestamp") from None
    if timestamp < 0:
        raise ParseError(f"negative timestamp {timestamp}", line_no=line_no, field="timestamp")
    user_id = parts[1]
    values = tuple(parts[2 : 2 + k])
    for (name, allowed), v in zip(schema.user_features, values):
        if v not in allowed:
            raise ParseError(f"unknown value {v!r}", line_no=line_no, field=name)
    advertiser_id, campaign_id, creative_id, section_id, label = parts[2 + k :]
    if section_id not in schema.sections:
        raise ParseError(f"unknown section {section_id!r}", line_no=line_no, field="section_id")
    if label not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, got {label!r}", line_no=line_no, field="label")
    return ImpressionEvent(
        user=UserProfile(user_id, values),
        ad=AdIdentity(creative_id, campaign_id, advertiser_id),
        timestamp=timestamp,
        section_id=section_id,
        click=int(label),
    )


def write_event_log(path: str, schema: FeatureSchema, events: Iterable[ImpressionEvent]) -> int:
    """Write header plus one line per event; returns the event count."""
    n = 0
    with open(path, "w", encoding="ascii") as fh:
        fh.write(schema.header_line() + "\n")
        for event in events:
            fh.write(write_event_line(event) + "\n")
            n += 1
    return n


def read_event_log(path: str) -> tuple[FeatureSchema, Iterator[ImpressionEvent]]:
    """Parse the header eagerly and return (schema, lazy event iterator)."""
    fh = open(path, encoding="ascii")
    header = fh.readline()
    if not header:
        fh.close()
        raise ParseError("empty event log", line_no=1)
    try:
        schema = FeatureSchema.from_header_line(header)
    except ParseError:
        fh.close()
        raise

    def _iter() -> Iterator[ImpressionEvent]:
        with fh:
            for line_no, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                yield parse_event_line(schema, line, line_no=line_no)

    return schema, _iter()


# ---------------------------------------------------------------------------
# Synthetic traffic
# ---------------------------------------------------------------------------


def default_schema() -> FeatureSchema:
    return FeatureSchema(
        user_features=(
            ("gender", ("female", "male", "unknown")),
            ("age", ("20-30", "30-40", "40-50", "50-60", "60-70", "unknown")),
            ("geo", ("us", "eu", "apac", "latam", "unknown")),
        ),
        sections=("mail", "home", "articles", "apps", "web"),
    )


#: Default population shares; gender follows observed native-traffic shares
#: (31.4 / 46.8 / 21.8), ages are skewed toward the 30-40 band.
DEFAULT_VALUE_SHARES: Mapping[str, tuple[float, ...]] = {
    "gender": (0.314, 0.468, 0.218),
    "age": (0.195, 0.358, 0.190, 0.109, 0.064, 0.084),
    "geo": (0.45, 0.20, 0.15, 0.10, 0.10),
}

DEFAULT_SECTION_SHARES: tuple[float, ...] = (0.33, 0.17, 0.06, 0.22, 0.22)


def default_fatigue_curve(length: int = 26) -> tuple[float, ...]:
    """Multipliers m(v) with a 20% drop after one prior view and ~50% by seven."""
    curve = [1.0]
    for v in range(1, length):
        curve.append(0.8 * 0.931 ** (v - 1))
    return tuple(curve)


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything the synthetic stream depends on; (config, seed) fixes the bytes."""

    schema: FeatureSchema
    n_users: int
    n_advertisers: int
    n_campaigns: int
    n_creatives: int
    days: int
    events_per_day: int
    base_ctr: float
    affinity_scale: float
    fatigue_curve: tuple[float, ...]
    seed: int
    value_shares: Mapping[str, tuple[float, ...]] | None = None
    section_shares: tuple[float, ...] | None = None
    #: Window (days) and level at which the ground truth accumulates fatigue;
    #: campaign over one week matches the model's default frequency feature.
    fatigue_window_days: int = 7
    #: Zipf-style exponent for per-user activity (0 = uniform).  Heavy-tailed
    #: activity keeps fresh impressions dominant while a few heavy users
    #: populate the high-frequency bins, like production traffic.
    user_activity_skew: float = 0.0

    def __post_init__(self):
        counts = {
            "n_users": self.n_users,
            "n_advertisers": self.n_advertisers,
            "n_campaigns": self.n_campaigns,
            "n_creatives": self.n_creatives,
            "days": self.days,
            "events_per_day": self.events_per_day,
        }
        for name, n in counts.items():
            if n < 1:
                raise ConfigError(f"{name} must be >= 1, got {n}")
        if not 0.0 < self.base_ctr < 1.0:
            raise ConfigError(f"base_ctr must be in (0, 1), got {self.base_ctr}")
        if self.affinity_scale < 0.0:
            raise ConfigError(f"affinity_scale must be >= 0, got {self.affinity_scale}")
        if not self.fatigue_curve:
            raise ConfigError("fatigue_curve must be non-empty")
        if self.fatigue_curve[0] != 1.0:
            raise ConfigError(f"fatigue_curve[0] must be 1.0, got {self.fatigue_curve[0]}")
        prev = 1.0
        for i, m in enumerate(self.fatigue_curve):
            if not 0.0 < m <= 1.0:
                raise ConfigError(f"fatigue_curve[{i}]={m} outside (0, 1]")
            if m > prev:
                raise ConfigError(f"fatigue_curve must be non-increasing (index {i})")
            prev = m
        if self.fatigue_window_days < 1:
            raise ConfigError("fatigue_window_days must be >= 1")
        if self.user_activity_skew < 0:
            raise ConfigError("user_activity_skew must be >= 0")
        if self.value_shares is not None:
            for name, shares in self.value_shares.items():
                values = self.schema.values_of(name)
                _check_shares(f"value_shares[{name!r}]", shares, len(values))
        if self.section_shares is not None:
            _check_shares("section_shares", self.section_shares, len(self.schema.sections))

    def shares_for(self, feature_name: str) -> np.ndarray:
        values = self.schema.values_of(feature_name)
        if self.value_shares and feature_name in self.value_shares:
            return np.asarray(self.value_shares[feature_name], dtype=float)
        return np.full(len(values), 1.0 / len(values))

    def section_share_array(self) -> np.ndarray:
        if self.section_shares is not None:
            return np.asarray(self.section_shares, dtype=float)
        n = len(self.schema.sections)
        return np.full(n, 1.0 / n)

    def user_weight_array(self) -> np.ndarray | None:
        """Per-user arrival probabilities; None means uniform."""
        if self.user_activity_skew == 0.0:
            return None
        w = 1.0 / np.power(np.arange(1, self.n_users + 1, dtype=float), self.user_activity_skew)
        return w / w.sum()


def _check_shares(name: str, shares: Sequence[float], expected_len: int) -> None:
    if len(shares) != expected_len:
        raise ConfigError(f"{name} has {len(shares)} entries, expected {expected_len}")
    if any(s < 0 for s in shares):
        raise ConfigError(f"{name} has negative entries")
    total = float(sum(shares))
    if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-6):
        raise ConfigError(f"{name} must sum to 1, got {total}")


def default_generator_config(seed: int = 0, **overrides) -> GeneratorConfig:
    """A small, calibrated default setup; override any field by keyword."""
    base = dict(
        schema=default_schema(),
        n_users=2000,
        n_advertisers=6,
        n_campaigns=15,
        n_creatives=45,
        days=14,
        events_per_day=20000,
        base_ctr=0.08,
        affinity_scale=0.3,
        fatigue_curve=default_fatigue_curve(),
        seed=seed,
        value_shares=DEFAULT_VALUE_SHARES,
        section_shares=DEFAULT_SECTION_SHARES,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def build_catalog(config: GeneratorConfig) -> tuple[AdIdentity, ...]:
    """One AdIdentity per creative; campaigns and creatives assigned round-robin."""
    campaigns_adv = [i % config.n_advertisers for i in range(config.n_campaigns)]
    ads = []
    for c in range(config.n_creatives):
        camp = c % config.n_campaigns
        ads.append(
            AdIdentity(
                creative_id=f"cr{c:05d}",
                campaign_id=f"camp{camp:04d}",
                advertiser_id=f"adv{campaigns_adv[camp]:03d}",
            )
        )
    return tuple(ads)


def build_users(config: GeneratorConfig) -> tuple[UserProfile, ...]:
    rng = substream(config.seed, "users")
    columns = []
    for name, values in config.schema.user_features:
        idx = rng.choice(len(values), size=config.n_users, p=config.shares_for(name))
        columns.append([values[i] for i in idx])
    return tuple(
        UserProfile(f"u{i:06d}", tuple(col[i] for col in columns))
        for i in range(config.n_users)
    )


@lru_cache(maxsize=1 << 18)
def _affinity_z(seed: int, segment: str, campaign_id: str) -> float:
    return stable_normal(seed, "affinity", segment, campaign_id)


def affinity(config: GeneratorConfig, feature_values: tuple[str, ...], campaign_id: str) -> float:
    """Deterministic per-(user segment, campaign) multiplier, exactly 1 at scale 0."""
    if config.affinity_scale == 0.0:
        return 1.0
    z = _affinity_z(config.seed, "|".join(feature_values), campaign_id)
    return math.exp(config.affinity_scale * z)


def ground_truth_ctr(user: UserProfile, ad: AdIdentity, v: int, config: GeneratorConfig) -> float:
    """True click probability for a user seeing ``ad`` with ``v`` prior in-window views."""
    if v < 0:
        raise ConfigError(f"prior view count must be >= 0, got {v}")
    curve = config.fatigue_curve
    m = curve[min(v, len(curve) - 1)]
    p = config.base_ctr * affinity(config, user.feature_values, ad.campaign_id) * m
    return min(max(p, CTR_EPS), 1.0 - CTR_EPS)


def generate_stream(config: GeneratorConfig) -> Iterator[ImpressionEvent]:
    """Emit ``days * events_per_day`` events in nondecreasing timestamp order.

    Click labels are Bernoulli draws at the ground-truth CTR evaluated at the
    user's true prior campaign-view count inside the fatigue window.  Fully
    deterministic given the config (draw order is fixed per day: times,
    users, ads, sections, click uniforms).
    """
    users = build_users(config)
    ads = build_catalog(config)
    sections = config.schema.sections
    section_p = config.section_share_array()
    rng = substream(config.seed, "stream")
    state = FrequencyState()
    window = config.fatigue_window_days
    user_p = config.user_weight_array()

    for day in range(config.days):
        n = config.events_per_day
        times = np.sort(rng.integers(0, SECONDS_PER_DAY, size=n)) + day * SECONDS_PER_DAY
        if user_p is None:
            user_idx = rng.integers(0, config.n_users, size=n)
        else:
            user_idx = rng.choice(config.n_users, size=n, p=user_p)
        ad_idx = rng.integers(0, config.n_creatives, size=n)
        section_idx = rng.choice(len(sections), size=n, p=section_p)
        click_u = rng.random(size=n)
        for i in range(n):
            user = users[user_idx[i]]
            ad = ads[ad_idx[i]]
            t = int(times[i])
            v = state.count(user.user_id, "campaign", ad.campaign_id, t, window)
            p = ground_truth_ctr(user, ad, v, config)
            event = ImpressionEvent(
                user=user,
                ad=ad,
                timestamp=t,
                section_id=sections[section_idx[i]],
                click=1 if click_u[i] < p else 0,
            )
            yield event
            state.record_view(user, ad, t)


def generate_opportunities(config: GeneratorConfig) -> Iterator[Opportunity]:
    """Serving opportunities (no ads, no clicks) on an independent substream."""
    users = build_users(config)
    sections = config.schema.sections
    section_p = config.section_share_array()
    rng = substream(config.seed, "opportunities")
    user_p = config.user_weight_array()
    for day in range(config.days):
        n = config.events_per_day
        times = np.sort(rng.integers(0, SECONDS_PER_DAY, size=n)) + day * SECONDS_PER_DAY
        if user_p is None:
            user_idx = rng.integers(0, config.n_users, size=n)
        else:
            user_idx = rng.choice(config.n_users, size=n, p=user_p)
        section_idx = rng.choice(len(sections), size=n, p=section_p)
        for i in range(n):
            yield Opportunity(int(times[i]), users[user_idx[i]], sections[section_idx[i]])
