"""Latent-factor click model with learned per-frequency-bin score offsets.

Scoring is ``pctr = sigmoid(b + u . a [+ w[bin(f)]])`` where ``u`` is built
from the user's per-feature-value vectors with a pairwise-product
construction, ``a`` is the sum of the ad's per-feature-value vectors, and
``w`` is a frequency weight vector selected by the configured weight
category.  All parameters are created lazily with a deterministic per-key
initializer, so cold-start order never affects reproducibility.

Dimension bookkeeping for K user feature types, ``o`` entries per feature
pair and ``s`` solo entries per feature:

* each feature-value vector has dimension d = (K-1)*o + s,
* the combined user (and ad) vectors have dimension D = C(K,2)*o + K*s.

Layout of a value vector ``v_k``: one o-wide segment per *other* feature
type (ascending schema order), then the s solo entries.  Layout of the
combined vector: one o-wide block per unordered pair (k < j, lexicographic),
holding the elementwise product of v_k's segment assigned to j and v_j's
segment assigned to k, then one s-wide solo block per feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, SchemaError, SnapshotError
from .events import AdIdentity, FeatureSchema, UserProfile
from .freqtrack import FrequencyConfig
from .rng import substream

WEIGHT_CATEGORIES = ("global", "campaign", "advertiser")

GLOBAL_WEIGHT_KEY = "global"


def sigmoid(x: float) -> float:
    """Numerically stable logistic function."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class BinningVector:
    """Half-open integer bins [0:1), [1:2), ..., [n-1:inf); default 26 bins."""

    n_bins: int = 26

    def __post_init__(self):
        if self.n_bins < 2:
            raise ConfigError(f"need at least 2 bins, got {self.n_bins}")

    def index(self, f: int) -> int:
        """Bin index for a frequency value: min(f, n_bins - 1)."""
        if f < 0:
            raise ConfigError(f"frequency must be >= 0, got {f}")
        return min(f, self.n_bins - 1)

    def boundaries(self) -> list[tuple[int, float]]:
        """The [lo, hi) bin edges, last bin unbounded."""
        edges = [(i, float(i + 1)) for i in range(self.n_bins - 1)]
        edges.append((self.n_bins - 1, math.inf))
        return edges


@dataclass(frozen=True)
class SfcSettings:
    """Frequency feature source plus weight-vector category."""

    freq: FrequencyConfig = FrequencyConfig("campaign", 7)
    weight_category: str = "global"

    def __post_init__(self):
        if self.weight_category not in WEIGHT_CATEGORIES:
            raise ConfigError(
                f"weight_category must be one of {WEIGHT_CATEGORIES}, got {self.weight_category!r}"
            )


@dataclass(frozen=True)
class HyperParams:
    o: int = 2
    s: int = 1
    eta0: float = 0.1
    alpha: float = 1.0
    beta: float = 0.6
    lam: float = 1e-6
    binning: BinningVector = BinningVector()
    sfc: SfcSettings = SfcSettings()
    init_scale: float = 0.01
    # Optional separate step-size parameters for the frequency weights;
    # None means share eta0/alpha/beta with the latent vectors.
    sfc_eta0: float | None = None
    sfc_alpha: float | None = None
    sfc_beta: float | None = None

    def __post_init__(self):
        if self.o < 0 or self.s < 0 or self.o + self.s == 0:
            raise ConfigError("need o >= 0, s >= 0 and o + s > 0")
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")

    def user_value_dim(self, k_features: int) -> int:
        """d = (K-1)*o + s."""
        return (k_features - 1) * self.o + self.s

    def combined_dim(self, k_features: int) -> int:
        """D = C(K,2)*o + K*s."""
        return math.comb(k_features, 2) * self.o + k_features * self.s

    def sfc_step_params(self) -> tuple[float, float, float]:
        return (
            self.eta0 if self.sfc_eta0 is None else self.sfc_eta0,
            self.alpha if self.sfc_alpha is None else self.sfc_alpha,
            self.beta if self.sfc_beta is None else self.sfc_beta,
        )


class ParamGroup:
    """Keyed parameter vectors with parallel per-coordinate gradient accumulators."""

    def __init__(self, dim: int, initializer):
        self.dim = dim
        self._init = initializer
        self.values: dict = {}
        self.accs: dict = {}

    def get(self, key) -> np.ndarray:
        vec = self.values.get(key)
        if vec is None:
            vec = self._init(key)
            self.values[key] = vec
            self.accs[key] = np.zeros(self.dim)
        return vec

    def peek(self, key) -> np.ndarray | None:
        return self.values.get(key)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(slots=True)
class PredictionContext:
    """Forward-pass intermediates, kept so the trainer can reuse them for gradients."""

    pctr: float
    score: float
    raw_score: float
    u_vec: np.ndarray
    a_vec: np.ndarray
    user_value_vecs: list
    ad_components: list
    frequency: int
    bin_index: int | None
    weight_key: str | None
    sfc_enabled: bool


class CtrModel:
    """All learned parameters plus the scoring rules; one instance per trainer."""

    def __init__(self, schema: FeatureSchema, hp: HyperParams, seed: int = 0,
                 sfc_enabled: bool = False):
        self.schema = schema
        self.hp = hp
        self.seed = seed
        self.sfc_enabled = sfc_enabled
        self.K = schema.K
        self.d = hp.user_value_dim(self.K)
        self.D = hp.combined_dim(self.K)

        k, o, s = self.K, hp.o, hp.s
        self._pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
        self._pair_slice = {
            pair: slice(p * o, (p + 1) * o) for p, pair in enumerate(self._pairs)
        }
        solo_base = len(self._pairs) * o
        self._solo_slice = {
            kk: slice(solo_base + kk * s, solo_base + (kk + 1) * s) for kk in range(k)
        }
        # Segment of feature k's value vector assigned to feature j.
        self._seg_slice = {}
        for kk in range(k):
            for jj in range(k):
                if jj == kk:
                    continue
                idx = jj if jj < kk else jj - 1
                self._seg_slice[(kk, jj)] = slice(idx * o, (idx + 1) * o)
        self._value_solo = slice((k - 1) * o, (k - 1) * o + s)

        self.bias = float(substream(seed, "init", "bias").uniform(-hp.init_scale, hp.init_scale))
        self.bias_acc = 0.0
        self.user_vecs = ParamGroup(self.d, self._user_init)
        self.ad_vecs = ParamGroup(self.D, self._ad_init)
        self.sfc_weights = ParamGroup(hp.binning.n_bins, lambda key: np.zeros(hp.binning.n_bins))

    def _user_init(self, key) -> np.ndarray:
        name, value = key
        rng = substream(self.seed, "init", "user", name, value)
        return rng.uniform(-self.hp.init_scale, self.hp.init_scale, self.d)

    def _ad_init(self, key) -> np.ndarray:
        level, value = key
        rng = substream(self.seed, "init", "ad", level, value)
        return rng.uniform(-self.hp.init_scale, self.hp.init_scale, self.D)

    # -- vector construction ------------------------------------------------

    def user_value_vectors(self, profile: UserProfile) -> list[tuple[tuple[str, str], np.ndarray]]:
        if len(profile.feature_values) != self.K:
            raise SchemaError(
                f"profile has {len(profile.feature_values)} values, schema expects {self.K}"
            )
        names = self.schema.feature_names
        return [
            ((names[k], profile.feature_values[k]), self.user_vecs.get((names[k], profile.feature_values[k])))
            for k in range(self.K)
        ]

    def user_vector(self, profile: UserProfile) -> np.ndarray:
        """Combined user vector; multilinear in each feature's value vector."""
        return self._combine_user(self.user_value_vectors(profile))

    def _combine_user(self, value_vecs: list) -> np.ndarray:
        out = np.empty(self.D)
        vecs = [vec for _, vec in value_vecs]
        for pair in self._pairs:
            k, j = pair
            out[self._pair_slice[pair]] = (
                vecs[k][self._seg_slice[(k, j)]] * vecs[j][self._seg_slice[(j, k)]]
            )
        for k in range(self.K):
            out[self._solo_slice[k]] = vecs[k][self._value_solo]
        return out

    def ad_component_keys(self, ad: AdIdentity) -> list[tuple[tuple[str, str], float]]:
        """(key, coefficient) pairs: hierarchy levels at 1, extras averaged per feature."""
        components = [
            (("creative", ad.creative_id), 1.0),
            (("campaign", ad.campaign_id), 1.0),
            (("advertiser", ad.advertiser_id), 1.0),
        ]
        for name, values in ad.extra_features:
            unique = list(dict.fromkeys(values))
            if not unique:
                continue
            coeff = 1.0 / len(unique)
            components.extend(((name, v), coeff) for v in unique)
        return components

    def ad_vector(self, ad: AdIdentity) -> np.ndarray:
        out = np.zeros(self.D)
        for key, coeff in self.ad_component_keys(ad):
            out += coeff * self.ad_vecs.get(key)
        return out

    # -- scoring --------------------------------------------------------------

    def raw_score(self, u_vec: np.ndarray, a_vec: np.ndarray) -> float:
        if u_vec.shape != a_vec.shape:
            raise SchemaError(f"dimension mismatch: {u_vec.shape} vs {a_vec.shape}")
        return self.bias + float(np.dot(u_vec, a_vec))

    def sfc_weight_key(self, ad: AdIdentity) -> str:
        category = self.hp.sfc.weight_category
        if category == "global":
            return GLOBAL_WEIGHT_KEY
        if category == "campaign":
            return ad.campaign_id
        return ad.advertiser_id

    def sfc_score(self, score: float, f: int, key: str) -> float:
        """Score plus the selected weight vector's entry at bin(f)."""
        w = self.sfc_weights.get(key)
        return score + float(w[self.hp.binning.index(f)])

    def pctr(self, score: float) -> float:
        return sigmoid(score)

    def predict(self, user: UserProfile, ad: AdIdentity, f: int = 0,
                sfc_enabled: bool | None = None) -> PredictionContext:
        """Full forward pass; returns intermediates for gradient reuse."""
        use_sfc = self.sfc_enabled if sfc_enabled is None else sfc_enabled
        value_vecs = self.user_value_vectors(user)
        u_vec = self._combine_user(value_vecs)
        components = self.ad_component_keys(ad)
        a_vec = np.zeros(self.D)
        for key, coeff in components:
            a_vec += coeff * self.ad_vecs.get(key)
        raw = self.bias + float(np.dot(u_vec, a_vec))
        if use_sfc:
            key = self.sfc_weight_key(ad)
            bin_idx = self.hp.binning.index(f)
            score = raw + float(self.sfc_weights.get(key)[bin_idx])
        else:
            key = None
            bin_idx = None
            score = raw
        return PredictionContext(
            pctr=sigmoid(score),
            score=score,
            raw_score=raw,
            u_vec=u_vec,
            a_vec=a_vec,
            user_value_vecs=value_vecs,
            ad_components=components,
            frequency=f,
            bin_index=bin_idx,
            weight_key=key,
            sfc_enabled=use_sfc,
        )

    def predict_with(self, user_value_vecs: list, u_vec: np.ndarray, ad: AdIdentity,
                     a_vec: np.ndarray, f: int, sfc_enabled: bool,
                     score: float | None = None) -> PredictionContext:
        """Build a PredictionContext from already-computed forward intermediates."""
        components = self.ad_component_keys(ad)
        if score is None:
            raw = self.bias + float(np.dot(u_vec, a_vec))
            if sfc_enabled:
                key = self.sfc_weight_key(ad)
                bin_idx = self.hp.binning.index(f)
                score = raw + float(self.sfc_weights.get(key)[bin_idx])
            else:
                key, bin_idx = None, None
                score = raw
        else:
            raw = score
            key, bin_idx = None, None
            if sfc_enabled:
                key = self.sfc_weight_key(ad)
                bin_idx = self.hp.binning.index(f)
                raw = score - float(self.sfc_weights.get(key)[bin_idx])
        return PredictionContext(
            pctr=sigmoid(score), score=score, raw_score=raw, u_vec=u_vec, a_vec=a_vec,
            user_value_vecs=user_value_vecs, ad_components=components, frequency=f,
            bin_index=bin_idx, weight_key=key, sfc_enabled=sfc_enabled,
        )

    def user_gradient(self, k: int, ctx: PredictionContext) -> np.ndarray:
        """d(score)/d(v_k) assembled into value-vector layout (no loss factor)."""
        grad = np.zeros(self.d)
        vecs = [vec for _, vec in ctx.user_value_vecs]
        for pair in self._pairs:
            i, j = pair
            if i != k and j != k:
                continue
            other = j if i == k else i
            a_block = ctx.a_vec[self._pair_slice[pair]]
            grad[self._seg_slice[(k, other)]] += a_block * vecs[other][self._seg_slice[(other, k)]]
        grad[self._value_solo] += ctx.a_vec[self._solo_slice[k]]
        return grad

    # -- persistence ----------------------------------------------------------

    def save(self, path: str) -> None:
        """Text snapshot; floats via repr so reload reproduces scores bit-exactly."""
        hp = self.hp
        with open(path, "w", encoding="ascii") as fh:
            fh.write("#ctr-model\tv1\n")
            fh.write(f"schema_hash\t{self.schema.hash()}\n")
            fh.write(self.schema.header_line() + "\n")
            fh.write(f"seed\t{self.seed}\n")
            fh.write(f"sfc_enabled\t{int(self.sfc_enabled)}\n")
            fh.write(
                "hp\t"
                + "\t".join(
                    repr(x)
                    for x in (
                        hp.o, hp.s, hp.eta0, hp.alpha, hp.beta, hp.lam,
                        hp.binning.n_bins, hp.init_scale,
                    )
                )
                + "\n"
            )
            fh.write(f"sfc\t{hp.sfc.freq.ad_feature}\t{hp.sfc.freq.window_days}\t{hp.sfc.weight_category}\n")
            fh.write(
                "sfc_step\t"
                + "\t".join("-" if x is None else repr(x) for x in (hp.sfc_eta0, hp.sfc_alpha, hp.sfc_beta))
                + "\n"
            )
            fh.write(f"bias\t{self.bias!r}\t{self.bias_acc!r}\n")
            for group_name, group in (("U", self.user_vecs), ("A", self.ad_vecs), ("W", self.sfc_weights)):
                for key in sorted(group.values):
                    vec = group.values[key]
                    acc = group.accs[key]
                    key_fields = key if isinstance(key, tuple) else (key,)
                    fh.write(
                        group_name
                        + "\t" + "\t".join(key_fields)
                        + "\t" + " ".join(repr(float(x)) for x in vec)
                        + "\t" + " ".join(repr(float(x)) for x in acc)
                        + "\n"
                    )

    @classmethod
    def load(cls, path: str) -> "CtrModel":
        with open(path, encoding="ascii") as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("#ctr-model"):
            raise SnapshotError(f"{path}: not a model snapshot")
        fields: dict[str, list[str]] = {}
        vec_lines: list[list[str]] = []
        for raw in lines[1:]:
            parts = raw.split("\t")
            if parts[0] in ("U", "A", "W"):
                vec_lines.append(parts)
            elif parts[0] == "#schema":
                fields["schema"] = [raw]
            else:
                fields[parts[0]] = parts[1:]
        try:
            schema = FeatureSchema.from_header_line(fields["schema"][0])
            o, s = int(fields["hp"][0]), int(fields["hp"][1])
            eta0, alpha, beta, lam = (float(x) for x in fields["hp"][2:6])
            n_bins, init_scale = int(fields["hp"][6]), float(fields["hp"][7])
            ad_feature, window_days, weight_category = fields["sfc"]
            step_overrides = [None if x == "-" else float(x) for x in fields["sfc_step"]]
            hp = HyperParams(
                o=o, s=s, eta0=eta0, alpha=alpha, beta=beta, lam=lam,
                binning=BinningVector(n_bins),
                sfc=SfcSettings(FrequencyConfig(ad_feature, int(window_days)), weight_category),
                init_scale=init_scale,
                sfc_eta0=step_overrides[0], sfc_alpha=step_overrides[1], sfc_beta=step_overrides[2],
            )
            model = cls(schema, hp, seed=int(fields["seed"][0]),
                        sfc_enabled=bool(int(fields["sfc_enabled"][0])))
            if fields["schema_hash"][0] != schema.hash():
                raise SnapshotError(f"{path}: schema hash mismatch")
            model.bias = float(fields["bias"][0])
            model.bias_acc = float(fields["bias"][1])
            for parts in vec_lines:
                group = {"U": model.user_vecs, "A": model.ad_vecs, "W": model.sfc_weights}[parts[0]]
                if parts[0] == "W":
                    key: object = parts[1]
                    vec_s, acc_s = parts[2], parts[3]
                else:
                    key = (parts[1], parts[2])
                    vec_s, acc_s = parts[3], parts[4]
                vec = np.array([float(x) for x in vec_s.split(" ")])
                acc = np.array([float(x) for x in acc_s.split(" ")])
                if vec.shape != (group.dim,) or acc.shape != (group.dim,):
                    raise SnapshotError(f"{path}: wrong vector length for key {key!r}")
                group.values[key] = vec
                group.accs[key] = acc
        except (KeyError, ValueError, IndexError) as exc:
            raise SnapshotError(f"{path}: malformed snapshot ({exc})") from exc
        return model
