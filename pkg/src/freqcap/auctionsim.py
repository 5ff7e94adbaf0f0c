"""Simulated serving: eligibility filtering, GSP auctions, and A/B buckets.

Each bucket owns an independent frequency state, model, and click RNG
substream.  Users are hashed to buckets (not impressions), so a user's whole
frequency history stays inside one bucket and capping effects are
bucket-local.  Click realization always uses the ground-truth CTR at the
user's actual in-window campaign views; the simulator is the "real world"
and the models only ever see their own predictions.

Pricing is generalized second price: the winner pays
``(rankingScore_2 / rankingScore_1) * bid_1``, which never exceeds its own
bid.  A single-candidate auction pays a configurable floor fraction of the
bid (the no-runner-up price is a simulator choice, not part of the pricing
rule).
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, UndefinedMetricError
from .events import (
    AdIdentity,
    GeneratorConfig,
    ImpressionEvent,
    Opportunity,
    UserProfile,
    affinity,
    build_catalog,
    build_users,
    generate_opportunities,
    ground_truth_ctr,
    parse_event_line,
    write_event_line,
)
from .freqtrack import AD_LEVELS, FrequencyState, day_of
from .metrics import ScoredArrays
from .model import CtrModel, HyperParams, sigmoid
from .rng import derive_seed, stable_unit, substream
from .trainer import apply_update, event_gradients


@dataclass(frozen=True)
class AdCandidate:
    """One biddable ad: identity, CPC bid, and a targeting predicate stub."""

    ad: AdIdentity
    bid: float
    targeting: Callable[[UserProfile], bool] | None = None
    active: bool = True

    def __post_init__(self):
        if self.bid <= 0:
            raise ConfigError(f"bid must be positive, got {self.bid}")

    def targets(self, user: UserProfile) -> bool:
        return True if self.targeting is None else bool(self.targeting(user))


@dataclass(frozen=True)
class Cap:
    max_views: int
    window_days: int

    def __post_init__(self):
        if self.max_views < 1 or self.window_days < 1:
            raise ConfigError("caps must be positive")


@dataclass(frozen=True)
class HfcRules:
    """Hard capping defaults: five campaign views a week, two creative views a day."""

    campaign_cap: Cap = Cap(5, 7)
    creative_cap: Cap = Cap(2, 1)
    advertiser_overrides: Mapping[str, tuple[Cap, Cap]] | None = None

    def caps_for(self, advertiser_id: str) -> tuple[Cap, Cap]:
        if self.advertiser_overrides and advertiser_id in self.advertiser_overrides:
            return self.advertiser_overrides[advertiser_id]
        return self.campaign_cap, self.creative_cap


@dataclass(frozen=True)
class BucketConfig:
    """One serving bucket: which model flavor, whether hard caps apply, traffic share."""

    name: str
    sfc_enabled: bool
    hfc_enabled: bool
    traffic_share: float
    model_kind: str = "learned"  # learned | oracle | constant
    constant_pctr: float = 0.1
    online_training: bool = True

    def __post_init__(self):
        if not 0.0 < self.traffic_share <= 1.0:
            raise ConfigError(f"traffic_share must be in (0, 1], got {self.traffic_share}")
        if self.model_kind not in ("learned", "oracle", "constant"):
            raise ConfigError(f"unknown model_kind {self.model_kind!r}")
        if not 0.0 < self.constant_pctr < 1.0:
            raise ConfigError("constant_pctr must be in (0, 1)")


@dataclass
class AuctionResult:
    winner: AdCandidate | None
    gsp_price: float
    winner_score: float
    runnerup_score: float
    realized_click: int = 0


def eligible(
    user: UserProfile,
    candidate: AdCandidate,
    freq_state: FrequencyState,
    rules: HfcRules,
    hfc_enabled: bool,
    t: int,
) -> bool:
    """Targeting AND (caps pass or capping disabled)."""
    if not candidate.active or not candidate.targets(user):
        return False
    if not hfc_enabled:
        return True
    camp_cap, cr_cap = rules.caps_for(candidate.ad.advertiser_id)
    camp_views = freq_state.count(
        user.user_id, "campaign", candidate.ad.campaign_id, t, camp_cap.window_days
    )
    if camp_views >= camp_cap.max_views:
        return False
    cr_views = freq_state.count(
        user.user_id, "creative", candidate.ad.creative_id, t, cr_cap.window_days
    )
    return cr_views < cr_cap.max_views


def run_auction(
    eligibles: Sequence[AdCandidate],
    pctrs: Sequence[float],
    floor_ratio: float = 0.1,
) -> AuctionResult:
    """GSP auction over aligned candidate/pCTR lists; deterministic id tie-break."""
    if len(eligibles) != len(pctrs):
        raise ConfigError("eligibles and pctrs must be aligned")
    if not eligibles:
        return AuctionResult(winner=None, gsp_price=0.0, winner_score=0.0, runnerup_score=0.0)
    bids = np.asarray([c.bid for c in eligibles], dtype=float)
    scores = bids * np.asarray(pctrs, dtype=float)
    win = _argmax_by_id(scores, [c.ad.creative_id for c in eligibles])
    winner = eligibles[win]
    if len(eligibles) == 1:
        return AuctionResult(
            winner=winner,
            gsp_price=floor_ratio * winner.bid,
            winner_score=float(scores[win]),
            runnerup_score=0.0,
        )
    runner_score = float(np.max(np.delete(scores, win)))
    gsp = (runner_score / float(scores[win])) * winner.bid
    return AuctionResult(
        winner=winner,
        gsp_price=gsp,
        winner_score=float(scores[win]),
        runnerup_score=runner_score,
    )


def _argmax_by_id(scores: np.ndarray, ids: Sequence[str]) -> int:
    best = int(np.argmax(scores))
    top = scores[best]
    tied = np.flatnonzero(scores == top)
    if len(tied) > 1:
        best = min(tied, key=lambda i: ids[i])
    return int(best)


def build_candidates(
    config: GeneratorConfig, seed: int, bid_sigma: float = 0.25
) -> list[AdCandidate]:
    """One candidate per catalog creative with a deterministic lognormal CPC bid."""
    ads = build_catalog(config)
    rng = substream(seed, "bids")
    z = rng.standard_normal(len(ads))
    return [
        AdCandidate(ad=ad, bid=float(np.exp(bid_sigma * z[i])))
        for i, ad in enumerate(ads)
    ]


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation run depends on; (config, seed) fixes all outputs."""

    generator: GeneratorConfig
    buckets: tuple[BucketConfig, ...]
    hp: HyperParams
    rules: HfcRules = HfcRules()
    floor_ratio: float = 0.1
    bid_sigma: float = 0.25
    seed: int = 0
    collect_scored: bool = False

    def __post_init__(self):
        if not self.buckets:
            raise ConfigError("need at least one bucket")
        names = [b.name for b in self.buckets]
        if len(set(names)) != len(names):
            raise ConfigError("bucket names must be unique")
        total = sum(b.traffic_share for b in self.buckets)
        if total > 1.0 + 1e-9:
            raise ConfigError(f"bucket traffic shares sum to {total} > 1")
        if not 0.0 < self.floor_ratio <= 1.0:
            raise ConfigError("floor_ratio must be in (0, 1]")


@dataclass
class DailyRow:
    day: int
    impressions: int = 0
    clicks: int = 0
    revenue: float = 0.0

    @property
    def cpm(self) -> float:
        return 1000.0 * self.revenue / self.impressions if self.impressions else math.nan


@dataclass
class BucketResult:
    name: str
    daily: list[DailyRow]
    impressions: int
    clicks: int
    revenue: float
    hfc_violations: int
    gsp_violations: int
    unserved: int
    scored: ScoredArrays | None = None

    @property
    def cpm(self) -> float:
        return 1000.0 * self.revenue / self.impressions if self.impressions else math.nan


@dataclass
class SimulationResult:
    buckets: dict[str, BucketResult]
    opportunities: int
    unassigned: int


class _BucketEngine:
    """Sequential serving loop for one bucket; shares nothing with other buckets."""

    def __init__(self, cfg: BucketConfig, sim: SimConfig, candidates: list[AdCandidate],
                 model_seed: int, log_path: str | None):
        self.cfg = cfg
        self.sim = sim
        self.gen = sim.generator
        self.candidates = candidates
        self.n = len(candidates)
        self.state = FrequencyState()
        self.click_rng = substream(sim.seed, "clicks", cfg.name)
        self.rules = sim.rules
        self.daily: dict[int, DailyRow] = {}
        self.hfc_violations = 0
        self.gsp_violations = 0
        self.unserved = 0
        self.impressions = 0
        self.clicks = 0
        self.revenue = 0.0
        self._scored_pred: list[float] = []
        self._scored_label: list[int] = []
        self._scored_section: list[str] = []
        self._scored_freq: list[int] = []
        self._log = open(log_path, "w", encoding="ascii") if log_path else None
        if self._log:
            self._log.write(self.gen.schema.header_line() + "\n")

        self.bids = np.asarray([c.bid for c in candidates], dtype=float)
        self.creative_ids = [c.ad.creative_id for c in candidates]
        self.static_mask = np.asarray([c.active for c in candidates], dtype=bool)
        self.needs_targeting = any(c.targeting is not None for c in candidates)

        # Per-level value tables for vectorized count lookups.
        self.level_values: dict[str, list[str]] = {}
        self.level_pos: dict[str, dict[str, int]] = {}
        self.cand_level_idx: dict[str, np.ndarray] = {}
        for level in AD_LEVELS:
            ids = [self._level_id(c.ad, level) for c in candidates]
            values = sorted(set(ids))
            pos = {v: i for i, v in enumerate(values)}
            self.level_values[level] = values
            self.level_pos[level] = pos
            self.cand_level_idx[level] = np.asarray([pos[v] for v in ids], dtype=np.int64)

        self.model: CtrModel | None = None
        self.A: np.ndarray | None = None
        self.rows_by_key: dict[tuple[str, str], np.ndarray] = {}
        if cfg.model_kind == "learned":
            self.model = CtrModel(self.gen.schema, sim.hp, seed=model_seed,
                                  sfc_enabled=cfg.sfc_enabled)
            self.A = np.stack([self.model.ad_vector(c.ad) for c in candidates])
            rows: dict[tuple[str, str], list[int]] = defaultdict(list)
            for i, c in enumerate(candidates):
                for key, _coeff in self.model.ad_component_keys(c.ad):
                    rows[key].append(i)
            self.rows_by_key = {k: np.asarray(v, dtype=np.int64) for k, v in rows.items()}
        self._affinity_cache: dict[tuple[str, ...], np.ndarray] = {}

    @staticmethod
    def _level_id(ad: AdIdentity, level: str) -> str:
        return {"creative": ad.creative_id, "campaign": ad.campaign_id,
                "advertiser": ad.advertiser_id}[level]

    def _level_counts(self, user_id: str, level: str, t: int, window_days: int) -> np.ndarray:
        arr = np.zeros(len(self.level_values[level]))
        seen = self.state.counts_in_window(user_id, level, t, window_days)
        if seen:
            pos = self.level_pos[level]
            for value, cnt in seen.items():
                idx = pos.get(value)
                if idx is not None:
                    arr[idx] = cnt
        return arr

    def _true_ctrs(self, user: UserProfile, camp_counts: np.ndarray) -> np.ndarray:
        gen = self.gen
        aff = self._affinity_cache.get(user.feature_values)
        if aff is None:
            aff = np.asarray([
                affinity(gen, user.feature_values, camp) for camp in self.level_values["campaign"]
            ])
            self._affinity_cache[user.feature_values] = aff
        curve = np.asarray(gen.fatigue_curve)
        v = np.minimum(camp_counts.astype(np.int64), len(curve) - 1)
        p = gen.base_ctr * aff * curve[v]
        from .events import CTR_EPS

        return np.clip(p, CTR_EPS, 1.0 - CTR_EPS)

    def serve(self, opp: Opportunity) -> None:
        user, t = opp.user, opp.timestamp
        uid = user.user_id
        camp_cap, cr_cap = self.rules.campaign_cap, self.rules.creative_cap
        freq_cfg = self.sim.hp.sfc.freq
        camp_idx = self.cand_level_idx["campaign"]

        # Frequency lookups, deduplicated across the three consumers (ground
        # truth, model feature, hard caps) when their level/window coincide.
        counts_cache: dict[tuple[str, int], np.ndarray] = {}

        def counts(level: str, window: int) -> np.ndarray:
            arr = counts_cache.get((level, window))
            if arr is None:
                arr = self._level_counts(uid, level, t, window)
                counts_cache[(level, window)] = arr
            return arr

        mask = self.static_mask
        if self.needs_targeting:
            mask = mask & np.asarray([c.targets(user) for c in self.candidates], dtype=bool)
        camp_counts_cap = None
        cr_counts_cap = None
        if self.cfg.hfc_enabled:
            camp_counts_cap = counts("campaign", camp_cap.window_days)
            cr_counts_cap = counts("creative", cr_cap.window_days)
            capped = (camp_counts_cap[camp_idx] >= camp_cap.max_views) | (
                cr_counts_cap[self.cand_level_idx["creative"]] >= cr_cap.max_views
            )
            if self.rules.advertiser_overrides:
                capped = self._apply_overrides(uid, t, capped)
            mask = mask & ~capped
        elig = np.flatnonzero(mask)
        if len(elig) == 0:
            self.unserved += 1
            return

        # Ground-truth campaign views (fatigue window) drive click realization.
        true_camp_counts = counts("campaign", self.gen.fatigue_window_days)
        model_counts = counts(freq_cfg.ad_feature, freq_cfg.window_days)
        f_elig = model_counts[self.cand_level_idx[freq_cfg.ad_feature][elig]].astype(np.int64)

        raw = None
        u_vec = None
        if self.cfg.model_kind == "constant":
            pctrs = np.full(len(elig), self.cfg.constant_pctr)
        elif self.cfg.model_kind == "oracle":
            pctrs = self._true_ctrs(user, true_camp_counts)[camp_idx[elig]]
        else:
            model = self.model
            u_vec = model.user_vector(user)
            raw = model.bias + self.A[elig] @ u_vec
            if self.cfg.sfc_enabled:
                bins = np.minimum(f_elig, model.hp.binning.n_bins - 1)
                if model.hp.sfc.weight_category == "global":
                    raw = raw + model.sfc_weights.get("global")[bins]
                else:
                    for i, ci in enumerate(elig):
                        key = model.sfc_weight_key(self.candidates[ci].ad)
                        raw[i] += model.sfc_weights.get(key)[bins[i]]
            pctrs = 1.0 / (1.0 + np.exp(-raw))

        scores = self.bids[elig] * pctrs
        win_pos = int(np.argmax(scores))
        top = float(scores[win_pos])
        tied = np.flatnonzero(scores == top)
        if len(tied) > 1:
            win_pos = int(min(tied, key=lambda i: self.creative_ids[elig[i]]))
        win_idx = int(elig[win_pos])
        winner = self.candidates[win_idx]
        if len(elig) == 1:
            gsp = self.sim.floor_ratio * winner.bid
        else:
            scores[win_pos] = -np.inf
            runner = float(scores.max())
            gsp = (runner / top) * winner.bid
        if gsp > winner.bid * (1 + 1e-12):
            self.gsp_violations += 1

        if self.cfg.hfc_enabled:
            if (camp_counts_cap[camp_idx[win_idx]] >= camp_cap.max_views
                    or cr_counts_cap[self.cand_level_idx["creative"][win_idx]] >= cr_cap.max_views):
                self.hfc_violations += 1

        v_true = int(true_camp_counts[camp_idx[win_idx]])
        p_true = ground_truth_ctr(user, winner.ad, v_true, self.gen)
        click = 1 if self.click_rng.random() < p_true else 0

        day = day_of(t)
        row = self.daily.get(day)
        if row is None:
            row = self.daily[day] = DailyRow(day=day)
        row.impressions += 1
        self.impressions += 1
        if click:
            row.clicks += 1
            row.revenue += gsp
            self.clicks += 1
            self.revenue += gsp

        f_winner = int(f_elig[win_pos])
        p_winner = float(pctrs[win_pos])
        event = ImpressionEvent(user=user, ad=winner.ad, timestamp=t,
                                section_id=opp.section_id, click=click)
        if self._log:
            self._log.write(f"{write_event_line(event)}\t{p_winner:.10g}\t{f_winner}\n")
        if self.sim.collect_scored:
            self._scored_pred.append(p_winner)
            self._scored_label.append(click)
            self._scored_section.append(opp.section_id)
            self._scored_freq.append(f_winner)

        if self.model is not None and self.cfg.online_training:
            model = self.model
            ctx = model.predict_with(
                model.user_value_vectors(user), u_vec, winner.ad, self.A[win_idx],
                f_winner, self.cfg.sfc_enabled, score=float(raw[win_pos]),
            )
            grads = event_gradients(ctx, click, model, self.sim.hp)
            olds = [(key, model.ad_vecs.get(key).copy()) for key, _g in grads.ad]
            apply_update(model, grads, self.sim.hp)
            for key, old in olds:
                rows = self.rows_by_key.get(key)
                if rows is not None:
                    self.A[rows] += model.ad_vecs.values[key] - old

        self.state.record_view(user, winner.ad, t)

    def _apply_overrides(self, user_id: str, t: int, capped: np.ndarray) -> np.ndarray:
        capped = capped.copy()
        for i, cand in enumerate(self.candidates):
            camp_cap, cr_cap = self.rules.caps_for(cand.ad.advertiser_id)
            cv = self.state.count(user_id, "campaign", cand.ad.campaign_id, t, camp_cap.window_days)
            rv = self.state.count(user_id, "creative", cand.ad.creative_id, t, cr_cap.window_days)
            capped[i] = cv >= camp_cap.max_views or rv >= cr_cap.max_views
        return capped

    def finish(self) -> BucketResult:
        if self._log:
            self._log.close()
        scored = None
        if self.sim.collect_scored:
            scored = ScoredArrays(
                np.asarray(self._scored_pred),
                np.asarray(self._scored_label, dtype=np.int8),
                np.asarray(self._scored_section),
                np.asarray(self._scored_freq, dtype=np.int32),
            )
        return BucketResult(
            name=self.cfg.name,
            daily=[self.daily[d] for d in sorted(self.daily)],
            impressions=self.impressions,
            clicks=self.clicks,
            revenue=self.revenue,
            hfc_violations=self.hfc_violations,
            gsp_violations=self.gsp_violations,
            unserved=self.unserved,
            scored=scored,
        )


def simulate(
    sim: SimConfig,
    out_dir: str | None = None,
    threads: int = 1,
    opportunities: Iterable[Opportunity] | None = None,
) -> SimulationResult:
    """Run all buckets over one opportunity stream; deterministic given (sim, seed).

    With ``out_dir`` set, each bucket writes a scored-event log
    (event-format lines plus prediction and frequency columns) to
    ``<out_dir>/served_<bucket>.log``.
    """
    candidates = build_candidates(sim.generator, sim.seed, sim.bid_sigma)
    model_seed = derive_seed(sim.seed, "model-init")
    engines = []
    for cfg in sim.buckets:
        log_path = f"{out_dir}/served_{cfg.name}.log" if out_dir else None
        engines.append(_BucketEngine(cfg, sim, candidates, model_seed, log_path))

    # Users, not impressions, hash to buckets: frequency history stays local.
    users = build_users(sim.generator)
    cum = np.cumsum([b.traffic_share for b in sim.buckets])
    assignment: dict[str, int] = {}
    for user in users:
        u = stable_unit(sim.seed, "bucketmap", user.user_id)
        idx = int(np.searchsorted(cum, u, side="right"))
        if idx < len(sim.buckets):
            assignment[user.user_id] = idx

    opps = opportunities if opportunities is not None else generate_opportunities(sim.generator)
    total = 0
    unassigned = 0
    if threads > 1:
        queues: list[list[Opportunity]] = [[] for _ in engines]
        for opp in opps:
            total += 1
            idx = assignment.get(opp.user.user_id)
            if idx is None:
                unassigned += 1
            else:
                queues[idx].append(opp)

        def _drain(i: int) -> None:
            engine = engines[i]
            for opp in queues[i]:
                engine.serve(opp)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_drain, range(len(engines))))
    else:
        for opp in opps:
            total += 1
            idx = assignment.get(opp.user.user_id)
            if idx is None:
                unassigned += 1
            else:
                engines[idx].serve(opp)

    return SimulationResult(
        buckets={e.cfg.name: e.finish() for e in engines},
        opportunities=total,
        unassigned=unassigned,
    )


def bucket_report(result: SimulationResult, baseline: str) -> list[dict]:
    """Daily and aggregate rows with CPM lifts against the named baseline bucket."""
    if baseline not in result.buckets:
        raise UndefinedMetricError(f"baseline bucket {baseline!r} not in results")
    base = result.buckets[baseline]
    base_daily = {row.day: row for row in base.daily}
    rows: list[dict] = []
    for name, bucket in result.buckets.items():
        for row in bucket.daily:
            base_row = base_daily.get(row.day)
            if base_row is None or not base_row.impressions or math.isnan(row.cpm):
                lift = math.nan
            else:
                lift = (row.cpm / base_row.cpm - 1.0) * 100.0
            rows.append(
                {
                    "bucket": name, "day": row.day, "impressions": row.impressions,
                    "clicks": row.clicks, "revenue": row.revenue, "cpm": row.cpm,
                    "lift_pct": lift,
                }
            )
        agg_lift = (bucket.cpm / base.cpm - 1.0) * 100.0 if base.impressions else math.nan
        rows.append(
            {
                "bucket": name, "day": "all", "impressions": bucket.impressions,
                "clicks": bucket.clicks, "revenue": bucket.revenue, "cpm": bucket.cpm,
                "lift_pct": agg_lift,
            }
        )
    return rows


def write_buckets_csv(rows: Sequence[Mapping], path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bucket", "day", "impressions", "clicks", "revenue", "cpm", "lift_pct"])
        for row in rows:
            writer.writerow(
                [
                    row["bucket"], row["day"], row["impressions"], row["clicks"],
                    f"{row['revenue']:.10g}", f"{row['cpm']:.10g}", f"{row['lift_pct']:.10g}",
                ]
            )


def read_scored_log(path: str) -> ScoredArrays:
    """Read back a served-events log (event columns plus prediction and frequency)."""
    from .events import FeatureSchema

    preds: list[float] = []
    labels: list[int] = []
    sections: list[str] = []
    freqs: list[int] = []
    with open(path, encoding="ascii") as fh:
        header = fh.readline()
        schema = FeatureSchema.from_header_line(header)
        for line_no, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 9 + schema.K:
                raise ParseError(
                    f"expected {9 + schema.K} fields, got {len(parts)}", line_no=line_no
                )
            event = parse_event_line(schema, "\t".join(parts[:-2]), line_no=line_no)
            preds.append(float(parts[-2]))
            freqs.append(int(parts[-1]))
            labels.append(event.click)
            sections.append(event.section_id)
    return ScoredArrays(
        np.asarray(preds),
        np.asarray(labels, dtype=np.int8),
        np.asarray(sections),
        np.asarray(freqs, dtype=np.int32),
    )
