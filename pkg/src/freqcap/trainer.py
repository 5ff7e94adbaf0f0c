"""One-pass streaming SGD with a per-coordinate adaptive step size.

The step size for a parameter coordinate is ``eta0 / (alpha + acc**beta)``
where ``acc`` is the running sum of absolute gradients that coordinate has
seen so far (the pre-update value is used, so the very first step is
``eta0 / alpha``).

Training is progressive-validation style: every event is scored before the
model is updated with it, so the reported metrics never see trained-on data.
Per-event L2 touches only the parameters the event touches; a full-parameter
regularization pass per event is infeasible in one-pass streaming.

The printed weight-gradient convention some derivations use, ``(y - p) +
lam*w``, is not a descent direction for the logistic loss; the implemented
gradient is ``dL/dw_i = p - y + lam*w_i`` and is validated against finite
differences in the test suite.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import OrderingError, UndefinedMetricError
from .events import FeatureSchema, ImpressionEvent
from .freqtrack import FrequencyState
from .metrics import ScoredArrays, logloss_arrays, sauc_arrays
from .model import CtrModel, HyperParams, PredictionContext


def step_size(accumulator: float, eta0: float, alpha: float, beta: float) -> float:
    """eta0 / (alpha + accumulator**beta), with 0**beta == 0."""
    return eta0 / (alpha + accumulator**beta)


@dataclass(slots=True)
class EventGradients:
    """Gradients of the per-event regularized loss for every touched parameter."""

    bias: float
    user: list  # [(key, d-vector)]
    ad: list    # [(key, D-vector)]
    sfc: tuple[str, int, float] | None  # (weight key, bin index, gradient)


def event_gradients(ctx: PredictionContext, y: int, model: CtrModel, hp: HyperParams) -> EventGradients:
    """Analytic gradients at the forward pass ``ctx`` for label ``y``.

    With e = pctr - y: the bias gradient is e; each touched ad component
    vector gets ``coeff * e * u + lam * vec``; each user value vector gets
    ``e * d(score)/d(v_k) + lam * v_k``; the touched frequency-weight entry
    gets ``e + lam * w_i``.
    """
    e = ctx.pctr - y
    lam = hp.lam
    user_grads = []
    for k, (key, vec) in enumerate(ctx.user_value_vecs):
        g = model.user_gradient(k, ctx)
        if e != 0.0:
            g *= e
        else:
            g.fill(0.0)
        if lam:
            g += lam * vec
        user_grads.append((key, g))
    ad_grads = []
    for key, coeff in ctx.ad_components:
        g = (coeff * e) * ctx.u_vec
        if lam:
            g = g + lam * model.ad_vecs.get(key)
        ad_grads.append((key, g))
    sfc_grad = None
    if ctx.sfc_enabled:
        w = model.sfc_weights.get(ctx.weight_key)
        sfc_grad = (ctx.weight_key, ctx.bin_index, e + lam * float(w[ctx.bin_index]))
    return EventGradients(bias=e, user=user_grads, ad=ad_grads, sfc=sfc_grad)


def apply_update(model: CtrModel, grads: EventGradients, hp: HyperParams) -> None:
    """SGD step using pre-update accumulators, then accumulate |gradient|."""
    eta0, alpha, beta = hp.eta0, hp.alpha, hp.beta
    g = grads.bias
    if g != 0.0:
        model.bias -= step_size(model.bias_acc, eta0, alpha, beta) * g
        model.bias_acc += abs(g)
    for key, gvec in grads.user:
        vec = model.user_vecs.values[key]
        acc = model.user_vecs.accs[key]
        vec -= (eta0 / (alpha + acc**beta)) * gvec
        acc += np.abs(gvec)
    for key, gvec in grads.ad:
        vec = model.ad_vecs.values[key]
        acc = model.ad_vecs.accs[key]
        vec -= (eta0 / (alpha + acc**beta)) * gvec
        acc += np.abs(gvec)
    if grads.sfc is not None:
        key, i, gw = grads.sfc
        s_eta0, s_alpha, s_beta = hp.sfc_step_params()
        w = model.sfc_weights.values[key]
        acc = model.sfc_weights.accs[key]
        w[i] -= step_size(float(acc[i]), s_eta0, s_alpha, s_beta) * gw
        acc[i] += abs(gw)


@dataclass
class IntervalRow:
    end_event: int
    logloss: float
    sauc: float


@dataclass
class TrainReport:
    """Progressive-validation record of one training run."""

    events_seen: int = 0
    intervals: list[IntervalRow] = field(default_factory=list)
    final_logloss: float = math.nan
    final_sauc: float = math.nan
    events_per_second: float = 0.0
    scored: ScoredArrays | None = None

    def csv_lines(self) -> list[str]:
        lines = ["interval_end_event,logloss,sauc"]
        for row in self.intervals:
            lines.append(f"{row.end_event},{row.logloss:.10g},{row.sauc:.10g}")
        return lines

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")


def train_stream(
    events: Iterable[ImpressionEvent],
    schema: FeatureSchema,
    hp: HyperParams,
    *,
    sfc_enabled: bool = False,
    seed: int = 0,
    report_interval: int = 50_000,
    collect_scored: bool = False,
    model: CtrModel | None = None,
    freq_state: FrequencyState | None = None,
) -> tuple[CtrModel, TrainReport]:
    """Train over a time-ordered event stream, one SGD update per event.

    Per event: query the frequency feature (the current event excluded),
    score, record the progressive prediction, update, then record the view.
    Deterministic given (events, hp, seed).
    """
    if model is None:
        model = CtrModel(schema, hp, seed=seed, sfc_enabled=sfc_enabled)
    else:
        model.sfc_enabled = sfc_enabled
    state = freq_state if freq_state is not None else FrequencyState()
    freq_config = hp.sfc.freq

    preds: list[float] = []
    labels: list[int] = []
    sections: list[str] = []
    freqs: list[int] = []
    intervals: list[IntervalRow] = []
    interval_start = 0
    prev_t = None
    n = 0
    t0 = time.perf_counter()

    def _close_interval(end: int) -> None:
        p = np.asarray(preds[interval_start:end])
        y = np.asarray(labels[interval_start:end], dtype=np.int8)
        sec = np.asarray(sections[interval_start:end])
        ll = logloss_arrays(p, y)
        try:
            sa = sauc_arrays(p, y, sec)
        except UndefinedMetricError:
            sa = math.nan
        intervals.append(IntervalRow(end_event=end, logloss=ll, sauc=sa))

    for event in events:
        if prev_t is not None and event.timestamp < prev_t:
            raise OrderingError(
                f"event {n + 1} at t={event.timestamp} is earlier than its predecessor (t={prev_t})"
            )
        prev_t = event.timestamp
        f = state.frequency(event.user, event.ad, event.timestamp, freq_config)
        ctx = model.predict(event.user, event.ad, f, sfc_enabled)
        preds.append(ctx.pctr)
        labels.append(event.click)
        sections.append(event.section_id)
        freqs.append(f)
        grads = event_gradients(ctx, event.click, model, hp)
        apply_update(model, grads, hp)
        state.record_view(event.user, event.ad, event.timestamp)
        n += 1
        if n - interval_start >= report_interval:
            _close_interval(n)
            interval_start = n

    if n > interval_start:
        _close_interval(n)

    elapsed = time.perf_counter() - t0
    report = TrainReport(events_seen=n, intervals=intervals)
    report.events_per_second = n / elapsed if elapsed > 0 else 0.0
    if n:
        p = np.asarray(preds)
        y = np.asarray(labels, dtype=np.int8)
        sec = np.asarray(sections)
        fq = np.asarray(freqs, dtype=np.int32)
        report.final_logloss = logloss_arrays(p, y)
        try:
            report.final_sauc = sauc_arrays(p, y, sec)
        except UndefinedMetricError:
            report.final_sauc = math.nan
        if collect_scored:
            report.scored = ScoredArrays(p, y, sec, fq)
    return model, report


def score_stream(
    model: CtrModel,
    events: Iterable[ImpressionEvent],
    *,
    freq_state: FrequencyState | None = None,
) -> ScoredArrays:
    """Score a stream with a frozen model (no updates); frequency still advances."""
    state = freq_state if freq_state is not None else FrequencyState()
    freq_config = model.hp.sfc.freq
    preds: list[float] = []
    labels: list[int] = []
    sections: list[str] = []
    freqs: list[int] = []
    prev_t = None
    for n, event in enumerate(events, start=1):
        if prev_t is not None and event.timestamp < prev_t:
            raise OrderingError(f"event {n} out of order")
        prev_t = event.timestamp
        f = state.frequency(event.user, event.ad, event.timestamp, freq_config)
        ctx = model.predict(event.user, event.ad, f)
        preds.append(ctx.pctr)
        labels.append(event.click)
        sections.append(event.section_id)
        freqs.append(f)
        state.record_view(event.user, event.ad, event.timestamp)
    return ScoredArrays(
        np.asarray(preds),
        np.asarray(labels, dtype=np.int8),
        np.asarray(sections),
        np.asarray(freqs, dtype=np.int32),
    )


@dataclass
class SweepEntry:
    index: int
    hp: HyperParams
    report: TrainReport
    model: CtrModel


def sweep(
    configs: Sequence[HyperParams],
    events_source: Sequence[ImpressionEvent] | Callable[[], Iterable[ImpressionEvent]],
    schema: FeatureSchema,
    *,
    sfc_enabled: bool = False,
    seed: int = 0,
    report_interval: int = 50_000,
    threads: int = 1,
) -> list[SweepEntry]:
    """Train one independent model per config over the same stream.

    Returns entries ranked ascending by final progressive LogLoss (ties by
    input position).  Results are independent of ``threads`` because each
    run shares nothing but the read-only stream.
    """
    if not configs:
        raise UndefinedMetricError("sweep needs at least one config")

    def _events() -> Iterable[ImpressionEvent]:
        return events_source() if callable(events_source) else iter(events_source)

    def _run(idx: int) -> SweepEntry:
        model, report = train_stream(
            _events(), schema, configs[idx],
            sfc_enabled=sfc_enabled, seed=seed, report_interval=report_interval,
        )
        return SweepEntry(index=idx, hp=configs[idx], report=report, model=model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(_run, range(len(configs))))
    else:
        entries = [_run(i) for i in range(len(configs))]
    entries.sort(key=lambda e: (e.report.final_logloss, e.index))
    return entries
