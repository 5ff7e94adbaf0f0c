"""Command-line entry point: generate / train / evaluate / simulate / stats / report.

Every subcommand is deterministic given (config, seed), writes exactly one
run manifest next to its outputs, and exits nonzero with a single-line
``error: <kind>: <message>`` on any validation failure.  Figures are
rendered alongside the CSV outputs unless ``--no-figures`` is given; the
CSVs remain the canonical data boundary.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np

from . import __version__
from .auctionsim import bucket_report, simulate, write_buckets_csv
from .configio import (
    ConfigMap,
    generator_config_from,
    hyperparams_from,
    load_config,
    sim_config_from,
)
from .errors import ConfigError, FreqcapError, UndefinedMetricError
from .events import generate_stream, read_event_log, write_event_log
from .freqtrack import WINDOW_NAMES, FrequencyState, MAX_WINDOW_DAYS
from .metrics import (
    MetricSummary,
    ScoredArrays,
    auc_arrays,
    lifts,
    logloss_arrays,
    nctr_arrays,
    read_metrics_csv,
    sauc_arrays,
    write_lifts_csv,
    write_metrics_csv,
    write_nctr_csv,
)
from .model import CtrModel
from .trainer import score_stream, train_stream


def _build_id() -> str:
    return f"freqcap-{__version__}"


def _write_manifest(directory: str, subcommand: str, config: dict, inputs: list[str],
                    outputs: list[str], seed: int | None, started: str) -> str:
    path = os.path.join(directory, "manifest.json")
    payload = {
        "subcommand": subcommand,
        "config": config,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "seed": seed,
        "build_id": _build_id(),
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _fail(exc: BaseException) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(2)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FreqcapError as exc:
            _fail(exc)
        except OSError as exc:
            _fail(exc)

    return wrapper


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


@click.group()
@click.version_option(__version__)
def main():
    """Streaming CTR engine with frequency capping and a GSP auction simulator."""


@main.command()
@click.option("--config", "config_path", required=True, help="Generator config file.")
@click.option("--out", "out_path", required=True, help="Event log to write.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@_handle_errors
def generate(config_path: str, out_path: str, seed: int | None):
    """Generate a synthetic impression stream."""
    started = _now()
    cfg = load_config(_require_file(config_path, "config"))
    gen = generator_config_from(cfg, seed_override=seed)
    out_dir = _ensure_dir(os.path.dirname(os.path.abspath(out_path)) or ".")
    n = write_event_log(out_path, gen.schema, generate_stream(gen))
    _write_manifest(out_dir, "generate", cfg.data, [config_path], [out_path], gen.seed, started)
    click.echo(f"wrote {n} events to {out_path}")


@main.command()
@click.option("--config", "config_path", required=True, help="Training config file.")
@click.option("--events", "events_path", required=True, help="Input event log.")
@click.option("--sfc", type=click.Choice(["on", "off"]), default="off", show_default=True,
              help="Learn the frequency weight vectors.")
@click.option("--out-model", "model_path", required=True, help="Model snapshot to write.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Reserved for sweeps; single runs are sequential.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@_handle_errors
def train(config_path: str, events_path: str, sfc: str, model_path: str,
          seed: int | None, threads: int, figures: bool):
    """Train one model over an event log (one pass, progressive validation)."""
    started = _now()
    cfg = load_config(_require_file(config_path, "config"))
    _require_file(events_path, "event log")
    hp = hyperparams_from(cfg)
    run_seed = seed if seed is not None else cfg.int("seed", 0)
    schema, events = read_event_log(events_path)
    _check_schema_match(cfg, schema)
    model, report = train_stream(
        events, schema, hp,
        sfc_enabled=(sfc == "on"),
        seed=run_seed,
        report_interval=cfg.int("report_interval", 50_000),
    )
    out_dir = _ensure_dir(os.path.dirname(os.path.abspath(model_path)) or ".")
    model.save(model_path)
    progress_path = model_path + ".progress.csv"
    report.write_csv(progress_path)
    outputs = [model_path, progress_path]
    if figures and report.intervals:
        from .figures import save_progress_figure, save_weights_figure

        fig_path = model_path + ".progress.png"
        save_progress_figure(report.intervals, fig_path, label=f"sfc={sfc}")
        outputs.append(fig_path)
        if sfc == "on":
            wkey = "global" if hp.sfc.weight_category == "global" else None
            if wkey is not None and model.sfc_weights.peek(wkey) is not None:
                wfig = model_path + ".weights.png"
                save_weights_figure(model.sfc_weights.peek(wkey), wfig, key=wkey)
                outputs.append(wfig)
    _write_manifest(out_dir, "train", cfg.data, [config_path, events_path], outputs,
                    run_seed, started)
    click.echo(
        f"trained on {report.events_seen} events; final logloss {report.final_logloss:.6f}, "
        f"sauc {report.final_sauc:.6f} ({report.events_per_second:.0f} ev/s)"
    )


def _check_schema_match(cfg: ConfigMap, schema) -> None:
    """The training config may pin a schema; mismatches fail naming the field."""
    from .configio import schema_from_config

    if cfg.raw("schema") is None and not cfg.keys_with_prefix("feature."):
        return
    expected = schema_from_config(cfg)
    if expected.user_features != schema.user_features:
        for (en, ev), (gn, gv) in zip(expected.user_features, schema.user_features):
            if en != gn or ev != gv:
                raise ConfigError(
                    f"schema mismatch between config and log header: feature {en!r}"
                )
        raise ConfigError("schema mismatch between config and log header: feature count")
    if expected.sections != schema.sections:
        raise ConfigError("schema mismatch between config and log header: sections")


@main.command()
@click.option("--model", "model_path", required=True, help="Model snapshot.")
@click.option("--events", "events_path", required=True, help="Event log to evaluate on.")
@click.option("--mode", type=click.Choice(["frozen", "progressive"]), default="frozen",
              show_default=True,
              help="frozen: score with the stored parameters; progressive: replay "
                   "training from the snapshot's recorded initial state.")
@click.option("--out-dir", "out_dir", required=True)
@_handle_errors
def evaluate(model_path: str, events_path: str, mode: str, out_dir: str):
    """Compute LogLoss / AUC / sAUC for a model over an event log."""
    started = _now()
    _require_file(model_path, "model snapshot")
    _require_file(events_path, "event log")
    model = CtrModel.load(model_path)
    schema, events = read_event_log(events_path)
    if schema.hash() != model.schema.hash():
        raise ConfigError("schema mismatch between model snapshot and event log")
    if mode == "frozen":
        scored = score_stream(model, events)
    else:
        fresh = CtrModel(model.schema, model.hp, seed=model.seed, sfc_enabled=model.sfc_enabled)
        _, report = train_stream(
            events, schema, model.hp,
            sfc_enabled=model.sfc_enabled, seed=model.seed,
            collect_scored=True, model=fresh,
        )
        scored = report.scored
    if scored is None or len(scored) == 0:
        raise UndefinedMetricError("no events to evaluate")
    _ensure_dir(out_dir)
    summary = {
        "events": float(len(scored)),
        "clicks": float(int(scored.labels.sum())),
        "logloss": logloss_arrays(scored.predictions, scored.labels),
        "auc": auc_arrays(scored.predictions, scored.labels),
        "sauc": sauc_arrays(scored.predictions, scored.labels, scored.sections),
    }
    metrics_path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(summary, metrics_path)
    _write_manifest(out_dir, "evaluate", {"mode": mode}, [model_path, events_path],
                    [metrics_path], model.seed, started)
    click.echo(f"logloss {summary['logloss']:.6f}  auc {summary['auc']:.6f}  sauc {summary['sauc']:.6f}")


@main.command()
@click.option("--config", "config_path", required=True, help="Simulation config file.")
@click.option("--out-dir", "out_dir", required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Buckets may run concurrently; outputs are identical either way.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@_handle_errors
def simulate_cmd(config_path: str, out_dir: str, seed: int | None, threads: int, figures: bool):
    """Run the multi-bucket serving simulation and report CPM lifts."""
    started = _now()
    cfg = load_config(_require_file(config_path, "config"))
    sim = sim_config_from(cfg, seed_override=seed)
    _ensure_dir(out_dir)
    result = simulate(sim, out_dir=out_dir, threads=threads)
    baseline = cfg.str("baseline", sim.buckets[0].name)
    rows = bucket_report(result, baseline)
    buckets_path = os.path.join(out_dir, "buckets.csv")
    write_buckets_csv(rows, buckets_path)
    outputs = [buckets_path] + [
        os.path.join(out_dir, f"served_{b.name}.log") for b in sim.buckets
    ]
    if figures:
        from .figures import save_cpm_figure

        fig_path = os.path.join(out_dir, "cpm_lifts.png")
        save_cpm_figure(rows, fig_path, baseline)
        outputs.append(fig_path)
    _write_manifest(out_dir, "simulate", cfg.data, [config_path], outputs, sim.seed, started)
    for name, bucket in result.buckets.items():
        click.echo(
            f"bucket {name}: impressions {bucket.impressions}, cpm {bucket.cpm:.4f}, "
            f"hfc_violations {bucket.hfc_violations}"
        )


# click reserves `simulate` for the function name; expose the subcommand name explicitly.
simulate_cmd.name = "simulate"
main.add_command(simulate_cmd, name="simulate")


@main.command()
@click.option("--events", "events_path", required=True, help="Event log.")
@click.option("--segment", "segment_key", default=None,
              help="User feature to break the curves down by.")
@click.option("--ad-feature", "ad_feature", default="campaign", show_default=True,
              type=click.Choice(["creative", "campaign", "advertiser"]))
@click.option("--window", default="week", show_default=True,
              help="day/week/month or a day count for the frequency window.")
@click.option("--v-max", type=int, default=50, show_default=True)
@click.option("--out-dir", "out_dir", required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_handle_errors
def stats(events_path: str, segment_key: str | None, ad_feature: str, window: str,
          v_max: int, out_dir: str, figures: bool):
    """Frequency-stratified CTR statistics (normalized CTR curve + impression CDF)."""
    started = _now()
    _require_file(events_path, "event log")
    window_days = WINDOW_NAMES.get(window)
    if window_days is None:
        try:
            window_days = int(window)
        except ValueError:
            raise ConfigError(f"--window must be day/week/month or a day count, got {window!r}") from None
    if not 1 <= window_days <= MAX_WINDOW_DAYS:
        raise ConfigError(f"--window must be in [1, {MAX_WINDOW_DAYS}] days")
    schema, events = read_event_log(events_path)
    if segment_key is not None and segment_key not in schema.feature_names:
        raise ConfigError(f"unknown segment key {segment_key!r}; "
                          f"schema features: {', '.join(schema.feature_names)}")

    state = FrequencyState()
    labels: list[int] = []
    freqs: list[int] = []
    seg_values: list[str] = []
    seg_idx = schema.feature_names.index(segment_key) if segment_key is not None else -1
    level_of = {"creative": lambda ad: ad.creative_id,
                "campaign": lambda ad: ad.campaign_id,
                "advertiser": lambda ad: ad.advertiser_id}[ad_feature]
    n = 0
    for event in events:
        f = state.count(event.user.user_id, ad_feature, level_of(event.ad),
                        event.timestamp, window_days)
        labels.append(event.click)
        freqs.append(f)
        if seg_idx >= 0:
            seg_values.append(event.user.feature_values[seg_idx])
        state.record_view(event.user, event.ad, event.timestamp)
        n += 1
    if n == 0:
        raise UndefinedMetricError("empty event log")
    labels_arr = np.asarray(labels, dtype=np.int8)
    freqs_arr = np.asarray(freqs, dtype=np.int64)
    curve = nctr_arrays(labels_arr, freqs_arr, v_max=v_max)
    _ensure_dir(out_dir)
    nctr_path = os.path.join(out_dir, "nctr.csv")
    write_nctr_csv(curve, nctr_path)
    outputs = [nctr_path]
    seg_curves = {}
    if seg_idx >= 0:
        seg_arr = np.asarray(seg_values)
        seg_path = os.path.join(out_dir, f"nctr_{segment_key}.csv")
        with open(seg_path, "w", encoding="ascii") as fh:
            fh.write("segment,share,v,ctr_n,impressions,cdf\n")
            for value in np.unique(seg_arr):
                mask = seg_arr == value
                seg_curve = nctr_arrays(labels_arr[mask], freqs_arr[mask], v_max=v_max)
                seg_curves[str(value)] = seg_curve
                share = float(mask.sum()) / n
                for i in range(len(seg_curve.v)):
                    fh.write(
                        f"{value},{share:.10g},{int(seg_curve.v[i])},{seg_curve.ctr_n[i]:.10g},"
                        f"{int(seg_curve.impressions[i])},{seg_curve.cdf[i]:.10g}\n"
                    )
        outputs.append(seg_path)
    if figures:
        from .figures import save_nctr_figure, save_segment_nctr_figure

        fig_path = os.path.join(out_dir, "nctr.png")
        save_nctr_figure(curve, fig_path)
        outputs.append(fig_path)
        if seg_curves:
            seg_fig = os.path.join(out_dir, f"nctr_{segment_key}.png")
            save_segment_nctr_figure(seg_curves, seg_fig, segment_key)
            outputs.append(seg_fig)
    config = {"ad_feature": ad_feature, "window_days": str(window_days), "v_max": str(v_max)}
    if segment_key:
        config["segment"] = segment_key
    _write_manifest(out_dir, "stats", config, [events_path], outputs, None, started)
    click.echo(f"nctr over {n} events -> {nctr_path}")


@main.command()
@click.argument("baseline_csv")
@click.argument("candidate_csvs", nargs=-1, required=True)
@click.option("--out-dir", "out_dir", required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_handle_errors
def report(baseline_csv: str, candidate_csvs: tuple[str, ...], out_dir: str, figures: bool):
    """Lift table comparing candidate metrics.csv files against a baseline."""
    started = _now()
    _require_file(baseline_csv, "baseline metrics")
    base = _summary_from_csv(baseline_csv)
    rows = []
    for path in candidate_csvs:
        _require_file(path, "candidate metrics")
        cand = _summary_from_csv(path)
        result = lifts(cand, base)
        label = os.path.splitext(os.path.basename(path))[0]
        for metric, lift_val, bval, cval in (
            ("logloss", result.logloss_lift_pct, base.logloss, cand.logloss),
            ("sauc", result.sauc_lift_pct, base.sauc, cand.sauc),
            ("cpm", result.cpm_lift_pct, base.cpm, cand.cpm),
        ):
            if lift_val is not None:
                rows.append(
                    {"candidate": label, "metric": metric, "baseline_value": bval,
                     "candidate_value": cval, "lift_pct": lift_val}
                )
    if not rows:
        raise UndefinedMetricError("no comparable metrics between baseline and candidates")
    _ensure_dir(out_dir)
    lifts_path = os.path.join(out_dir, "lifts.csv")
    write_lifts_csv(rows, lifts_path)
    outputs = [lifts_path]
    if figures:
        from .figures import save_lifts_figure

        fig_path = os.path.join(out_dir, "lifts.png")
        save_lifts_figure(rows, fig_path)
        outputs.append(fig_path)
    _write_manifest(out_dir, "report", {}, [baseline_csv, *candidate_csvs],
                    outputs, None, started)
    for row in rows:
        click.echo(f"{row['candidate']} {row['metric']} lift: {row['lift_pct']:+.4f}%")


def _summary_from_csv(path: str) -> MetricSummary:
    values = read_metrics_csv(path)
    return MetricSummary(
        logloss=values.get("logloss"),
        sauc=values.get("sauc"),
        cpm=values.get("cpm"),
    )


if __name__ == "__main__":
    main()
