"""Command-line interface: ingest, analyze, decide, campaign, simulate, report.

Exit codes are a stable contract: 0 success, 2 input or schema error,
3 indeterminate decision without a fallback, 4 oracle timeout. All
randomness is governed by the seed in the config or flags, and JSON outputs
are written with sorted keys so equal runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from fleetbo import campaign as campaign_mod
from fleetbo import clustering as clustering_mod
from fleetbo import decision as decision_mod
from fleetbo import divergence as divergence_mod
from fleetbo import noise as noise_mod
from fleetbo import simulator as simulator_mod
from fleetbo.domain import (
    Dataset,
    IngestError,
    ParameterBounds,
    ingest_csv,
    write_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INDETERMINATE = 3
EXIT_ORACLE_TIMEOUT = 4


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@contextmanager
def _output_lock(out_dir: Path):
    """One process per output directory; stale locks are reported, not stolen."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".fleetbo.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        _fail(f"output directory {out_dir} is locked by another invocation ({lock})", EXIT_INPUT)
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_bounds(path: str | None) -> ParameterBounds:
    if path is None:
        return ParameterBounds()
    return ParameterBounds.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _load_dataset(csv_path: str, fleet_size: int, bounds_path: str | None) -> Dataset:
    try:
        return ingest_csv(csv_path, fleet_size=fleet_size, bounds=_load_bounds(bounds_path))
    except IngestError as e:
        _fail(str(e), EXIT_INPUT)
    except OSError as e:
        _fail(str(e), EXIT_INPUT)


@click.group()
def main():
    """Noise-aware fleet optimization toolkit."""


@main.command()
@click.argument("csv_path", type=click.Path())
@click.option("--fleet-size", "-n", type=int, required=True, help="Number of devices.")
@click.option("--bounds", "bounds_path", type=click.Path(), default=None, help="Bounds JSON file.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Output directory.")
def ingest(csv_path, fleet_size, bounds_path, out_dir):
    """Validate an experiment CSV and summarize it."""
    dataset = _load_dataset(csv_path, fleet_size, bounds_path)
    summary = {
        "records": len(dataset),
        "fleet_size": dataset.fleet_size,
        "bounds": dataset.bounds.to_dict(),
        "per_device": {
            str(d): sum(1 for r in dataset.records if r.device_id == d)
            for d in range(dataset.fleet_size)
        },
    }
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "dataset_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        write_csv(dataset, out / "dataset.csv")
    click.echo(json.dumps(summary, sort_keys=True))


@main.command()
@click.argument("csv_path", type=click.Path())
@click.option("--fleet-size", "-n", type=int, required=True)
@click.option("--bounds", "bounds_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--bins", type=int, default=divergence_mod.DEFAULT_BIN_COUNT, show_default=True)
@click.option("--smoothing-eps", type=float, default=divergence_mod.DEFAULT_SMOOTHING_EPS, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def analyze(csv_path, fleet_size, bounds_path, out_dir, bins, smoothing_eps, seed):
    """Run the noise analysis bundle: features, KDE/box data, divergences, clustering."""
    dataset = _load_dataset(csv_path, fleet_size, bounds_path)
    out = Path(out_dir)
    with _output_lock(out):
        try:
            features = noise_mod.run_features(dataset)
        except noise_mod.EmptyFeatureError as e:
            _fail(str(e), EXIT_INPUT)

        clustering_mod.write_feature_rows_csv(
            features, [0] * features.n_init, out / "run_features.csv"
        )
        kdes = []
        for device in range(fleet_size):
            weights = dataset.device_weights(device)
            if weights.size >= 2 and np.ptp(weights) > 0:
                kdes.append(noise_mod.kde(weights, device_id=device))
        noise_mod.write_kde_report(kdes, out / "kde.json")
        noise_mod.write_box_report(noise_mod.box_summaries(features), out / "box.json")

        try:
            samples = {d: dataset.device_weights(d) for d in range(fleet_size)}
            reports = divergence_mod.pairwise_reports(
                samples, bin_count=bins, smoothing_eps=smoothing_eps
            )
        except ValueError as e:
            _fail(str(e), EXIT_INPUT)
        thresholds = decision_mod.ThresholdConfig()
        reports = [r.with_votes(decision_mod.vote_pair(r, thresholds).votes) for r in reports]
        divergence_mod.write_reports_json(reports, out / "divergence.json")
        divergence_mod.write_reports_csv(reports, out / "divergence.csv")

        k = fleet_size if fleet_size <= 5 else clustering_mod.choose_k(
            features, k_max=min(10, features.n_init), seed=seed
        )
        result = clustering_mod.kmeans(features, k, seed=seed)
        assoc = clustering_mod.association(features, result.assignments)
        clustering_mod.write_clustering_json(result, assoc, out / "clustering.json")
        clustering_mod.write_feature_rows_csv(features, result.assignments, out / "run_features.csv")
    click.echo(f"analysis bundle written to {out}")


@main.command()
@click.option("--bundle", "bundle_dir", type=click.Path(), required=True,
              help="Directory holding divergence.json and clustering.json from `analyze`.")
@click.option("--thresholds", "thresholds_path", type=click.Path(), default=None)
@click.option("--fallback", type=click.Choice(["single", "multi"]), default=None,
              help="Strategy to adopt when the decision is indeterminate.")
@click.option("--out", "out_path", type=click.Path(), default=None)
def decide(bundle_dir, thresholds_path, fallback, out_path):
    """Turn an analysis bundle into a single/multi-device strategy decision."""
    bundle = Path(bundle_dir)
    div_path = bundle / "divergence.json"
    if not div_path.exists():
        _fail(f"missing analysis bundle file {div_path}", EXIT_INPUT)
    try:
        reports = divergence_mod.read_reports_json(div_path)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        _fail(f"corrupt divergence report: {e}", EXIT_INPUT)

    assoc = None
    clustering_path = bundle / "clustering.json"
    if clustering_path.exists():
        doc = json.loads(clustering_path.read_text(encoding="utf-8"))
        assoc_doc = doc.get("association", {})
        assoc = clustering_mod.AssociationReport(
            counts={
                int(d): {int(c): int(n) for c, n in cl.items()}
                for d, cl in assoc_doc.get("counts", {}).items()
            },
            purity={int(d): float(p) for d, p in assoc_doc.get("purity", {}).items()},
            nmi=float(assoc_doc.get("nmi", 0.0)),
        )

    thresholds = decision_mod.ThresholdConfig()
    if thresholds_path:
        thresholds = decision_mod.ThresholdConfig.from_dict(
            json.loads(Path(thresholds_path).read_text(encoding="utf-8"))
        )
    result = decision_mod.decide(reports, assoc, thresholds)
    strategy = result.strategy
    if strategy is decision_mod.Strategy.INDETERMINATE and fallback is not None:
        strategy = (
            decision_mod.Strategy.SINGLE_DEVICE if fallback == "single"
            else decision_mod.Strategy.MULTI_DEVICE
        )
    doc = result.to_dict()
    doc["resolved_strategy"] = strategy.value
    if out_path:
        Path(out_path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    click.echo(f"strategy: {strategy.value}")
    if strategy is decision_mod.Strategy.INDETERMINATE:
        sys.exit(EXIT_INDETERMINATE)


def _build_oracle(spec: str, config: campaign_mod.CampaignConfig, timeout_s: float):
    if spec.startswith("sim:"):
        name = spec[4:]
        if name in simulator_mod.PRESETS:
            fleet = simulator_mod.PRESETS[name](seed=config.seed)
        else:
            try:
                fleet = simulator_mod.load_fleet(name)
            except (OSError, json.JSONDecodeError, KeyError) as e:
                _fail(f"cannot load fleet config {name!r}: {e}", EXIT_INPUT)
        if fleet.n != config.fleet_size:
            _fail(
                f"fleet size mismatch: simulator has {fleet.n} devices, config wants {config.fleet_size}",
                EXIT_INPUT,
            )
        return simulator_mod.SimulatorOracle(fleet)
    if spec.startswith("watch:"):
        return campaign_mod.WatchFileOracle(spec[6:], timeout_s=timeout_s)
    _fail(f"oracle must be sim:<preset|file> or watch:<csv>, got {spec!r}", EXIT_INPUT)


@main.command("campaign")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Campaign config JSON; flags override file values.")
@click.option("--oracle", "oracle_spec", type=str, required=True,
              help="sim:heterogeneous | sim:homogeneous | sim:<fleet.json> | watch:<file.csv>")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--strategy", "strategy_override", type=click.Choice(["single", "multi"]), default=None,
              help="Skip the decision phase and force a strategy.")
@click.option("--fallback", type=click.Choice(["single", "multi"]), default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--timeout", "timeout_s", type=float, default=600.0, show_default=True,
              help="Watch-file oracle timeout in seconds.")
@click.option("--resume", is_flag=True, default=False)
def campaign_cmd(config_path, oracle_spec, out_dir, seed, strategy_override, fallback,
                 max_iterations, timeout_s, resume):
    """Run the full workflow: initial design, noise analysis, decision, BO loop."""
    cfg_dict = {}
    if config_path:
        try:
            cfg_dict = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            _fail(f"cannot read config: {e}", EXIT_INPUT)
    if seed is not None:
        cfg_dict["seed"] = seed
    if strategy_override is not None:
        cfg_dict["strategy_override"] = (
            "single_device" if strategy_override == "single" else "multi_device"
        )
    if max_iterations is not None:
        cfg_dict["max_iterations"] = max_iterations
    try:
        config = campaign_mod.CampaignConfig.from_dict(cfg_dict)
    except (KeyError, ValueError) as e:
        _fail(f"invalid config: {e}", EXIT_INPUT)

    fallback_value = None
    if fallback is not None:
        fallback_value = "single_device" if fallback == "single" else "multi_device"

    oracle = _build_oracle(oracle_spec, config, timeout_s)
    out = Path(out_dir)
    with _output_lock(out):
        try:
            state = campaign_mod.run_campaign(
                config, oracle, out_dir=out, fallback=fallback_value, resume=resume
            )
        except campaign_mod.IndeterminateDecisionError as e:
            _fail(str(e), EXIT_INDETERMINATE)
        except campaign_mod.OracleTimeout as e:
            _fail(f"oracle timeout: {e} (checkpoint saved)", EXIT_ORACLE_TIMEOUT)
    click.echo(f"strategy: {state.strategy.value}")
    click.echo(f"completed {state.iteration} iterations; outputs in {out}")


@main.command()
@click.option("--preset", type=click.Choice(sorted(simulator_mod.PRESETS)), default=None)
@click.option("--fleet", "fleet_path", type=click.Path(), default=None,
              help="Fleet config JSON (alternative to --preset).")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--sets", type=int, default=25, show_default=True)
@click.option("--replicates", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def simulate(preset, fleet_path, out_path, sets, replicates, seed):
    """Generate a synthetic initial-design dataset CSV from a simulated fleet."""
    if (preset is None) == (fleet_path is None):
        _fail("pass exactly one of --preset or --fleet", EXIT_INPUT)
    fleet = (
        simulator_mod.PRESETS[preset](seed=seed)
        if preset
        else simulator_mod.load_fleet(fleet_path)
    )
    config = campaign_mod.CampaignConfig(
        fleet_size=fleet.n, initial_sets=sets, replicates=replicates, seed=seed
    )
    oracle = simulator_mod.SimulatorOracle(fleet)
    dataset = campaign_mod.run_initial_phase(config, oracle)
    write_csv(dataset, out_path)
    click.echo(f"wrote {len(dataset)} records to {out_path}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def report(checkpoint_path, out_dir):
    """Emit plot-data CSV series from a campaign checkpoint."""
    try:
        state = campaign_mod.load_checkpoint(checkpoint_path)
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        _fail(f"corrupt or missing checkpoint: {e}", EXIT_INPUT)
    out = Path(out_dir)
    with _output_lock(out):
        campaign_mod.write_report_series(state, out)
    click.echo(f"report series written to {out}")


if __name__ == "__main__":
    main()
