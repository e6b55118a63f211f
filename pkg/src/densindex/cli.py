"""Command line interface.

Subcommands cover the full pipeline on synthetic or user data:

  synth     draw a synthetic market with known ground truth
  train     fit a density network ensemble on a sales file
  index     produce index curves and density dumps from a fitted model
  validate  run the holdout validation protocol end to end

Each option can also be supplied through an environment variable named
DENSINDEX_<COMMAND>_<OPTION>, e.g. DENSINDEX_TRAIN_SEED=7.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import logging
import os

import click
import numpy as np

from .benchmarks import HedonicIndexModel, RepeatSalesIndexModel
from .data import (
    PROPERTY_TYPES,
    RegionRegistry,
    compute_population_weights,
    filter_outliers,
    pair_repeat_sales,
    parse_sales_csv,
    week_index,
    write_sales_csv,
)
from .errors import DataError, NumericalError
from .indices import (
    density_series,
    dump_density_json,
    index_from_density,
    pooled_density_series,
    write_index_csv,
)
from .mdn import MixtureDensityEnsemble, MixtureDensityNetwork, load_model, save_model
from .synthetic import generate, scenario_config, scenario_names
from .validation import (
    cdf_persistence,
    dump_json,
    friedman_nemenyi,
    kfold_projection_errors,
    median_calibration,
    median_calibration_by_region,
    nll_generalization,
    quantile_calibration,
    sparsity_experiment,
    write_calibration_curve_csv,
    write_median_calibration_csv,
    write_nemenyi_csv,
    write_persistence_csv,
    write_projection_csv,
)
from . import data as data_mod

logger = logging.getLogger(__name__)


@click.group()
@click.option("--verbose", "-v", count=True, help="-v for info, -vv for debug logging.")
def cli(verbose: int):
    """Granular house price densities and density-derived indices."""
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _parse_percentiles(text: str) -> list:
    try:
        values = [float(tok) / 100.0 for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise click.UsageError(f"--percentiles must be comma-separated numbers, got {text!r}")
    if not values or any(not 0 < v < 1 for v in values):
        raise click.UsageError("--percentiles entries must lie strictly between 0 and 100")
    return values


def _load_inputs(data_path, registry_path):
    registry = RegionRegistry.load(registry_path)
    parsed = parse_sales_csv(data_path, registry)
    if parsed.rejects:
        logger.warning("ignored %d malformed sales rows", len(parsed.rejects))
    return parsed.dataset, registry


def _weights_period(dataset, weights_cutoff):
    if not weights_cutoff:
        return None
    import datetime

    try:
        cutoff = datetime.date.fromisoformat(weights_cutoff)
    except ValueError:
        raise click.UsageError(f"--weights-cutoff must be an ISO date, got {weights_cutoff!r}")
    lo, hi = dataset.week_range()
    return (lo, min(week_index(cutoff), hi))


def _resolve_flags(model) -> tuple:
    member = model.members_[0] if isinstance(model, MixtureDensityEnsemble) else model
    return bool(member.resolve_bedrooms), bool(member.resolve_land_band)


@cli.command()
@click.option("--scenario", type=click.Choice(scenario_names()), required=True,
              help="Named synthetic market to draw.")
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="Directory for sales.csv, registry.json, ground_truth.json.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sales-per-week", type=float, default=None,
              help="Override the scenario's Poisson intensity per cell.")
@click.option("--n-weeks", type=int, default=None, help="Override the span in weeks.")
def synth(scenario, out, seed, sales_per_week, n_weeks):
    """Generate a synthetic sales file with known true densities."""
    overrides = {}
    if sales_per_week is not None:
        overrides["sales_per_week"] = sales_per_week
    if n_weeks is not None:
        overrides["n_weeks"] = n_weeks
    config = scenario_config(scenario, **overrides)
    dataset, truth = generate(config, seed)
    os.makedirs(out, exist_ok=True)
    write_sales_csv(os.path.join(out, "sales.csv"), dataset)
    config.registry().save(os.path.join(out, "registry.json"))
    truth.save(os.path.join(out, "ground_truth.json"))
    click.echo(f"wrote {len(dataset)} sales across {config.n_regions} regions "
               f"and {config.n_weeks} weeks to {out}")


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--registry", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Model JSON output path.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ensemble", type=int, default=30, show_default=True,
              help="Number of ensemble members.")
@click.option("--components", type=int, default=8, show_default=True)
@click.option("--jitter-weeks", type=float, default=2.0, show_default=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@click.option("--learning-rate", type=float, default=5e-3, show_default=True)
@click.option("--hidden", type=int, default=64, show_default=True)
@click.option("--embed-dim", type=int, default=10, show_default=True)
@click.option("--resolve-bedrooms", is_flag=True, default=False,
              help="Grow the feature key with the bedroom count.")
@click.option("--resolve-land-band", is_flag=True, default=False,
              help="Grow the feature key with the land band.")
@click.option("--n-jobs", type=int, default=1, show_default=True)
def train(data, registry, out, seed, ensemble, components, jitter_weeks, epochs,
          batch_size, learning_rate, hidden, embed_dim, resolve_bedrooms,
          resolve_land_band, n_jobs):
    """Train a density network ensemble and save it as JSON."""
    dataset, reg = _load_inputs(data, registry)
    base = MixtureDensityNetwork(
        n_components=components, embed_dim=embed_dim, hidden_dim=hidden,
        n_epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        jitter_weeks=jitter_weeks, resolve_bedrooms=resolve_bedrooms,
        resolve_land_band=resolve_land_band)
    model = MixtureDensityEnsemble(base_estimator=base, n_members=ensemble,
                                   seed=seed, n_jobs=n_jobs)
    model.fit(dataset, reg)
    save_model(model, out)
    click.echo(f"trained {ensemble} member(s) on {len(dataset)} records; "
               f"train nll {model.train_nll_:.6f}; saved to {out}")


@cli.command()
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--registry", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True,
              help="Directory for indices.csv and densities.json.")
@click.option("--percentiles", default="20,80", show_default=True,
              help="Comma separated quantile index levels, in percent.")
@click.option("--weights-cutoff", default=None,
              help="ISO date ending the population weight base period.")
@click.option("--normalize-date", default=None,
              help="ISO date at which every curve is scaled to 1 (default raw prices).")
@click.option("--density-grid", type=int, default=201, show_default=True,
              help="Grid points per density dump.")
def index(model_path, data, registry, out, percentiles, weights_cutoff,
          normalize_date, density_grid):
    """Build density, hedonic and repeat-sales index curves from a fitted model."""
    levels = _parse_percentiles(percentiles)
    dataset, reg = _load_inputs(data, registry)
    model = load_model(model_path)
    resolve_bed, resolve_band = _resolve_flags(model)
    weights = compute_population_weights(dataset, _weights_period(dataset, weights_cutoff),
                                         resolve_bed, resolve_band)
    week_lo, week_hi = dataset.week_range()
    weeks = np.arange(week_lo, week_hi + 1)

    norm_week = None
    if normalize_date:
        import datetime

        try:
            norm_week = week_index(datetime.date.fromisoformat(normalize_date))
        except ValueError:
            raise click.UsageError(f"--normalize-date must be an ISO date, got {normalize_date!r}")

    all_series = []
    density_dumps = []
    props_present = sorted(set(dataset.prop_type))
    for metro in reg.metros:
        metro_regions = set(reg.regions_in_metro(metro))
        for prop in props_present:
            keys = [k for k, w in weights.weights.items()
                    if k.region in metro_regions and k.prop_type == prop and w > 0]
            if not keys:
                continue
            scope = f"{metro}/{prop}"
            pooled = pooled_density_series(model, weights.restricted(keys), weeks,
                                           scope, prop_type=prop)
            density_dumps.append(pooled)
            all_series.append(index_from_density(pooled, "median"))
            all_series.append(index_from_density(pooled, "gmean"))
            all_series.append(index_from_density(pooled, "mean"))
            for p in levels:
                all_series.append(index_from_density(pooled, "quantile", p=p))
            for key in sorted(keys):
                sub = density_series(model, key, weeks, scope=key.label())
                all_series.append(index_from_density(sub, "median"))
                all_series.append(index_from_density(sub, "gmean"))

            mask = np.asarray([
                (r in metro_regions) and (pt == prop)
                for r, pt in zip(dataset.region, dataset.prop_type)], dtype=bool)
            subset = dataset.subset(mask)
            try:
                hed = HedonicIndexModel().fit(filter_outliers(subset), scope=scope)
                all_series.append(hed.index_series("monthly"))
            except DataError as exc:
                logger.warning("hedonic index skipped for %s: %s", scope, exc)
            try:
                rs = RepeatSalesIndexModel().fit(subset, scope=scope)
                all_series.append(rs.index_series("monthly"))
            except DataError as exc:
                logger.warning("repeat-sales index skipped for %s: %s", scope, exc)

    if not all_series:
        raise DataError("no index series could be built from the inputs")
    if norm_week is not None:
        all_series = [s.normalized(norm_week, max_gap=3) for s in all_series]
    os.makedirs(out, exist_ok=True)
    write_index_csv(os.path.join(out, "indices.csv"), all_series)
    dump_density_json(os.path.join(out, "densities.json"), density_dumps, density_grid)
    click.echo(f"wrote {len(all_series)} index series to {out}")


@cli.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--registry", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--folds", type=int, default=20, show_default=True)
@click.option("--ensemble", type=int, default=8, show_default=True)
@click.option("--components", type=int, default=8, show_default=True)
@click.option("--jitter-weeks", type=float, default=2.0, show_default=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@click.option("--learning-rate", type=float, default=5e-3, show_default=True)
@click.option("--percentiles", default="10,20,30,40,50,60,70,80,90", show_default=True)
@click.option("--weights-cutoff", default=None)
@click.option("--checks", default="kfold,calibration,persistence,nll", show_default=True,
              help="Comma separated subset of kfold,calibration,persistence,nll,sparsity.")
@click.option("--sparse-region", default=None,
              help="Region to thin for the sparsity check (default: last region).")
@click.option("--keep-fraction", type=float, default=0.1, show_default=True)
@click.option("--n-jobs", type=int, default=1, show_default=True)
def validate(data, registry, out, seed, folds, ensemble, components, jitter_weeks,
             epochs, batch_size, learning_rate, percentiles, weights_cutoff, checks,
             sparse_region, keep_fraction, n_jobs):
    """Run the validation protocol and write its reports."""
    wanted = {tok.strip() for tok in checks.split(",") if tok.strip()}
    known = {"kfold", "calibration", "persistence", "nll", "sparsity"}
    if not wanted or wanted - known:
        raise click.UsageError(f"--checks must name a subset of {sorted(known)}")
    levels = _parse_percentiles(percentiles)
    dataset, reg = _load_inputs(data, registry)
    period = _weights_period(dataset, weights_cutoff)
    base = MixtureDensityNetwork(
        n_components=components, n_epochs=epochs, batch_size=batch_size,
        learning_rate=learning_rate, jitter_weeks=jitter_weeks)
    template = MixtureDensityEnsemble(base_estimator=base, n_members=ensemble,
                                      seed=seed, n_jobs=n_jobs)
    os.makedirs(out, exist_ok=True)
    summary = {}

    if wanted & {"calibration", "persistence", "sparsity"}:
        full_model = MixtureDensityEnsemble(base_estimator=base, n_members=ensemble,
                                            seed=seed, n_jobs=n_jobs)
        full_model.fit(dataset, reg)
        weights = compute_population_weights(dataset, period)
        week_lo, week_hi = dataset.week_range()
        weeks = np.arange(week_lo, week_hi + 1)

    if "kfold" in wanted:
        report = kfold_projection_errors(
            dataset, reg, ensemble_template=template, n_folds=folds, seed=seed,
            weights_period=period)
        write_projection_csv(os.path.join(out, "projection_errors.csv"), report)
        rank = friedman_nemenyi(report.ape, report.kinds)
        write_nemenyi_csv(os.path.join(out, "nemenyi.csv"), rank)
        dump_json(os.path.join(out, "rank_test.json"), rank.to_dict())
        summary["kfold"] = report.to_dict()
        summary["rank_test"] = rank.to_dict()

    if "calibration" in wanted:
        med_rows = []
        curve = None
        props = sorted(set(dataset.prop_type))
        for metro in reg.metros:
            metro_regions = set(reg.regions_in_metro(metro))
            for prop in props:
                keys = [k for k, w in weights.weights.items()
                        if k.region in metro_regions and k.prop_type == prop and w > 0]
                if not keys:
                    continue
                scope = f"{metro}/{prop}"
                mask = np.asarray([
                    (r in metro_regions) and (pt == prop)
                    for r, pt in zip(dataset.region, dataset.prop_type)], dtype=bool)
                scope_ds = dataset.subset(mask)
                pooled = pooled_density_series(full_model, weights.restricted(keys),
                                               weeks, scope, prop_type=prop)
                curve = quantile_calibration(pooled, scope_ds, levels)
                write_calibration_curve_csv(
                    os.path.join(out, "calibration_curve.csv"), curve, scope)
                med_rows.append(median_calibration(
                    index_from_density(pooled, "median"), scope_ds))
                med_rows.append(median_calibration(
                    index_from_density(pooled, "gmean"), scope_ds))
                sub_series = {
                    k.region: index_from_density(
                        density_series(full_model, k, weeks), "median",
                        kind="d_subregion")
                    for k in keys}
                agg, _ = median_calibration_by_region(sub_series, scope_ds)
                summary.setdefault("calibration", {})[scope] = {
                    "curve": curve.to_dict(),
                    "d_subregion_delta_median": agg,
                }
        write_median_calibration_csv(os.path.join(out, "median_calibration.csv"), med_rows)

    if "persistence" in wanted:
        pairs = pair_repeat_sales(dataset)
        rows = cdf_persistence(full_model, pairs, weights, reg)
        write_persistence_csv(os.path.join(out, "persistence.csv"), rows)
        summary["persistence"] = [r.to_dict() for r in rows]

    if "nll" in wanted:
        holdout_mask = data_mod.fold_assignments(dataset.dwelling_id, 10) == 0
        train_ds = dataset.subset(~holdout_mask)
        holdout_ds = dataset.subset(holdout_mask)
        gen_model = MixtureDensityEnsemble(base_estimator=base, n_members=ensemble,
                                           seed=seed + 1, n_jobs=n_jobs)
        gen_model.fit(train_ds, reg)
        result = nll_generalization(gen_model, train_ds, holdout_ds)
        dump_json(os.path.join(out, "nll.json"), result)
        summary["nll"] = result

    if "sparsity" in wanted:
        region = sparse_region or reg.regions[-1]
        report = sparsity_experiment(
            dataset, reg, region, ensemble_template=template,
            keep_fraction=keep_fraction, seed=seed)
        dump_json(os.path.join(out, "sparsity.json"), report.to_dict())
        summary["sparsity"] = {
            "region": report.region,
            "max_departure_with": report.max_departure_with,
            "max_departure_without": report.max_departure_without,
        }

    dump_json(os.path.join(out, "summary.json"), summary)
    click.echo(f"validation reports written to {out}")


def main(argv=None) -> int:
    """Entry point mapping exceptions onto documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False, auto_envvar_prefix="DENSINDEX")
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
