"""Granular house-price densities and density-derived price indices.

The package fits time-evolving Gaussian mixture densities of log sale
price per (region, property type) cell with an embedding network trained
by maximum likelihood, aggregates them into metro densities with fixed
population weights, reads median / geometric-mean / quantile index curves
off the densities, and validates everything against hedonic and
repeat-sales ridge benchmarks on held-out repeat sales.
"""

from .errors import DataError, DensindexError, NumericalError
from .mixture import GaussianMixture, MixtureMoments, VARIANCE_FLOOR
from .data import (
    FeatureKey,
    ParseResult,
    PopulationWeights,
    RegionRegistry,
    RepeatSalePair,
    SalesDataset,
    compute_population_weights,
    fold_assignments,
    filter_outliers,
    pair_repeat_sales,
    parse_sales_csv,
    week_index,
    week_of_year,
    week_start,
    write_sales_csv,
)
from .synthetic import (
    GroundTruthTable,
    ScenarioConfig,
    SyntheticGroundTruth,
    TrendSpec,
    generate,
    scenario_config,
    scenario_names,
)
from .mdn import (
    MixtureDensityEnsemble,
    MixtureDensityNetwork,
    ModelLayout,
    load_model,
    save_model,
)
from .benchmarks import HedonicIndexModel, RepeatSalesIndexModel, solve_ridge
from .indices import (
    DensitySeries,
    IndexSeries,
    anchor_series,
    density_series,
    dump_density_json,
    index_from_density,
    monthly_weeks,
    pooled_density_series,
    read_index_csv,
    write_index_csv,
)
from .validation import (
    CalibrationCurve,
    MedianCalibration,
    PersistenceRow,
    ProjectionReport,
    RankTestReport,
    SparsityReport,
    cdf_persistence,
    friedman_nemenyi,
    kfold_projection_errors,
    median_calibration,
    median_calibration_by_region,
    nll_generalization,
    project_price,
    quantile_calibration,
    sparsity_experiment,
)

__version__ = "0.1.0"
