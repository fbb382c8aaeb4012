"""Weighted-relative-error scoring and the mechanism comparison harness.

The score for one release: per metric, each cell with enough contributing
devices and a positive true value scores |released - true| / true (a missing
or suppressed cell counts as estimate 0, so error 1), and cells are averaged
with weights n_{r,d,a} / n_r taken from the true trip counts, normalized over
the cells that passed eligibility.  Evaluation reads ground-truth side
information only; nothing here feeds back into the ledger-governed release
path.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datagen import ground_truth
from .dp_core import derive_seed
from .mechanisms import (
    PreparedRelease,
    finish_release,
    fit_clip,
    fit_scales,
    prepare_activity_metric_scaling,
    prepare_budget_split,
    prepare_joint_clipping,
)
from .schema import (
    Cell,
    ConfigError,
    Dimensions,
    METRIC_NAMES,
    NUM_TRIPS,
    MechanismConfig,
    ScaleMatrix,
    SparseHistogram,
    WeekDataset,
)

DEFAULT_MIN_DEVICES = 20   # desk-scale stand-in for the production floor of 2000 devices
PRODUCTION_MIN_DEVICES = 2000
TARGET_WRE = 0.03
DEFAULT_EPSILON_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)
DEFAULT_MECHANISMS = ("joint_clipping", "budget_split", "activity_metric_scaling")
DEFAULT_CLIP_GRID_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)

# Reference measurements from a production-scale proxy run at epsilon = 2,
# (num_trips, distance, duration); desk-scale synthetic data reproduces the
# ordering, not the magnitudes.
REFERENCE_WRE_EPS2 = {
    "joint_clipping": (0.195, 0.072, 0.038),
    "budget_split": (0.091, 0.150, 0.088),
    "activity_metric_scaling": (0.028, 0.040, 0.028),
}

SWEEP_CSV_HEADER = ["mechanism", "epsilon", "repeat", "metric", "wre"]
SWEEP_AGG_CSV_HEADER = ["mechanism", "epsilon", "wre_mean", "wre_std"]


@dataclass(frozen=True)
class WeightTable:
    """Per-(region, direction, activity) weights n_{r,d,a} / n_r.

    Built from the true trip counts and shared by all three metrics; within
    one region the weights sum to 1 before eligibility filtering.
    """

    weights: dict[tuple[int, int, int], float]

    @classmethod
    def from_truth(cls, truth: SparseHistogram) -> "WeightTable":
        counts: dict[tuple[int, int, int], float] = {}
        region_totals: dict[int, float] = {}
        for (a, m, r, d), value in truth.cells.items():
            if m != NUM_TRIPS:
                continue
            counts[(r, d, a)] = counts.get((r, d, a), 0.0) + value
            region_totals[r] = region_totals.get(r, 0.0) + value
        weights = {
            key: value / region_totals[key[0]]
            for key, value in counts.items() if region_totals[key[0]] > 0
        }
        return cls(weights)

    def get(self, region: int, direction: int, activity: int) -> float:
        return self.weights.get((region, direction, activity), 0.0)


@dataclass(frozen=True)
class CellScore:
    metric: str
    activity: int
    region: int
    direction: int
    truth: float
    released: float
    rel_error: float
    weight: float
    devices: int


@dataclass(frozen=True)
class EvalReport:
    """Per-metric weighted relative error plus per-cell diagnostics."""

    wre: dict[str, float]
    eligible: dict[str, int]
    suppressed_eligible: dict[str, int]
    min_devices: int
    cells: tuple[CellScore, ...]

    @property
    def overall(self) -> float:
        return float(np.mean([self.wre[name] for name in METRIC_NAMES]))

    @property
    def has_eligible_cells(self) -> bool:
        return any(self.eligible[name] > 0 for name in METRIC_NAMES)


def weighted_relative_error(
    truth: SparseHistogram,
    devices: dict[Cell, int],
    released: SparseHistogram,
    min_devices: int,
) -> EvalReport:
    """Score a release against the exact totals.

    Eligible cells have at least ``min_devices`` contributing devices and a
    strictly positive true value; true-zero cells are excluded since their
    relative error is undefined.  A metric with no eligible cells scores NaN
    and is flagged by ``has_eligible_cells``.
    """
    if truth.dims != released.dims:
        raise ValueError("truth and released histograms must share dimensions")
    table = WeightTable.from_truth(truth)
    wre: dict[str, float] = {}
    eligible: dict[str, int] = {}
    suppressed: dict[str, int] = {}
    scores: list[CellScore] = []
    for m, name in enumerate(METRIC_NAMES):
        weighted_sum, weight_sum, count, missing = 0.0, 0.0, 0, 0
        for (a, mm, r, d), true_value in truth.cells.items():
            if mm != m or true_value <= 0:
                continue
            if devices.get((a, mm, r, d), 0) < min_devices:
                continue
            estimate = released.get((a, mm, r, d))
            if estimate == 0.0 and (a, mm, r, d) not in released.cells:
                missing += 1
            error = abs(estimate - true_value) / true_value
            weight = table.get(r, d, a)
            weighted_sum += weight * error
            weight_sum += weight
            count += 1
            scores.append(CellScore(name, a, r, d, true_value, estimate, error,
                                    weight, devices.get((a, mm, r, d), 0)))
        wre[name] = weighted_sum / weight_sum if weight_sum > 0 else math.nan
        eligible[name] = count
        suppressed[name] = missing
    return EvalReport(wre, eligible, suppressed, min_devices, tuple(scores))


# --- hyperparameter fitting ---------------------------------------------------

@dataclass(frozen=True)
class FittedHyperparameters:
    """Scale and clip choices fitted on proxy data at one quantile."""

    scales: ScaleMatrix
    ams_clip: float
    joint_clip: float
    split_clips: np.ndarray
    quantile: float

    def config_for(self, kind: str, epsilon: float, tau: float, seed: int) -> MechanismConfig:
        if kind == "budget_split":
            clip: float | np.ndarray = self.split_clips
            scales = ScaleMatrix.ones(self.scales.num_activities)
        elif kind == "joint_clipping":
            clip = self.joint_clip
            scales = ScaleMatrix.ones(self.scales.num_activities)
        elif kind == "activity_metric_scaling":
            clip = self.ams_clip
            scales = self.scales
        else:
            raise ConfigError(f"unknown mechanism {kind!r}")
        return MechanismConfig(epsilon, kind, clip, scales, tau, seed)


def fit_hyperparameters(proxy: WeekDataset, dims: Dimensions,
                        q: float = 0.95) -> FittedHyperparameters:
    """Fit everything the three mechanisms need, on proxy data only.

    The per-slice clip grid for budget_split reuses the per-(activity, metric)
    norm quantiles, which is exactly what tuning each slice's clip separately
    means.
    """
    scales = fit_scales(proxy, dims, q)
    ones = ScaleMatrix.ones(dims.num_activities)
    return FittedHyperparameters(
        scales=scales,
        ams_clip=fit_clip(proxy, scales, dims, q),
        joint_clip=fit_clip(proxy, ones, dims, q),
        split_clips=scales.entries.copy(),
        quantile=q,
    )


def prepare_for(kind: str, data: WeekDataset, fitted: FittedHyperparameters,
                dims: Dimensions) -> PreparedRelease:
    if kind == "budget_split":
        return prepare_budget_split(data, fitted.split_clips, dims)
    if kind == "joint_clipping":
        return prepare_joint_clipping(data, fitted.joint_clip, dims)
    if kind == "activity_metric_scaling":
        return prepare_activity_metric_scaling(data, fitted.scales, fitted.ams_clip, dims)
    raise ConfigError(f"unknown mechanism {kind!r}")


# --- sweep -------------------------------------------------------------------

def run_seed(base_seed: int, mechanism: str, epsilon: float, repeat: int) -> int:
    """Seed for one sweep cell, independent of execution order."""
    return derive_seed(base_seed, mechanism, repr(float(epsilon)), repeat)


@dataclass(frozen=True)
class SweepRow:
    mechanism: str
    epsilon: float
    repeat: int
    seed: int
    wre: dict[str, float]
    overall: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    mechanisms: tuple[str, ...]
    epsilons: tuple[float, ...]
    repeats: int
    min_devices: int
    tau: float
    fitted: FittedHyperparameters | None = None

    def mean_std(self, mechanism: str, epsilon: float) -> tuple[float, float]:
        values = [row.overall for row in self.rows
                  if row.mechanism == mechanism and row.epsilon == epsilon]
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return mean, std

    def metric_means(self, mechanism: str, epsilon: float) -> dict[str, float]:
        rows = [row for row in self.rows
                if row.mechanism == mechanism and row.epsilon == epsilon]
        return {name: float(np.mean([row.wre[name] for row in rows]))
                for name in METRIC_NAMES}


def sweep(
    data: WeekDataset,
    proxy: WeekDataset,
    epsilons,
    mechanisms,
    repeats: int,
    seed: int,
    dims: Dimensions,
    *,
    min_devices: int = DEFAULT_MIN_DEVICES,
    tau: float = 0.0,
    fit_q: float = 0.95,
    test_mode: bool = False,
    threads: int = 1,
) -> SweepResult:
    """Fit on the proxy, then release and score every (mechanism, eps, repeat).

    Passing the evaluation dataset itself as ``proxy`` is the caller's
    explicit unsafe-fit decision.  Sweep cells use independently derived
    seeds, so thread scheduling cannot change any number.
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    epsilons = tuple(float(e) for e in epsilons)
    mechanisms = tuple(mechanisms)
    fitted = fit_hyperparameters(proxy, dims, fit_q)
    truth, devices = ground_truth(data, dims)
    prepared = {kind: prepare_for(kind, data, fitted, dims) for kind in mechanisms}

    def one_cell(task: tuple[str, float, int]) -> SweepRow:
        kind, epsilon, repeat = task
        cell_seed = run_seed(seed, kind, epsilon, repeat)
        result = finish_release(prepared[kind], epsilon, tau, cell_seed, test_mode=test_mode)
        report = weighted_relative_error(truth, devices, result.released, min_devices)
        return SweepRow(kind, epsilon, repeat, cell_seed, dict(report.wre), report.overall)

    tasks = [(kind, epsilon, repeat)
             for kind in mechanisms for epsilon in epsilons for repeat in range(repeats)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = tuple(pool.map(one_cell, tasks))
    else:
        rows = tuple(one_cell(task) for task in tasks)
    return SweepResult(rows, mechanisms, epsilons, repeats, min_devices, tau, fitted)


def clip_grid_search(
    proxy: WeekDataset,
    scales: ScaleMatrix,
    epsilon: float,
    grid,
    repeats: int,
    seed: int,
    dims: Dimensions,
    *,
    min_devices: int = DEFAULT_MIN_DEVICES,
    tau: float = 0.0,
) -> float:
    """Pick the clip bound minimizing mean overall WRE on the proxy.

    Runs activity_metric_scaling for each candidate; ties break toward the
    smaller clip.
    """
    candidates = sorted(float(c) for c in grid)
    if not candidates:
        raise ConfigError("clip_grid_search needs a non-empty grid")
    truth, devices = ground_truth(proxy, dims)
    best_clip, best_score = None, math.inf
    for clip in candidates:
        prepared = prepare_activity_metric_scaling(proxy, scales, clip, dims)
        scores = []
        for repeat in range(repeats):
            cell_seed = derive_seed(seed, "clip_grid", repr(clip), repeat)
            result = finish_release(prepared, epsilon, tau, cell_seed)
            scores.append(
                weighted_relative_error(truth, devices, result.released, min_devices).overall)
        score = float(np.mean(scores))
        if score < best_score:
            best_clip, best_score = clip, score
    return best_clip


def default_clip_grid(fitted_clip: float) -> tuple[float, ...]:
    return tuple(fitted_clip * f for f in DEFAULT_CLIP_GRID_FACTORS)


# --- output files ------------------------------------------------------------

def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for row in result.rows:
            for name in METRIC_NAMES:
                writer.writerow([row.mechanism, row.epsilon, row.repeat, name, row.wre[name]])


def write_sweep_agg_csv(path, result: SweepResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_AGG_CSV_HEADER)
        for kind in result.mechanisms:
            for epsilon in result.epsilons:
                mean, std = result.mean_std(kind, epsilon)
                writer.writerow([kind, epsilon, mean, std])


def write_curve_data(path, result: SweepResult) -> None:
    """Plotter-agnostic XY data: one column per mechanism plus the target line.

    The epsilon axis is meant to be drawn log-scaled; the constant column is
    the 3% utility target.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# overall weighted relative error vs privacy budget (log-x suggested)\n")
        fh.write("# columns: epsilon " + " ".join(result.mechanisms) + " target\n")
        for epsilon in result.epsilons:
            means = [result.mean_std(kind, epsilon)[0] for kind in result.mechanisms]
            fh.write(" ".join([repr(epsilon)] + [repr(m) for m in means] + [repr(TARGET_WRE)]))
            fh.write("\n")
        fh.write("# reference, production-scale proxy at epsilon=2 "
                 "(num_trips, distance, duration):\n")
        for kind, values in REFERENCE_WRE_EPS2.items():
            fh.write(f"#   {kind}: {values[0]}, {values[1]}, {values[2]}\n")


def render_metric_table(result: SweepResult, epsilon: float) -> str:
    """Plain-text per-metric breakdown at one budget, with the reference rows."""
    nearest = min(result.epsilons, key=lambda e: abs(e - epsilon))
    width = max(len(kind) for kind in result.mechanisms) + 2
    floor = f", min_devices = {result.min_devices}" if result.min_devices >= 0 else ""
    lines = [
        f"weighted relative error by metric (epsilon = {nearest:g}, "
        f"{result.repeats} repeats{floor})",
        f"{'mechanism':<{width}}" + "".join(f"{name:>12}" for name in METRIC_NAMES),
    ]
    for kind in result.mechanisms:
        means = result.metric_means(kind, nearest)
        lines.append(f"{kind:<{width}}" + "".join(f"{means[name]:>12.4f}" for name in METRIC_NAMES))
    lines.append(f"utility target: {TARGET_WRE}")
    lines.append("reference, production-scale proxy at epsilon = 2:")
    for kind, values in REFERENCE_WRE_EPS2.items():
        lines.append(
            f"{kind:<{width}}" + "".join(f"{v:>12.3f}" for v in values))
    return "\n".join(lines) + "\n"


def read_sweep_csv(path) -> tuple[tuple[SweepRow, ...], tuple[str, ...], tuple[float, ...], int]:
    """Parse a sweep CSV back into rows (for the report command)."""
    grouped: dict[tuple[str, float, int], dict[str, float]] = {}
    mechanisms: list[str] = []
    epsilons: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_CSV_HEADER:
            raise ConfigError(f"{path}: bad header {header!r}, expected {SWEEP_CSV_HEADER}")
        for row in reader:
            if not row:
                continue
            kind, epsilon, repeat = row[0], float(row[1]), int(row[2])
            grouped.setdefault((kind, epsilon, repeat), {})[row[3]] = float(row[4])
            if kind not in mechanisms:
                mechanisms.append(kind)
            if epsilon not in epsilons:
                epsilons.append(epsilon)
    rows = []
    for (kind, epsilon, repeat), wre in grouped.items():
        if sorted(wre) != sorted(METRIC_NAMES):
            raise ConfigError(f"{path}: incomplete metrics for {(kind, epsilon, repeat)}")
        rows.append(SweepRow(kind, epsilon, repeat, 0,
                             wre, float(np.mean([wre[n] for n in METRIC_NAMES]))))
    repeats = max(row.repeat for row in rows) + 1 if rows else 0
    return tuple(rows), tuple(mechanisms), tuple(sorted(epsilons)), repeats
