"""The three end-to-end release strategies behind one interface.

budget_split runs one Laplace release per (activity, metric) slice, each
clipped separately and each paying an equal share of the budget.
joint_clipping releases one global histogram with a single clip and the full
budget; its weakness is that the same absolute noise lands on small-count
cells and large-magnitude cells alike.  activity_metric_scaling normalizes
every (activity, metric) slice by a quantile of per-user slice norms before a
single joint clip, so one full-budget release gets noise proportional to each
slice's magnitude; joint_clipping is exactly its all-ones special case.

Every run is split into a deterministic prepare step (clip and aggregate,
depends only on data and clip/scale hyperparameters) and a finish step (noise,
descale, threshold, depends on epsilon, tau, and the seed), so a sweep over
budgets and seeds pays the aggregation cost once per mechanism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aggregation import noise_descale_threshold, secure_sum
from .client import client_work, fleet_contributions
from .dp_core import PrivacyLedger, clip_l1, exact_quantile, slice_l1_norm
from .schema import (
    ConfigError,
    Dimensions,
    METRIC_NAMES,
    MechanismConfig,
    ScaleMatrix,
    SparseHistogram,
    WeekDataset,
    user_histogram,
)


@dataclass(frozen=True)
class ReleaseResult:
    """One private release plus its accounting."""

    mechanism_kind: str
    released: SparseHistogram
    total_epsilon: float
    config_echo: MechanismConfig
    seed: int
    suppressed_cells: int
    ledger: PrivacyLedger


@dataclass(frozen=True)
class PreparedRelease:
    """Clipped pre-noise aggregate, ready to be noised at any budget.

    ``noise_units_flat`` holds, per cell, the Laplace scale times epsilon
    (the clip bound for single-release mechanisms, clip * num_slices for
    budget_split), so the per-cell noise scale at budget eps is
    noise_units_flat / eps.  ``charge_fractions`` lists the ledger charges
    as fractions of the total budget.
    """

    mechanism_kind: str
    dims: Dimensions
    pre_noise_dense: np.ndarray
    scale_flat: np.ndarray
    noise_units_flat: np.ndarray
    charge_fractions: tuple[tuple[str, float], ...]
    clip_echo: float | np.ndarray
    scales_echo: ScaleMatrix

    @property
    def pre_noise_sum(self) -> SparseHistogram:
        return SparseHistogram.from_dense(self.dims, self.pre_noise_dense)


def prepare_activity_metric_scaling(
    data: WeekDataset, scales: ScaleMatrix, clip: float, dims: Dimensions,
    *, kind: str = "activity_metric_scaling",
) -> PreparedRelease:
    contributions = fleet_contributions(data, scales, clip, dims)
    raw = secure_sum(contributions, dims=dims)
    return PreparedRelease(
        mechanism_kind=kind,
        dims=dims,
        pre_noise_dense=raw.to_dense(),
        scale_flat=scales.per_cell(dims),
        noise_units_flat=np.full(dims.total_cells, float(clip)),
        charge_fractions=(("laplace_noise", 1.0),),
        clip_echo=float(clip),
        scales_echo=scales,
    )


def prepare_joint_clipping(data: WeekDataset, clip: float, dims: Dimensions) -> PreparedRelease:
    return prepare_activity_metric_scaling(
        data, ScaleMatrix.ones(dims.num_activities), clip, dims, kind="joint_clipping")


def prepare_budget_split(data: WeekDataset, clips, dims: Dimensions) -> PreparedRelease:
    """Per-(activity, metric) slices, each clipped to its own bound.

    The split count generalizes to num_activities * 3; each slice's noise
    scale at budget eps is clips(a, m) * split_count / eps.
    """
    clips = np.asarray(clips, dtype=float)
    if clips.shape != (dims.num_activities, 3):
        raise ConfigError(
            f"clip grid must have shape ({dims.num_activities}, 3), got {clips.shape}")
    if not np.all(np.isfinite(clips)) or not np.all(clips > 0):
        raise ConfigError("clip grid entries must be finite and strictly positive")

    split_count = dims.num_activities * 3
    dense = np.zeros(dims.total_cells)
    ones = ScaleMatrix.ones(dims.num_activities)
    # bucket each user's cells by slice in one pass; every cell belongs to
    # exactly one slice, so accumulation order per cell stays user order
    for uid, records in data.users:
        hist = client_work(uid, records, ones, math.inf, dims).vector
        buckets: dict[tuple[int, int], dict] = {}
        for cell, value in hist.cells.items():
            buckets.setdefault((cell[0], cell[1]), {})[cell] = value
        for (a, m), cells in buckets.items():
            clipped = clip_l1(SparseHistogram(dims, cells), float(clips[a, m]))
            for (ca, cm, r, d), value in clipped.cells.items():
                dense[dims.cell_index(ca, cm, r, d)] += value
    charges = tuple(
        (f"slice_a{a}_{METRIC_NAMES[m]}", 1.0 / split_count)
        for a in range(dims.num_activities) for m in range(3)
    )
    ones = ScaleMatrix.ones(dims.num_activities)
    noise_units = np.repeat((clips * split_count).reshape(-1), dims.num_regions * 3)
    return PreparedRelease(
        mechanism_kind="budget_split",
        dims=dims,
        pre_noise_dense=dense,
        scale_flat=ones.per_cell(dims),
        noise_units_flat=noise_units,
        charge_fractions=charges,
        clip_echo=clips,
        scales_echo=ones,
    )


def finish_release(
    prepared: PreparedRelease,
    epsilon: float,
    tau: float,
    seed: int,
    *,
    test_mode: bool = False,
) -> ReleaseResult:
    """Noise, descale, and threshold a prepared aggregate at one budget."""
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise ConfigError(f"epsilon must be finite and > 0, got {epsilon}")
    ledger = PrivacyLedger(budget=math.inf if test_mode else epsilon)
    for label, fraction in prepared.charge_fractions:
        ledger.charge(label, math.inf if test_mode else fraction * epsilon)
    _, released_dense, suppressed = noise_descale_threshold(
        prepared.pre_noise_dense,
        prepared.scale_flat,
        prepared.noise_units_flat / epsilon,
        tau,
        seed,
        prepared.dims,
        test_mode=test_mode,
    )
    config = MechanismConfig(
        epsilon=epsilon,
        mechanism_kind=prepared.mechanism_kind,
        clip=prepared.clip_echo,
        scales=prepared.scales_echo,
        threshold_tau=tau,
        rng_seed=seed,
    )
    return ReleaseResult(
        mechanism_kind=prepared.mechanism_kind,
        released=SparseHistogram.from_dense(prepared.dims, released_dense),
        total_epsilon=ledger.total(),
        config_echo=config,
        seed=seed,
        suppressed_cells=suppressed,
        ledger=ledger,
    )


def run_budget_split(
    data: WeekDataset, clips, epsilon: float, seed: int, dims: Dimensions,
    *, tau: float = 0.0, test_mode: bool = False,
) -> ReleaseResult:
    return finish_release(
        prepare_budget_split(data, clips, dims), epsilon, tau, seed, test_mode=test_mode)


def run_joint_clipping(
    data: WeekDataset, clip: float, epsilon: float, seed: int, dims: Dimensions,
    *, tau: float = 0.0, test_mode: bool = False,
) -> ReleaseResult:
    return finish_release(
        prepare_joint_clipping(data, clip, dims), epsilon, tau, seed, test_mode=test_mode)


def run_activity_metric_scaling(
    data: WeekDataset, scales: ScaleMatrix, clip: float, epsilon: float,
    tau: float, seed: int, dims: Dimensions, *, test_mode: bool = False,
) -> ReleaseResult:
    return finish_release(
        prepare_activity_metric_scaling(data, scales, clip, dims),
        epsilon, tau, seed, test_mode=test_mode)


def prepare_release(config: MechanismConfig, data: WeekDataset, dims: Dimensions) -> PreparedRelease:
    if config.mechanism_kind == "budget_split":
        return prepare_budget_split(data, config.clip, dims)
    if config.mechanism_kind == "joint_clipping":
        return prepare_joint_clipping(data, config.clip, dims)
    return prepare_activity_metric_scaling(data, config.scales, config.clip, dims)


def run_release(
    config: MechanismConfig, data: WeekDataset, dims: Dimensions, *, test_mode: bool = False,
) -> ReleaseResult:
    """Run the mechanism a config fully describes."""
    return finish_release(
        prepare_release(config, data, dims),
        config.epsilon, config.threshold_tau, config.rng_seed, test_mode=test_mode)


def fit_scales(data: WeekDataset, dims: Dimensions, q: float = 0.95) -> ScaleMatrix:
    """Per-(activity, metric) quantile of per-user slice L1 norms.

    Users with a zero slice are excluded from that slice's quantile (a user
    who never cycles should not drag the cycling scale toward zero); slices
    nobody populates default to 1 so descaling stays defined.
    """
    if not 0 < q < 1:
        raise ConfigError(f"q must be in (0, 1), got {q}")
    norms: dict[tuple[int, int], list[float]] = {}
    for uid, records in data.users:
        hist = user_histogram(records, dims)
        per_slice: dict[tuple[int, int], float] = {}
        for (a, m, _, _), value in hist.cells.items():
            per_slice[(a, m)] = per_slice.get((a, m), 0.0) + abs(value)
        for key, norm in per_slice.items():
            norms.setdefault(key, []).append(norm)
    entries = np.ones((dims.num_activities, 3))
    for (a, m), values in norms.items():
        entries[a, m] = exact_quantile(values, q)
    return ScaleMatrix(entries)


def fit_clip(data: WeekDataset, scales: ScaleMatrix, dims: Dimensions, q: float = 0.95) -> float:
    """Quantile of per-user scaled pre-clip norms ||v_i||_1."""
    if not data.users:
        raise ConfigError("fit_clip needs a non-empty dataset")
    norms = [
        client_work(uid, records, scales, math.inf, dims).vector.l1_norm()
        for uid, records in data.users
    ]
    return exact_quantile(norms, q)


def manifest_line(result: ReleaseResult) -> str:
    """One-line run summary: mechanism,epsilon,clip,seed,total_cells,suppressed."""
    clip = result.config_echo.clip
    clip_repr = "grid" if isinstance(clip, np.ndarray) else repr(clip)
    return ",".join([
        result.mechanism_kind,
        repr(result.config_echo.epsilon),
        clip_repr,
        str(result.seed),
        str(result.released.dims.total_cells),
        str(result.suppressed_cells),
    ])
