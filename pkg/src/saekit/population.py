"""Synthetic finite populations with known area-level truth.

The generator mirrors the unit-level model it is meant to validate: each
cluster's risk is expit(intercept + area covariates + urban offset + BYM2
area effect + cluster effect), and individual outcomes are Bernoulli draws
at that risk.  The realized per-area means are recorded exactly, so every
estimator downstream has an oracle to be checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .spatial import SpatialStructure, bym2_combine


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    stratum_id: str
    area_id: str
    urban: bool
    households: int
    lon: float = float("nan")
    lat: float = float("nan")


@dataclass
class SamplingFrame:
    """Census-like selection frame: strata holding clusters of households."""

    strata: list          # of (stratum_id, area_id, urban)
    clusters: list        # of Cluster

    def __post_init__(self):
        ids = [c.cluster_id for c in self.clusters]
        if len(ids) != len(set(ids)):
            raise ValueError("cluster_ids must be unique")
        known = {s[0] for s in self.strata}
        for c in self.clusters:
            if c.households < 1:
                raise ValueError(
                    f"cluster {c.cluster_id} has {c.households} households")
            if c.stratum_id not in known:
                raise ValueError(
                    f"cluster {c.cluster_id} references unknown stratum "
                    f"{c.stratum_id!r}")
        covered = {c.stratum_id for c in self.clusters}
        empty = known - covered
        if empty:
            raise ValueError(f"strata without clusters: {sorted(empty)}")

    @property
    def area_ids(self):
        seen = []
        for _, area, _ in self.strata:
            if area not in seen:
                seen.append(area)
        return seen

    def clusters_in_stratum(self, stratum_id):
        return [c for c in self.clusters if c.stratum_id == stratum_id]


@dataclass
class FinitePopulation:
    """Frame plus per-individual binary outcomes and exact area means."""

    frame: SamplingFrame
    outcomes: dict                 # cluster_id -> uint8 array (individuals)
    truth: dict                    # area_id -> exact finite-population mean
    cluster_probs: dict = field(default_factory=dict)  # cluster_id -> risk
    persons_per_household: int = 1
    covariates: np.ndarray = None  # (n_areas, p) used by the generator
    area_effects: np.ndarray = None

    def area_outcome_count(self, area_id):
        total = 0
        for c in self.frame.clusters:
            if c.area_id == area_id:
                total += len(self.outcomes[c.cluster_id])
        return total


@dataclass
class PopulationConfig:
    """Generator settings.

    The effect structure matches the unit-level smoothing model: risk is
    expit(intercept + x_i' covariate_effects + urban*urban_log_odds + b_i
    + cluster effect), with b the BYM2 composite built from area_effect_sd
    and spatial_proportion.  Frame-shape knobs (clusters per area,
    household counts, urban share, persons per household) are exposed here
    because the frame is synthesized alongside the outcomes.
    """

    areas: int
    adjacency: SpatialStructure
    intercept: float
    urban_log_odds: float = 0.0
    area_effect_sd: float = 0.0
    spatial_proportion: float = 0.0
    cluster_effect_sd: float = 0.0
    covariate_effects: tuple = ()
    seed: int = 0
    clusters_per_area: int = 16
    households_low: int = 30
    households_high: int = 30
    urban_cluster_fraction: float = 0.0
    persons_per_household: int = 1
    covariates: np.ndarray = None  # optional (areas, p); generated if absent

    def __post_init__(self):
        if not 0.0 <= self.spatial_proportion <= 1.0:
            raise ValueError("spatial_proportion must lie in [0, 1]")
        for name in ("area_effect_sd", "cluster_effect_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.areas != self.adjacency.n_areas:
            raise ValueError(
                f"areas={self.areas} but adjacency has "
                f"{self.adjacency.n_areas} nodes")
        if self.persons_per_household < 1:
            raise ValueError("persons_per_household must be >= 1")
        if not 0.0 <= self.urban_cluster_fraction <= 1.0:
            raise ValueError("urban_cluster_fraction must lie in [0, 1]")
        if self.households_low < 1 or self.households_high < self.households_low:
            raise ValueError("invalid household count range")


def _build_frame(config, rng):
    """Synthesize strata/clusters; cluster centroids fall in per-area unit
    cells laid out on a grid (the generator needs some geometry, any will
    do)."""
    structure = config.adjacency
    ncols = int(np.ceil(np.sqrt(config.areas)))
    strata, clusters = [], []
    cid = 0
    for ai, area in enumerate(structure.nodes):
        n_clu = config.clusters_per_area
        if config.urban_cluster_fraction > 0:
            n_urban = max(1, int(round(config.urban_cluster_fraction * n_clu)))
            n_urban = min(n_urban, n_clu - 1) if n_clu > 1 else n_clu
        else:
            n_urban = 0
        cell_r, cell_c = divmod(ai, ncols)
        for stratum_urban, count in ((True, n_urban), (False, n_clu - n_urban)):
            if count == 0:
                continue
            sid = f"{area}_{'u' if stratum_urban else 'r'}"
            strata.append((sid, area, stratum_urban))
            sizes = rng.integers(config.households_low,
                                 config.households_high + 1, size=count)
            lon = cell_c + rng.random(count)
            lat = cell_r + rng.random(count)
            for k in range(count):
                clusters.append(Cluster(
                    cluster_id=cid, stratum_id=sid, area_id=area,
                    urban=stratum_urban, households=int(sizes[k]),
                    lon=float(lon[k]), lat=float(lat[k])))
                cid += 1
    return SamplingFrame(strata=strata, clusters=clusters)


def generate_population(config: PopulationConfig) -> FinitePopulation:
    """Draw a finite population; deterministic for a fixed config seed."""
    rng = np.random.default_rng(config.seed)
    structure = config.adjacency
    m = config.areas

    frame = _build_frame(config, rng)

    beta1 = np.asarray(config.covariate_effects, dtype=float)
    if beta1.size:
        if config.covariates is not None:
            x = np.asarray(config.covariates, dtype=float)
            if x.shape != (m, beta1.size):
                raise ValueError(
                    f"covariates must have shape ({m}, {beta1.size})")
        else:
            x = rng.standard_normal((m, beta1.size))
        covar_term = x @ beta1
    else:
        x = np.zeros((m, 0))
        covar_term = np.zeros(m)

    if config.area_effect_sd > 0:
        e = rng.standard_normal(m)
        S = structure.draw_standard_icar(rng)
        b = bym2_combine(e, S, config.area_effect_sd,
                         config.spatial_proportion)
    else:
        # Consume the same stream so seeds stay comparable across settings.
        rng.standard_normal(m)
        structure.draw_standard_icar(rng)
        b = np.zeros(m)

    outcomes, cluster_probs = {}, {}
    pph = config.persons_per_household
    area_pos = {a: 0 for a in structure.nodes}
    area_n = {a: 0 for a in structure.nodes}
    for c in frame.clusters:
        ai = structure.index(c.area_id)
        eps = rng.standard_normal() * config.cluster_effect_sd
        eta = (config.intercept + covar_term[ai]
               + (config.urban_log_odds if c.urban else 0.0)
               + b[ai] + eps)
        p = float(expit(eta))
        n_persons = c.households * pph
        y = (rng.random(n_persons) < p).astype(np.uint8)
        outcomes[c.cluster_id] = y
        cluster_probs[c.cluster_id] = p
        area_pos[c.area_id] += int(y.sum())
        area_n[c.area_id] += n_persons

    truth = {a: area_pos[a] / area_n[a] for a in structure.nodes}
    return FinitePopulation(frame=frame, outcomes=outcomes, truth=truth,
                            cluster_probs=cluster_probs,
                            persons_per_household=pph,
                            covariates=x, area_effects=b)


def finite_population_mean(pop: FinitePopulation, area_id) -> float:
    """Exact mean of the outcomes over all individuals of one area."""
    clusters = [c for c in pop.frame.clusters if c.area_id == area_id]
    if not clusters:
        raise KeyError(f"unknown area {area_id!r}")
    total = 0
    count = 0
    for c in clusters:
        y = pop.outcomes[c.cluster_id]
        total += int(y.sum())
        count += len(y)
    return total / count


def urban_fractions_from_frame(frame: SamplingFrame) -> dict:
    """Per-area urban share of households (the aggregation weights q_i)."""
    urban = {}
    total = {}
    for c in frame.clusters:
        total[c.area_id] = total.get(c.area_id, 0) + c.households
        if c.urban:
            urban[c.area_id] = urban.get(c.area_id, 0) + c.households
    return {a: urban.get(a, 0) / total[a] for a in total}
