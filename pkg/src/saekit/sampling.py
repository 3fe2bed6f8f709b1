"""Survey designs: linear systematic PPS, stratified two-stage cluster
sampling with exact inclusion probabilities, weight adjustments, and
adaptive cluster sampling.

Design weights are exact reciprocals of the overall inclusion
probabilities.  Certainty units (size larger than the sampling interval)
are rejected rather than silently auto-included: they normally indicate a
frame mistake and the caller must deal with them explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .population import FinitePopulation


class CertaintyUnitError(ValueError):
    """A unit's size exceeds the systematic sampling interval."""


@dataclass(frozen=True)
class TwoStageDesign:
    """Per-stratum cluster take and per-cluster household take.

    n_clusters may be a single int (same take everywhere) or a dict
    stratum_id -> take.  nonresponse_rates, when given, maps stratum id to
    a response rate in (0, 1]; sampled individuals are thinned at that
    rate and weights compensated by its inverse.
    """

    n_clusters: object
    n_households: int
    seed: int = 0
    nonresponse_rates: dict = None
    integer_start: bool = False
    shuffle_frame_order: bool = False  # permute clusters per draw,
    # neutralizing systematic-selection dependence on frame order

    def take_for(self, stratum_id):
        if isinstance(self.n_clusters, dict):
            try:
                return int(self.n_clusters[stratum_id])
            except KeyError:
                raise ValueError(f"no cluster take for stratum {stratum_id!r}")
        return int(self.n_clusters)


@dataclass
class SurveySample:
    """Sampled clusters in parallel arrays; one row per selected cluster.

    Weights are per-person: a row with n_tested persons represents
    adjusted_weight * n_tested weighted individuals.
    """

    cluster_id: np.ndarray
    stratum_id: np.ndarray
    area_id: np.ndarray
    urban: np.ndarray
    n_tested: np.ndarray
    y_positive: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    design_weight: np.ndarray
    adjusted_weight: np.ndarray

    def __post_init__(self):
        n = len(self.cluster_id)
        for name in ("stratum_id", "area_id", "urban", "n_tested",
                     "y_positive", "pi1", "pi2", "design_weight",
                     "adjusted_weight"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(self.y_positive > self.n_tested):
            raise ValueError("y_positive cannot exceed n_tested")
        if np.any((self.pi1 <= 0) | (self.pi1 > 1)):
            raise ValueError("pi1 must lie in (0, 1]")
        if np.any((self.pi2 <= 0) | (self.pi2 > 1)):
            raise ValueError("pi2 must lie in (0, 1]")

    def __len__(self):
        return len(self.cluster_id)

    def with_weights(self, adjusted):
        adjusted = np.asarray(adjusted, dtype=float)
        return replace(self, adjusted_weight=adjusted)

    @property
    def weighted_total(self):
        """Estimated population size: sum of person weights."""
        return float(np.sum(self.adjusted_weight * self.n_tested))


def pps_systematic(sizes, n, r, integer_start=False):
    """Linear systematic PPS selection.

    Units occupy contiguous intervals of length equal to their size on the
    cumulative scale; with interval t = total/n, unit i is selected for
    every hit r + j*t, j = 0..n-1, that falls in (T_{i-1}, T_i].  The
    returned index list has length exactly n (a unit appears once per
    hit).  Sizes larger than t raise CertaintyUnitError.
    """
    sizes = np.asarray(sizes, dtype=float)
    if sizes.ndim != 1 or len(sizes) == 0:
        raise ValueError("sizes must be a nonempty vector")
    if np.any(sizes <= 0):
        raise ValueError("sizes must be positive")
    n = int(n)
    if not 1 <= n <= len(sizes):
        raise ValueError(f"n={n} out of range for {len(sizes)} units")
    total = float(sizes.sum())
    t = total / n
    if np.any(sizes > t + 1e-9 * total):
        bad = np.nonzero(sizes > t + 1e-9 * total)[0]
        raise CertaintyUnitError(
            f"certainty unit(s) {bad.tolist()}: size exceeds interval {t}")
    if integer_start:
        if r != int(r) or not 1 <= r <= int(np.floor(t)):
            raise ValueError(f"integer start must lie in 1..floor(t)={int(np.floor(t))}")
    elif not 0 < r <= t:
        raise ValueError(f"start r={r} outside (0, {t}]")
    cum = np.cumsum(sizes)
    hits = r + t * np.arange(n)
    # T_{i-1} < hit <= T_i  <=>  i = first index with cum >= hit
    idx = np.searchsorted(cum, hits, side="left")
    # searchsorted(side='left') gives first cum >= hit; with strictly
    # positive sizes this matches the half-open interval rule exactly.
    return idx.tolist()


def inclusion_probability_two_stage(n_h, N_hc, N_h, n_hc):
    """Inclusion probabilities for a stratified two-stage PPS/SRS design.

    Returns (pi1, pi2, pi) with pi1 = n_h*N_hc/N_h, pi2 = n_hc/N_hc and
    overall pi = n_h*n_hc/N_h.
    """
    for name, v in (("n_h", n_h), ("N_hc", N_hc), ("N_h", N_h),
                    ("n_hc", n_hc)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    pi1 = n_h * N_hc / N_h
    if pi1 > 1.0 + 1e-12:
        raise CertaintyUnitError(
            f"pi1 = {pi1} > 1 (certainty selection not supported here)")
    pi2 = n_hc / N_hc
    if pi2 > 1.0 + 1e-12:
        raise ValueError(f"n_hc={n_hc} exceeds cluster size {N_hc}")
    return min(pi1, 1.0), min(pi2, 1.0), min(n_h * n_hc / N_h, 1.0)


def draw_two_stage(pop: FinitePopulation, design: TwoStageDesign,
                   rng=None) -> SurveySample:
    """Draw one stratified two-stage cluster sample.

    Stage 1 selects clusters by linear systematic PPS on household counts
    within each stratum (uniform random start); stage 2 takes an SRS of
    households in each selected cluster, and every resident individual is
    observed.  Deterministic given the design seed; pass an explicit rng
    for replicate studies.
    """
    if rng is None:
        rng = np.random.default_rng(design.seed)
    frame = pop.frame
    pph = pop.persons_per_household
    rows = {k: [] for k in ("cluster_id", "stratum_id", "area_id", "urban",
                            "n_tested", "y_positive", "pi1", "pi2",
                            "design_weight", "adjusted_weight")}

    for stratum_id, _, _ in frame.strata:
        clusters = frame.clusters_in_stratum(stratum_id)
        if design.shuffle_frame_order:
            order = rng.permutation(len(clusters))
            clusters = [clusters[i] for i in order]
        C_h = len(clusters)
        n_h = design.take_for(stratum_id)
        if n_h > C_h:
            raise ValueError(
                f"stratum {stratum_id!r}: take {n_h} exceeds {C_h} clusters")
        sizes = np.array([c.households for c in clusters], dtype=float)
        N_h = sizes.sum()
        if design.n_households > sizes.min():
            raise ValueError(
                f"stratum {stratum_id!r}: household take {design.n_households}"
                f" exceeds smallest cluster ({int(sizes.min())})")
        t = N_h / n_h
        if design.integer_start:
            r = float(rng.integers(1, int(np.floor(t)) + 1))
        else:
            r = t * (1.0 - rng.random())
        selected = pps_systematic(sizes, n_h, r,
                                  integer_start=design.integer_start)

        rate = 1.0
        if design.nonresponse_rates:
            rate = float(design.nonresponse_rates.get(stratum_id, 1.0))
            if not 0.0 < rate <= 1.0:
                raise ValueError(
                    f"response rate for {stratum_id!r} must be in (0, 1]")

        for ci in selected:
            c = clusters[ci]
            pi1, pi2, _ = inclusion_probability_two_stage(
                n_h, c.households, N_h, design.n_households)
            hh = rng.choice(c.households, size=design.n_households,
                            replace=False)
            y = pop.outcomes[c.cluster_id]
            person_idx = (hh[:, None] * pph + np.arange(pph)).ravel()
            drawn = y[person_idx]
            if rate < 1.0:
                responded = rng.random(len(drawn)) < rate
                drawn = drawn[responded]
            d = 1.0 / (pi1 * pi2)
            rows["cluster_id"].append(c.cluster_id)
            rows["stratum_id"].append(stratum_id)
            rows["area_id"].append(c.area_id)
            rows["urban"].append(c.urban)
            rows["n_tested"].append(len(drawn))
            rows["y_positive"].append(int(drawn.sum()))
            rows["pi1"].append(pi1)
            rows["pi2"].append(pi2)
            rows["design_weight"].append(d)
            rows["adjusted_weight"].append(d / rate)

    return SurveySample(
        cluster_id=np.array(rows["cluster_id"], dtype=int),
        stratum_id=np.array(rows["stratum_id"], dtype=object),
        area_id=np.array(rows["area_id"], dtype=object),
        urban=np.array(rows["urban"], dtype=bool),
        n_tested=np.array(rows["n_tested"], dtype=int),
        y_positive=np.array(rows["y_positive"], dtype=int),
        pi1=np.array(rows["pi1"], dtype=float),
        pi2=np.array(rows["pi2"], dtype=float),
        design_weight=np.array(rows["design_weight"], dtype=float),
        adjusted_weight=np.array(rows["adjusted_weight"], dtype=float),
    )


def adjust_nonresponse(sample: SurveySample, cells,
                       response_rates: dict) -> SurveySample:
    """Inverse-response-rate weight adjustment.

    cells assigns each row to an adjustment cell; the adjusted weight is
    the design weight divided by that cell's response rate.
    """
    cells = np.asarray(cells, dtype=object)
    if len(cells) != len(sample):
        raise ValueError("cells must have one entry per row")
    rates = np.empty(len(sample))
    for i, cell in enumerate(cells):
        try:
            rate = float(response_rates[cell])
        except KeyError:
            raise ValueError(f"no response rate for cell {cell!r}")
        if not 0.0 < rate <= 1.0:
            raise ValueError(f"response rate for {cell!r} must be in (0, 1]")
        rates[i] = rate
    return sample.with_weights(sample.design_weight / rates)


def poststratify(sample: SurveySample, groups,
                 known_totals: dict) -> SurveySample:
    """Scale weights within groups so person-weight sums hit known totals."""
    groups = np.asarray(groups, dtype=object)
    if len(groups) != len(sample):
        raise ValueError("groups must have one entry per row")
    new = sample.adjusted_weight.copy()
    present = set(groups.tolist())
    for g, total in known_totals.items():
        if total <= 0:
            raise ValueError(f"total for group {g!r} must be positive")
        mask = groups == g
        if not mask.any():
            raise ValueError(f"group {g!r} has no sampled rows")
        current = np.sum(sample.adjusted_weight[mask] * sample.n_tested[mask])
        if current <= 0:
            raise ValueError(f"group {g!r} has zero weighted count")
        new[mask] *= total / current
    missing = present - set(known_totals)
    if missing:
        raise ValueError(f"no known totals for groups {sorted(missing)}")
    return sample.with_weights(new)


def weight_cv_deff(weights):
    """Coefficient of variation of the weights and the 1 + CV^2 design
    effect of weight variation (population SD, divisor n)."""
    w = np.asarray(weights, dtype=float)
    if w.size < 2:
        raise ValueError("need at least two weights")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    cv = float(w.std() / w.mean())
    return cv, 1.0 + cv ** 2


def adaptive_cluster_sample(counts, adjacency, initial, threshold):
    """Adaptive cluster sampling closure.

    Starting from the initial index set, any included cluster whose target
    count strictly exceeds the threshold pulls in all adjacent clusters;
    the expansion repeats until no included cluster above the threshold
    has an excluded neighbour.  Always terminates (monotone growth on a
    finite set) and the result contains the initial set.
    """
    counts = np.asarray(counts)
    n = len(counts)
    neighbors = [[] for _ in range(n)]
    for i, j in adjacency:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range")
        neighbors[i].append(j)
        neighbors[j].append(i)
    included = set(int(i) for i in initial)
    for i in included:
        if not 0 <= i < n:
            raise ValueError(f"initial index {i} out of range")
    frontier = [i for i in included if counts[i] > threshold]
    while frontier:
        nxt = []
        for i in frontier:
            for j in neighbors[i]:
                if j not in included:
                    included.add(j)
                    if counts[j] > threshold:
                        nxt.append(j)
        frontier = nxt
    return sorted(included)


def replicate_rngs(root_seed, n_replicates):
    """Independent per-replicate generators split from one root seed."""
    seq = np.random.SeedSequence(root_seed)
    return [np.random.default_rng(s) for s in seq.spawn(n_replicates)]
