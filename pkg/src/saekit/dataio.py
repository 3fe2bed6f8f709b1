"""CSV schemas shared by the command-line pipeline.

All files are UTF-8, comma-separated, with a mandatory header row, '.'
decimal separator, and empty fields for missing values.  Readers validate
row by row and raise InputError listing the offending rows.
"""

from __future__ import annotations

import csv

import numpy as np

from .population import Cluster, FinitePopulation, SamplingFrame
from .sampling import SurveySample
from .unitlevel import ClusterData, PixelGrid


class InputError(ValueError):
    """Schema violation in an input file; message lists offending rows."""


def _read_rows(path, required):
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}")
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(
                f"{path}: missing required columns {missing} "
                f"(found {header})")
        rows = list(reader)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _parse(rows, path, spec):
    """spec: list of (column, converter, required).  Collects bad rows."""
    out = {c: [] for c, _, _ in spec}
    bad = []
    for i, row in enumerate(rows, start=2):  # header is line 1
        try:
            for col, conv, required in spec:
                raw = (row.get(col) or "").strip()
                if raw == "":
                    if required:
                        raise ValueError(f"empty {col}")
                    out[col].append(None)
                else:
                    out[col].append(conv(raw))
        except (ValueError, TypeError) as exc:
            bad.append(f"line {i}: {exc}")
    if bad:
        shown = "; ".join(bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise InputError(f"{path}: {shown}{more}")
    return out


def _bool(raw):
    low = raw.lower()
    if low in ("1", "true", "t", "yes", "urban"):
        return True
    if low in ("0", "false", "f", "no", "rural"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _nonneg_int(raw):
    v = int(raw)
    if v < 0:
        raise ValueError(f"negative count: {raw}")
    return v


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


# -- sampling frame / population --------------------------------------------

FRAME_COLUMNS = ["cluster_id", "stratum_id", "area_id", "urban",
                 "households", "lon", "lat"]


def write_frame_csv(path, frame: SamplingFrame):
    rows = [[c.cluster_id, c.stratum_id, c.area_id, int(c.urban),
             c.households,
             None if np.isnan(c.lon) else repr(c.lon),
             None if np.isnan(c.lat) else repr(c.lat)]
            for c in frame.clusters]
    write_csv(path, FRAME_COLUMNS, rows)


def read_frame_csv(path) -> SamplingFrame:
    rows = _read_rows(path, ["cluster_id", "stratum_id", "area_id",
                             "urban", "households"])
    cols = _parse(rows, path, [
        ("cluster_id", int, True), ("stratum_id", str, True),
        ("area_id", str, True), ("urban", _bool, True),
        ("households", _nonneg_int, True),
        ("lon", float, False), ("lat", float, False)])
    strata, seen = [], set()
    clusters = []
    for i in range(len(cols["cluster_id"])):
        sid = cols["stratum_id"][i]
        if sid not in seen:
            seen.add(sid)
            strata.append((sid, cols["area_id"][i], cols["urban"][i]))
        clusters.append(Cluster(
            cluster_id=cols["cluster_id"][i], stratum_id=sid,
            area_id=cols["area_id"][i], urban=cols["urban"][i],
            households=cols["households"][i],
            lon=cols["lon"][i] if cols["lon"][i] is not None else np.nan,
            lat=cols["lat"][i] if cols["lat"][i] is not None else np.nan))
    try:
        return SamplingFrame(strata=strata, clusters=clusters)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}")


def write_population_csv(path, pop: FinitePopulation):
    """Frame columns plus the per-individual outcomes as a 0/1 string."""
    rows = []
    for c in pop.frame.clusters:
        y = pop.outcomes[c.cluster_id]
        rows.append([c.cluster_id, c.stratum_id, c.area_id, int(c.urban),
                     c.households,
                     None if np.isnan(c.lon) else repr(c.lon),
                     None if np.isnan(c.lat) else repr(c.lat),
                     "".join("1" if v else "0" for v in y)])
    write_csv(path, FRAME_COLUMNS + ["outcomes"], rows)


def read_population_csv(path) -> FinitePopulation:
    rows = _read_rows(path, FRAME_COLUMNS + ["outcomes"])
    cols = _parse(rows, path, [
        ("cluster_id", int, True), ("stratum_id", str, True),
        ("area_id", str, True), ("urban", _bool, True),
        ("households", _nonneg_int, True),
        ("lon", float, False), ("lat", float, False),
        ("outcomes", str, True)])
    strata, seen = [], set()
    clusters, outcomes = [], {}
    pph = None
    bad = []
    for i in range(len(cols["cluster_id"])):
        sid = cols["stratum_id"][i]
        if sid not in seen:
            seen.add(sid)
            strata.append((sid, cols["area_id"][i], cols["urban"][i]))
        cid = cols["cluster_id"][i]
        c = Cluster(cluster_id=cid, stratum_id=sid,
                    area_id=cols["area_id"][i], urban=cols["urban"][i],
                    households=cols["households"][i],
                    lon=cols["lon"][i] if cols["lon"][i] is not None else np.nan,
                    lat=cols["lat"][i] if cols["lat"][i] is not None else np.nan)
        s = cols["outcomes"][i]
        if set(s) - {"0", "1"}:
            bad.append(f"cluster {cid}: outcomes not 0/1")
            continue
        if len(s) % c.households != 0:
            bad.append(f"cluster {cid}: {len(s)} outcomes for "
                       f"{c.households} households")
            continue
        k = len(s) // c.households
        if pph is None:
            pph = k
        elif k != pph:
            bad.append(f"cluster {cid}: persons-per-household {k} != {pph}")
            continue
        clusters.append(c)
        outcomes[cid] = np.frombuffer(s.encode(), dtype=np.uint8) - ord("0")
    if bad:
        raise InputError(f"{path}: " + "; ".join(bad[:10]))
    frame = SamplingFrame(strata=strata, clusters=clusters)
    truth = {}
    for a in frame.area_ids:
        tot, cnt = 0, 0
        for c in frame.clusters:
            if c.area_id == a:
                tot += int(outcomes[c.cluster_id].sum())
                cnt += len(outcomes[c.cluster_id])
        truth[a] = tot / cnt
    return FinitePopulation(frame=frame, outcomes=outcomes, truth=truth,
                            persons_per_household=pph or 1)


def write_truth_csv(path, pop: FinitePopulation):
    rows = []
    for a in pop.frame.area_ids:
        n = pop.area_outcome_count(a)
        pos = sum(int(pop.outcomes[c.cluster_id].sum())
                  for c in pop.frame.clusters if c.area_id == a)
        rows.append([a, n, pos, repr(pop.truth[a])])
    write_csv(path, ["area_id", "n_individuals", "positives", "truth"], rows)


# -- survey sample -----------------------------------------------------------

SAMPLE_COLUMNS = ["cluster_id", "stratum_id", "area_id", "urban",
                  "n_tested", "y_positive", "pi1", "pi2", "design_weight",
                  "adjusted_weight"]


def write_sample_csv(path, sample: SurveySample):
    rows = []
    for i in range(len(sample)):
        rows.append([sample.cluster_id[i], sample.stratum_id[i],
                     sample.area_id[i], int(sample.urban[i]),
                     sample.n_tested[i], sample.y_positive[i],
                     repr(float(sample.pi1[i])), repr(float(sample.pi2[i])),
                     repr(float(sample.design_weight[i])),
                     repr(float(sample.adjusted_weight[i]))])
    write_csv(path, SAMPLE_COLUMNS, rows)


def read_sample_csv(path) -> SurveySample:
    rows = _read_rows(path, SAMPLE_COLUMNS)
    cols = _parse(rows, path, [
        ("cluster_id", int, True), ("stratum_id", str, True),
        ("area_id", str, True), ("urban", _bool, True),
        ("n_tested", _nonneg_int, True), ("y_positive", _nonneg_int, True),
        ("pi1", float, True), ("pi2", float, True),
        ("design_weight", float, True), ("adjusted_weight", float, True)])
    try:
        return SurveySample(
            cluster_id=np.array(cols["cluster_id"], dtype=int),
            stratum_id=np.array(cols["stratum_id"], dtype=object),
            area_id=np.array(cols["area_id"], dtype=object),
            urban=np.array(cols["urban"], dtype=bool),
            n_tested=np.array(cols["n_tested"], dtype=int),
            y_positive=np.array(cols["y_positive"], dtype=int),
            pi1=np.array(cols["pi1"], dtype=float),
            pi2=np.array(cols["pi2"], dtype=float),
            design_weight=np.array(cols["design_weight"], dtype=float),
            adjusted_weight=np.array(cols["adjusted_weight"], dtype=float))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}")


def read_cluster_csv(path) -> ClusterData:
    """Cluster counts for the unit-level models (coordinates optional)."""
    rows = _read_rows(path, ["cluster_id", "area_id", "urban", "n_tested",
                             "y_positive"])
    cols = _parse(rows, path, [
        ("cluster_id", int, True), ("area_id", str, True),
        ("urban", _bool, True), ("n_tested", _nonneg_int, True),
        ("y_positive", _nonneg_int, True),
        ("lon", float, False), ("lat", float, False)])
    lon = np.array([np.nan if v is None else v for v in cols["lon"]])
    lat = np.array([np.nan if v is None else v for v in cols["lat"]])
    try:
        return ClusterData(
            cluster_id=np.array(cols["cluster_id"], dtype=int),
            area_id=np.array(cols["area_id"], dtype=object),
            urban=np.array(cols["urban"], dtype=bool),
            n_tested=np.array(cols["n_tested"], dtype=int),
            y_positive=np.array(cols["y_positive"], dtype=int),
            lon=lon, lat=lat)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}")


# -- area-level tables --------------------------------------------------------

def read_counts_csv(path):
    """Area summary counts (area_id, positive, tested)."""
    rows = _read_rows(path, ["area_id", "positive", "tested"])
    cols = _parse(rows, path, [
        ("area_id", str, True), ("positive", _nonneg_int, True),
        ("tested", _nonneg_int, True)])
    bad = [f"line {i + 2}: positive > tested"
           for i in range(len(cols["area_id"]))
           if cols["positive"][i] > cols["tested"][i]]
    if bad:
        raise InputError(f"{path}: " + "; ".join(bad))
    return (cols["area_id"], np.array(cols["positive"]),
            np.array(cols["tested"]))


def write_estimates_csv(path, est):
    rows = []
    for i, a in enumerate(est.area_ids):
        def fmt(v):
            return None if not np.isfinite(v) else repr(float(v))
        rows.append([a, fmt(est.est[i]),
                     fmt(np.sqrt(est.var[i]) if est.var[i] >= 0 else np.nan),
                     est.n[i], est.n_clusters[i], fmt(est.z[i]),
                     fmt(est.z_var[i]), est.status[i]])
    write_csv(path, ["area_id", "est", "se", "n", "n_clusters", "z",
                     "v_logit", "status"], rows)


def read_estimates_csv(path):
    from .direct import AreaDirectEstimates
    rows = _read_rows(path, ["area_id", "est", "se", "n", "n_clusters",
                             "z", "v_logit", "status"])
    cols = _parse(rows, path, [
        ("area_id", str, True), ("est", float, False),
        ("se", float, False), ("n", _nonneg_int, True),
        ("n_clusters", _nonneg_int, True), ("z", float, False),
        ("v_logit", float, False), ("status", str, True)])
    k = len(cols["area_id"])

    def arr(name):
        return np.array([np.nan if v is None else v for v in cols[name]])
    se = arr("se")
    return AreaDirectEstimates(
        area_ids=cols["area_id"], est=arr("est"), var=se ** 2,
        n=np.array(cols["n"]), n_clusters=np.array(cols["n_clusters"]),
        z=arr("z"), z_var=arr("v_logit"), status=cols["status"])


def read_area_covariates_csv(path, area_ids):
    """Area-level covariates (area_id, x1..xp) aligned to area_ids."""
    rows = _read_rows(path, ["area_id"])
    header = list(rows[0].keys())
    xcols = [c for c in header if c != "area_id"]
    if not xcols:
        raise InputError(f"{path}: no covariate columns")
    spec = [("area_id", str, True)] + [(c, float, True) for c in xcols]
    cols = _parse(rows, path, spec)
    lookup = {cols["area_id"][i]: [cols[c][i] for c in xcols]
              for i in range(len(cols["area_id"]))}
    missing = [a for a in area_ids if a not in lookup]
    if missing:
        raise InputError(f"{path}: no covariates for areas {missing}")
    return np.array([lookup[a] for a in area_ids]), xcols


def read_unit_covariates_csv(path):
    """Unit-level covariates (area_id, cluster_id, x1..xp)."""
    rows = _read_rows(path, ["area_id", "cluster_id"])
    header = list(rows[0].keys())
    xcols = [c for c in header if c not in ("area_id", "cluster_id")]
    if not xcols:
        raise InputError(f"{path}: no covariate columns")
    spec = [("area_id", str, True), ("cluster_id", int, True)] \
        + [(c, float, True) for c in xcols]
    cols = _parse(rows, path, spec)
    X = np.column_stack([cols[c] for c in xcols])
    return (np.array(cols["area_id"], dtype=object),
            np.array(cols["cluster_id"], dtype=int), X, xcols)


def read_urban_fractions_csv(path):
    rows = _read_rows(path, ["area_id", "q"])
    cols = _parse(rows, path, [("area_id", str, True), ("q", float, True)])
    bad = [f"line {i + 2}: q outside [0,1]"
           for i, v in enumerate(cols["q"]) if not 0.0 <= v <= 1.0]
    if bad:
        raise InputError(f"{path}: " + "; ".join(bad))
    return dict(zip(cols["area_id"], cols["q"]))


def read_pixel_csv(path) -> PixelGrid:
    rows = _read_rows(path, ["area_id", "lon", "lat", "weight", "urban"])
    cols = _parse(rows, path, [
        ("area_id", str, True), ("lon", float, True), ("lat", float, True),
        ("weight", float, True), ("urban", _bool, True)])
    try:
        return PixelGrid(area_id=np.array(cols["area_id"], dtype=object),
                         lon=np.array(cols["lon"]),
                         lat=np.array(cols["lat"]),
                         weight=np.array(cols["weight"]),
                         urban=np.array(cols["urban"], dtype=bool))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}")


def write_summaries_csv(path, area_ids, median, sd, lower, upper,
                        model_tag):
    rows = [[a, repr(float(median[i])), repr(float(sd[i])),
             repr(float(lower[i])), repr(float(upper[i])), model_tag]
            for i, a in enumerate(area_ids)]
    write_csv(path, ["area_id", "estimate", "sd", "ci_low", "ci_high",
                     "model_tag"], rows)


def write_prevalence_draws_csv(path, area_ids, draws):
    rows = []
    for t in range(draws.shape[0]):
        for j, a in enumerate(area_ids):
            rows.append([t, a, repr(float(draws[t, j]))])
    write_csv(path, ["draw", "area_id", "value"], rows)


def read_prevalence_draws_csv(path):
    rows = _read_rows(path, ["draw", "area_id", "value"])
    cols = _parse(rows, path, [("draw", int, True), ("area_id", str, True),
                               ("value", float, True)])
    area_ids = []
    for a in cols["area_id"]:
        if a not in area_ids:
            area_ids.append(a)
    n_draws = max(cols["draw"]) + 1
    out = np.full((n_draws, len(area_ids)), np.nan)
    pos = {a: j for j, a in enumerate(area_ids)}
    for i in range(len(cols["draw"])):
        out[cols["draw"][i], pos[cols["area_id"][i]]] = cols["value"][i]
    if np.isnan(out).any():
        raise InputError(f"{path}: ragged draws (missing area values)")
    return area_ids, out


def write_parameter_draws_csv(path, fit):
    """Raw parameter draws as (iteration, chain, parameter, value)."""
    rows = [[it, chain, name, repr(float(value))]
            for it, chain, name, value in fit.draw_rows()]
    write_csv(path, ["iteration", "chain", "parameter", "value"], rows)


def write_cv_csv(path, report):
    rows = [[r.area_id, repr(r.direct_est), repr(r.direct_se),
             repr(r.pred_median), repr(r.pred_lower), repr(r.pred_upper),
             repr(r.discrepancy), int(r.covered)]
            for r in report.records]
    write_csv(path, ["area_id", "direct_est", "direct_se", "pred_median",
                     "pred_lower", "pred_upper", "discrepancy", "covered"],
              rows)


def write_rank_csv(path, summary):
    rows = [[a, repr(float(summary.median_rank[i])),
             repr(float(summary.lower[i])), repr(float(summary.upper[i]))]
            for i, a in enumerate(summary.area_ids)]
    write_csv(path, ["area_id", "median_rank", "rank_lower", "rank_upper"],
              rows)
