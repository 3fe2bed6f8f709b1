"""Bundled example data.

malawi_hiv_2015: district-level summary counts of HIV testing among
females aged 15-29 from the 2015-16 Malawi DHS (positives and number
tested, plus sampled/frame cluster counts by urban/rural stratum).
"""

import csv
from importlib import resources

import numpy as np


def load_malawi_hiv():
    """District summary counts as a dict of parallel arrays."""
    path = resources.files("saekit.data") / "malawi_hiv_2015.csv"
    with path.open("r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {
        "area_id": [r["area_id"] for r in rows],
        "positive": np.array([int(r["positive"]) for r in rows]),
        "tested": np.array([int(r["tested"]) for r in rows]),
    }
    for col in ("clusters_urban_sample", "clusters_rural_sample",
                "clusters_urban_frame", "clusters_rural_frame"):
        out[col] = np.array([int(r[col]) for r in rows])
    return out
