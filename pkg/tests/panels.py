"""Hand-built panels with exactly known decay rates."""

import numpy as np

from spillbound.panel import PanelDataset, TreatmentSchedule, UnitLocation


def cluster_panel(k=0.02, r=0.85, amp=3.0, near=None, T=12):
    """Four isolated clusters, each one treated unit with untreated units on a ray.

    Clusters are 1e5 km apart and 60 far units sit 5e4 km away, so far-field
    outcomes underflow to exactly 0 and residualization is exact. Untreated
    outcomes are ``2 exp(-k d)`` (plus ``near(d)`` if given), treated outcomes
    ``amp (1 - r^(tau + 1))``.
    """
    units, adopt = [], {}
    uid = 0
    for j in range(4):
        cx = j * 1e5
        units.append(UnitLocation(uid, cx, 0.0))
        adopt[uid] = 2 + j
        uid += 1
        for d in np.linspace(5.0, 300.0, 30):
            units.append(UnitLocation(uid, cx, float(d)))
            uid += 1
    for i in range(60):
        units.append(UnitLocation(uid, 2e5 + 1000.0 * i, 5e4))
        uid += 1
    tmp = PanelDataset(units, TreatmentSchedule(adopt), np.zeros((len(units), T)))
    ex = tmp.exposure
    dist = np.where(np.isfinite(ex.dist), ex.dist, 1e9)
    field = 2.0 * np.exp(-k * dist)
    if near is not None:
        field = field + near(dist)
    Y = np.where(ex.treated, amp * (1 - r ** (ex.tau + 1.0)), field)
    return tmp.with_outcome(Y)
