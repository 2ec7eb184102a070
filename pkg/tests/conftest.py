import math

import numpy as np
import pytest

from gcmtal.core import ActionUnit, Interval


def make_units(starts, ends, feats, video="v"):
    return [ActionUnit(i, video, Interval(float(s), float(e)), np.asarray(f, np.float64))
            for i, (s, e, f) in enumerate(zip(starts, ends, feats))]


def random_units(rng, n, d=8, span=None, max_len=20.0):
    span = span if span is not None else max(10.0, n * 2.0)
    starts = rng.uniform(0.0, span, n)
    lengths = rng.uniform(0.5, max_len, n)
    feats = rng.normal(size=(n, d))
    return make_units(starts, starts + lengths, feats)


def brute_force_graph(units, theta_ctx=0.7, theta_sur=1.0, l=10, kinds=None):
    """Pure-Python reference: double loop over pairs, fsum cosines, explicit sort."""
    kinds = kinds or {"contextual", "surrounding", "semantic"}
    n = len(units)
    feats = [u.feature.tolist() for u in units]
    norms = [math.sqrt(math.fsum(x * x for x in f)) for f in feats]
    unit = [[x / nm for x in f] for f, nm in zip(feats, norms)]
    l_eff = min(l, n - 1) if "semantic" in kinds else 0
    edges = {}
    for i in range(n):
        a = units[i].interval
        knn = set()
        if l_eff > 0:
            sims = [(-math.fsum(p * q for p, q in zip(unit[i], unit[j])), j)
                    for j in range(n) if j != i]
            knn = {j for _, j in sorted(sims)[:l_eff]}
        for j in range(n):
            b = units[j].interval
            inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
            union = (a.end - a.start) + (b.end - b.start) - inter
            r = inter / union
            dist = abs((a.start + a.end) / 2.0 - (b.start + b.end) / 2.0) / union
            if "contextual" in kinds and r > theta_ctx:
                edges[(i, j)] = "contextual"
            elif "surrounding" in kinds and inter == 0 and dist < theta_sur:
                edges[(i, j)] = "surrounding"
            elif "semantic" in kinds and inter == 0 and j in knn:
                edges[(i, j)] = "semantic"
    return sorted((i, j, k) for (i, j), k in edges.items())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
