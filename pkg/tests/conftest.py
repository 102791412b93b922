import math
import re

import numpy as np
import pytest

from stlgm.covariance import CovarianceParams

_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per numbered acceptance criterion that ran."""
    verdict = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if match is None:
                continue
            num = int(match.group(1))
            verdict[num] = verdict.get(num, True) and outcome == "passed"
    if not verdict:
        return
    terminalreporter.write_line("")
    for num in sorted(verdict):
        word = "PASS" if verdict[num] else "FAIL"
        terminalreporter.write_line(f"criterion {num:02d}: {word}")


def dense_cov(coords, theta):
    """Slow reference covariance matrix, built entry by entry."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            dx = coords[i, 0] - coords[j, 0]
            dy = coords[i, 1] - coords[j, 1]
            ds = math.sqrt(dx * dx + dy * dy)
            dt = abs(coords[i, 2] - coords[j, 2])
            val = 0.0
            for s, p, l in zip(theta.sigma, theta.phi, theta.lam):
                val += s * s * math.exp(-ds / p) * math.exp(-dt / l)
            K[i, j] = val
    return K


def random_theta(rng, L=2):
    return CovarianceParams(
        sigma=tuple(rng.uniform(0.3, 2.0, L)),
        phi=tuple(rng.uniform(1.0, 40.0, L)),
        lam=tuple(rng.uniform(5.0, 150.0, L)),
    )


def random_coords(rng, n, extent=50.0, years=(2015.0, 2022.0)):
    xy = rng.uniform(0.0, extent, (n, 2))
    t = rng.uniform(years[0], years[1], n)
    return np.column_stack([xy, t])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
