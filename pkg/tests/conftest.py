import numpy as np
import pytest

from ferpair.datamodel import Dataset, SynthesisConfig, synthesize_dataset

FD_STEP = 1e-5

_ACCEPTANCE = []


def central_diff(f, x, h=FD_STEP):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def make_dataset(labels, dim=2, seed=0, landmarks=0):
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    n = labels.size
    lm = rng.uniform(-1, 1, size=(n, 2 * landmarks)) if landmarks else None
    return Dataset([f"r{i}" for i in range(n)], rng.standard_normal((n, dim)), labels,
                   rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), lm)


def two_class_config(n_per_class, dim, gap, seed=0, identical=False):
    """Two classes at -gap/2 and +gap/2 along every coordinate, unit stddev."""
    mu = np.full(dim, gap / 2.0)
    means = np.stack([-mu, -mu if identical else mu])
    return SynthesisConfig(counts=[n_per_class, n_per_class], means=means, stddevs=[1.0, 1.0], seed=seed)


@pytest.fixture
def small_synth():
    cfg = SynthesisConfig(
        counts=[30, 40, 10, 8, 6, 5, 12, 4],
        means=np.eye(8, 6) * 3.0,
        stddevs=[1.0] * 8,
        seed=3,
        n_landmarks=2,
    )
    return synthesize_dataset(cfg)


# --------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion in the terminal summary

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], marker.args[1], rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
