import numpy as np
import pytest

from rfrec.data import ML100K_FORMAT, fetch_ml100k, load_tabular


def central_diff(fun, x: np.ndarray, h: float) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fun(x)
        flat[k] = orig - h
        fm = fun(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture(scope="session")
def ml100k_path():
    try:
        return fetch_ml100k()
    except Exception as exc:  # network or pip failure
        pytest.fail(f"MovieLens 100k is not available and could not be downloaded: {exc}")


@pytest.fixture(scope="session")
def ml100k(ml100k_path):
    return load_tabular(ml100k_path, ML100K_FORMAT)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
