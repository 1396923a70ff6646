import numpy as np
import pytest

from rsbridge.nnet import init_params


def fd_gradient(loss_fn, params, h=1e-5):
    """Central finite differences of ``loss_fn(params)`` for every entry."""
    grads = []
    arrays = params.arrays()
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = loss_fn(params)
            a[idx] = old - h
            down = loss_fn(params)
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def small_net():
    """A 2+8 -> 16 -> 16 -> 2 silu net (~500 parameters) with a random last layer."""
    rng = np.random.default_rng(3)
    return init_params(rng, hidden=(16, 16), time_embed_dim=8, activation="silu", zero_last=False)



# acceptance bookkeeping: one summary line per criterion, printed after the run
CRITERIA: dict[int, dict] = {}


def criterion(number: int, title: str):
    def mark(fn):
        fn.criterion, fn.title = number, title
        return fn

    return mark


def note(number: int, text: str) -> None:
    """Attach a measured value to a criterion's summary line."""
    CRITERIA.setdefault(number, {"ok": True, "notes": []})["notes"].append(text)


def pytest_runtest_makereport(item, call):
    number = getattr(getattr(item, "function", None), "criterion", None)
    if number is None or call.when != "call":
        return
    entry = CRITERIA.setdefault(number, {"ok": True, "notes": []})
    entry["title"] = item.function.title
    entry["ok"] = entry["ok"] and call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    rows = [(n, e) for n, e in sorted(CRITERIA.items()) if "title" in e]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n, e in rows:
        status = "PASS" if e["ok"] else "FAIL"
        notes = f" ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {status}: {e['title']}{notes}")
