import numpy as np
import pytest
import torch

from dictenc.report_model import KeyValuePair, LabDictionary, LabReportSet, LabValue


def num(key, x, lo=3.0, hi=7.0):
    return KeyValuePair(key, LabValue.numeric(x, lo, hi))


def qual(key, text):
    return KeyValuePair(key, LabValue.qualitative(text))


def report(*dicts, kinds=None):
    kinds = kinds or [None] * len(dicts)
    return LabReportSet(tuple(LabDictionary(tuple(d), k) for d, k in zip(dicts, kinds)))


def central_difference(loss_fn, param: torch.Tensor, step=1e-5):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = float(loss_fn())
            flat[i] = orig - step
            minus = float(loss_fn())
            flat[i] = orig
            g[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    denom = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


@pytest.fixture
def two_dict_report():
    # 2 dictionaries, 3 pairs total
    return report(
        [num("glucose", 5.0), num("urea", 9.0)],
        [qual("culture", "positive")],
        kinds=["blood", "urine"],
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    entry = _CRITERIA.setdefault(n, [title, True, ""])
    if report.outcome != "passed":
        entry[1] = False
        entry[2] = report.outcome
    for name, content in report.user_properties:
        if name == "detail":
            entry[2] = content


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
