import pytest

from rafcn.config import RunConfig

_RESULTS = pytest.StashKey[dict]()


def tiny_run(tmp_path=None, mode="serial", **train):
    """A run small enough to train in well under a second."""
    d = RunConfig().to_dict()
    d["network"].update(tile=[16, 16], stage_channels=[2, 3, 3], mode=mode)
    d["data"].update(tile=[16, 16], num_train=8, num_val=3, num_test=3, target_cells=[1, 2],
                     marker_distance=4)
    d["train"].update(max_iters=12, eval_every=4, batch=2, early_stop_patience=50)
    d["train"].update(train)
    d["optim"]["lr"] = 1e-2
    if tmp_path is not None:
        d["output_dir"] = str(tmp_path / "run")
    return RunConfig.from_dict(d)


@pytest.fixture
def tiny():
    return tiny_run


# -- acceptance reporting -------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each in the terminal
# summary. Details come from ``record_property("detail", ...)``.

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed):
        n, title = mark.args
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        results = item.config.stash[_RESULTS]
        prev_ok, _, prev_detail = results.get(n, (True, title, ""))
        ok = prev_ok and rep.passed
        results[n] = (ok, title, "; ".join(d for d in (prev_detail, detail) if d))
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        line = f"{'PASS' if ok else 'FAIL'}  {n}. {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
