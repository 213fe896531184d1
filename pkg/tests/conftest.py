import pytest

from deepsim import config

# small, fast settings shared by the experiment-level tests
TINY = """
task = {task}
dataset = builtin
dataset.train_count = 24
dataset.test_count = 8
dataset.size = 18
image_size = 16
scale = 1/16
batch_size = 4
iters = 6
seed = 3
{extra}
"""


@pytest.fixture
def tiny_config():
    def make(task="autoencoder", **values):
        extra = "\n".join(f"{config.key_of(k)} = {config.format_value(v)}" for k, v in values.items())
        return config.loads(TINY.format(task=task, extra=extra))

    return make


# acceptance criteria report one PASS/FAIL line each at the end of the run

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    item.config._criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, status, detail = criteria[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
