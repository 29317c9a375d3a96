import pytest

from uasnet.data import PhantomSpec, generate_dataset
from uasnet.training import TrainConfig

# 32x32 phantoms and narrow networks keep unit-level training tests fast
TINY_SPEC = PhantomSpec(patch_size=32, core_radius=(2.5, 4.0), halo_width=(2.0, 3.5), spike_length=(1.0, 2.0),
                        center_jitter=1.5)


def tiny_config(**overrides):
    values = dict(epochs=2, batch_size=4, widths=(16, 16, 16, 16, 16), generator_widths=(8, 8, 8, 8),
                  discriminator_width=8, classifier_width=8, patch_size=32, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(20, seed=7, spec=TINY_SPEC, malignant_fraction=0.5)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    details = ", ".join(f"{k}={v}" for k, v in item.user_properties)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    previous = _CRITERIA.get(number)
    if previous is None or previous[0] == "PASS":
        _CRITERIA[number] = (status, title, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, details = _CRITERIA[number]
        line = f"criterion {number:>2} {status}  {title}"
        if details:
            line += f"  [{details}]"
        terminalreporter.write_line(line)
