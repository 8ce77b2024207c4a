import pytest

from dualsplat.data import make_dataset, standard_scene_spec


def small_dataset(**kw):
    args = dict(scene_spec=standard_scene_spec(gaussians_per_primitive=200), width=48, height=48,
                frames_per_orbit=4, n_heldout=3)
    args.update(kw)
    return make_dataset(**args)


@pytest.fixture(scope="session")
def small_ds():
    return small_dataset()


@pytest.fixture(scope="session")
def clean_ds():
    return small_dataset(geometry_jitter=0.0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
