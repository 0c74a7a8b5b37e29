import time

import pytest

from scenediff import synth
from scenediff.pipeline import PipelineConfig, run_scene

_SCENES = {}
_RUNS = {}


def generated(name):
    if name not in _SCENES:
        spec = synth.SCENES[name]()
        _SCENES[name] = (spec, synth.generate(spec))
    return _SCENES[name]


def cached_run(name, mode="full", **overrides):
    """(SceneResult, seconds, spec, gt) for a canonical scene; each run happens once per session."""
    key = (name, mode, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        spec, (ref, res, poses, gt) = generated(name)
        cfg = PipelineConfig(mode=mode).replace(**overrides)
        t0 = time.perf_counter()
        result = run_scene(ref, res, poses, cfg, gt)
        _RUNS[key] = (result, time.perf_counter() - t0, spec, gt)
    return _RUNS[key]


@pytest.fixture(scope="session")
def scene_run():
    return cached_run


@pytest.fixture(scope="session")
def scene_data():
    return generated


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
