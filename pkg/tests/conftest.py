import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_synthesizer():
    """Synthesizer fitted under the default run config, with its scenes."""
    import numpy as np

    from udapose.config import RunConfig
    from udapose.experiments import make_synthesizer
    from udapose.synthesis import make_scenes

    cfg = RunConfig()
    well_lit, refs, tests = make_scenes(cfg.dataset())
    est = make_synthesizer(cfg).fit(np.stack([r.image for r in refs]),
                                    well_lit=np.stack([s.image for s in well_lit]))
    return {"cfg": cfg, "well_lit": well_lit, "refs": refs, "tests": tests, "est": est}


ACCEPTANCE = {}


def record(number, ok, detail):
    """Log one acceptance outcome; the summary prints them in order."""
    line = f"acceptance {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
