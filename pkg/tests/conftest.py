import numpy as np
import pytest

from tetraforge import distill, fields

SPHERE_R = 0.8


@pytest.fixture(scope="session")
def analytic_sphere():
    """Radius-0.8 sphere with the procedural checker colours."""
    return fields.sdf_primitive("sphere", radiance=fields.CheckerRadiance(), radius=SPHERE_R)


@pytest.fixture(scope="session")
def trained_sphere(analytic_sphere):
    """MLP field distilled from ``analytic_sphere`` (4x64 density, 3x64 radiance).

    Tests that modify parameters must work on ``clone_field(trained_sphere)``.
    """
    return distill.distill(analytic_sphere, density_steps=3000, radiance_steps=2000, seed=0)


def clone_field(f):
    d = fields.MlpDensity(f.density.net.copy())
    r = fields.MlpRadiance(f.radiance_model.net.copy())
    return fields.ImplicitField(d, r, f.bbox, f.background)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
