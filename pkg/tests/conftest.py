import textwrap

import numpy as np
import pytest

from spdefield.output.writers import HEADER_END
from spdefield.services.linalg import SolverOptions
from spdefield.services.mesh import build_cartesian_mesh, refine_hierarchy
from spdefield.services.mlmc import QoiSample
from spdefield.services.rng import StreamKey, draw_standard_normal

TIGHT = SolverOptions(rtol=1e-11, atol=1e-14)


@pytest.fixture
def tight():
    return TIGHT


@pytest.fixture
def square():
    return build_cartesian_mesh(2, (0.0, 0.0), (1.0, 1.0), (4, 4))


@pytest.fixture
def cube():
    return build_cartesian_mesh(3, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (3, 3, 3))


@pytest.fixture
def hierarchy_2d():
    return refine_hierarchy(build_cartesian_mesh(2, (0.0, 0.0), (1.0, 1.5), (2, 3)), 3)


@pytest.fixture
def hierarchy_3d():
    return refine_hierarchy(build_cartesian_mesh(3, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2, 2, 2)), 2)


class FakePipeline:
    """Q_l = 1 + z0 + h_l z1 with h_l = 0.1 * 2^l, so Y_l shrinks on finer levels."""

    def __init__(self, num_levels=3, fail_at=(), degenerate=False):
        self._num_levels = num_levels
        self.fail_at = set(fail_at)
        self.degenerate = degenerate

    @property
    def num_levels(self):
        return self._num_levels

    def dofs(self, level):
        return 10 * 4 ** (self._num_levels - 1 - level)

    def h(self, level):
        return 0.0 if self.degenerate else 0.1 * 2.0**level

    def evaluate(self, level, key: StreamKey, coupled):
        from spdefield.errors import SolverFailure

        if key.sample in self.fail_at:
            raise SolverFailure("synthetic failure")
        z = draw_standard_normal(key, 2)
        q_fine = 1.0 + z[0] + self.h(level) * z[1]
        q_coarse = 1.0 + z[0] + self.h(level + 1) * z[1] if coupled else None
        return QoiSample(q_fine=float(q_fine), q_coarse=None if q_coarse is None else float(q_coarse), cost_sec=1e-3)


@pytest.fixture
def fake_pipeline():
    return FakePipeline()


@pytest.fixture
def write_config(tmp_path):
    """Write an INI config into tmp_path and return its path."""

    def write(text: str, name: str = "campaign.ini"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(text))
        return path

    return write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def read_header(lines):
    """`# key = value` lines of a result file as a dict."""
    out = {}
    for line in lines:
        body = line[2:] if line.startswith("# ") else line
        key, sep, value = body.partition(" = ")
        if sep:
            out[key.strip()] = value.strip()
    return out


def read_field(path):
    """Header and cell values of a field file in either format."""
    raw = path.read_bytes()
    marker = f"# {HEADER_END}\n".encode()
    if marker in raw:
        head, _, body = raw.partition(marker)
        return read_header(head.decode().splitlines()), np.frombuffer(body, dtype="<f8").copy()
    comments = [line for line in raw.decode().splitlines() if line.startswith("#")]
    table = np.loadtxt(path, delimiter=",", skiprows=len(comments) + 1, ndmin=2)
    return read_header(comments), table[:, -1]
