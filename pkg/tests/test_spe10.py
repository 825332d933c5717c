import numpy as np
import pytest

from spdefield.errors import InvalidArgumentError, OutputError
from spdefield.services.mesh import build_cartesian_mesh
from spdefield.services.spe10 import load_spe10_layer, mean_log_field


@pytest.fixture
def perm_file(tmp_path):
    path = tmp_path / "spe_perm.dat"
    # two 3x2 layers, ragged rows like the distributed file
    path.write_text("1 2 3 4\n5 6\n10 20 30\n40 50 60\n")
    return path


def test_missing_file_is_skipped(tmp_path):
    assert load_spe10_layer(tmp_path / "nope.dat", 3, 2) is None
    assert load_spe10_layer("", 3, 2) is None
    assert load_spe10_layer(None, 3, 2) is None


def test_reads_one_layer(perm_file):
    assert np.array_equal(load_spe10_layer(perm_file, 3, 2), [1, 2, 3, 4, 5, 6])
    assert np.array_equal(load_spe10_layer(perm_file, 3, 2, layer=1), [10, 20, 30, 40, 50, 60])


def test_layer_out_of_range(perm_file):
    with pytest.raises(InvalidArgumentError):
        load_spe10_layer(perm_file, 3, 2, layer=2)
    with pytest.raises(InvalidArgumentError):
        load_spe10_layer(perm_file, 3, 2, layer=-1)


def test_non_positive_values(tmp_path):
    path = tmp_path / "bad.dat"
    path.write_text("1 2 0 4 5 6")
    with pytest.raises(InvalidArgumentError):
        load_spe10_layer(path, 3, 2)


def test_unreadable_values(tmp_path):
    path = tmp_path / "bad.dat"
    path.write_text("1 2 three 4 5 6")
    with pytest.raises(OutputError):
        load_spe10_layer(path, 3, 2)


def test_mean_log_field(perm_file):
    perm = load_spe10_layer(perm_file, 3, 2)
    mesh = build_cartesian_mesh(2, (0, 0), (3, 2), (3, 2))
    assert np.allclose(mean_log_field(perm, mesh, 3, 2), np.log(np.arange(1, 7)))
    with pytest.raises(InvalidArgumentError):
        mean_log_field(perm, build_cartesian_mesh(2, (0, 0), (1, 1), (2, 3)), 3, 2)
