"""Result files.  Every file starts with `# `-prefixed reproducibility header lines."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from spdefield.errors import OutputError
from spdefield.services.kl import KlBasis
from spdefield.services.mesh import CartesianMesh
from spdefield.services.mlmc import MlmcResult

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
HEADER_END = "end"
LEVEL_COLUMNS = ("level", "dofs", "N", "mean_Y", "var_Y", "mean_Q", "var_Q", "cost_sec")


@contextmanager
def _writing(path: Path, mode: str = "w"):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, mode) as fh:
            yield fh
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    log.info("wrote %s", path)


def _header(fh, lines: Iterable[str]) -> None:
    for line in lines:
        fh.write(f"# {line}\n")


def _coordinate_names(dim: int) -> list[str]:
    return ["x", "y", "z"][:dim]


def field_filename(sample: int, level: int, kind: str = "fine", fmt: str = "csv") -> str:
    ext = "csv" if fmt == "csv" else "bin"
    return f"field_s{sample:06d}_l{level}_{kind}.{ext}"


def write_field(
    path: str | Path,
    mesh: CartesianMesh,
    values: np.ndarray,
    header: Sequence[str] = (),
    fmt: str = "csv",
) -> Path:
    """Cell values with centroids (csv) or raw little-endian doubles after the header (binary)."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.num_cells,):
        raise OutputError(f"{path}: {values.size} values for {mesh.num_cells} cells")
    meta = list(header) + [
        f"cells = {' '.join(map(str, mesh.cell_counts))}",
        f"origin = {' '.join(repr(o) for o in mesh.origin)}",
        f"cell_sizes = {' '.join(repr(h) for h in mesh.cell_sizes)}",
    ]
    if fmt == "csv":
        with _writing(path) as fh:
            _header(fh, meta)
            fh.write(",".join(["cell", *_coordinate_names(mesh.dim), "theta"]) + "\n")
            table = np.column_stack([np.arange(mesh.num_cells), mesh.centroids, values])
            np.savetxt(fh, table, delimiter=",", fmt=["%d"] + [FLOAT_FORMAT] * (mesh.dim + 1))
    elif fmt == "binary":
        with _writing(path, "wb") as fh:
            text = "".join(f"# {line}\n" for line in meta + ["dtype = <f8", f"count = {mesh.num_cells}"])
            fh.write(text.encode())
            fh.write(f"# {HEADER_END}\n".encode())
            fh.write(values.astype("<f8").tobytes())
    else:
        raise OutputError(f"unknown field format {fmt!r}")
    return path


def write_variance_map(
    path: str | Path,
    mesh: CartesianMesh,
    variance: np.ndarray,
    header: Sequence[str] = (),
) -> Path:
    path = Path(path)
    boundary = np.zeros(mesh.num_cells, dtype=int)
    boundary[mesh.boundary_cells()] = 1
    with _writing(path) as fh:
        _header(fh, header)
        fh.write(",".join(["cell", *_coordinate_names(mesh.dim), "variance", "boundary", "distance"]) + "\n")
        table = np.column_stack(
            [np.arange(mesh.num_cells), mesh.centroids, variance, boundary, mesh.distance_to_boundary()]
        )
        fmts = ["%d"] + [FLOAT_FORMAT] * (mesh.dim + 1) + ["%d", FLOAT_FORMAT]
        np.savetxt(fh, table, delimiter=",", fmt=fmts)
    return path


def write_level_table(path: str | Path, result: MlmcResult, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with _writing(path) as fh:
        _header(fh, header)
        fh.write(",".join(LEVEL_COLUMNS) + "\n")
        for s in result.levels:
            row = [
                str(s.level), str(s.dofs), str(s.n),
                FLOAT_FORMAT % s.y.mean, FLOAT_FORMAT % s.y.variance,
                FLOAT_FORMAT % s.q.mean, FLOAT_FORMAT % s.q.variance,
                FLOAT_FORMAT % s.seconds.mean,
            ]
            fh.write(",".join(row) + "\n")
    return path


def write_sweep_table(
    path: str | Path,
    results: Sequence[MlmcResult],
    header: Sequence[str] = (),
) -> Path:
    """Allocated samples per level for each target MSE."""
    path = Path(path)
    num_levels = len(results[0].levels) if results else 0
    with _writing(path) as fh:
        _header(fh, header)
        columns = ["target_mse", *(f"N_{l}" for l in range(num_levels)), "estimate", "variance_bound"]
        fh.write(",".join(columns) + "\n")
        for r in results:
            row = [FLOAT_FORMAT % r.target_mse, *(str(s.n) for s in r.levels)]
            row += [FLOAT_FORMAT % r.estimate, FLOAT_FORMAT % r.variance_bound]
            fh.write(",".join(row) + "\n")
    return path


def write_rows(
    path: str | Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[object]],
    header: Sequence[str] = (),
) -> Path:
    """Plain CSV table; floats at full precision."""
    path = Path(path)
    with _writing(path) as fh:
        _header(fh, header)
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(FLOAT_FORMAT % v if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def write_summary(path: str | Path, items: dict[str, object], header: Sequence[str] = ()) -> Path:
    path = Path(path)
    with _writing(path) as fh:
        _header(fh, header)
        for key, value in items.items():
            text = FLOAT_FORMAT % value if isinstance(value, float) else str(value)
            fh.write(f"{key} = {text}\n")
    return path


def write_kl_basis(path: str | Path, basis: KlBasis, header: Sequence[str] = ()) -> Path:
    """One mode per row: the eigenvalue, then the eigenvector's cell values."""
    path = Path(path)
    with _writing(path) as fh:
        _header(fh, list(header) + [f"truncation = {basis.truncation}", f"energy_ratio = {basis.energy_ratio!r}"])
        table = np.column_stack([basis.eigenvalues, basis.eigenvectors.T])
        np.savetxt(fh, table, delimiter=",", fmt=FLOAT_FORMAT)
    return path


def campaign_header(config, **extra) -> list[str]:
    """Resolved config lines followed by per-file metadata."""
    return config.to_lines() + [f"{key} = {value}" for key, value in extra.items()]
