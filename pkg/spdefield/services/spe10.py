"""SPE10 permeability slices as a mean log field.

The dataset file holds whitespace-separated values on a 60 x 220 x 85 grid,
x fastest, then y, then layer.  Only the first (kx) block is used.
"""

import logging
from pathlib import Path

import numpy as np

from spdefield.errors import InvalidArgumentError, OutputError
from spdefield.services.mesh import CartesianMesh

log = logging.getLogger(__name__)

SPE10_NX = 60
SPE10_NY = 220
SPE10_NZ = 85


def load_spe10_layer(
    path: str | Path | None,
    nx: int = SPE10_NX,
    ny: int = SPE10_NY,
    layer: int = 0,
) -> np.ndarray | None:
    """Permeability of one layer, x fastest; None when the file is not there."""
    if not path:
        log.warning("no SPE10 path configured, skipping")
        return None
    path = Path(path)
    if not path.is_file():
        log.warning("SPE10 file %s not found, skipping", path)
        return None
    if not 0 <= layer < SPE10_NZ:
        raise InvalidArgumentError(f"layer must be in 0..{SPE10_NZ - 1}, got {layer}")

    size = nx * ny
    try:
        values = np.array(path.read_text().split(), dtype=float)
    except (OSError, ValueError) as e:
        raise OutputError(f"cannot read SPE10 file {path}: {e}") from e
    start = layer * size
    if values.size < start + size:
        raise InvalidArgumentError(
            f"{path} holds {values.size} values, layer {layer} needs {start + size}"
        )
    slab = values[start: start + size]
    if np.any(slab <= 0) or not np.all(np.isfinite(slab)):
        raise InvalidArgumentError(f"{path}: layer {layer} has non-positive permeability")
    log.info("loaded SPE10 layer %d from %s (%dx%d)", layer, path, nx, ny)
    return slab


def mean_log_field(
    permeability: np.ndarray, mesh: CartesianMesh, nx: int = SPE10_NX, ny: int = SPE10_NY
) -> np.ndarray:
    """log k on `mesh`, which must be the nx x ny slice grid."""
    if mesh.cell_counts != (nx, ny) or permeability.size != nx * ny:
        raise InvalidArgumentError(
            f"SPE10 slice is {nx}x{ny} ({permeability.size} values), mesh has {mesh.cell_counts} cells"
        )
    return np.log(permeability)
