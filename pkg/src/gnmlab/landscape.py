"""Loss-landscape slices along filter-normalized random directions.

Two random directions are rescaled so each output-unit row matches the norm of
the corresponding parameter row (whole tensor for vectors); the loss is then
evaluated forward-only on a fixed batch over an R x R grid of displacements
theta + alpha d1 + beta d2. Flatness is summarized as mean(grid) - center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gnmlab.autodiff import ParamSet, Tensor

__all__ = [
    "Directions",
    "LandscapeGrid",
    "filter_normalized_directions",
    "landscape_grid",
    "flatness_score",
    "write_grid_csv",
]

RANGE_DEFAULT = 1.0
RESOLUTION_DEFAULT = 41


@dataclass(frozen=True)
class Directions:
    """A pair of named direction dicts plus which rows were zeroed out.

    ``zero_rows`` holds (parameter name, row index or None for whole-tensor)
    for every slice whose parameter norm was zero — those directions are zero
    by construction and the flag says so explicitly.
    """

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    zero_rows: tuple[tuple[str, int | None], ...]


def _normalize_like(param: np.ndarray, raw: np.ndarray, name: str,
                    flags: list[tuple[str, int | None]]) -> np.ndarray:
    if param.ndim >= 2:
        out = raw.reshape(param.shape[0], -1).copy()
        p2 = param.reshape(param.shape[0], -1)
        for i in range(param.shape[0]):
            p_norm = float(np.linalg.norm(p2[i]))
            d_norm = float(np.linalg.norm(out[i]))
            if p_norm == 0.0 or d_norm == 0.0:
                out[i] = 0.0
                flags.append((name, i))
            else:
                out[i] *= p_norm / d_norm
        return out.reshape(param.shape)
    p_norm = float(np.linalg.norm(param))
    d_norm = float(np.linalg.norm(raw))
    if p_norm == 0.0 or d_norm == 0.0:
        flags.append((name, None))
        return np.zeros_like(param)
    return raw * (p_norm / d_norm)


def filter_normalized_directions(params: ParamSet, rng: np.random.Generator) -> Directions:
    """Draw two Gaussian directions and rescale them row-by-row to match ``params``.

    Rows are output-unit slices for matrices (weights here store output units
    as rows); vectors rescale as a whole. Deterministic given the generator
    state: draws happen in ParamSet order, first direction then second.
    """
    flags: list[tuple[str, int | None]] = []
    dirs: list[dict[str, np.ndarray]] = []
    for _ in range(2):
        d = {}
        for name, t in params.items():
            d[name] = _normalize_like(t.data, rng.standard_normal(t.shape), name, flags)
        dirs.append(d)
    return Directions(first=dirs[0], second=dirs[1], zero_rows=tuple(dict.fromkeys(flags)))


@dataclass(frozen=True)
class LandscapeGrid:
    """R x R loss surface over [-r, r]^2; losses[i, j] pairs alphas[i] with betas[j]."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    range: float
    resolution: int
    non_finite: tuple[tuple[int, int], ...]  # grid points recorded as +inf sentinels

    @property
    def center_index(self) -> tuple[int, int]:
        if self.resolution % 2 == 0:
            raise ValueError("even-resolution grids have no exact center")
        mid = self.resolution // 2
        return (mid, mid)

    @property
    def center(self) -> float:
        i, j = self.center_index
        return float(self.losses[i, j])


def _axis(r: float, resolution: int) -> np.ndarray:
    if resolution == 1:
        return np.zeros(1)  # degenerate grid: the single central point
    axis = np.linspace(-r, r, resolution)
    if resolution % 2 == 1:
        axis[resolution // 2] = 0.0  # exact center, never a rounding residue
    return axis


def landscape_grid(params: ParamSet, loss_fn, batch, directions,
                   r: float = RANGE_DEFAULT, resolution: int = RESOLUTION_DEFAULT) -> LandscapeGrid:
    """Forward-only losses at theta + alpha d1 + beta d2 over the grid.

    ``directions`` is a :class:`Directions` or a (d1, d2) pair of name->array
    dicts. theta is displaced functionally (fresh constant tensors per point),
    so the caller's parameters are bitwise untouched, and the (0, 0) point
    evaluates theta itself — center equals the plain batch loss exactly.
    Non-finite losses are stored as +inf and flagged.
    """
    if isinstance(directions, Directions):
        d1, d2 = directions.first, directions.second
    else:
        d1, d2 = directions
    if list(d1) != params.names() or list(d2) != params.names():
        raise ValueError("direction names do not match the ParamSet")
    if r <= 0:
        raise ValueError(f"range must be > 0, got {r}")
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")

    alphas = _axis(r, resolution)
    betas = alphas.copy()
    losses = np.empty((resolution, resolution))
    flags: list[tuple[int, int]] = []
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a == 0.0 and b == 0.0:
                point = ParamSet({name: Tensor(t.data) for name, t in params.items()})
            else:
                point = ParamSet({
                    name: Tensor(t.data + a * d1[name] + b * d2[name])
                    for name, t in params.items()
                })
            value = float(loss_fn(point, batch).item())
            if not np.isfinite(value):
                flags.append((i, j))
                value = np.inf
            losses[i, j] = value
    return LandscapeGrid(alphas=alphas, betas=betas, losses=losses,
                         range=float(r), resolution=int(resolution), non_finite=tuple(flags))


def flatness_score(grid: LandscapeGrid) -> float:
    """mean(grid) - center: 0 for a constant surface, larger on sharper ones.

    Requires a finite grid (no sentinels) and an odd resolution so the center
    exists exactly.
    """
    if grid.non_finite:
        raise ValueError(f"grid holds {len(grid.non_finite)} non-finite sentinel(s); flatness undefined")
    return float(grid.losses.mean() - grid.center)


def write_grid_csv(grid: LandscapeGrid, path) -> None:
    """``alpha,beta,loss`` header then R^2 rows, alpha-major, repr-formatted floats."""
    with open(path, "w") as fh:
        fh.write("alpha,beta,loss\n")
        for i, a in enumerate(grid.alphas):
            for j, b in enumerate(grid.betas):
                fh.write(f"{float(a)!r},{float(b)!r},{float(grid.losses[i, j])!r}\n")
