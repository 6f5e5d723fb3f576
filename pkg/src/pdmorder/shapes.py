"""2D landmark shapes, shape sets, and Procrustes alignment.

A shape is a flat vector of interleaved coordinates (x1, y1, x2, y2, ...).
Internally the alignment routines view each shape as a complex vector with
one entry per landmark, which turns planar similarity transforms into a
single complex multiplication plus an offset and keeps every rotation
proper (no reflections).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateShape,
    InconsistentDimension,
    NotAligned,
    ParseError,
    TooFewSamples,
)

_DEGENERACY_REL_TOL = 1e-15


def _as_complex(coords: np.ndarray) -> np.ndarray:
    return coords[0::2] + 1j * coords[1::2]


def _as_coords(z: np.ndarray) -> np.ndarray:
    out = np.empty(2 * z.size, dtype=float)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


@dataclass(frozen=True, eq=False)
class Shape:
    """One planar shape as interleaved landmark coordinates.

    Attributes:
        coords: 1-D float array (x1, y1, x2, y2, ...), even length >= 4,
            all entries finite.  The array is frozen after construction.
    """

    coords: np.ndarray

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=float, copy=True).ravel()
        if coords.size < 4 or coords.size % 2 != 0:
            raise ParseError(
                f"shape needs an even number of coordinates >= 4, got {coords.size}"
            )
        if not np.all(np.isfinite(coords)):
            raise ParseError("shape coordinates must all be finite")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)

    @property
    def n_coords(self) -> int:
        return self.coords.size

    @property
    def n_landmarks(self) -> int:
        return self.coords.size // 2

    def as_complex(self) -> np.ndarray:
        """Landmarks as one complex number each."""
        return _as_complex(self.coords)

    def centroid(self) -> np.ndarray:
        """Mean landmark position (x, y)."""
        z = self.as_complex().mean()
        return np.array([z.real, z.imag])

    def centroid_size(self) -> float:
        """Euclidean norm of the centered coordinate vector."""
        z = self.as_complex()
        zc = z - z.mean()
        return float(np.sqrt(np.sum(np.abs(zc) ** 2)))


@dataclass(frozen=True)
class AlignmentReport:
    """Outcome of a generalized Procrustes run."""

    iterations: int
    final_change: float


@dataclass(frozen=True, eq=False)
class ShapeSet:
    """An ordered collection of shapes with a common landmark count.

    Attributes:
        shapes: tuple of Shape, all with the same coordinate count.
        aligned: whether the set is the output of Procrustes alignment.
        alignment_report: statistics of the aligning run, if any.
    """

    shapes: tuple[Shape, ...]
    aligned: bool = False
    alignment_report: AlignmentReport | None = None

    def __post_init__(self) -> None:
        shapes = tuple(self.shapes)
        if len(shapes) < 2:
            raise TooFewSamples(f"a shape set needs at least 2 shapes, got {len(shapes)}")
        n = shapes[0].n_coords
        for idx, shape in enumerate(shapes):
            if shape.n_coords != n:
                raise InconsistentDimension(
                    f"shape {idx} has {shape.n_coords} coordinates, expected {n}"
                )
        object.__setattr__(self, "shapes", shapes)
        if self.aligned:
            mean_centroid = np.mean([s.centroid() for s in shapes], axis=0)
            if np.any(np.abs(mean_centroid) > 1e-9):
                raise NotAligned(
                    "aligned set must have its mean centroid at the origin"
                )

    @property
    def n_shapes(self) -> int:
        return len(self.shapes)

    @property
    def n_coords(self) -> int:
        return self.shapes[0].n_coords

    @property
    def n_landmarks(self) -> int:
        return self.shapes[0].n_landmarks

    def as_matrix(self) -> np.ndarray:
        """Stack the set as an (n_coords, n_shapes) column-per-shape matrix."""
        return np.column_stack([s.coords for s in self.shapes])

    def complex_matrix(self) -> np.ndarray:
        """Stack the set as an (n_shapes, n_landmarks) complex matrix."""
        return np.vstack([s.as_complex() for s in self.shapes])

    def subset(self, indices: Iterable[int]) -> "ShapeSet":
        """A new set holding the selected shapes, alignment flag preserved."""
        picked = tuple(self.shapes[i] for i in indices)
        return ShapeSet(picked, aligned=self.aligned)

    @staticmethod
    def from_matrix(
        matrix: np.ndarray,
        aligned: bool = False,
        alignment_report: AlignmentReport | None = None,
    ) -> "ShapeSet":
        shapes = tuple(Shape(matrix[:, m]) for m in range(matrix.shape[1]))
        return ShapeSet(shapes, aligned=aligned, alignment_report=alignment_report)


def _parse_row(fields: Sequence[str], where: str) -> np.ndarray:
    values = []
    for field in fields:
        text = field.strip()
        try:
            value = float(text)
        except ValueError as exc:
            raise ParseError(f"{where}: malformed number {text!r}") from exc
        if not math.isfinite(value):
            raise ParseError(f"{where}: non-finite value {text!r}")
        values.append(value)
    if len(values) < 4 or len(values) % 2 != 0:
        raise ParseError(
            f"{where}: expected an even number of coordinates >= 4, got {len(values)}"
        )
    return np.array(values)


def _data_lines(path: Path) -> list[tuple[int, str]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        lines.append((lineno, stripped))
    return lines


def load_shape_set(path: str | Path, fmt: str = "csv_rows") -> ShapeSet:
    """Load a shape set from disk.

    Args:
        path: CSV file (one shape per row) or a directory with one file
            per shape, consumed in lexicographic order.  Lines starting
            with '#' are comments.
        fmt: "csv_rows" or "directory_of_files".

    Returns:
        An unaligned ShapeSet in file order.

    Raises:
        ParseError: malformed numeric fields, odd coordinate counts.
        InconsistentDimension: rows disagree on landmark count.
        TooFewSamples: fewer than two shapes.
    """
    path = Path(path)
    rows: list[np.ndarray] = []
    if fmt == "csv_rows":
        for lineno, line in _data_lines(path):
            rows.append(_parse_row(line.split(","), f"{path}:{lineno}"))
    elif fmt == "directory_of_files":
        if not path.is_dir():
            raise ParseError(f"{path} is not a directory")
        files = sorted(
            p for p in path.iterdir() if p.is_file() and not p.name.startswith(".")
        )
        for file in files:
            lines = _data_lines(file)
            if len(lines) != 1:
                raise ParseError(
                    f"{file}: expected exactly one data row, found {len(lines)}"
                )
            lineno, line = lines[0]
            rows.append(_parse_row(line.split(","), f"{file}:{lineno}"))
    else:
        raise ValueError(f"unknown shape set format {fmt!r}")

    if len(rows) < 2:
        raise TooFewSamples(f"{path}: found {len(rows)} shapes, need at least 2")
    n = rows[0].size
    for idx, row in enumerate(rows):
        if row.size != n:
            raise InconsistentDimension(
                f"{path}: shape {idx} has {row.size} coordinates, expected {n}"
            )
    return ShapeSet(tuple(Shape(r) for r in rows))


def _centered(z: np.ndarray) -> np.ndarray:
    return z - z.mean()


def _check_not_degenerate(norm: float, scale: float, what: str) -> None:
    if norm <= _DEGENERACY_REL_TOL * max(1.0, scale):
        raise DegenerateShape(f"{what} has no spatial extent")


def align_pair(shape: Shape, reference: Shape, allow_scaling: bool = True) -> Shape:
    """Align one shape to a reference by an optimal similarity transform.

    The returned shape minimizes the summed squared landmark distance to the
    reference over translation, rotation, and (optionally) isotropic scale.
    Rotations are always proper; reflections are never introduced.

    Args:
        shape: shape to move.
        reference: target shape with the same landmark count.
        allow_scaling: solve the full similarity problem; if False the
            transform is rigid (rotation plus translation only).

    Returns:
        The transformed shape.
    """
    if shape.n_coords != reference.n_coords:
        raise InconsistentDimension(
            f"cannot align {shape.n_coords} against {reference.n_coords} coordinates"
        )
    z = _centered(shape.as_complex())
    w = reference.as_complex()
    w_centroid = w.mean()
    wc = w - w_centroid
    power = float(np.sum(np.abs(z) ** 2))
    _check_not_degenerate(math.sqrt(power), float(np.max(np.abs(shape.coords))), "shape")
    cross = np.vdot(z, wc)
    if allow_scaling:
        a = cross / power
    else:
        mag = abs(cross)
        a = cross / mag if mag > 0 else 1.0 + 0j
    return Shape(_as_coords(a * z + w_centroid))


def generalized_procrustes(
    shape_set: ShapeSet,
    tol: float = 1e-9,
    max_iter: int = 200,
    allow_scaling: bool = True,
) -> ShapeSet:
    """Generalized Procrustes alignment of a whole set.

    Every shape is aligned to an evolving mean; the mean is recentered and
    rescaled to unit centroid size after each sweep so its scale cannot
    drift.  Iteration stops once the mean moves less than tol between
    sweeps, or after max_iter sweeps (not an error; the report records the
    final change).

    Args:
        shape_set: input shapes, any pose.
        tol: Euclidean movement of the mean that counts as converged.
        max_iter: sweep budget.
        allow_scaling: full similarity alignment; False keeps sizes fixed.

    Returns:
        A new aligned ShapeSet in input order with an AlignmentReport.

    Raises:
        DegenerateShape: some shape has all landmarks coincident.
    """
    Z = shape_set.complex_matrix()
    Zc = Z - Z.mean(axis=1, keepdims=True)
    powers = np.sum(np.abs(Zc) ** 2, axis=1)
    scale = float(np.max(np.abs(shape_set.as_matrix())))
    for m in range(Zc.shape[0]):
        _check_not_degenerate(math.sqrt(powers[m]), scale, f"shape {m}")

    reference = Zc[0]
    if allow_scaling:
        reference = reference / np.linalg.norm(reference)

    aligned = Zc
    change = math.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        cross = Zc.conj() @ reference
        if allow_scaling:
            coeff = cross / powers
        else:
            mags = np.abs(cross)
            coeff = np.where(mags > 0, cross / np.where(mags > 0, mags, 1.0), 1.0)
        aligned = Zc * coeff[:, None]
        new_mean = aligned.mean(axis=0)
        new_mean = new_mean - new_mean.mean()
        norm = np.linalg.norm(new_mean)
        _check_not_degenerate(float(norm), scale, "mean shape")
        if allow_scaling:
            new_mean = new_mean / norm
        change = float(np.linalg.norm(new_mean - reference))
        reference = new_mean
        if change < tol:
            break

    matrix = np.empty((shape_set.n_coords, shape_set.n_shapes))
    for m in range(aligned.shape[0]):
        matrix[:, m] = _as_coords(aligned[m])
    return ShapeSet.from_matrix(
        matrix,
        aligned=True,
        alignment_report=AlignmentReport(iterations=iterations, final_change=change),
    )


def mean_shape(shapes: ShapeSet | Sequence[Shape]) -> Shape:
    """Coordinate-wise average shape of a set or sequence of shapes.

    Accepts a plain sequence as well so a single shape can be averaged
    (yielding itself).
    """
    if isinstance(shapes, ShapeSet):
        seq = shapes.shapes
    else:
        seq = tuple(shapes)
        if not seq:
            raise TooFewSamples("cannot average an empty collection of shapes")
        n = seq[0].n_coords
        for idx, shape in enumerate(seq):
            if shape.n_coords != n:
                raise InconsistentDimension(
                    f"shape {idx} has {shape.n_coords} coordinates, expected {n}"
                )
    stacked = np.vstack([s.coords for s in seq])
    return Shape(stacked.mean(axis=0))


def rmsd(a: Shape, b: Shape) -> float:
    """Root mean squared landmark distance between two shapes."""
    if a.n_coords != b.n_coords:
        raise InconsistentDimension("shapes disagree on coordinate count")
    d = a.as_complex() - b.as_complex()
    return float(np.sqrt(np.mean(np.abs(d) ** 2)))
