"""Cube-layer rotations on volumes partitioned into a grid of subcubes.

A volume of size ``W x H x L`` with subcube side ``s = [n_w, n_h, n_l]`` forms
a grid of ``floor(W/n_w) x floor(H/n_h) x floor(L/n_l)`` subcubes.  A cube
layer is a one-subcube-thick slab perpendicular to an axis; rotating it
permutes voxels inside the covered extent and never touches residual voxels
past ``G * n`` on any axis.

Rotation convention: with in-plane coordinates ``(u, v)`` on an ``S x S``
cross-section, a 90 degree turn sends ``(u, v)`` to ``(S-1-v, u)``
(counter-clockwise seen from the positive end of the axis).  The in-plane
pairs are (y, z) for sagittal, (z, x) for coronal and (x, y) for axial.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError, RubikError
from .volume import Volume

ANGLES = (90, 180, 270)


class Axis(enum.IntEnum):
    SAGITTAL = 0  # x / W
    CORONAL = 1  # y / H
    AXIAL = 2  # z / L

    @property
    def in_plane(self) -> Tuple[int, int]:
        """Spatial indices (0=x, 1=y, 2=z) of the in-plane ``(u, v)`` axes."""
        return _IN_PLANE[self]

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                pass
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise RubikError(f"unknown axis {value!r}") from None


_IN_PLANE = {Axis.SAGITTAL: (1, 2), Axis.CORONAL: (2, 0), Axis.AXIAL: (0, 1)}

# Transposes of the (c, z, y, x) array into (c, t, u, v) with t along the
# rotation axis.  Each one is its own inverse.
_TO_TUV = {
    Axis.SAGITTAL: (0, 3, 2, 1),  # (c, x, y, z)
    Axis.CORONAL: (0, 2, 1, 3),  # (c, y, z, x)
    Axis.AXIAL: (0, 1, 3, 2),  # (c, z, x, y)
}
# array axis of each spatial index in the (c, z, y, x) layout
_ARRAY_AXIS = {0: 3, 1: 2, 2: 1}


@dataclass(frozen=True)
class GridSpec:
    side: Tuple[int, int, int]
    counts: Tuple[int, int, int]
    covered: Tuple[int, int, int]
    dims: Tuple[int, int, int]

    def to_json(self) -> dict:
        return {"counts": list(self.counts), "covered": list(self.covered), "dims": list(self.dims)}


@dataclass(frozen=True)
class LayerRotation:
    axis: Axis
    layer: int
    angle: int

    def to_json(self) -> dict:
        return {"axis": self.axis.name.lower(), "layer": self.layer, "angle": self.angle}

    @classmethod
    def from_json(cls, obj) -> "LayerRotation":
        return cls(Axis.parse(obj["axis"]), int(obj["layer"]), int(obj["angle"]))


TransformSequence = List[LayerRotation]


@dataclass(frozen=True)
class DisarrangeParams:
    side: Tuple[int, int, int]
    m: int
    seed: int = 0

    def __post_init__(self):
        side = _as_side(self.side)
        object.__setattr__(self, "side", side)
        if self.m < 0:
            raise RubikError("m must be >= 0")


@dataclass
class DisarrangeRecord:
    params: DisarrangeParams
    grid: GridSpec
    sequence: TransformSequence = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "seed": int(self.params.seed),
            "side": list(self.params.side),
            "m": int(self.params.m),
            "grid": self.grid.to_json(),
            "sequence": [r.to_json() for r in self.sequence],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj) -> "DisarrangeRecord":
        try:
            params = DisarrangeParams(tuple(obj["side"]), int(obj["m"]), int(obj["seed"]))
            grid = make_grid(obj["grid"]["dims"], params.side)
            sequence = [LayerRotation.from_json(r) for r in obj["sequence"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad record: {exc}") from exc
        if list(grid.counts) != list(obj["grid"].get("counts", grid.counts)):
            raise FormatError("bad record: grid counts disagree with dims and side")
        for rot in sequence:
            _check_rotation(grid, rot)
        return cls(params, grid, sequence)

    @classmethod
    def loads(cls, text: str) -> "DisarrangeRecord":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad record: {exc}") from exc
        return cls.from_json(obj)


def _as_side(side) -> Tuple[int, int, int]:
    if np.isscalar(side):
        side = (side, side, side)
    side = tuple(int(s) for s in side)
    if len(side) != 3:
        raise RubikError("subcube side needs three entries")
    return side


def make_grid(dims: Sequence[int], side) -> GridSpec:
    """Partition ``dims = [W, H, L]`` into subcubes of ``side``."""
    dims = tuple(int(d) for d in dims)
    side = _as_side(side)
    if any(s < 1 for s in side):
        raise RubikError("subcube side must be >= 1")
    counts = tuple(d // s for d, s in zip(dims, side))
    if any(c < 1 for c in counts):
        raise RubikError("subcube larger than volume")
    covered = tuple(c * s for c, s in zip(counts, side))
    return GridSpec(side=side, counts=counts, covered=covered, dims=dims)


def valid_angles(grid: GridSpec, axis) -> Tuple[int, ...]:
    """Quarter turns need a square cross-section in both voxels and subcubes."""
    u, v = Axis.parse(axis).in_plane
    if grid.covered[u] == grid.covered[v] and grid.counts[u] == grid.counts[v]:
        return ANGLES
    return (180,)


def _check_rotation(grid: GridSpec, rot: LayerRotation) -> None:
    if rot.angle not in valid_angles(grid, rot.axis):
        raise RubikError("illegal rotation")
    if not 0 <= rot.layer < grid.counts[rot.axis]:
        raise RubikError("illegal rotation: layer index out of range")


def _rotate_inplace(data: np.ndarray, grid: GridSpec, rot: LayerRotation) -> None:
    axis = rot.axis
    n = grid.side[axis]
    u, v = axis.in_plane
    slab_idx = [slice(None)] * 4
    slab_idx[_ARRAY_AXIS[axis]] = slice(rot.layer * n, (rot.layer + 1) * n)
    slab_idx[_ARRAY_AXIS[u]] = slice(0, grid.covered[u])
    slab_idx[_ARRAY_AXIS[v]] = slice(0, grid.covered[v])
    slab_idx = tuple(slab_idx)

    perm = _TO_TUV[axis]
    tuv = data[slab_idx].transpose(perm)
    quarter_turns = rot.angle // 90
    if quarter_turns == 2:
        out = tuv[:, :, ::-1, ::-1]
    elif quarter_turns == 1:
        # new[a, b] = old[b, S-1-a]
        out = tuv[:, :, :, ::-1].swapaxes(2, 3)
    else:
        # inverse of the above: new[a, b] = old[S-1-b, a]
        out = tuv[:, :, ::-1, :].swapaxes(2, 3)
    data[slab_idx] = out.transpose(perm).copy()


def rotate_layer(volume: Volume, grid: GridSpec, rotation: LayerRotation) -> Volume:
    """Rotate one cube layer; all channels receive the same permutation."""
    if tuple(volume.dims) != tuple(grid.dims):
        raise RubikError("grid/volume mismatch")
    _check_rotation(grid, rotation)
    data = volume.data.copy()
    _rotate_inplace(data, grid, rotation)
    return Volume(data, spacing=volume.spacing)


def apply_sequence(volume: Volume, grid: GridSpec, sequence: Sequence[LayerRotation]) -> Volume:
    if tuple(volume.dims) != tuple(grid.dims):
        raise RubikError("grid/volume mismatch")
    for rot in sequence:
        _check_rotation(grid, rot)
    data = volume.data.copy()
    for rot in sequence:
        _rotate_inplace(data, grid, rot)
    return Volume(data, spacing=volume.spacing)


def _stream(seed: int, *key: int) -> np.random.Generator:
    # counter-based split: each (axis, purpose) key gets an independent stream
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))


def sample_sequence(grid: GridSpec, params: DisarrangeParams) -> TransformSequence:
    """Draw ``m`` distinct layers per axis (sagittal, coronal, axial order).

    Layer choice and angle draws come from separate streams keyed by axis, so
    the draws of one axis never depend on another axis.
    """
    m = params.m
    if m > min(grid.counts):
        raise RubikError("too many layers")
    sequence: TransformSequence = []
    for axis in Axis:
        layers = _stream(params.seed, int(axis), 0).choice(grid.counts[axis], size=m, replace=False)
        angles = valid_angles(grid, axis)
        picks = _stream(params.seed, int(axis), 1).integers(0, len(angles), size=m)
        sequence.extend(LayerRotation(axis, int(j), angles[k]) for j, k in zip(layers, picks))
    return sequence


def disarrange(volume: Volume, params: DisarrangeParams) -> Tuple[Volume, DisarrangeRecord]:
    """Apply ``3 * m`` random layer rotations; returns the result and its record."""
    grid = make_grid(volume.dims, params.side)
    sequence = sample_sequence(grid, params)
    out = apply_sequence(volume, grid, sequence)
    return out, DisarrangeRecord(params, grid, sequence)


def invert_sequence(sequence: Sequence[LayerRotation]) -> TransformSequence:
    return [LayerRotation(r.axis, r.layer, 360 - r.angle) for r in reversed(sequence)]


def restore(volume: Volume, record: DisarrangeRecord) -> Volume:
    """Undo a recorded disarrangement exactly."""
    return apply_sequence(volume, record.grid, invert_sequence(record.sequence))
