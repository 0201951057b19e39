"""Two-task gradient surgery on flattened parameter vectors.

When the supervised gradient and the divergence gradient point against each
other (negative dot product), each is projected onto the normal plane of the
OTHER'S ORIGINAL copy before the two are summed; otherwise the sum is returned
untouched, bitwise.  An optional per-matrix mode applies the same rule
independently inside each named segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LayoutError(ValueError):
    """Raised when two flat gradients do not share a layout."""


@dataclass(frozen=True)
class FlatGrad:
    """1-D float64 gradient vector plus its (name, offset, length) layout."""

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        if self.values.ndim != 1:
            raise LayoutError(f"values must be 1-D, got shape {self.values.shape}")
        total = sum(length for _, _, length in self.layout)
        if total != self.values.size:
            raise LayoutError(
                f"layout covers {total} values, vector has {self.values.size}")

    def segment(self, name: str) -> np.ndarray:
        for seg_name, off, length in self.layout:
            if seg_name == name:
                return self.values[off:off + length]
        raise KeyError(name)


def flatten(named_grads: list[tuple[str, np.ndarray]]) -> FlatGrad:
    """Concatenate named arrays into one flat vector, recording the layout."""
    layout = []
    pieces = []
    offset = 0
    seen = set()
    for name, arr in named_grads:
        if name in seen:
            raise LayoutError(f"duplicate name {name!r}")
        seen.add(name)
        flat = np.asarray(arr, dtype=np.float64).reshape(-1)
        layout.append((name, offset, flat.size))
        pieces.append(flat)
        offset += flat.size
    values = np.concatenate(pieces) if pieces else np.zeros(0)
    return FlatGrad(values, tuple(layout))


def unflatten(flat: FlatGrad,
              shapes: list[tuple[str, tuple[int, ...]]]) -> list[tuple[str, np.ndarray]]:
    """Invert flatten given the original shapes; round-trips bitwise."""
    if len(shapes) != len(flat.layout):
        raise LayoutError("shape list does not match layout")
    out = []
    for (name, off, length), (shape_name, shape) in zip(flat.layout, shapes):
        if name != shape_name:
            raise LayoutError(f"layout name {name!r} vs shape name {shape_name!r}")
        if int(np.prod(shape, dtype=np.int64)) != length:
            raise LayoutError(f"shape {shape} does not hold {length} values")
        out.append((name, flat.values[off:off + length].reshape(shape).copy()))
    return out


def _project_pair(g_a: np.ndarray, g_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project each vector against the other's original when they conflict."""
    dot = float(g_a @ g_b)
    if dot >= 0.0:
        return g_a, g_b  # same objects: pass-through is bitwise
    # g_a' = g_a - (g_a.g_b / ||g_b||^2) g_b ; zero-norm implies dot == 0,
    # so neither denominator can be zero on this branch.
    a_out = g_a - (dot / float(g_b @ g_b)) * g_b
    b_out = g_b - (dot / float(g_a @ g_a)) * g_a
    return a_out, b_out


def _check_same_layout(a: FlatGrad, b: FlatGrad) -> None:
    if a.layout != b.layout:
        raise LayoutError("flat gradients have different layouts")


def pcgrad_components(g_sft: FlatGrad, g_div: FlatGrad,
                      per_matrix: bool = False) -> tuple[FlatGrad, FlatGrad]:
    """Return the two post-surgery gradients (before summation)."""
    _check_same_layout(g_sft, g_div)
    if not per_matrix:
        a, b = _project_pair(g_sft.values, g_div.values)
        return FlatGrad(a, g_sft.layout), FlatGrad(b, g_div.layout)
    a_out = g_sft.values.copy()
    b_out = g_div.values.copy()
    for _, off, length in g_sft.layout:
        seg = slice(off, off + length)
        a_seg, b_seg = _project_pair(g_sft.values[seg], g_div.values[seg])
        a_out[seg] = a_seg
        b_out[seg] = b_seg
    return FlatGrad(a_out, g_sft.layout), FlatGrad(b_out, g_div.layout)


def pcgrad_pair(g_sft: FlatGrad, g_div: FlatGrad,
                per_matrix: bool = False) -> FlatGrad:
    """Surgery + sum.  Non-conflicting inputs come back as the plain sum."""
    a, b = pcgrad_components(g_sft, g_div, per_matrix=per_matrix)
    return FlatGrad(a.values + b.values, g_sft.layout)


def _project_one(g: np.ndarray, against: np.ndarray) -> np.ndarray:
    dot = float(g @ against)
    if dot >= 0.0:
        return g
    norm_sq = float(against @ against)
    if norm_sq == 0.0:
        return g
    return g - (dot / norm_sq) * against


def project_away_conflict(g: FlatGrad, against: FlatGrad,
                          per_matrix: bool = False) -> FlatGrad:
    """One-sided surgery: remove from g its conflicting component along
    `against` (used by the per-item variant, where each item gradient is
    projected against the opposite objective's accumulated total)."""
    _check_same_layout(g, against)
    if not per_matrix:
        return FlatGrad(_project_one(g.values, against.values), g.layout)
    out = g.values.copy()
    for _, off, length in g.layout:
        seg = slice(off, off + length)
        out[seg] = _project_one(g.values[seg], against.values[seg])
    return FlatGrad(out, g.layout)
