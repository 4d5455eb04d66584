"""Binary field dumps and deterministic text outputs.

Field dump format "RHL1" (shared repo-wide): magic bytes ``RHL1``, unsigned
32-bit d, then d unsigned 32-bit sides, then an unsigned 32-bit component
count (1 for scalar fields, d for vector fields, d(d+1)/2 for coefficient
fields stored as the upper triangle row-major), then IEEE-754 little-endian
64-bit values in row-major site order with components contiguous per site.

CSV and JSON writers format floats with shortest round-trip ``repr`` so that
identical data produces byte-identical files.
"""

import json
import struct

import numpy as np

from .lattice import ScalarField, TorusLattice, VectorField

MAGIC = b"RHL1"


def write_field(path, field) -> None:
    """Dump a ScalarField, VectorField or CoefficientField in RHL1 format."""
    lattice = field.lattice
    if isinstance(field, ScalarField):
        ncomp = 1
        flat = field.values.reshape(lattice.volume, 1)
    elif isinstance(field, VectorField):
        ncomp = lattice.d
        flat = field.values.reshape(lattice.volume, ncomp)
    elif hasattr(field, "components_upper"):
        flat = field.components_upper().reshape(lattice.volume, -1)
        ncomp = flat.shape[1]
    else:
        raise TypeError(f"cannot dump object of type {type(field).__name__}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", lattice.d))
        fh.write(struct.pack(f"<{lattice.d}I", *lattice.sides))
        fh.write(struct.pack("<I", ncomp))
        fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())


def read_field(path):
    """Read an RHL1 dump.

    Returns a ScalarField for component count 1, a VectorField for component
    count d, and the raw ``(lattice, values)`` pair with values of shape
    ``sides + (ncomp,)`` otherwise (coefficient upper triangles).  At d = 1
    the three layouts coincide and a ScalarField is returned.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (d,) = struct.unpack("<I", fh.read(4))
        sides = struct.unpack(f"<{d}I", fh.read(4 * d))
        (ncomp,) = struct.unpack("<I", fh.read(4))
        lattice = TorusLattice(sides)
        raw = fh.read(8 * lattice.volume * ncomp)
    values = np.frombuffer(raw, dtype="<f8").astype(float)
    values = values.reshape(lattice.sides + (ncomp,))
    if ncomp == 1:
        return ScalarField(lattice, values[..., 0])
    if ncomp == lattice.d:
        return VectorField(lattice, values)
    return lattice, values


def fmt(x) -> str:
    """Shortest round-trip decimal form of a float (deterministic)."""
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    """Write a CSV table; floats via :func:`fmt`, newline-terminated rows."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_dat(path, xs, ys) -> None:
    """Two-column gnuplot-compatible data file."""
    with open(path, "w") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{fmt(x)} {fmt(y)}\n")


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")
