"""Headered CSV emission and parsing for solver artifacts.

All floats print with 17 significant digits so repeated runs of the same
scenario are byte-identical.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import FreestopError


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows) if rows else np.empty((0, len(header)))


def field_rows(field):
    """Rows (t, q..., J, psi, contact) over the whole grid."""
    lat = field.lattice
    points = lat.points()
    contact = field.contact_mask
    for i in range(lat.nt):
        layer = field.J[i].ravel()
        cmask = contact[i].ravel()
        psi = field.psi.ravel()
        for k in range(points.shape[0]):
            yield [i * lat.dt, *points[k], layer[k], psi[k], int(cmask[k])]


def field_header(dimension: int):
    return ["t", *[f"q{a}" for a in range(dimension)], "J", "psi", "contact"]


def parse_field_csv(path, problem=None):
    """Rebuild a ValueField from its CSV emission (complete tensor grid)."""
    from .hjb import ValueField, scheme_tolerances
    from .lattice import LatticeSpec

    header, data = read_csv(path)
    if not header[0] == "t" or "J" not in header:
        raise FreestopError(f"{path} is not a field table")
    dim = header.index("J") - 1
    ts = np.unique(data[:, 0])
    axes = [np.unique(data[:, 1 + a]) for a in range(dim)]
    steps = [np.diff(ax) for ax in axes]
    dx = float(steps[0][0])
    for st in steps:
        if st.size and not np.allclose(st, dx, atol=1e-9):
            raise FreestopError("field grid is not uniform")
    dt = float(np.diff(ts)[0]) if ts.size > 1 else 1.0
    box = tuple((float(ax[0]), float(ax[-1])) for ax in axes)
    lat = LatticeSpec(dx, dt, float(ts[-1]), box)
    shape = (lat.nt,) + lat.n_axis
    if data.shape[0] != np.prod(shape):
        raise FreestopError("field table does not cover the full grid")
    # rows were emitted t-major then C-order over space
    J = data[:, dim + 1].reshape(shape)
    psi = data[:, dim + 2].reshape(shape)[0]
    time_class = problem.time_class if problem is not None else "TC"
    if problem is not None:
        eps_contact, eps_mono = scheme_tolerances(problem, lat, psi, "dp")
    else:
        eps_contact = 1e-9 * (1.0 + float(np.abs(psi[np.isfinite(psi)]).max()))
        eps_mono = 1e-9
    field = ValueField(lattice=lat, J=J, psi=psi, time_class=time_class,
                       scheme="dp", eps_contact=eps_contact, eps_mono=eps_mono)
    if problem is not None:
        from .hjb import _max_running_cost
        field.k_scale = _max_running_cost(problem, lat)
    return field
