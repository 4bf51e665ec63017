"""Quadrature rules on segments and triangles.

Segment rules are Gauss-Legendre mapped to [0, 1].  Triangle rules come
from collapsing a tensor Gauss grid onto the reference triangle, which
gives exactness for any requested total polynomial degree without rule
tables.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_segment(n):
    """Nodes and weights on [0, 1] with weights summing to 1."""
    if n < 1:
        raise ValueError(f"need at least one point, got {n}")
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule on the reference triangle (0,0)-(1,0)-(0,1).

    Exact for total degree <= ``degree``; weights sum to the reference
    measure 1/2.  Returns (points (n, 2), weights (n,)).
    """
    if degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {degree}")
    n = (degree + 3) // 2  # collapse raises the u-degree by one
    u, wu = gauss_segment(n)
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    w = (WU * WV * (1.0 - U)).ravel()
    return np.column_stack([x, y]), w


def cell_quadrature(mesh, geo, degree):
    """Physical quadrature over every cell at once.

    Returns (points (n_cells, nq, 2), weights (n_cells, nq)); weights per
    cell sum to the cell measure.
    """
    ref_pts, ref_w = triangle_rule(degree)
    p = mesh.vertices[mesh.cells]
    p0 = p[:, 0]
    pts = (p0[:, None, :]
           + ref_pts[None, :, 0:1] * (p[:, 1] - p0)[:, None, :]
           + ref_pts[None, :, 1:2] * (p[:, 2] - p0)[:, None, :])
    w = 2.0 * geo.cell_measure[:, None] * ref_w[None, :]
    return pts, w


def edge_quadrature(mesh, order):
    """Gauss points along every edge.

    Returns (points (n_edges, order, 2), weights (order,)); the weights
    are normalized so that a weighted sum is the mean value over the edge.
    """
    t, w = gauss_segment(order)
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return pts, w
