"""Synthetic airway flow fields.

A parametric Y-shaped airway (trachea splitting into two bronchi) is
rasterised on a 256x256 grid, optionally narrowed in one or both branches,
and solved to steady state with a D2Q9 BGK lattice-Boltzmann scheme.  The
velocity magnitude is then rendered to a 128x128 image in [-1, 1].

Grid conventions: arrays are indexed ``[row, col]`` = ``[y, x]`` with ``y``
increasing downwards.  Air enters through the top edge and leaves through
two openings in the bottom edge.  "left" is the branch at smaller ``x``.
"""

from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import ndimage

from . import CLASSES
from .errors import ContractError, DegenerateSampleError

GRID = 256
IMAGE = 128
CENTER_X = (GRID - 1) / 2.0
BIFURCATION_Y = 88.0
BRANCH_OFFSET = 64.0
BRANCH_RATIO = 0.78
STENOSIS_LENGTH = 7.0

SEVERITY_RANGE = (0.3, 0.9)
POSITION_RANGE = (0.2, 0.8)
ANGLE_RANGE = (25.0, 50.0)
WIDTH_RANGE = (28.0, 44.0)

# D2Q9: rest, 4 axis-aligned, 4 diagonal.  cy > 0 points down the grid.
CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
WEIGHTS = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
OPPOSITE = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)

_BOUNCE, _INLET, _OUTLET = -1, -2, -3

# float copies captured as compile-time constants by the numba kernels
_CXN = CX.astype(np.float64)
_CYN = CY.astype(np.float64)
_WN = WEIGHTS.copy()
_OPPN = OPPOSITE.copy()


@dataclass
class SimConfig:
    tau: float = 1.4
    inlet_speed: float = 0.05
    max_iters: int = 50_000
    convergence_tol: float = 1e-6
    check_every: int = 100
    ramp_iters: int = 500

    def __post_init__(self):
        if not 0.6 < self.tau < 1.5:
            raise ContractError(f"tau must lie in (0.6, 1.5), got {self.tau}")
        if not 0 < self.inlet_speed <= 0.1:
            raise ContractError(f"inlet_speed must lie in (0, 0.1], got {self.inlet_speed}")
        if self.max_iters < self.check_every:
            raise ContractError("max_iters must cover at least one convergence check")


@dataclass
class AirwayGeometry:
    grid: np.ndarray  # bool [256, 256], True = solid
    label: str
    severity_left: float = 0.0
    severity_right: float = 0.0
    position: float = 0.5
    angle: float = 35.0
    width: float = 36.0
    components: dict = field(default_factory=dict, repr=False)

    @property
    def fluid(self):
        return ~self.grid

    def mirrored(self):
        """Reflect left <-> right (x -> 255 - x)."""
        swap = {"left": "right", "right": "left"}
        comps = {swap.get(k, k): v[:, ::-1].copy() for k, v in self.components.items()}
        return replace(self, grid=self.grid[:, ::-1].copy(), label=swap.get(self.label, self.label),
                       severity_left=self.severity_right, severity_right=self.severity_left,
                       components=comps)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    converged: bool
    iterations: int

    @property
    def speed(self):
        return np.hypot(self.u, self.v)


def _segment_distance(px, py, ax, ay, bx, by):
    """Distance from points to segment AB and the clamped projection parameter."""
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy)), t


def _branch_fluid(side, width, angle, severity, position):
    """Fluid mask of one branch: a two-segment tube whose radius dips at the stenosis."""
    ys, xs = np.mgrid[0:GRID, 0:GRID].astype(np.float64)
    sign = -1.0 if side == "left" else 1.0
    radius = BRANCH_RATIO * width / 2.0
    theta = np.radians(angle)
    elbow_x = CENTER_X + sign * BRANCH_OFFSET
    elbow_y = BIFURCATION_Y + BRANCH_OFFSET / np.tan(theta)
    end_y = GRID + 10.0
    len1 = np.hypot(elbow_x - CENTER_X, elbow_y - BIFURCATION_Y)
    len2 = end_y - elbow_y

    d1, t1 = _segment_distance(xs, ys, CENTER_X, BIFURCATION_Y, elbow_x, elbow_y)
    d2, t2 = _segment_distance(xs, ys, elbow_x, elbow_y, elbow_x, end_y)
    first = d1 <= d2
    dist = np.where(first, d1, d2)
    arc = np.where(first, t1 * len1, len1 + t2 * len2)

    # the narrowing sits past the junction with the trachea and sibling branch
    start = max(radius / np.sin(theta), width / 2.0) + radius
    stop = len1 + (GRID - elbow_y) - 10.0
    centre = start + position * (stop - start)
    profile = severity * np.exp(-(((arc - centre) / STENOSIS_LENGTH) ** 2))
    local_radius = radius * (1.0 - profile)
    return dist < local_radius


def _trachea_fluid(width):
    ys, xs = np.mgrid[0:GRID, 0:GRID].astype(np.float64)
    d, _ = _segment_distance(xs, ys, CENTER_X, -10.0, CENTER_X, BIFURCATION_Y)
    return d < width / 2.0


def rasterize(label, severity_left, severity_right, position, angle, width):
    comps = {
        "trachea": _trachea_fluid(width),
        "left": _branch_fluid("left", width, angle, severity_left, position),
        "right": _branch_fluid("right", width, angle, severity_right, position),
    }
    fluid = comps["trachea"] | comps["left"] | comps["right"]
    return AirwayGeometry(grid=~fluid, label=label, severity_left=float(severity_left),
                          severity_right=float(severity_right), position=float(position),
                          angle=float(angle), width=float(width), components=comps)


def build_geometry(label, rng, *, severity_left=None, severity_right=None, position=None,
                   angle=None, width=None):
    """Random airway for ``label``; keyword arguments pin individual parameters.

    The parameters are always drawn from ``rng`` (in a fixed order) so pinning
    one does not shift the others.
    """
    if label not in CLASSES:
        raise ContractError(f"label must be one of {CLASSES}, got {label!r}")
    draws = rng.random(5)
    lo, hi = SEVERITY_RANGE
    sev_l = lo + (hi - lo) * draws[0] if label in ("left", "both") else 0.0
    sev_r = lo + (hi - lo) * draws[1] if label in ("right", "both") else 0.0
    params = {
        "severity_left": sev_l if severity_left is None else severity_left,
        "severity_right": sev_r if severity_right is None else severity_right,
        "position": POSITION_RANGE[0] + np.diff(POSITION_RANGE)[0] * draws[2] if position is None else position,
        "angle": ANGLE_RANGE[0] + np.diff(ANGLE_RANGE)[0] * draws[3] if angle is None else angle,
        "width": WIDTH_RANGE[0] + np.diff(WIDTH_RANGE)[0] * draws[4] if width is None else width,
    }
    return rasterize(label, **params)


def straight_channel(width=32.0):
    """Unbranched vertical channel; the Poiseuille test case."""
    ys, xs = np.mgrid[0:GRID, 0:GRID].astype(np.float64)
    fluid = np.abs(xs - CENTER_X) < width / 2.0
    return AirwayGeometry(grid=~fluid, label="both", width=float(width),
                          components={"trachea": fluid})


def outlet_columns(fluid_row):
    """Column ranges of the contiguous fluid runs in one grid row."""
    padded = np.concatenate([[False], fluid_row, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def is_connected(geom):
    """True if the inlet reaches both bottom openings through fluid (4-connectivity)."""
    labels, _ = ndimage.label(geom.fluid)
    top = set(labels[0][labels[0] > 0])
    bottom = [labels[-1, a:b] for a, b in outlet_columns(geom.fluid[-1])]
    if len(top) != 1 or len(bottom) == 0:
        return False
    return all(set(run) <= top for run in bottom)


def inlet_profile(geom, speed):
    """Parabolic inlet velocity per column of the top row (zero outside the opening)."""
    row = geom.fluid[0]
    prof = np.zeros(GRID)
    for a, b in outlet_columns(row):
        # walls sit half a cell outside the first and last fluid cells
        x = np.arange(a, b) + 0.5 - a
        w = b - a
        prof[a:b] = 4.0 * speed * x * (w - x) / (w * w)
    return prof


@numba.njit(cache=True, error_model="numpy")
def _collide(f, omega):
    """BGK relaxation towards the second-order equilibrium, unrolled over the 9 links."""
    f0, f1, f2, f3, f4, f5, f6, f7, f8 = f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]
    for k in range(f.shape[1]):
        rho = f0[k] + f1[k] + f2[k] + f3[k] + f4[k] + f5[k] + f6[k] + f7[k] + f8[k]
        ux = (f1[k] - f3[k] + f5[k] - f6[k] - f7[k] + f8[k]) / rho
        uy = (f2[k] - f4[k] + f5[k] + f6[k] - f7[k] - f8[k]) / rho
        usq = 1.5 * (ux * ux + uy * uy)
        r0 = rho * (4.0 / 9.0)
        r1 = rho * (1.0 / 9.0)
        r2 = rho * (1.0 / 36.0)
        f0[k] += omega * (r0 * (1.0 - usq) - f0[k])
        cu = 3.0 * ux
        f1[k] += omega * (r1 * (1.0 + cu + 0.5 * cu * cu - usq) - f1[k])
        f3[k] += omega * (r1 * (1.0 - cu + 0.5 * cu * cu - usq) - f3[k])
        cu = 3.0 * uy
        f2[k] += omega * (r1 * (1.0 + cu + 0.5 * cu * cu - usq) - f2[k])
        f4[k] += omega * (r1 * (1.0 - cu + 0.5 * cu * cu - usq) - f4[k])
        cu = 3.0 * (ux + uy)
        f5[k] += omega * (r2 * (1.0 + cu + 0.5 * cu * cu - usq) - f5[k])
        f7[k] += omega * (r2 * (1.0 - cu + 0.5 * cu * cu - usq) - f7[k])
        cu = 3.0 * (uy - ux)
        f6[k] += omega * (r2 * (1.0 + cu + 0.5 * cu * cu - usq) - f6[k])
        f8[k] += omega * (r2 * (1.0 - cu + 0.5 * cu * cu - usq) - f8[k])


@numba.njit(cache=True, error_model="numpy")
def _stream(f, fnew, gather, inlet_links, inlet_term, ramp, outlets, above):
    src = f.ravel()
    dst = fnew.ravel()
    for j in range(gather.shape[0]):
        dst[j] = src[gather[j]]
    for j in range(inlet_links.shape[0]):
        dst[inlet_links[j]] += ramp * inlet_term[j]
    # outlet cells: velocity and non-equilibrium part copied from the cell
    # above, density pinned to 1 so the system has a pressure reference
    feq_a = np.empty(9)
    for j in range(outlets.shape[0]):
        k = outlets[j]
        a = above[j]
        rho = 0.0
        mx = 0.0
        my = 0.0
        for i in range(9):
            fi = fnew[i, a]
            rho += fi
            mx += fi * _CXN[i]
            my += fi * _CYN[i]
        ux = mx / rho
        uy = my / rho
        usq = 1.5 * (ux * ux + uy * uy)
        for i in range(9):
            cu = 3.0 * (_CXN[i] * ux + _CYN[i] * uy)
            feq_a[i] = _WN[i] * (1.0 + cu + 0.5 * cu * cu - usq)
        for i in range(9):
            fnew[i, k] = feq_a[i] + (fnew[i, a] - rho * feq_a[i])


@numba.njit(cache=True, error_model="numpy")
def _moments(f, out_u, out_v, out_rho):
    for k in range(f.shape[1]):
        rho = 0.0
        mx = 0.0
        my = 0.0
        for i in range(9):
            fi = f[i, k]
            rho += fi
            mx += fi * _CXN[i]
            my += fi * _CYN[i]
        out_rho[k] = rho
        out_u[k] = mx / rho
        out_v[k] = my / rho


def _link_table(fluid, inlet_u):
    """Compact fluid-cell indexing plus, per cell and direction, the upstream
    cell or a boundary code (bounce-back, inlet, outlet)."""
    ys, xs = np.nonzero(fluid)
    compact = np.full(fluid.shape, -1, dtype=np.int64)
    compact[ys, xs] = np.arange(ys.size)
    src = np.empty((ys.size, 9), dtype=np.int64)
    inlet_term = np.zeros((ys.size, 9))
    for i in range(9):
        sy, sx = ys - CY[i], xs - CX[i]
        inside = (sy >= 0) & (sy < GRID) & (sx >= 0) & (sx < GRID)
        code = np.full(ys.size, _BOUNCE, dtype=np.int64)
        code[inside] = compact[sy[inside], sx[inside]]
        code[code < 0] = _BOUNCE
        top = (sy < 0) & (sx >= 0) & (sx < GRID)
        code[top] = _INLET
        code[(sy >= GRID) & (sx >= 0) & (sx < GRID)] = _OUTLET
        src[:, i] = code
        # moving-wall bounce-back supplies the inflow: + 2 w rho0 (c . u) / cs^2
        inlet_term[top, i] = 6.0 * WEIGHTS[i] * CY[i] * inlet_u[xs[top]]
    outlets = np.nonzero((src == _OUTLET).any(axis=1))[0]
    above = compact[ys[outlets] - 1, xs[outlets]]
    keep = above >= 0
    # flat gather index into the (9, n) population array for every (i, k)
    n = ys.size
    k = np.arange(n)
    gather = np.empty((9, n), dtype=np.int64)
    for i in range(9):
        gather[i] = np.where(src[:, i] >= 0, i * n + src[:, i], OPPOSITE[i] * n + k)
    flat_term = np.ascontiguousarray(inlet_term.T).ravel()
    inlet_links = np.flatnonzero(flat_term)
    return (ys, xs, gather.ravel().astype(np.int32), inlet_links, flat_term[inlet_links],
            outlets[keep], above[keep])


def solve_flow(geom, cfg=None):
    """Steady D2Q9 BGK flow through ``geom``.

    Velocity inlet with a parabolic profile on the top edge (moving-wall
    bounce-back), zero-gradient outflow on the bottom edge (velocity and
    non-equilibrium populations extrapolated from the row above, density held
    at 1) and half-way bounce-back on solid cells.  The inlet speed is ramped
    in over ``cfg.ramp_iters`` steps.  Converged when the relative L2 change of
    the velocity field between checks ``cfg.check_every`` steps apart drops
    below ``cfg.convergence_tol``.
    """
    cfg = cfg or SimConfig()
    fluid = geom.fluid
    if not fluid[0].any() or not fluid[-1].any():
        raise ContractError("geometry needs an open inlet and outlet")
    inlet_u = inlet_profile(geom, cfg.inlet_speed)
    ys, xs, gather, inlet_links, inlet_term, outlets, above = _link_table(fluid, inlet_u)
    n = ys.size
    f = np.repeat(WEIGHTS[:, None], n, axis=1)
    fnew = f.copy()
    omega = 1.0 / cfg.tau
    u = np.zeros(n)
    v = np.zeros(n)
    rho = np.ones(n)
    prev = None
    converged = False
    it = 0
    while it < cfg.max_iters:
        for _ in range(cfg.check_every):
            ramp = min(1.0, it / cfg.ramp_iters) if cfg.ramp_iters else 1.0
            ramp = 0.5 - 0.5 * np.cos(np.pi * ramp)
            _collide(f, omega)
            _stream(f, fnew, gather, inlet_links, inlet_term, ramp, outlets, above)
            f, fnew = fnew, f
            it += 1
        _moments(f, u, v, rho)
        if not np.all(np.isfinite(rho)):
            break
        if it >= cfg.ramp_iters:
            vel = np.concatenate([u, v])
            if prev is not None:
                change = np.linalg.norm(vel - prev) / max(np.linalg.norm(vel), 1e-300)
                if change < cfg.convergence_tol:
                    converged = True
                    break
            prev = vel
    shape = (GRID, GRID)
    grid_u, grid_v, grid_rho = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    grid_u[ys, xs], grid_v[ys, xs], grid_rho[ys, xs] = u, v, rho
    return FlowField(u=grid_u, v=grid_v, rho=grid_rho, converged=converged, iterations=it)


def row_flux(field, row, columns=None):
    """Mass flux ``sum(rho * v)`` through one grid row, optionally restricted to a column slice."""
    cols = slice(None) if columns is None else columns
    return float(np.sum(field.rho[row, cols] * field.v[row, cols]))


def fluxes(field, inlet_row=8, outlet_row=GRID - 8):
    """Inlet, left-outlet and right-outlet fluxes."""
    mid = GRID // 2
    return (row_flux(field, inlet_row),
            row_flux(field, outlet_row, slice(0, mid)),
            row_flux(field, outlet_row, slice(mid, GRID)))


def render_image(field, geom=None):
    """128x128 velocity-magnitude image in [-1, 1]: 2x2 box average, scaled by the image max."""
    mag = np.hypot(field.u, field.v)
    if geom is not None:
        mag = np.where(geom.grid, 0.0, mag)
    small = mag.reshape(IMAGE, 2, IMAGE, 2).mean(axis=(1, 3))
    peak = small.max()
    if not np.isfinite(peak) or peak <= 0:
        raise DegenerateSampleError("flow field has zero velocity everywhere")
    return 2.0 * small / peak - 1.0


def simulate(label, rng, cfg=None):
    """Geometry + solve + render for one sample: ``(geometry, field, image or None)``."""
    geom = build_geometry(label, rng)
    field = solve_flow(geom, cfg)
    image = render_image(field, geom) if field.converged else None
    return geom, field, image
