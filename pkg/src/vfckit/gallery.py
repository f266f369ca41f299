"""The built-in scenarios G1 to G7, stored as scenario text."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import VfckitError

G1 = """
[scenario G1]
title = line with the identity section
vdim = 0
boundary = false
exercises = zero counting, support independence, zero-set convergence, CF normalization

[chart U]
dim = 1
domain.lower = [-2]
domain.upper = [2]
fiber_dim = 1
section = [y1]

[form one]
chart = U
degree = 0
coeff = 1

[settings]
n = [50, 100]
epsilon = [0.2, 0.1, 0.05]
seeds = [0, 1, 2]
pushout_form = one
"""

G2 = """
[scenario G2]
title = line modulo the sign action, sign representation on the fiber
vdim = 0
boundary = false
exercises = rational multiplicities, multisection equivariance up to permutation

[chart U]
dim = 1
domain.lower = [-2]
domain.upper = [2]
group = [[[1]], [[-1]]]
base_point = [0]
fiber_dim = 1
representation = [[[1]], [[-1]]]
section = [y1]

[form one]
chart = U
degree = 0
coeff = 1

[settings]
n = [50, 100]
epsilon = [0.2, 0.1, 0.05]
seeds = [0, 1, 2]
pushout_form = one
"""

_G3 = """
[scenario G3]
title = spindle sphere with two Z_{n} cone points
vdim = 0
boundary = false
exercises = orbifold Euler number 2/{n}, rotation representations, disk charts

[chart N]
dim = 2
domain.center = [0, 0]
domain.radius = 2
group = {group}
base_point = [0, 0]
fiber_dim = 2
representation = {group}
section = [y1, y2]
global = [2*y1/(1 + y1^2 + y2^2), 2*y2/(1 + y1^2 + y2^2), (y1^2 + y2^2 - 1)/(1 + y1^2 + y2^2)]

[chart S]
dim = 2
domain.center = [0, 0]
domain.radius = 2
group = {group}
base_point = [0, 0]
fiber_dim = 2
representation = {group}
section = [-y1, -y2]
global = [2*y1/(1 + y1^2 + y2^2), -2*y2/(1 + y1^2 + y2^2), (1 - y1^2 - y2^2)/(1 + y1^2 + y2^2)]

[form one]
dim = 3
degree = 0
coeff = 1

[settings]
n = [50, 100]
epsilon = [0.2, 0.1, 0.05]
seeds = [0, 1, 2]
pushout_form = one
"""

G4 = """
[scenario G4]
title = upper half circle, a one-dimensional zero set with two boundary points
vdim = 1
boundary = true
exercises = boundary vanishing, level sweep, Stokes formula, zero-set convergence

[chart U]
dim = 2
domain.lower = [-2, 0]
domain.upper = [2, 2]
domain.closed_lower = [false, true]
domain.closed_upper = [false, false]
fiber_dim = 1
section = [y1^2 + y2^2 - 1]

[form h]
chart = U
degree = 0
coeff = sin(12*y1)*exp(y2)

[form dx]
chart = U
degree = 1
coeff.1 = 1

[settings]
n = [10, 100]
epsilon = [0.2, 0.1, 0.05]
seeds = [0, 1, 2, 3, 4]
sweep = y2
levels = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
above = 1.5
stokes_form = h
"""

G5 = """
[scenario G5]
title = strip with a horizontal zero segment joining its two boundary lines
vdim = 1
boundary = true
exercises = boundary vanishing, Stokes formula, fiberwise pushout

[chart U]
dim = 2
domain.lower = [0, -1]
domain.upper = [1, 1]
domain.closed_lower = [true, false]
domain.closed_upper = [true, false]
fiber_dim = 1
section = [y2]

[form h]
chart = U
degree = 0
coeff = sin(12*y1)*cos(y2)

[form one]
chart = U
degree = 0
coeff = 1

[map f]
chart = U
expr = [y1]

[settings]
n = [10, 100]
epsilon = [0.1, 0.05]
seeds = [0, 1, 2, 3, 4]
stokes_form = h
pushout_form = one
pushout_map = f
grid = [0.25, 0.5, 0.75]
"""

G6 = """
[scenario G6]
title = unit square as a correspondence from an interval to an interval
vdim = 2
boundary = false
exercises = smooth correspondences, composition and the Fubini kernel

[chart N]
dim = 2
domain.lower = [0, 0]
domain.upper = [1, 1]

[chart I]
dim = 1
domain.lower = [0]
domain.upper = [1]

[map fs]
chart = N
expr = [y1]

[map ft]
chart = N
expr = [y2]

[map id]
chart = I
expr = [y1]

[correspondence c21]
chart = N
source = fs
target = ft

[correspondence c32]
chart = I
source = id
target = id

[presentation square]
charts = [N]

[presentation interval]
charts = [I]

[form dx]
dim = 1
degree = 1
coeff.1 = 1

[form xdx]
dim = 1
degree = 1
coeff.1 = y1

[form x2dx]
dim = 1
degree = 1
coeff.1 = y1^2

[form exdx]
dim = 1
degree = 1
coeff.1 = exp(y1)

[form k1]
chart = N
degree = 1
coeff.1 = 1

[form k2]
chart = N
degree = 1
coeff.1 = y2

[form k3]
chart = N
degree = 1
coeff.1 = y1

[settings]
compose = [[dx, xdx, 1/2], [dx, x2dx, 1/3], [xdx, exdx, (E - 1)/2]]
kernel = [[k1, xdx, 1/2], [k2, xdx, 1/3], [k3, exdx, (E - 1)/2]]
grid = [0.25, 0.5, 0.75]
pushout_form = dx
"""

G7 = """
[scenario G7]
title = one point presented by one chart or by two nested charts
vdim = 0
boundary = false
exercises = coordinate changes, extension data, invariance under the choice of good coordinate system

[chart c1]
dim = 1
domain.lower = [-1]
domain.upper = [1]
fiber_dim = 1
section = [y1]
global = [y1, 0]

[chart c2]
dim = 2
domain.lower = [-1, -1]
domain.upper = [1, 1]
fiber_dim = 2
section = [y1, y2]
global = [y1, y2]

[change c12]
src = c1
dst = c2
phi = [y1, 0]
hom = [0]
fiber = [[1], [0]]

[extension c12]
src = c1
dst = c2
pi = [y1]
fiber = [[1], [0]]

[presentation one]
charts = [c2]

[presentation two]
charts = [c1, c2]

[form bump]
dim = 2
degree = 0
coeff = cos(y1)*exp(y1) + y2

[settings]
n = [50, 100]
epsilon = [0.2, 0.1, 0.05]
seeds = [0, 1, 2]
pushout_form = bump
"""


def _rotation_group(n: int) -> str:
    mats = []
    for k in range(n):
        a = f"2*pi*{k}/{n}"
        mats.append(f"[[cos({a}), -sin({a})], [sin({a}), cos({a})]]")
    return "[" + ", ".join(mats) + "]"


def g3_text(n: int) -> str:
    if n < 2:
        raise VfckitError("TYPE_ERROR", "the spindle needs n >= 2")
    return _G3.replace("{group}", _rotation_group(n)).replace("{n}", str(n))


@dataclass(frozen=True)
class GalleryEntry:
    name: str
    vdim: int
    boundary: bool
    doc: str
    exercises: str


ENTRIES = (
    GalleryEntry("G1", 0, False, "line (-2, 2), trivial group, s = y", "counting, support independence, zero-set convergence, CF normalization"),
    GalleryEntry("G2", 0, False, "line modulo y -> -y with the sign representation, s = y; count 1/2", "rational multiplicities, multisections"),
    GalleryEntry("G3", 0, False, "spindle S^2(n, n) from two Z_n disk charts, parameter n in {2, 3, 4}; count 2/n", "orbifold Euler number, rotation actions"),
    GalleryEntry("G4", 1, True, "upper half circle y1^2 + y2^2 = 1 in (-2, 2) x [0, 2)", "boundary vanishing, level sweep, Stokes"),
    GalleryEntry("G5", 1, True, "strip [0, 1] x (-1, 1) with s = y2", "boundary vanishing, Stokes, fiberwise pushout"),
    GalleryEntry("G6", 2, False, "unit square with E = 0 as a correspondence between intervals", "correspondences, composition, Fubini"),
    GalleryEntry("G7", 0, False, "a point presented by one chart or by two nested charts", "coordinate changes, extension data, invariance"),
)

_TEXT = {"G1": G1, "G2": G2, "G4": G4, "G5": G5, "G6": G6, "G7": G7}


def gallery() -> list:
    """The seven built-in scenarios with their documentation."""
    return list(ENTRIES)


def gallery_text(name: str) -> str:
    m = re.fullmatch(r"G3(?:\(n=(\d+)\))?", name.strip())
    if m:
        return g3_text(int(m.group(1) or 3))
    if name in _TEXT:
        return _TEXT[name]
    raise VfckitError("UNRESOLVED_LABEL", f"no gallery scenario named {name!r}", witness={"name": name})


def gallery_names() -> list:
    """Every concrete scenario name, with G3 for n in {2, 3, 4}."""
    return ["G1", "G2", "G3(n=2)", "G3(n=3)", "G3(n=4)", "G4", "G5", "G6", "G7"]
