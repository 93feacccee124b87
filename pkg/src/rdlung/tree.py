"""Morphometric airway tree generation, collapsibility marking and tree files.

The tree is stored as a struct of arrays indexed by airway id. Ids are
assigned breadth first by :func:`build_tree`, so parents always precede
their children, but files with any id permutation are accepted.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TREE_HEADER = (
    "id,parent,generation,length_m,radius_m,wall_thickness_m,"
    "wall_modulus_pa,supplied_area_m2,lobe,collapsible,height_m"
)

COLLAPSE_HU = -300.0

# Generations beyond this would allocate > 2^25 elements.
MAX_DEPTH_GUARD = 24

# Engineering defaults for the airway wall, indexed by generation (the last
# entry applies to all deeper generations). Cartilaginous proximal airways
# are stiffer and relatively thicker than the membranous distal ones.
WALL_MODULUS_PA = (
    3.0e5, 2.5e5, 2.0e5, 1.6e5, 1.3e5, 1.1e5, 9.0e4, 7.5e4, 6.5e4, 6.0e4,
    5.5e4, 5.0e4,
)
WALL_THICKNESS_RATIO = (
    0.15, 0.15, 0.14, 0.14, 0.13, 0.13, 0.12, 0.12, 0.11, 0.11, 0.10, 0.10,
)


class Lobe(enum.IntEnum):
    """Lobe label. CENTRAL marks conducting airways above the lobar bronchi."""

    CENTRAL = 0
    RUL = 1
    RML = 2
    RLL = 3
    LUL = 4
    LLL = 5


# Ventral-to-dorsal height band of each lobe as fractions of the lung height.
LOBE_BANDS = {
    Lobe.CENTRAL: (0.0, 1.0),
    Lobe.RUL: (0.0, 0.65),
    Lobe.RML: (0.0, 0.5),
    Lobe.RLL: (0.3, 1.0),
    Lobe.LUL: (0.0, 0.7),
    Lobe.LLL: (0.3, 1.0),
}


class TreeFormatError(ValueError):
    """Malformed tree file. Carries the 1-based line number and field name."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class TreeConfig:
    root_length: float = 0.12
    root_radius: float = 0.009
    length_ratio: float = 0.76
    diameter_ratios: tuple = (0.86, 0.70)
    min_length: float = 1.2e-3
    min_diameter: float = 0.4e-3
    max_generation: int = 17
    asymmetry_seed: int = 0
    collapsible_fraction: float = 0.0
    height_extent: float = 0.18

    def validate(self):
        if not (self.min_length > 0 and self.min_diameter > 0):
            raise ValueError("min_length and min_diameter must be positive")
        if not (self.root_length > 0 and self.root_radius > 0):
            raise ValueError("root_length and root_radius must be positive")
        if not 0.0 <= self.collapsible_fraction <= 1.0:
            raise ValueError("collapsible_fraction must lie in [0, 1]")
        ratios = (self.length_ratio, *self.diameter_ratios)
        if len(self.diameter_ratios) != 2 or not all(0.0 < r <= 1.0 for r in ratios):
            raise ValueError("length and diameter ratios must lie in (0, 1]")
        if self.max_generation < 0:
            raise ValueError("max_generation must be >= 0")
        if self.height_extent <= 0:
            raise ValueError("height_extent must be positive")

    def reachable_depth(self):
        """Deepest generation any branch can reach under the three rules."""
        depth = self.max_generation
        if self.length_ratio < 1.0:
            g = math.log(self.min_length / self.root_length) / math.log(self.length_ratio)
            depth = min(depth, max(0, math.floor(g)))
        elif self.root_length < self.min_length:
            depth = 0
        major = max(self.diameter_ratios)
        d0 = 2.0 * self.root_radius
        if major < 1.0:
            g = math.log(self.min_diameter / d0) / math.log(major)
            depth = min(depth, max(0, math.floor(g)))
        elif d0 < self.min_diameter:
            depth = 0
        return depth


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AirwayTree:
    parent: np.ndarray
    generation: np.ndarray
    length: np.ndarray
    radius: np.ndarray
    wall_thickness: np.ndarray
    wall_modulus: np.ndarray
    supplied_area: np.ndarray
    lobe: np.ndarray
    collapsible: np.ndarray
    height: np.ndarray
    # derived topology, filled in __post_init__
    children: np.ndarray = field(init=False, repr=False)
    leaves: np.ndarray = field(init=False, repr=False)
    unit_of: np.ndarray = field(init=False, repr=False)
    order: np.ndarray = field(init=False, repr=False)
    axis_unit: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parent)
        casts = {
            "parent": np.int64, "generation": np.int64, "length": float,
            "radius": float, "wall_thickness": float, "wall_modulus": float,
            "supplied_area": float, "lobe": np.int64, "collapsible": bool,
            "height": float,
        }
        for name, dtype in casts.items():
            arr = np.asarray(getattr(self, name), dtype=dtype)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, _frozen(arr))

        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        children = np.full((n, 2), -1, dtype=np.int64)
        count = np.zeros(n, dtype=np.int64)
        for i in range(n):
            p = self.parent[i]
            if p < 0:
                continue
            if p >= n:
                raise ValueError(f"airway {i} references missing parent {p}")
            if count[p] >= 2:
                raise ValueError(f"airway {p} has more than two children")
            children[p, count[p]] = i
            count[p] += 1
        if np.any(count == 1):
            bad = int(np.flatnonzero(count == 1)[0])
            raise ValueError(f"airway {bad} has exactly one child; tree must be binary")
        # order children so that slot 0 is the major (wider) daughter
        swap = (count == 2) & (self.radius[children[:, 1].clip(0)] > self.radius[children[:, 0].clip(0)])
        children[swap] = children[swap][:, ::-1]

        order = np.lexsort((np.arange(n), self.generation))
        if self.generation[roots[0]] != 0:
            raise ValueError("root airway must have generation 0")
        nonroot = self.parent >= 0
        if np.any(self.generation[nonroot] != self.generation[self.parent[nonroot]] + 1):
            bad = int(np.flatnonzero(nonroot & (self.generation != self.generation[self.parent.clip(0)] + 1))[0])
            raise ValueError(f"airway {bad}: generation must be parent generation + 1")

        leaves = np.flatnonzero(count == 0)
        if np.any(self.supplied_area[leaves] <= 0):
            bad = int(leaves[np.flatnonzero(self.supplied_area[leaves] <= 0)[0]])
            raise ValueError(f"leaf airway {bad} needs a positive supplied area")
        unit_of = np.full(n, -1, dtype=np.int64)
        unit_of[leaves] = np.arange(len(leaves))
        axis = np.full(n, -1, dtype=np.int64)
        for i in order[::-1]:
            axis[i] = unit_of[i] if count[i] == 0 else axis[children[i, 0]]

        object.__setattr__(self, "children", _frozen(children))
        object.__setattr__(self, "leaves", _frozen(leaves))
        object.__setattr__(self, "unit_of", _frozen(unit_of))
        object.__setattr__(self, "order", _frozen(order))
        object.__setattr__(self, "axis_unit", _frozen(axis))

    @property
    def n_airways(self):
        return len(self.parent)

    @property
    def n_units(self):
        return len(self.leaves)

    @property
    def is_leaf(self):
        return self.children[:, 0] < 0

    @property
    def root(self):
        return int(self.order[0])

    @property
    def unit_height(self):
        return self.height[self.leaves]

    @property
    def unit_lobe(self):
        return self.lobe[self.leaves]

    def replace(self, **changes):
        fields = {name: getattr(self, name) for name in _TREE_FIELDS}
        fields.update(changes)
        return AirwayTree(**fields)

    def subtree(self, airway):
        """Ids of `airway` and all its descendants."""
        out = []
        stack = [int(airway)]
        while stack:
            i = stack.pop()
            out.append(i)
            c0, c1 = self.children[i]
            if c0 >= 0:
                stack.extend((int(c0), int(c1)))
        return np.array(sorted(out), dtype=np.int64)

    def propagate_down(self, flags):
        """Boolean flags OR-ed from every airway into all of its descendants."""
        out = np.array(flags, dtype=bool, copy=True)
        gens = self.generation[self.order]
        cuts = np.flatnonzero(np.diff(gens)) + 1
        # one vectorized pass per generation, parents before children
        for level in np.split(self.order, cuts)[1:]:
            out[level] |= out[self.parent[level]]
        return out

    def __eq__(self, other):
        if not isinstance(other, AirwayTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _TREE_FIELDS)

    __hash__ = None


_TREE_FIELDS = (
    "parent", "generation", "length", "radius", "wall_thickness",
    "wall_modulus", "supplied_area", "lobe", "collapsible", "height",
)


def wall_properties(generation, radius):
    """Default (wall_thickness, wall_modulus) for the given generations."""
    g = np.minimum(np.asarray(generation), len(WALL_MODULUS_PA) - 1)
    modulus = np.asarray(WALL_MODULUS_PA)[g]
    thickness = np.asarray(WALL_THICKNESS_RATIO)[g] * np.asarray(radius)
    return thickness, modulus


def build_tree(config: TreeConfig = TreeConfig()) -> AirwayTree:
    """Grow an asymmetric binary tree by recursive branching.

    A branch point is only created if both daughters respect the minimum
    length, minimum diameter and maximum generation rules; otherwise the
    parent becomes a leaf carrying a terminal unit.
    """
    config.validate()
    if config.reachable_depth() > MAX_DEPTH_GUARD:
        raise ValueError(
            f"configuration reaches generation {config.reachable_depth()} "
            f"(> {MAX_DEPTH_GUARD}); tree would not terminate in practice"
        )
    major_ratio, minor_ratio = config.diameter_ratios

    parent = [-1]
    generation = [0]
    length = [config.root_length]
    radius = [config.root_radius]
    # path code: "" root, "M"/"m" major/minor steps, used for lobe labels
    path = [""]
    head = 0
    while head < len(parent):
        i = head
        head += 1
        g = generation[i] + 1
        if g > config.max_generation:
            continue
        child_len = length[i] * config.length_ratio
        d_major = 2.0 * radius[i] * major_ratio
        d_minor = 2.0 * radius[i] * minor_ratio
        if child_len < config.min_length or min(d_major, d_minor) < config.min_diameter:
            continue
        for d, tag in ((d_major, "M"), (d_minor, "m")):
            parent.append(i)
            generation.append(g)
            length.append(child_len)
            radius.append(0.5 * d)
            path.append(path[i] + tag)

    n = len(parent)
    parent = np.array(parent, dtype=np.int64)
    generation = np.array(generation, dtype=np.int64)
    length = np.array(length)
    radius = np.array(radius)
    lobe = np.array([_lobe_from_path(p) for p in path], dtype=np.int64)

    is_leaf = np.ones(n, dtype=bool)
    is_leaf[parent[1:]] = False
    supplied = np.where(is_leaf, np.pi * radius**2, 0.0)

    rng = np.random.default_rng(config.asymmetry_seed)
    height = np.zeros(n)
    u = rng.random(n)
    for i in np.flatnonzero(is_leaf):
        lo, hi = LOBE_BANDS[Lobe(lobe[i])]
        height[i] = config.height_extent * (lo + (hi - lo) * u[i])
    # internal airways sit at the mean height of their two daughters
    child_sum = np.zeros(n)
    for i in range(n - 1, 0, -1):
        if not is_leaf[i]:
            height[i] = 0.5 * child_sum[i]
        child_sum[parent[i]] += height[i]
    if n > 1:
        height[0] = 0.5 * child_sum[0]
    else:
        height[0] = 0.5 * config.height_extent

    thickness, modulus = wall_properties(generation, radius)
    tree = AirwayTree(
        parent=parent, generation=generation, length=length, radius=radius,
        wall_thickness=thickness, wall_modulus=modulus, supplied_area=supplied,
        lobe=lobe, collapsible=np.zeros(n, dtype=bool), height=height,
    )
    if config.collapsible_fraction > 0:
        tree = mark_collapsible(
            tree, fraction=config.collapsible_fraction, seed=config.asymmetry_seed
        )
    return tree


def _lobe_from_path(path):
    # trachea splits into right (major) and left (minor) main bronchi; the
    # right main bronchus gives off the upper lobe (minor) and continues as
    # the intermediate bronchus (major), which splits into lower (major) and
    # middle (minor) lobe bronchi; the left main splits into LLL / LUL.
    if len(path) < 2:
        return Lobe.CENTRAL
    if path[0] == "M":
        if path[1] == "m":
            return Lobe.RUL
        if len(path) < 3:
            return Lobe.CENTRAL
        return Lobe.RLL if path[2] == "M" else Lobe.RML
    return Lobe.LLL if path[1] == "M" else Lobe.LUL


def count_leaves(config: TreeConfig) -> int:
    """Leaf count by plain recursion over (generation, length, diameter)."""

    def rec(g, length, diameter):
        if g + 1 > config.max_generation:
            return 1
        cl = length * config.length_ratio
        dM = diameter * config.diameter_ratios[0]
        dm = diameter * config.diameter_ratios[1]
        if cl < config.min_length or min(dM, dm) < config.min_diameter:
            return 1
        return rec(g + 1, cl, dM) + rec(g + 1, cl, dm)

    return rec(0, config.root_length, 2.0 * config.root_radius)


def mark_collapsible(tree: AirwayTree, density=None, fraction=None, seed=0) -> AirwayTree:
    """Flag collapsible airways and propagate the flag to all descendants.

    With ``density`` (per-airway Hounsfield units) an airway is collapsible
    when its region density exceeds -300 HU. Without it, airways are drawn
    by seeded sampling (biased towards dorsal heights) and whole subtrees
    are flagged until ``fraction`` of all airways is collapsible.
    """
    n = tree.n_airways
    if density is not None:
        density = np.asarray(density, dtype=float)
        if density.shape != (n,):
            raise ValueError(f"density must have one value per airway ({n})")
        if np.any(~np.isfinite(density)) or np.any(density < -1000.0) or np.any(density > 100.0):
            raise ValueError("density outside [-1000, 100] HU is non-physical")
        direct = density > COLLAPSE_HU
        return tree.replace(collapsible=tree.propagate_down(direct))

    if fraction is None:
        raise ValueError("either density or fraction is required")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    target = int(round(fraction * n))
    flags = np.zeros(n, dtype=bool)
    if target == 0:
        return tree.replace(collapsible=flags)
    rng = np.random.default_rng([seed, 0xC011])
    extent = max(float(tree.height.max()), 1e-12)
    weight = 0.05 + (tree.height / extent) ** 2
    # weighted sampling without replacement via exponential keys
    keys = rng.exponential(size=n) / weight
    # prefer distal seeds so that single picks do not swallow the target
    keys = keys * (1.0 + 4.0 / (1.0 + tree.generation))
    sizes = _subtree_sizes(tree)
    count = 0
    for i in np.argsort(keys, kind="stable"):
        if count >= target:
            break
        if flags[i]:
            continue
        if count + sizes[i] > target + max(1, target // 20):
            continue
        sub = tree.subtree(i)
        count += int(np.count_nonzero(~flags[sub]))
        flags[sub] = True
    return tree.replace(collapsible=flags)


def _subtree_sizes(tree):
    size = np.ones(tree.n_airways, dtype=np.int64)
    for i in tree.order[::-1]:
        p = tree.parent[i]
        if p >= 0:
            size[p] += size[i]
    return size


def airway_density_from_units(tree: AirwayTree, unit_hu) -> np.ndarray:
    """Region density of every airway: mean HU of the units it supplies."""
    unit_hu = np.asarray(unit_hu, dtype=float)
    total = np.zeros(tree.n_airways)
    count = np.zeros(tree.n_airways)
    total[tree.leaves] = unit_hu
    count[tree.leaves] = 1.0
    for i in tree.order[::-1]:
        p = tree.parent[i]
        if p >= 0:
            total[p] += total[i]
            count[p] += count[i]
    return total / count


def trapped_units(tree: AirwayTree, closed) -> np.ndarray:
    """Per-unit flag: True when any airway on the path to the unit is closed."""
    blocked = tree.propagate_down(np.asarray(closed, dtype=bool))
    return blocked[tree.leaves]


def format_tree(tree: AirwayTree) -> str:
    buf = io.StringIO()
    buf.write(TREE_HEADER + "\n")
    for i in range(tree.n_airways):
        p = tree.parent[i]
        row = (
            str(i),
            "" if p < 0 else str(int(p)),
            str(int(tree.generation[i])),
            repr(float(tree.length[i])),
            repr(float(tree.radius[i])),
            repr(float(tree.wall_thickness[i])),
            repr(float(tree.wall_modulus[i])),
            repr(float(tree.supplied_area[i])),
            Lobe(int(tree.lobe[i])).name,
            "1" if tree.collapsible[i] else "0",
            repr(float(tree.height[i])),
        )
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def parse_tree(text: str) -> AirwayTree:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TREE_HEADER:
        raise TreeFormatError(f"expected header '{TREE_HEADER}'", line=1)
    names = TREE_HEADER.split(",")
    rows = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != len(names):
            raise TreeFormatError(
                f"expected {len(names)} fields, got {len(parts)}", line=lineno
            )
        rec = {}
        for name, value in zip(names, parts):
            value = value.strip()
            try:
                if name in ("id", "generation"):
                    rec[name] = int(value)
                elif name == "parent":
                    rec[name] = -1 if value == "" else int(value)
                elif name == "lobe":
                    rec[name] = int(Lobe[value])
                elif name == "collapsible":
                    if value not in ("0", "1"):
                        raise ValueError(value)
                    rec[name] = value == "1"
                else:
                    rec[name] = float(value)
            except (ValueError, KeyError):
                raise TreeFormatError(f"invalid value {value!r}", line=lineno, field=name) from None
        for name in ("length_m", "radius_m", "wall_thickness_m"):
            if not rec[name] > 0:
                raise TreeFormatError("must be positive", line=lineno, field=name)
        if rec["id"] in rows:
            raise TreeFormatError(f"duplicate id {rec['id']}", line=lineno, field="id")
        rec["_line"] = lineno
        rows[rec["id"]] = rec

    n = len(rows)
    if n == 0:
        raise TreeFormatError("tree file contains no airways", line=1)
    if sorted(rows) != list(range(n)):
        missing = sorted(set(range(n)) - set(rows))
        raise TreeFormatError(f"ids must be 0..{n - 1}; missing {missing[:5]}", field="id")
    for rec in rows.values():
        p = rec["parent"]
        if p >= 0 and p not in rows:
            raise TreeFormatError(
                f"airway {rec['id']} references missing parent {p}",
                line=rec["_line"], field="parent",
            )
    recs = [rows[i] for i in range(n)]
    try:
        return AirwayTree(
            parent=[r["parent"] for r in recs],
            generation=[r["generation"] for r in recs],
            length=[r["length_m"] for r in recs],
            radius=[r["radius_m"] for r in recs],
            wall_thickness=[r["wall_thickness_m"] for r in recs],
            wall_modulus=[r["wall_modulus_pa"] for r in recs],
            supplied_area=[r["supplied_area_m2"] for r in recs],
            lobe=[r["lobe"] for r in recs],
            collapsible=[r["collapsible"] for r in recs],
            height=[r["height_m"] for r in recs],
        )
    except ValueError as exc:
        raise TreeFormatError(str(exc)) from None


def serialize_tree(tree: AirwayTree, path) -> None:
    Path(path).write_text(format_tree(tree), encoding="utf-8")


def deserialize_tree(path) -> AirwayTree:
    return parse_tree(Path(path).read_text(encoding="utf-8"))
