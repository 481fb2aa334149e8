"""3D torus geometry: node numbering, the six directed links, e-cube routing."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

from apesim.errors import ConfigError


class Direction(enum.Enum):
    XP = "+x"
    XM = "-x"
    YP = "+y"
    YM = "-y"
    ZP = "+z"
    ZM = "-z"

    @property
    def axis(self) -> int:
        return _AXIS[self]

    @property
    def sign(self) -> int:
        return 1 if self.value[0] == "+" else -1

    @property
    def opposite(self) -> "Direction":
        return _OPPOSITE[self]

    @classmethod
    def parse(cls, text: str) -> "Direction":
        try:
            return cls(text)
        except ValueError:
            raise ConfigError(f"unknown direction {text!r}; expected one of "
                              f"{[d.value for d in cls]}") from None

    def __str__(self):
        return self.value


_AXIS = {Direction.XP: 0, Direction.XM: 0, Direction.YP: 1,
         Direction.YM: 1, Direction.ZP: 2, Direction.ZM: 2}
_OPPOSITE = {Direction.XP: Direction.XM, Direction.XM: Direction.XP,
             Direction.YP: Direction.YM, Direction.YM: Direction.YP,
             Direction.ZP: Direction.ZM, Direction.ZM: Direction.ZP}
_BY_AXIS = ((Direction.XP, Direction.XM), (Direction.YP, Direction.YM),
            (Direction.ZP, Direction.ZM))

DIRECTIONS = tuple(Direction)

Coord3 = tuple[int, int, int]
Route = list[Direction]


@dataclass(frozen=True)
class TorusSpec:
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(self.dims)
        if len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
            raise ConfigError(f"torus dims must be three integers >= 1, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)

    @property
    def nodes(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def check(self, n: int) -> None:
        if not 0 <= n < self.nodes:
            raise ConfigError(f"node id {n} outside [0, {self.nodes}) for dims {self.dims}")

    @cached_property
    def neighbor_table(self) -> tuple[dict[Direction, int], ...]:
        return tuple(_neighbors(n, self) for n in range(self.nodes))

    def __str__(self):
        return "x".join(map(str, self.dims))


def coord_of(n: int, spec: TorusSpec) -> Coord3:
    spec.check(n)
    X, Y, _ = spec.dims
    return n % X, (n // X) % Y, n // (X * Y)


def node_of(c: Coord3, spec: TorusSpec) -> int:
    X, Y, Z = spec.dims
    x, y, z = c
    if not (0 <= x < X and 0 <= y < Y and 0 <= z < Z):
        raise ConfigError(f"coordinate {c} outside torus {spec.dims}")
    return x + X * (y + Y * z)


def step(n: int, d: Direction, spec: TorusSpec) -> int:
    """Node reached from ``n`` over the link leaving in direction ``d``."""
    c = list(coord_of(n, spec))
    c[d.axis] = (c[d.axis] + d.sign) % spec.dims[d.axis]
    return node_of(tuple(c), spec)


def _neighbors(n: int, spec: TorusSpec) -> dict[Direction, int]:
    return {d: step(n, d, spec) for d in DIRECTIONS}


def neighbors(n: int, spec: TorusSpec) -> dict[Direction, int]:
    """All six out-links of ``n``; size-1 dimensions give self-loops."""
    spec.check(n)
    return dict(spec.neighbor_table[n])


def route(src: int, dst: int, spec: TorusSpec) -> Route:
    """Dimension-order route: x, then y, then z, shortest wrap per axis.

    When both wrap directions are equally long the positive one is taken.
    """
    a = coord_of(src, spec)
    b = coord_of(dst, spec)
    hops: Route = []
    for axis in range(3):
        size = spec.dims[axis]
        fwd = (b[axis] - a[axis]) % size
        back = size - fwd if fwd else 0
        plus, minus = _BY_AXIS[axis]
        if fwd <= back:
            hops.extend([plus] * fwd)
        else:
            hops.extend([minus] * back)
    return hops


def distance(src: int, dst: int, spec: TorusSpec) -> int:
    a = coord_of(src, spec)
    b = coord_of(dst, spec)
    total = 0
    for axis, size in enumerate(spec.dims):
        fwd = (b[axis] - a[axis]) % size
        total += min(fwd, size - fwd)
    return total


def follow(src: int, hops: Route, spec: TorusSpec) -> int:
    n = src
    for d in hops:
        n = spec.neighbor_table[n][d]
    return n


def links(spec: TorusSpec) -> list[tuple[int, Direction]]:
    """One representative ``(node, direction)`` per bidirectional link.

    A link is the pair of channels ``(n, d)`` and ``(step(n, d), -d)``; the
    representative is the positive-direction channel.
    """
    return [(n, d) for n in range(spec.nodes) for d in (Direction.XP, Direction.YP, Direction.ZP)]


def canonical_link(n: int, d: Direction, spec: TorusSpec) -> tuple[int, Direction]:
    if d.sign > 0:
        return n, d
    return spec.neighbor_table[n][d], d.opposite
