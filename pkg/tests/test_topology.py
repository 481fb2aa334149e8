from collections import deque
from itertools import product

import pytest
from hypothesis import given
from hypothesis import strategies as st

from apesim.errors import ConfigError
from apesim.topology import (
    DIRECTIONS,
    Direction,
    TorusSpec,
    canonical_link,
    coord_of,
    distance,
    follow,
    links,
    neighbors,
    node_of,
    route,
)

T441 = TorusSpec((4, 4, 1))


def bfs(spec, src):
    """Reference distances from raw coordinate arithmetic, not the library."""
    X, Y, Z = spec.dims

    def adj(n):
        x, y, z = n % X, (n // X) % Y, n // (X * Y)
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            yield ((x + dx) % X) + ((y + dy) % Y) * X + ((z + dz) % Z) * X * Y

    dist = {src: 0}
    q = deque([src])
    while q:
        n = q.popleft()
        for m in adj(n):
            if m not in dist:
                dist[m] = dist[n] + 1
                q.append(m)
    return dist


def test_coord_examples():
    assert coord_of(0, T441) == (0, 0, 0)
    assert coord_of(7, T441) == (3, 1, 0)
    assert all(node_of(coord_of(n, T441), T441) == n for n in range(16))


def test_invalid_dims_and_ids():
    with pytest.raises(ConfigError):
        TorusSpec((0, 4, 1))
    with pytest.raises(ConfigError):
        coord_of(16, T441)


def test_wraparound_and_self_loops():
    nb = neighbors(0, T441)
    assert nb[Direction.XM] == node_of((3, 0, 0), T441)
    assert len(nb) == 6
    for n in range(16):
        nb = neighbors(n, T441)
        assert nb[Direction.ZP] == n and nb[Direction.ZM] == n


def test_neighbor_symmetry_all_links():
    for n, d in product(range(16), DIRECTIONS):
        m = neighbors(n, T441)[d]
        assert neighbors(m, T441)[d.opposite] == n


def test_five_distinct_neighbors_on_441():
    for n in range(16):
        assert len(set(neighbors(n, T441).values())) == 5  # four in-plane plus itself


def test_route_examples():
    assert route(3, 3, T441) == []
    r = route(0, node_of((3, 1, 0), T441), T441)
    assert r == [Direction.XM, Direction.YP]
    assert bfs(T441, 0)[7] == 2
    # tie on a size-4 axis goes positive
    assert route(0, node_of((2, 0, 0), T441), T441) == [Direction.XP, Direction.XP]


@pytest.mark.parametrize("dims", [d for d in product(range(1, 6), repeat=3)])
def test_route_length_equals_bfs(dims):
    spec = TorusSpec(dims)
    for src in range(spec.nodes):
        ref = bfs(spec, src)
        for dst in range(spec.nodes):
            r = route(src, dst, spec)
            assert len(r) == ref[dst] == distance(src, dst, spec)
            assert follow(src, r, spec) == dst


@given(st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)), st.data())
def test_route_is_dimension_ordered(dims, data):
    spec = TorusSpec(dims)
    src = data.draw(st.integers(0, spec.nodes - 1))
    dst = data.draw(st.integers(0, spec.nodes - 1))
    axes = [d.axis for d in route(src, dst, spec)]
    assert axes == sorted(axes)
    for axis in range(3):
        assert axes.count(axis) <= dims[axis] // 2


def test_links_and_canonical_form():
    assert len(links(T441)) == 48
    for n, d in product(range(16), DIRECTIONS):
        rep = canonical_link(n, d, T441)
        assert rep in links(T441)
        m = neighbors(n, T441)[d]
        assert canonical_link(m, d.opposite, T441) == rep


def test_size_two_gives_parallel_links():
    spec = TorusSpec((2, 1, 1))
    nb = neighbors(0, spec)
    assert nb[Direction.XP] == nb[Direction.XM] == 1
    assert canonical_link(0, Direction.XP, spec) != canonical_link(0, Direction.XM, spec)
