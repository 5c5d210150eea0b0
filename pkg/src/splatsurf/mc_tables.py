"""Marching-cubes case tables, generated once at import.

Corners are numbered ix | iy << 1 | iz << 2, edges by sorted corner pairs.
For each of the 256 inside/outside corner patterns the surface patch is
built by cutting every cube face into segments and chaining them into
loops, which are fan-triangulated.  Ambiguous faces (diagonally opposite
inside corners) always cut around the inside corners; the choice depends
only on the face's own corner signs, so adjacent cells agree and meshes
stay watertight over fully-weighted regions.
"""

from collections import defaultdict

import numpy as np

CORNERS = tuple((i & 1, (i >> 1) & 1, (i >> 2) & 1) for i in range(8))

EDGES = tuple(sorted(
    (a, b) for a in range(8) for b in range(a + 1, 8)
    if bin(a ^ b).count("1") == 1))

_EDGE_INDEX = {edge: i for i, edge in enumerate(EDGES)}

# axis along which each edge runs, used for global welding keys
EDGE_AXES = tuple((b ^ a).bit_length() - 1 for a, b in EDGES)


def _faces():
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            corners = []
            for cu, cv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                bits = [0, 0, 0]
                bits[axis] = side
                bits[u] = cu
                bits[v] = cv
                corners.append(bits[0] | (bits[1] << 1) | (bits[2] << 2))
            faces.append(tuple(corners))
    return tuple(faces)


FACES = _faces()


def _edge_of(a, b):
    return _EDGE_INDEX[(a, b) if a < b else (b, a)]


def face_segments(face, inside):
    """Cut segments (pairs of crossing edges) on one face.

    With four crossings the two inside corners sit diagonally; each is cut
    off by its own segment so the rule is symmetric in the face alone.
    """
    boundary = [(face[k], face[(k + 1) % 4]) for k in range(4)]
    crossing = [k for k, (a, b) in enumerate(boundary)
                if (a in inside) != (b in inside)]
    if not crossing:
        return []
    if len(crossing) == 2:
        k0, k1 = crossing
        return [(_edge_of(*boundary[k0]), _edge_of(*boundary[k1]))]
    if face[1] in inside:
        pairing = ((0, 1), (2, 3))
    else:
        pairing = ((1, 2), (3, 0))
    return [(_edge_of(*boundary[ka]), _edge_of(*boundary[kb]))
            for ka, kb in pairing]


def _trace_loops(segments):
    adjacency = defaultdict(list)
    for a, b in segments:
        adjacency[a].append(b)
        adjacency[b].append(a)
    # every crossing edge borders exactly two faces, so cycles are simple
    assert all(len(v) == 2 for v in adjacency.values())
    loops = []
    seen = set()
    for start in sorted(adjacency):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            step = adjacency[cur][0]
            if step == prev:
                step = adjacency[cur][1]
            if step == start:
                break
            loop.append(step)
            seen.add(step)
            prev, cur = cur, step
        loops.append(loop)
    return loops


def _oriented(loop, inside):
    """Flip the loop so its winding faces the outside corners."""
    mids = np.array([(np.add(CORNERS[EDGES[e][0]], CORNERS[EDGES[e][1]]))
                     * 0.5 for e in loop])
    normal = np.zeros(3)
    for i in range(len(mids)):
        normal += np.cross(mids[i], mids[(i + 1) % len(mids)])
    ins, outs = [], []
    for e in loop:
        for corner in EDGES[e]:
            (ins if corner in inside else outs).append(CORNERS[corner])
    outward = np.mean(outs, axis=0) - np.mean(ins, axis=0)
    if normal @ outward < 0:
        loop = loop[::-1]
    return loop


def _case_triangles(case):
    inside = {i for i in range(8) if case >> i & 1}
    if not inside or len(inside) == 8:
        return ()
    segments = []
    for face in FACES:
        segments.extend(face_segments(face, inside))
    triangles = []
    for loop in _trace_loops(segments):
        loop = _oriented(loop, inside)
        for k in range(1, len(loop) - 1):
            triangles.append((loop[0], loop[k], loop[k + 1]))
    return tuple(triangles)


TRI_TABLE = tuple(_case_triangles(case) for case in range(256))

# bitmask of crossing edges per case, kept for verification
EDGE_TABLE = tuple(
    sum(1 << i for i, (a, b) in enumerate(EDGES)
        if bool(case >> a & 1) != bool(case >> b & 1))
    for case in range(256))
