"""Minimal PLY reader/writer for point clouds and triangle meshes.

Handles ``ascii 1.0`` and ``binary_little_endian 1.0`` with vertex
properties x/y/z, nx/ny/nz, red/green/blue and a ``vertex_indices`` (or
``vertex_index``) face list. Unknown vertex properties are skipped.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ParseError
from .geom import PointCloud, TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ParseError("not a PLY file", line=1)
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("unexpected end of header", line=lineno)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {fmt!r}", line=lineno)
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", line=lineno)
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type {parts[1]!r}", line=lineno)
                elements[-1]["props"].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError("missing format line")
    return fmt, elements


def _read_binary_element(fh, element):
    props = element["props"]
    count = element["count"]
    if all(not isinstance(t, tuple) for _, t in props):
        dtype = np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in props])
        data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
        return {name: data[name] for name, _ in props}
    # list properties: fast path for the common all-triangle face block
    if len(props) == 1:
        name, (_, ctype, itype) = props[0]
        cdt, idt = np.dtype("<" + _PLY_TYPES[ctype]), np.dtype("<" + _PLY_TYPES[itype])
        row = np.dtype([("n", cdt), ("v", idt, (3,))])
        start = fh.tell()
        block = np.frombuffer(fh.read(row.itemsize * count), dtype=row, count=count)
        if count == 0 or np.all(block["n"] == 3):
            return {name: block["v"].astype(np.int64)}
        fh.seek(start)
    out = {name: [] for name, _ in props}
    for _ in range(count):
        for name, t in props:
            if isinstance(t, tuple):
                cdt, idt = np.dtype("<" + _PLY_TYPES[t[1]]), np.dtype("<" + _PLY_TYPES[t[2]])
                n = int(np.frombuffer(fh.read(cdt.itemsize), dtype=cdt)[0])
                out[name].append(np.frombuffer(fh.read(idt.itemsize * n), dtype=idt))
            else:
                dt = np.dtype("<" + _PLY_TYPES[t])
                out[name].append(np.frombuffer(fh.read(dt.itemsize), dtype=dt)[0])
    return out


def _read_ascii_element(lines, element, lineno):
    props = element["props"]
    out = {name: [] for name, _ in props}
    for _ in range(element["count"]):
        raw = next(lines, None)
        lineno += 1
        if raw is None:
            raise ParseError(f"unexpected end of {element['name']} data", line=lineno)
        tokens = raw.split()
        pos = 0
        try:
            for name, t in props:
                if isinstance(t, tuple):
                    n = int(tokens[pos])
                    out[name].append(np.array([int(x) for x in tokens[pos + 1: pos + 1 + n]]))
                    if len(out[name][-1]) != n:
                        raise IndexError
                    pos += 1 + n
                else:
                    out[name].append(float(tokens[pos]))
                    pos += 1
        except (IndexError, ValueError) as exc:
            raise ParseError(f"malformed {element['name']} row", line=lineno) from exc
    for name, t in props:
        if not isinstance(t, tuple):
            out[name] = np.asarray(out[name], dtype=_PLY_TYPES[t])
    return out, lineno


def read_ply(path) -> dict[str, dict]:
    """Parse a PLY file into ``{element_name: {property: values}}``."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        result = {}
        if fmt == "ascii":
            body = fh.read().decode("ascii", errors="replace").splitlines()
            lines = iter(line for line in body if line.strip())
            lineno = 0
            for el in elements:
                result[el["name"]], lineno = _read_ascii_element(lines, el, lineno)
        else:
            for el in elements:
                result[el["name"]] = _read_binary_element(fh, el)
    return result


def _vertex_arrays(data):
    v = data.get("vertex")
    if v is None:
        raise ParseError("PLY has no vertex element")
    try:
        pts = np.column_stack([np.asarray(v[k], dtype=np.float64) for k in ("x", "y", "z")])
    except KeyError as exc:
        raise ParseError(f"vertex element lacks property {exc}") from exc
    normals = colors = None
    if all(k in v for k in ("nx", "ny", "nz")):
        normals = np.column_stack([np.asarray(v[k], dtype=np.float64) for k in ("nx", "ny", "nz")])
    if all(k in v for k in ("red", "green", "blue")):
        integral = np.issubdtype(np.asarray(v["red"]).dtype, np.integer)
        colors = np.column_stack([np.asarray(v[k], dtype=np.float64) for k in ("red", "green", "blue")])
        if integral:
            colors = colors / 255.0
    return pts.reshape(-1, 3), normals, colors


def read_point_cloud(path) -> PointCloud:
    pts, normals, colors = _vertex_arrays(read_ply(path))
    return PointCloud(pts, normals, colors)


def read_mesh(path) -> TriangleMesh:
    data = read_ply(path)
    pts, _, colors = _vertex_arrays(data)
    face = data.get("face", {})
    lists = face.get("vertex_indices", face.get("vertex_index"))
    if lists is None:
        raise ParseError("PLY has no face list")
    if isinstance(lists, np.ndarray):
        faces = lists
    else:
        tris = []
        for poly in lists:
            poly = np.asarray(poly, dtype=np.int64)
            for k in range(1, len(poly) - 1):
                tris.append((poly[0], poly[k], poly[k + 1]))
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(pts, faces, colors)


def write_ply(path, points, normals=None, colors=None, faces=None, binary=True) -> None:
    """Write vertices (and optional normals, colours in [0, 1], triangles)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.empty(len(pts), dtype=fields)
    vert["x"], vert["y"], vert["z"] = pts.T
    if normals is not None:
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        vert["nx"], vert["ny"], vert["nz"] = n.T
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors, dtype=np.float64).reshape(-1, 3) * 255), 0, 255)
        vert["red"], vert["green"], vert["blue"] = c.astype(np.uint8).T
    tris = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(pts)}"]
    type_names = {"<f8": "double", "<f4": "float", "u1": "uchar"}
    header += [f"property {type_names[t]} {name}" for name, t in fields]
    if tris is not None:
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vert.tobytes())
            if tris is not None:
                block = np.empty(len(tris), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                block["n"] = 3
                block["v"] = tris
                fh.write(block.tobytes())
        else:
            rows = []
            for rec in vert:
                vals = []
                for (name, t), val in zip(fields, rec):
                    vals.append(repr(float(val)) if t[1] == "f" else str(int(val)))
                rows.append(" ".join(vals))
            if tris is not None:
                rows.extend(f"3 {a} {b} {c}" for a, b, c in tris)
            fh.write(("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))


def write_point_cloud(path, cloud: PointCloud, binary=True) -> None:
    write_ply(path, cloud.points, cloud.normals, cloud.colors, binary=binary)


def write_mesh(path, mesh: TriangleMesh, binary=True) -> None:
    write_ply(path, mesh.vertices, colors=mesh.vertex_colors, faces=mesh.faces, binary=binary)
