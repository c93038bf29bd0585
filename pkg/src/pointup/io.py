"""File formats: XYZ clouds, OFF meshes, PGM/PNG images."""

from pathlib import Path

import numpy as np

from .cloud import as_cloud
from .errors import InvalidArgumentError, InvalidInputError, ParseError, UnsupportedFaceError
from .metrics import ReferenceMesh


def _read_text(path):
    try:
        return Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"not a text file ({exc.reason})", path=path) from exc


def read_xyz(path):
    """Read ``x y z`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, raw in enumerate(_read_text(path).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 3 coordinates, found {len(parts)}", lineno, path)
        try:
            xyz = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"not a number in {line!r}", lineno, path) from None
        if not all(np.isfinite(xyz)):
            raise ParseError(f"non-finite coordinate in {line!r}", lineno, path)
        rows.append(xyz)
    if not rows:
        raise InvalidInputError(f"{path}: file holds no points")
    return np.array(rows, dtype=float)


def format_xyz(cloud):
    """Text for ``cloud``: one point per line, 9 significant digits (``%.9g``)."""
    if np.size(cloud) == 0:
        raise InvalidArgumentError("refusing to write an empty cloud")
    pts = as_cloud(cloud)
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts)


def write_xyz(cloud, path):
    text = format_xyz(cloud)
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _off_tokens(text):
    """Yield ``(lineno, tokens)`` for non-empty, comment-stripped lines."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def read_off(path):
    """Read a triangle-only OFF mesh."""
    lines = _off_tokens(_read_text(path))
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise ParseError("empty file, missing OFF header", 1, path) from None
    if head[0] != "OFF":
        raise ParseError(f"missing OFF header, found {head[0]!r}", lineno, path)
    counts = head[1:]
    if not counts:
        try:
            lineno, counts = next(lines)
        except StopIteration:
            raise ParseError("missing counts line", lineno, path) from None
    try:
        n_verts, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise ParseError("counts line must start with vertex and face counts", lineno, path) from None
    if n_verts < 0 or n_faces < 0:
        raise ParseError("negative element count", lineno, path)

    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_verts} vertices, found {i}", lineno, path) from None
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError:
            raise ParseError("bad vertex coordinate", lineno, path) from None
        if len(tok) < 3 or not np.all(np.isfinite(verts[i])):
            raise ParseError("vertex needs 3 finite coordinates", lineno, path)

    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise ParseError(f"expected {n_faces} faces, found {i}", lineno, path) from None
        try:
            idx = [int(t) for t in tok]
        except ValueError:
            raise ParseError("face indices must be integers", lineno, path) from None
        if idx[0] != 3:
            raise UnsupportedFaceError(f"only triangles are supported, got a {idx[0]}-gon", lineno, path)
        if len(idx) < 4:
            raise ParseError("triangle face needs 3 indices", lineno, path)
        tri = idx[1:4]
        if min(tri) < 0 or max(tri) >= n_verts:
            raise ParseError(f"vertex index out of range [0, {n_verts})", lineno, path)
        if len(set(tri)) < 3:
            raise ParseError("triangle repeats a vertex index", lineno, path)
        faces[i] = tri
    return ReferenceMesh(verts, faces)


def write_off(mesh, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.triangles)} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


# -- images ------------------------------------------------------------------

def to_bytes(image):
    """Quantize intensities in [0, 1] to 8-bit, rows as stored (top row first)."""
    img = np.asarray(image, float)
    if img.ndim != 2:
        raise InvalidArgumentError(f"expected a 2D image, got shape {img.shape}")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(image, path, binary=True):
    """8-bit PGM: P5 (binary) or P2 (ASCII)."""
    data = to_bytes(image)
    h, w = data.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(f"P2\n{w} {h}\n255\n")
            for row in data:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_pgm(path):
    """Read a P2 or P5 8-bit PGM into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=path)
        fields.append(raw[start:pos].decode("ascii", "replace"))
    magic = fields[0]
    try:
        w, h, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise ParseError("bad PGM header", path=path) from None
    if maxval != 255:
        raise ParseError(f"only 8-bit PGM is supported (maxval {maxval})", path=path)
    if magic == "P5":
        body = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    elif magic == "P2":
        body = np.array(raw[pos:].split(), dtype=np.int64)
    else:
        raise ParseError(f"not a PGM file (magic {magic!r})", path=path)
    if body.size != w * h:
        raise ParseError(f"expected {w * h} pixels, found {body.size}", path=path)
    return body.reshape(h, w).astype(float) / 255.0


def write_png(image, path):
    import matplotlib.image

    matplotlib.image.imsave(path, to_bytes(image), cmap="gray", vmin=0, vmax=255)
