"""Readers and writers for splat PLY maps, GSEM embedding sidecars and text tables.

PLY layout (binary_little_endian 1.0, all float32, in this order)::

    x y z nx ny nz f_dc_0..2 f_rest_0..K-1 opacity scale_0..2 rot_0..3

Scales are stored as logs and opacity as a pre-sigmoid logit; the loader
converts to natural units and the writer converts back. Normals are written
as zeros and ignored on load.

GSEM sidecar: b"GSEM" | version u32 | count u64 | dim u32 | float32[count][dim],
little-endian.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    CountMismatchError,
    HeaderError,
    MapFormatError,
    NonFiniteError,
    PayloadSizeError,
    TextFormatError,
)
from .model import MAP_QUAT_TOL, GaussianMap, Pose, SimilarityTransform

logger = logging.getLogger(__name__)

GSEM_MAGIC = b"GSEM"
GSEM_VERSION = 1
_GSEM_HEADER = struct.Struct("<4sIQI")

_PRE = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
_POST = ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
_FLOAT_TYPES = {"float", "float32"}


def ply_property_names(n_rest: int) -> list[str]:
    return _PRE + [f"f_rest_{k}" for k in range(n_rest)] + _POST


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

class PlyContents(NamedTuple):
    map: GaussianMap
    renormalized: int  # quaternions that were not unit length on disk


def _parse_header(f, path) -> tuple[int, int]:
    first = f.readline()
    if first.rstrip(b"\r\n") != b"ply":
        raise HeaderError(f"{path}: missing 'ply' magic")
    count = None
    props: list[str] = []
    seen_format = False
    while True:
        raw = f.readline()
        if not raw:
            raise HeaderError(f"{path}: header has no end_header line")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise HeaderError(f"{path}: header is not ASCII") from None
        if line == "end_header":
            break
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise HeaderError(f"{path}: unsupported format {' '.join(tok[1:])!r}")
            seen_format = True
        elif tok[0] == "element":
            if count is not None or len(tok) != 3 or tok[1] != "vertex":
                raise HeaderError(f"{path}: only a single 'element vertex' is supported")
            try:
                count = int(tok[2])
            except ValueError:
                raise HeaderError(f"{path}: bad vertex count {tok[2]!r}") from None
            if count < 0:
                raise HeaderError(f"{path}: negative vertex count")
        elif tok[0] == "property":
            if count is None:
                raise HeaderError(f"{path}: property before element")
            if len(tok) != 3 or tok[1] not in _FLOAT_TYPES:
                raise HeaderError(f"{path}: property {line!r} is not a float32 scalar")
            props.append(tok[2])
        else:
            raise HeaderError(f"{path}: unexpected header line {line!r}")
    if not seen_format:
        raise HeaderError(f"{path}: missing format line")
    if count is None:
        raise HeaderError(f"{path}: missing 'element vertex'")
    n_rest = len(props) - len(_PRE) - len(_POST)
    if n_rest < 0 or props != ply_property_names(n_rest):
        raise HeaderError(f"{path}: vertex properties do not follow the splat layout")
    return count, n_rest


def load_ply(path) -> PlyContents:
    path = Path(path)
    with open(path, "rb") as f:
        count, n_rest = _parse_header(f, path)
        payload = f.read()
    width = len(_PRE) + n_rest + len(_POST)
    expected = count * width * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: header declares {count} vertices ({expected} bytes), payload has {len(payload)} bytes"
        )
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, width)
    bad = ~np.all(np.isfinite(rec), axis=1)
    if bad.any():
        raise NonFiniteError(str(path), int(np.argmax(bad)))

    data = rec.astype(np.float64)
    quats = data[:, -4:]
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0.0):
        raise NonFiniteError(f"{path} (zero-length quaternion)", int(np.argmax(norms == 0.0)))
    # Rows that are unit up to float32 rounding stay verbatim so rewriting is lossless.
    drift = np.abs(norms - 1.0) > MAP_QUAT_TOL
    renormalized = int(np.count_nonzero(drift))
    quats = np.where(drift[:, None], quats / norms[:, None], quats)
    m = GaussianMap(
        means=data[:, 0:3],
        sh_dc=data[:, 6:9],
        sh_rest=data[:, 9:9 + n_rest],
        opacities=1.0 / (1.0 + np.exp(-data[:, -8])),
        scales=np.exp(data[:, -7:-4]),
        quats=quats,
        frame_label=path.stem,
    )
    return PlyContents(m, renormalized)


def write_ply(m: GaussianMap, path) -> None:
    n = len(m)
    n_rest = m.sh_rest.shape[1]
    with np.errstate(divide="ignore"):
        logits = np.log(m.opacities) - np.log1p(-m.opacities)
    if not np.all(np.isfinite(logits)):
        raise ValueError("opacity of exactly 0 or 1 cannot be stored as a logit")
    rec = np.hstack([
        m.means,
        np.zeros((n, 3)),
        m.sh_dc,
        m.sh_rest,
        logits[:, None],
        np.log(m.scales),
        m.quats,
    ]).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in ply_property_names(n_rest)]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# GSEM sidecar
# ---------------------------------------------------------------------------

def read_sidecar(path) -> np.ndarray:
    """Return the (count, dim) float64 embedding matrix stored in a GSEM file."""
    raw = Path(path).read_bytes()
    if len(raw) < _GSEM_HEADER.size:
        raise HeaderError(f"{path}: truncated GSEM header")
    magic, version, count, dim = _GSEM_HEADER.unpack_from(raw)
    if magic != GSEM_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != GSEM_VERSION:
        raise HeaderError(f"{path}: unsupported GSEM version {version}")
    if dim < 1:
        raise HeaderError(f"{path}: embedding dimension must be >= 1")
    body = raw[_GSEM_HEADER.size:]
    if len(body) != count * dim * 4:
        raise PayloadSizeError(f"{path}: header declares {count}x{dim} floats, payload has {len(body)} bytes")
    emb = np.frombuffer(body, dtype="<f4").reshape(count, dim)
    bad = ~np.all(np.isfinite(emb), axis=1)
    if bad.any():
        raise NonFiniteError(str(path), int(np.argmax(bad)))
    return emb.astype(np.float64)


def write_sidecar(embeddings, path) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] < 1:
        raise ValueError("sidecar needs a (count, dim) matrix with dim >= 1")
    with open(path, "wb") as f:
        f.write(_GSEM_HEADER.pack(GSEM_MAGIC, GSEM_VERSION, emb.shape[0], emb.shape[1]))
        f.write(emb.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------------

def read_map(ply_path, sidecar_path=None) -> GaussianMap:
    contents = load_ply(ply_path)
    if contents.renormalized:
        logger.warning("%s: normalized %d non-unit quaternions", ply_path, contents.renormalized)
    m = contents.map
    if sidecar_path is not None:
        emb = read_sidecar(sidecar_path)
        if len(emb) != len(m):
            raise CountMismatchError(f"{sidecar_path} vs {ply_path}", len(m), len(emb))
        m = m.replace(embeddings=emb)
    return m


def write_map(m: GaussianMap, ply_path, sidecar_path=None) -> None:
    if sidecar_path is not None and m.embedding_dim == 0:
        raise ValueError("map has no embeddings; nothing to write to the sidecar")
    write_ply(m, ply_path)
    if sidecar_path is not None:
        write_sidecar(m.embeddings, sidecar_path)


# ---------------------------------------------------------------------------
# Text tables
# ---------------------------------------------------------------------------

def _table_rows(path, n_fields: int):
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tok = body.split()
            if len(tok) != n_fields:
                raise TextFormatError(path, line_no, f"expected {n_fields} fields, found {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise TextFormatError(path, line_no, "unparseable number") from None
            if not all(math.isfinite(v) for v in vals):
                raise TextFormatError(path, line_no, "non-finite value")
            yield line_no, tok, vals


def _unit_quat(q: np.ndarray) -> np.ndarray:
    # Already-unit values (as written by write_pose_pairs) are kept bit for bit.
    n = float(np.linalg.norm(q))
    return q if abs(n - 1.0) <= 1e-12 else q / n


def read_pose_pairs(path) -> list[tuple[Pose, Pose]]:
    """Lines of ``ax ay az aw ax ay az  bx by bz bw bx by bz`` (origin, quaternion wxyz)."""
    pairs = []
    for line_no, _, v in _table_rows(path, 14):
        qa, qb = np.array(v[3:7]), np.array(v[10:14])
        if not (np.any(qa) and np.any(qb)):
            raise TextFormatError(path, line_no, "zero quaternion")
        pairs.append((Pose(v[0:3], _unit_quat(qa)), Pose(v[7:10], _unit_quat(qb))))
    return pairs


def write_pose_pairs(pairs, path) -> None:
    lines = ["# a_origin(3) a_quat_wxyz(4) b_origin(3) b_quat_wxyz(4)"]
    for a, b in pairs:
        vals = [*a.origin, *a.rotation, *b.origin, *b.rotation]
        lines.append(" ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_correspondences(path):
    from .semantic import CorrespondenceSet

    src, tgt, w = [], [], []
    for line_no, tok, v in _table_rows(path, 3):
        try:
            src.append(int(tok[0]))
            tgt.append(int(tok[1]))
        except ValueError:
            raise TextFormatError(path, line_no, "indices must be integers") from None
        w.append(v[2])
    try:
        return CorrespondenceSet(src, tgt, w)
    except ValueError as exc:
        raise MapFormatError(f"{path}: {exc}") from None


def write_correspondences(corr, path) -> None:
    lines = ["# source_index target_index weight"]
    lines += [f"{i} {j} {float(w)!r}" for i, j, w in zip(corr.source.tolist(), corr.target.tolist(), corr.weight)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_index_list(path) -> np.ndarray:
    out = []
    for line_no, tok, _ in _table_rows(path, 1):
        try:
            out.append(int(tok[0]))
        except ValueError:
            raise TextFormatError(path, line_no, "expected an integer index") from None
    return np.asarray(out, dtype=np.int64)


def write_index_list(indices, path, header: str = "index") -> None:
    lines = [f"# {header}"] + [str(int(i)) for i in indices]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Transform documents
# ---------------------------------------------------------------------------

def _transform_dict(T: SimilarityTransform) -> dict:
    return {
        "scale": T.scale,
        "quaternion_wxyz": T.rotation.tolist(),
        "translation": T.translation.tolist(),
        "matrix": T.matrix().tolist(),
    }


def _transform_from(d: dict) -> SimilarityTransform:
    return SimilarityTransform(d["scale"], d["quaternion_wxyz"], d["translation"])


def write_transform(T: SimilarityTransform, report, path) -> None:
    """Write a JSON transform document.

    Floats go through ``repr`` (shortest round-trip form) so reading the file
    back reproduces every value exactly. ``report`` may be ``None`` for bare
    transforms such as ground truth.
    """
    doc = {"format": "splatreg-transform", "version": 1, "transform": _transform_dict(T)}
    if report is not None:
        doc["report"] = report.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_transform(path):
    """Return ``(transform, report_or_None)`` from a document written by :func:`write_transform`."""
    from .fusion import RegistrationReport

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != "splatreg-transform":
            raise MapFormatError(f"{path}: not a transform document")
        T = _transform_from(doc["transform"])
        report = RegistrationReport.from_dict(doc["report"], T) if "report" in doc else None
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFormatError(f"{path}: malformed transform document ({exc})") from None
    return T, report
