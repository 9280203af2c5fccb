import json
import math
import struct

import numpy as np
import pytest

from conftest import random_map
from splatreg import mapio
from splatreg.errors import (
    CountMismatchError,
    HeaderError,
    MapFormatError,
    NonFiniteError,
    PayloadSizeError,
    TextFormatError,
)
from splatreg.fusion import RegistrationReport
from splatreg.model import GaussianMap, Pose, SimilarityTransform
from splatreg.rotations import random_quat
from splatreg.semantic import CorrespondenceSet
from splatreg.synth import metrics

FIELDS = ("means", "quats", "scales", "opacities", "sh_dc", "sh_rest", "embeddings")


def golden_ply(path, rows):
    """Hand-packed little-endian PLY, written without the library."""
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    head = "ply\nformat binary_little_endian 1.0\ncomment golden\n" + f"element vertex {len(rows)}\n"
    head += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    body = b"".join(struct.pack("<17f", *r) for r in rows)
    path.write_bytes(head.encode() + body)


def test_golden_three_gaussian_file(tmp_path):
    rows = [
        (1.0, 2.0, 3.0, 0, 0, 0, 0.5, 0.25, -0.5, 0.0, 0.0, math.log(2.0), -1.0, 1, 0, 0, 0),
        (-4.5, 0.125, 8.0, 9, 9, 9, 0, 0, 0, 2.0, -2.0, -2.0, -2.0, 0, 1, 0, 0),
        (0.0, -1.0, 1e3, 0, 0, 0, 1, 1, 1, -3.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5),
    ]
    golden_ply(tmp_path / "g.ply", rows)
    m = mapio.read_map(tmp_path / "g.ply")
    np.testing.assert_array_equal(m.means, [[1, 2, 3], [-4.5, 0.125, 8], [0, -1, 1000]])
    np.testing.assert_allclose(m.opacities, [0.5, 1 / (1 + math.exp(-2)), 1 / (1 + math.exp(3))])
    np.testing.assert_allclose(m.scales[0], [1.0, 2.0, math.exp(-1)], rtol=1e-7)
    np.testing.assert_array_equal(m.quats[2], [0.5, 0.5, 0.5, 0.5])
    assert m.sh_rest.shape == (3, 0)
    assert m.frame_label == "g" and not m.has_semantics


def test_write_read_fields_bit_equal(tmp_path, rng):
    mapio.write_map(random_map(rng, n=40, dim=5), tmp_path / "a.ply", tmp_path / "a.gsem")
    m1 = mapio.read_map(tmp_path / "a.ply", tmp_path / "a.gsem")
    mapio.write_map(m1, tmp_path / "b.ply", tmp_path / "b.gsem")
    m2 = mapio.read_map(tmp_path / "b.ply", tmp_path / "b.gsem")
    for name in FIELDS:
        np.testing.assert_array_equal(getattr(m1, name), getattr(m2, name))


def test_float32_exact_values_survive(tmp_path, rng):
    m = random_map(rng, n=10, dim=3)
    m = m.replace(means=m.means.astype(np.float32).astype(np.float64),
                  embeddings=m.embeddings.astype(np.float32).astype(np.float64))
    mapio.write_map(m, tmp_path / "a.ply", tmp_path / "a.gsem")
    back = mapio.read_map(tmp_path / "a.ply", tmp_path / "a.gsem")
    np.testing.assert_array_equal(back.means, m.means)
    np.testing.assert_array_equal(back.embeddings, m.embeddings)
    np.testing.assert_allclose(back.covariances(), m.covariances(), rtol=1e-5, atol=1e-8)


def test_empty_map(tmp_path):
    mapio.write_map(GaussianMap.empty(), tmp_path / "e.ply")
    assert b"element vertex 0\n" in (tmp_path / "e.ply").read_bytes()
    assert len(mapio.read_map(tmp_path / "e.ply")) == 0


def test_sidecar_without_embeddings_rejected(tmp_path, rng):
    with pytest.raises(ValueError):
        mapio.write_map(random_map(rng, n=3, dim=0), tmp_path / "a.ply", tmp_path / "a.gsem")


def test_count_mismatch_names_counts(tmp_path, rng):
    mapio.write_map(random_map(rng, n=5, dim=3), tmp_path / "a.ply")
    mapio.write_sidecar(np.ones((7, 3)), tmp_path / "a.gsem")
    with pytest.raises(CountMismatchError) as exc:
        mapio.read_map(tmp_path / "a.ply", tmp_path / "a.gsem")
    assert "5" in str(exc.value) and "7" in str(exc.value)


def test_drifted_quaternions_are_normalised(tmp_path, caplog):
    golden_ply(tmp_path / "q.ply", [(0,) * 13 + (2.0, 0, 0, 0), (0,) * 13 + (1.0, 0, 0, 0)])
    contents = mapio.load_ply(tmp_path / "q.ply")
    assert contents.renormalized == 1
    np.testing.assert_array_equal(contents.map.quats[0], [1, 0, 0, 0])
    mapio.read_map(tmp_path / "q.ply")
    assert "normalized 1" in caplog.text


def test_nonfinite_reports_first_index(tmp_path):
    rows = [(0,) * 13 + (1.0, 0, 0, 0)] * 4
    rows[2] = (0, float("inf")) + (0,) * 11 + (1.0, 0, 0, 0)
    golden_ply(tmp_path / "n.ply", rows)
    with pytest.raises(NonFiniteError) as exc:
        mapio.load_ply(tmp_path / "n.ply")
    assert exc.value.index == 2


@pytest.mark.parametrize("header, err", [
    (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nelement face 0\nend_header\n", HeaderError),
    (b"ply\nelement vertex 0\nend_header\n", HeaderError),
    (b"ply\nformat binary_little_endian 1.0\nelement vertex -1\nend_header\n", HeaderError),
    (b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty list uchar int x\nend_header\n",
     HeaderError),
])
def test_header_rejections(tmp_path, header, err):
    (tmp_path / "h.ply").write_bytes(header)
    with pytest.raises(err):
        mapio.load_ply(tmp_path / "h.ply")


def test_sidecar_version(tmp_path):
    mapio.write_sidecar(np.ones((2, 2)), tmp_path / "s.gsem")
    raw = bytearray((tmp_path / "s.gsem").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "s.gsem").write_bytes(bytes(raw))
    with pytest.raises(HeaderError):
        mapio.read_sidecar(tmp_path / "s.gsem")
    (tmp_path / "t.gsem").write_bytes(b"GSEM")
    with pytest.raises(HeaderError):
        mapio.read_sidecar(tmp_path / "t.gsem")


def test_pose_pairs(tmp_path, rng):
    (tmp_path / "one.txt").write_text("0 0 0 1 0 0 0  0 0 0 1 0 0 0\n")
    [(a, b)] = mapio.read_pose_pairs(tmp_path / "one.txt")
    np.testing.assert_array_equal(a.rotation, [1, 0, 0, 0])
    np.testing.assert_array_equal(b.origin, [0, 0, 0])
    (tmp_path / "c.txt").write_text("# nothing\n\n   # here\n")
    assert mapio.read_pose_pairs(tmp_path / "c.txt") == []

    pairs = [(Pose(rng.normal(size=3), q1), Pose(rng.normal(size=3), q2))
             for q1, q2 in zip(random_quat(rng, 50), random_quat(rng, 50))]
    mapio.write_pose_pairs(pairs, tmp_path / "p.txt")
    back = mapio.read_pose_pairs(tmp_path / "p.txt")
    for (a, b), (c, d) in zip(pairs, back):
        np.testing.assert_array_equal(a.origin, c.origin)
        np.testing.assert_array_equal(b.rotation, d.rotation)


@pytest.mark.parametrize("text", [
    "0 0 0 1 0 0 0 0 0 0 1 0 0\n",
    "0 0 0 1 0 0 0 0 0 0 1 0 0 x\n",
    "0 0 0 0 0 0 0 0 0 0 1 0 0 0\n",
    "0 0 0 1 0 0 0 0 0 nan 1 0 0 0\n",
])
def test_pose_pair_errors_carry_line_number(tmp_path, text):
    (tmp_path / "bad.txt").write_text("# header\n" + text)
    with pytest.raises(TextFormatError) as exc:
        mapio.read_pose_pairs(tmp_path / "bad.txt")
    assert exc.value.line_no == 2


def test_correspondences_and_index_lists(tmp_path):
    corr = CorrespondenceSet([0, 0, 5], [1, 2, 3], [0.1, 1.0, 1 / 3])
    mapio.write_correspondences(corr, tmp_path / "c.txt")
    assert mapio.read_correspondences(tmp_path / "c.txt").equals(corr)
    (tmp_path / "d.txt").write_text("0 1 0.5\n0 1 0.5\n")
    with pytest.raises(MapFormatError):
        mapio.read_correspondences(tmp_path / "d.txt")
    (tmp_path / "e.txt").write_text("0.5 1 0.5\n")
    with pytest.raises(TextFormatError):
        mapio.read_correspondences(tmp_path / "e.txt")
    mapio.write_index_list([4, 2, 9], tmp_path / "i.txt")
    np.testing.assert_array_equal(mapio.read_index_list(tmp_path / "i.txt"), [4, 2, 9])


def test_transform_documents(tmp_path, rng):
    I = SimilarityTransform.identity()
    mapio.write_transform(I, None, tmp_path / "i.json")
    doc = json.loads((tmp_path / "i.json").read_text())
    np.testing.assert_array_equal(doc["transform"]["matrix"], np.eye(4))

    T = SimilarityTransform(1.3, random_quat(rng), rng.normal(size=3))
    gt = SimilarityTransform(1.31, random_quat(rng), rng.normal(size=3))
    report = RegistrationReport(T, fine_transform=T, metrics=metrics(T, gt))
    mapio.write_transform(T, report, tmp_path / "t.json")
    T2, report2 = mapio.read_transform(tmp_path / "t.json")
    assert T2.scale == T.scale
    np.testing.assert_array_equal(T2.rotation, T.rotation)
    np.testing.assert_array_equal(T2.translation, T.translation)
    assert tuple(report2.metrics) == tuple(metrics(T, gt))
    assert mapio.read_transform(tmp_path / "i.json")[1] is None

    (tmp_path / "x.json").write_text('{"format": "something-else"}')
    with pytest.raises(MapFormatError):
        mapio.read_transform(tmp_path / "x.json")
    (tmp_path / "y.json").write_text('{"format": "splatreg-transform", "transform": {"scale": -1}}')
    with pytest.raises(MapFormatError):
        mapio.read_transform(tmp_path / "y.json")


def test_truncated_payload_message(tmp_path, rng):
    mapio.write_map(random_map(rng, n=4, dim=0, n_rest=0), tmp_path / "a.ply")
    raw = (tmp_path / "a.ply").read_bytes()
    (tmp_path / "a.ply").write_bytes(raw[:-1])
    with pytest.raises(PayloadSizeError, match="4 vertices"):
        mapio.load_ply(tmp_path / "a.ply")
