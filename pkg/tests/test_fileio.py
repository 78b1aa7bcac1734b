"""Round-trip and corruption tests for every on-disk format."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatkin.core import GaussianSet, Role, quat_normalize
from splatkin.errors import FormatError, InvalidArgumentError, TruncationError
from splatkin.fileio import (
    attach_labels,
    read_config,
    read_gmap,
    read_gset,
    read_labels,
    read_mapping,
    read_pgm,
    read_ppm,
    read_trace,
    write_gmap,
    write_gset,
    write_labels,
    write_mapping,
    write_pgm,
    write_ppm,
    write_trace,
)
from splatkin.morton import AttributeMap, MortonMapping
from splatkin.pipeline import Trace

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def _random_set(rng, n=5, channels=3, labels=False, role=Role.APPEARANCE):
    kw = {}
    if labels:
        kw["labels"] = rng.integers(0, 2, size=n)
        kw["label_names"] = ("left", "right")
    return GaussianSet(
        positions=rng.normal(size=(n, 3)),
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=rng.normal(size=(n, 3)),
        opacities=rng.uniform(0.0, 1.0, size=n),
        colors=rng.uniform(0.0, 1.0, size=(n, channels)),
        role=role,
        frame=4,
        **kw,
    )


class TestKernelSetFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        gset = _random_set(np.random.default_rng(0), n=7)
        path = tmp_path / "a.gset"
        write_gset(path, gset)
        back = read_gset(path)
        assert np.array_equal(back.positions, gset.positions)
        assert np.array_equal(back.rotations, gset.rotations)
        assert np.array_equal(back.log_scales, gset.log_scales)
        assert np.array_equal(back.opacities, gset.opacities)
        assert np.array_equal(back.colors, gset.colors)
        assert back.role is Role.APPEARANCE
        assert back.frame == 4
        assert back.labels is None

    def test_round_trip_with_labels(self, tmp_path):
        gset = _random_set(np.random.default_rng(1), n=6, labels=True)
        path = tmp_path / "b.gset"
        write_gset(path, gset)
        back = read_gset(path, label_names=("left", "right"))
        assert np.array_equal(back.labels, gset.labels)
        assert back.label_names == ("left", "right")

    @given(value=finite)
    @settings(max_examples=60, deadline=None)
    def test_any_finite_float_survives(self, tmp_path_factory, value):
        # repr-formatted floats must parse back to the identical bits,
        # including subnormals and near-overflow magnitudes
        tmp = tmp_path_factory.mktemp("gs")
        gset = GaussianSet(
            positions=np.full((1, 3), value),
            rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
            log_scales=np.full((1, 3), value),
            opacities=np.array([0.5]),
            colors=np.full((1, 3), value),
            role=Role.MOTION,
        )
        path = tmp / "v.gset"
        write_gset(path, gset)
        back = read_gset(path)
        assert np.array_equal(back.positions, gset.positions)
        assert np.array_equal(back.log_scales, gset.log_scales)

    def test_motion_role_round_trip(self, tmp_path):
        gset = _random_set(np.random.default_rng(2), role=Role.MOTION)
        write_gset(tmp_path / "m.gset", gset)
        assert read_gset(tmp_path / "m.gset").role is Role.MOTION

    def test_trailing_newlines_tolerated(self, tmp_path):
        gset = _random_set(np.random.default_rng(3), n=2)
        path = tmp_path / "c.gset"
        write_gset(path, gset)
        with open(path, "a") as fh:
            fh.write("\n\n")
        assert len(read_gset(path)) == 2

    def test_interior_blank_line_rejected(self, tmp_path):
        gset = _random_set(np.random.default_rng(4), n=3)
        path = tmp_path / "d.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        lines.insert(6, "")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="blank line"):
            read_gset(path)

    def test_truncated_records(self, tmp_path):
        gset = _random_set(np.random.default_rng(5), n=4)
        path = tmp_path / "e.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(TruncationError, match="expected 4 records"):
            read_gset(path)

    def test_extra_record_rejected(self, tmp_path):
        gset = _random_set(np.random.default_rng(6), n=3)
        path = tmp_path / "f.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        extra = lines[-1].split()
        extra[0] = "3"
        path.write_text("\n".join(lines + [" ".join(extra)]) + "\n")
        with pytest.raises(FormatError, match="trailing content"):
            read_gset(path)

    def test_out_of_order_index(self, tmp_path):
        gset = _random_set(np.random.default_rng(7), n=3)
        path = tmp_path / "g.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        lines[6], lines[7] = lines[7], lines[6]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="out of order"):
            read_gset(path)

    def test_bad_float_token(self, tmp_path):
        gset = _random_set(np.random.default_rng(8), n=2)
        path = tmp_path / "h.gset"
        write_gset(path, gset)
        text = path.read_text().splitlines()
        tok = text[5].split()
        tok[2] = "bogus"
        text[5] = " ".join(tok)
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(FormatError, match="bad float"):
            read_gset(path)

    def test_nan_token_rejected(self, tmp_path):
        gset = _random_set(np.random.default_rng(9), n=2)
        path = tmp_path / "i.gset"
        write_gset(path, gset)
        text = path.read_text().splitlines()
        tok = text[5].split()
        tok[1] = "nan"
        text[5] = " ".join(tok)
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(FormatError, match="non-finite"):
            read_gset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "j.gset"
        path.write_text("GSET 2\nrole motion\n")
        with pytest.raises(FormatError, match="GSET 1"):
            read_gset(path)

    def test_unknown_role(self, tmp_path):
        gset = _random_set(np.random.default_rng(10), n=2)
        path = tmp_path / "k.gset"
        write_gset(path, gset)
        text = path.read_text().replace("role appearance", "role banana")
        path.write_text(text)
        with pytest.raises(FormatError, match="unknown role"):
            read_gset(path)

    def test_missing_header_line(self, tmp_path):
        path = tmp_path / "l.gset"
        path.write_text("GSET 1\nrole motion\n")
        with pytest.raises(TruncationError, match="missing header"):
            read_gset(path)

    def test_label_column_all_or_none(self, tmp_path):
        gset = _random_set(np.random.default_rng(11), n=3, labels=True)
        path = tmp_path / "m.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        lines[6] = " ".join(lines[6].split()[:-1])  # drop one label token
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="fields"):
            read_gset(path)

    def test_invalid_quaternion_reported_with_path(self, tmp_path):
        gset = _random_set(np.random.default_rng(12), n=2)
        path = tmp_path / "n.gset"
        write_gset(path, gset)
        lines = path.read_text().splitlines()
        tok = lines[5].split()
        tok[4:8] = ["0.0", "0.0", "0.0", "0.0"]  # zero-norm rotation
        lines[5] = " ".join(tok)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError):
            read_gset(path)

    def test_refuses_to_write_non_finite(self, tmp_path):
        gset = _random_set(np.random.default_rng(13), n=2)
        bad = gset.positions.copy()
        bad[0, 0] = np.inf
        with pytest.raises(InvalidArgumentError, match="non-finite"):
            write_gset(tmp_path / "o.gset", gset.replace(positions=bad))


class TestLabelFiles:
    def test_round_trip(self, tmp_path):
        names = ["upper", "lower", "upper", "tip"]
        write_labels(tmp_path / "l.csv", names)
        assert read_labels(tmp_path / "l.csv") == names

    def test_bad_header(self, tmp_path):
        (tmp_path / "l.csv").write_text("idx,lbl\n0,a\n")
        with pytest.raises(FormatError, match="header"):
            read_labels(tmp_path / "l.csv")

    def test_out_of_order(self, tmp_path):
        (tmp_path / "l.csv").write_text("index,label\n0,a\n2,b\n")
        with pytest.raises(FormatError, match="out of order"):
            read_labels(tmp_path / "l.csv")

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "l.csv").write_text("index,label\n")
        with pytest.raises(FormatError, match="no label rows"):
            read_labels(tmp_path / "l.csv")

    def test_comma_in_name_refused_on_write(self, tmp_path):
        with pytest.raises(InvalidArgumentError, match="bad label name"):
            write_labels(tmp_path / "l.csv", ["a,b"])

    def test_attach_labels_sorted_unique(self):
        gset = _random_set(np.random.default_rng(14), n=4)
        out = attach_labels(gset, ["zeta", "alpha", "zeta", "mid"])
        assert out.label_names == ("alpha", "mid", "zeta")
        assert list(out.labels) == [2, 0, 2, 1]

    def test_attach_labels_length_mismatch(self):
        gset = _random_set(np.random.default_rng(15), n=4)
        with pytest.raises(InvalidArgumentError, match="4 kernels"):
            attach_labels(gset, ["a", "b"])


class TestAttributeMapFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(16)
        amap = AttributeMap(data=rng.normal(size=(6, 5, 4)).astype(np.float32))
        write_gmap(tmp_path / "a.gmap", amap)
        back = read_gmap(tmp_path / "a.gmap")
        assert back.data.dtype == np.float32
        assert np.array_equal(back.data, amap.data)
        assert back.resolution == (5, 6)

    def test_header_layout(self, tmp_path):
        amap = AttributeMap(data=np.zeros((2, 3, 1), dtype=np.float32))
        write_gmap(tmp_path / "b.gmap", amap)
        blob = (tmp_path / "b.gmap").read_bytes()
        assert blob[:4] == b"GMAP"
        assert struct.unpack_from("<IIII", blob, 4) == (1, 3, 2, 1)
        assert len(blob) == 20 + 4 * 3 * 2 * 1

    def test_truncated_header(self, tmp_path):
        (tmp_path / "c.gmap").write_bytes(b"GMAP\x01\x00")
        with pytest.raises(TruncationError, match="20 bytes"):
            read_gmap(tmp_path / "c.gmap")

    def test_truncated_payload(self, tmp_path):
        amap = AttributeMap(data=np.ones((2, 2, 2), dtype=np.float32))
        write_gmap(tmp_path / "d.gmap", amap)
        blob = (tmp_path / "d.gmap").read_bytes()
        (tmp_path / "d.gmap").write_bytes(blob[:-3])
        with pytest.raises(TruncationError, match="expected"):
            read_gmap(tmp_path / "d.gmap")

    def test_trailing_bytes(self, tmp_path):
        amap = AttributeMap(data=np.ones((2, 2, 2), dtype=np.float32))
        write_gmap(tmp_path / "e.gmap", amap)
        with open(tmp_path / "e.gmap", "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(FormatError, match="trailing"):
            read_gmap(tmp_path / "e.gmap")

    def test_bad_magic(self, tmp_path):
        header = struct.pack("<4sIIII", b"PAMG", 1, 1, 1, 1) + b"\x00" * 4
        (tmp_path / "f.gmap").write_bytes(header)
        with pytest.raises(FormatError, match="magic"):
            read_gmap(tmp_path / "f.gmap")

    def test_bad_version(self, tmp_path):
        header = struct.pack("<4sIIII", b"GMAP", 9, 1, 1, 1) + b"\x00" * 4
        (tmp_path / "g.gmap").write_bytes(header)
        with pytest.raises(FormatError, match="version"):
            read_gmap(tmp_path / "g.gmap")

    def test_non_finite_payload_rejected(self, tmp_path):
        payload = struct.pack("<f", float("nan"))
        blob = struct.pack("<4sIIII", b"GMAP", 1, 1, 1, 1) + payload
        (tmp_path / "h.gmap").write_bytes(blob)
        with pytest.raises(FormatError, match="non-finite"):
            read_gmap(tmp_path / "h.gmap")

    def test_refuses_non_finite_write(self, tmp_path):
        data = np.zeros((1, 1, 1), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(InvalidArgumentError, match="non-finite"):
            write_gmap(tmp_path / "i.gmap", AttributeMap(data=data))


class TestMappingFiles:
    def test_round_trip(self, tmp_path):
        uv = np.array([[0, 0], [2, 1], [1, 3]], dtype=np.int64)
        mapping = MortonMapping(resolution=(3, 4), uv=uv, valid_count=3)
        write_mapping(tmp_path / "m.txt", mapping)
        back = read_mapping(tmp_path / "m.txt", resolution=(3, 4))
        assert np.array_equal(back.uv, uv)
        assert back.resolution == (3, 4)
        assert len(back) == 3

    def test_bad_field_count(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1\n")
        with pytest.raises(FormatError, match="index u v"):
            read_mapping(tmp_path / "m.txt", resolution=(4, 4))

    def test_out_of_order(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 0 0\n2 1 1\n")
        with pytest.raises(FormatError, match="out of order"):
            read_mapping(tmp_path / "m.txt", resolution=(4, 4))

    def test_coordinates_validated_against_resolution(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 5 0\n")
        with pytest.raises(FormatError, match="outside"):
            read_mapping(tmp_path / "m.txt", resolution=(4, 4))

    def test_duplicate_pixel_rejected(self, tmp_path):
        (tmp_path / "m.txt").write_text("0 1 1\n1 1 1\n")
        with pytest.raises(FormatError, match="injective"):
            read_mapping(tmp_path / "m.txt", resolution=(4, 4))

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "m.txt").write_text("\n")
        with pytest.raises(FormatError, match="empty"):
            read_mapping(tmp_path / "m.txt", resolution=(4, 4))


class TestImageFiles:
    def test_ppm_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(17)
        img = rng.uniform(0.0, 1.0, size=(5, 7, 3))
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        # oracle: round half up to 8 bits, then rescale
        expect = np.floor(img * 255.0 + 0.5) / 255.0
        assert back.shape == (5, 7, 3)
        assert np.allclose(back, expect, atol=1e-12)

    def test_pgm_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(18)
        img = rng.uniform(0.0, 1.0, size=(4, 6))
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        expect = np.floor(img * 255.0 + 0.5) / 255.0
        assert back.shape == (4, 6)
        assert np.allclose(back, expect, atol=1e-12)

    def test_values_clamped(self, tmp_path):
        img = np.array([[-0.5, 2.0]])
        write_pgm(tmp_path / "b.pgm", img)
        back = read_pgm(tmp_path / "b.pgm")
        assert back[0, 0] == 0.0
        assert back[0, 1] == 1.0

    def test_half_rounds_up(self, tmp_path):
        # 127.5/255 quantizes to 128, not 127
        write_pgm(tmp_path / "c.pgm", np.array([[127.5 / 255.0]]))
        blob = (tmp_path / "c.pgm").read_bytes()
        assert blob[-1] == 128

    def test_ppm_bad_magic(self, tmp_path):
        (tmp_path / "d.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError, match="magic"):
            read_ppm(tmp_path / "d.ppm")

    def test_bad_maxval(self, tmp_path):
        (tmp_path / "e.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(FormatError, match="maxval"):
            read_pgm(tmp_path / "e.pgm")

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "f.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x00")
        with pytest.raises(TruncationError, match="payload"):
            read_pgm(tmp_path / "f.pgm")

    def test_trailing_payload(self, tmp_path):
        (tmp_path / "g.pgm").write_bytes(b"P5\n1 1\n255\n\x00\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_pgm(tmp_path / "g.pgm")

    def test_wrong_shape_refused(self, tmp_path):
        with pytest.raises(InvalidArgumentError, match="H,W,3"):
            write_ppm(tmp_path / "h.ppm", np.zeros((2, 2)))


class TestConfigFiles:
    def test_parses_known_keys(self, tmp_path):
        (tmp_path / "c.cfg").write_text(
            "# tracker settings\n"
            "k_neighbors = 6\n"
            "l = 0.02\n"
            "\n"
            "lambda_iso=0.5\n"
            "seed=3\n"
        )
        out = read_config(tmp_path / "c.cfg")
        assert out == {"k_neighbors": 6, "l": 0.02, "lambda_iso": 0.5, "seed": 3}
        assert isinstance(out["k_neighbors"], int)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("velocity=3\n")
        with pytest.raises(FormatError, match="unknown key"):
            read_config(tmp_path / "c.cfg")

    def test_duplicate_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed=1\nseed=2\n")
        with pytest.raises(FormatError, match="duplicate"):
            read_config(tmp_path / "c.cfg")

    def test_empty_value(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed=\n")
        with pytest.raises(FormatError, match="empty value"):
            read_config(tmp_path / "c.cfg")

    def test_missing_equals(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed 4\n")
        with pytest.raises(FormatError, match="key=value"):
            read_config(tmp_path / "c.cfg")

    def test_int_key_rejects_float(self, tmp_path):
        (tmp_path / "c.cfg").write_text("k_neighbors=2.5\n")
        with pytest.raises(FormatError, match="bad integer"):
            read_config(tmp_path / "c.cfg")

    def test_quant_bits_range(self, tmp_path):
        (tmp_path / "c.cfg").write_text("quant_bits=22\n")
        with pytest.raises(FormatError, match=r"\[1, 21\]"):
            read_config(tmp_path / "c.cfg")

    def test_length_scale_must_be_positive(self, tmp_path):
        (tmp_path / "c.cfg").write_text("l=0.0\n")
        with pytest.raises(FormatError, match="positive"):
            read_config(tmp_path / "c.cfg")

    def test_negative_seed_rejected(self, tmp_path):
        (tmp_path / "c.cfg").write_text("seed=-1\n")
        with pytest.raises(FormatError, match=">= 0"):
            read_config(tmp_path / "c.cfg")


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        trace = Trace(columns=("iteration", "e_data", "total"))
        trace.record(0, [1.5, 2.5])
        trace.record(1, [0.25, 1.0])
        write_trace(tmp_path / "t.csv", trace)
        columns, rows = read_trace(tmp_path / "t.csv")
        assert columns == ("iteration", "e_data", "total")
        assert rows == [(0, 1.5, 2.5), (1, 0.25, 1.0)]

    def test_field_count_mismatch(self, tmp_path):
        (tmp_path / "t.csv").write_text("iteration,total\n0,1.0,2.0\n")
        with pytest.raises(FormatError, match="expected 2 fields"):
            read_trace(tmp_path / "t.csv")

    def test_empty_rejected(self, tmp_path):
        (tmp_path / "t.csv").write_text("")
        with pytest.raises(FormatError, match="empty"):
            read_trace(tmp_path / "t.csv")
