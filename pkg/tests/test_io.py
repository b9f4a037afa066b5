import struct

import numpy as np
import pytest

from histoexpr.errors import FormatError, ValidationError
from histoexpr.io import (
    bmat_bytes,
    build_manifest,
    canonical_json,
    container_content_hash,
    load_manifest,
    read_bmat,
    read_container,
    read_csv_matrix,
    read_matrix,
    read_text_list,
    save_manifest,
    sha256_file,
    write_bmat,
    write_container,
    write_csv_matrix,
    write_text_list,
)


class TestBmat:
    def test_byte_layout(self, tmp_path):
        path = tmp_path / "m.bmat"
        write_bmat(path, np.array([[1.5, -2.0]], dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"BMAT"
        version, rows, cols = struct.unpack("<IQQ", raw[4:24])
        assert (version, rows, cols) == (1, 1, 2)
        assert raw[24:] == struct.pack("<2f", 1.5, -2.0)

    def test_round_trip(self, tmp_path, rng):
        mat = rng.standard_normal((17, 5)).astype(np.float32)
        path = tmp_path / "m.bmat"
        write_bmat(path, mat)
        back = read_bmat(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, mat)

    def test_zero_rows(self, tmp_path):
        path = tmp_path / "m.bmat"
        write_bmat(path, np.zeros((0, 4), dtype=np.float32))
        assert read_bmat(path).shape == (0, 4)

    def test_write_is_deterministic(self, tmp_path, rng):
        mat = rng.standard_normal((8, 3)).astype(np.float32)
        write_bmat(tmp_path / "a.bmat", mat)
        write_bmat(tmp_path / "b.bmat", mat)
        assert (tmp_path / "a.bmat").read_bytes() == (tmp_path / "b.bmat").read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.bmat"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            read_bmat(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.bmat"
        path.write_bytes(struct.pack("<4sIQQ", b"BMAT", 9, 0, 0))
        with pytest.raises(FormatError, match="version"):
            read_bmat(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.bmat"
        write_bmat(path, np.ones((2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="truncated"):
            read_bmat(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.bmat"
        write_bmat(path, np.ones((2, 2), dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            read_bmat(path)

    def test_rejects_non_finite(self, tmp_path):
        with pytest.raises(ValidationError, match="non-finite"):
            write_bmat(tmp_path / "m.bmat", np.array([[np.nan]], dtype=np.float32))

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(ValidationError, match="2-d"):
            write_bmat(tmp_path / "m.bmat", np.zeros(3, dtype=np.float32))


class TestCsv:
    def test_round_trip(self, tmp_path, rng):
        mat = (rng.standard_normal((6, 4)) * 10).astype(np.float32)
        path = tmp_path / "m.csv"
        write_csv_matrix(path, mat, columns=["a", "b", "c", "d"])
        np.testing.assert_allclose(read_csv_matrix(path), mat, rtol=1e-6)

    def test_header_skipped(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("g1,g2\n1,2\n3,4\n")
        np.testing.assert_array_equal(read_csv_matrix(path), [[1, 2], [3, 4]])

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n1,2\n3\n")
        with pytest.raises(FormatError, match="expected 2 cells"):
            read_csv_matrix(path)

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a\n1\nhello\n")
        with pytest.raises(FormatError, match="non-numeric"):
            read_csv_matrix(path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b\n")
        with pytest.raises(FormatError, match="no data rows"):
            read_csv_matrix(path)

    def test_read_matrix_dispatch(self, tmp_path):
        mat = np.array([[7.0, 8.0]], dtype=np.float32)
        write_bmat(tmp_path / "m.bmat", mat)
        write_csv_matrix(tmp_path / "m.csv", mat)
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.bmat"), mat)
        np.testing.assert_allclose(read_matrix(tmp_path / "m.csv"), mat, rtol=1e-6)


class TestTextList:
    def test_round_trip(self, tmp_path):
        items = ["gene_a", "gene_b", "gene_c"]
        path = tmp_path / "l.txt"
        write_text_list(path, items)
        assert read_text_list(path) == items

    def test_rejects_embedded_newline(self, tmp_path):
        with pytest.raises(ValidationError, match="newline"):
            write_text_list(tmp_path / "l.txt", ["a\nb"])


class TestContainer:
    def test_round_trip(self, tmp_path, rng):
        blobs = [
            ("w", rng.standard_normal((3, 4)).astype(np.float32)),
            ("b", rng.standard_normal((1, 4)).astype(np.float32)),
        ]
        path = tmp_path / "c.bin"
        digest = write_container(path, b"BLPC", {"kind": "test", "x": 3}, blobs)
        header, back = read_container(path, b"BLPC")
        assert header["kind"] == "test"
        assert header["x"] == 3
        assert header["content_hash"] == digest
        assert header["blobs"] == ["w", "b"]
        for name, mat in blobs:
            np.testing.assert_array_equal(back[name], mat)

    def test_hash_excludes_created(self, rng):
        blobs = [("w", rng.standard_normal((2, 2)).astype(np.float32))]
        base = {"kind": "t"}
        stamped = {"kind": "t", "created": "2026-01-01T00:00:00+00:00"}
        assert container_content_hash(base, blobs) == container_content_hash(stamped, blobs)

    def test_tampered_blob_detected(self, tmp_path, rng):
        path = tmp_path / "c.bin"
        write_container(
            path, b"BLIX", {"kind": "t"}, [("w", np.ones((2, 2), dtype=np.float32))]
        )
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x40
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="hash mismatch"):
            read_container(path, b"BLIX")

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        write_container(path, b"BLPC", {"kind": "t"}, [])
        with pytest.raises(FormatError, match="magic"):
            read_container(path, b"BLIX")

    def test_duplicate_blob_names(self, tmp_path):
        mat = np.ones((1, 1), dtype=np.float32)
        with pytest.raises(ValidationError, match="duplicate"):
            write_container(tmp_path / "c.bin", b"BLPC", {}, [("w", mat), ("w", mat)])

    def test_canonical_json_is_sorted(self):
        assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


class TestManifest:
    def _write_files(self, tmp_path):
        write_bmat(tmp_path / "x.bmat", np.ones((2, 3), dtype=np.float32))
        write_text_list(tmp_path / "g.txt", ["g1", "g2", "g3"])
        return {"features": "x.bmat", "gene_names": "g.txt"}

    def test_round_trip_and_verify(self, tmp_path):
        files = self._write_files(tmp_path)
        manifest = build_manifest(tmp_path, files, provenance={"normalized": False})
        save_manifest(tmp_path / "manifest.json", manifest)
        back = load_manifest(tmp_path / "manifest.json")
        assert back.provenance == {"normalized": False}
        assert back.files["features"].format == "bmat"
        assert back.files["features"].sha256 == sha256_file(tmp_path / "x.bmat")
        assert back.resolve("features") == tmp_path / "x.bmat"

    def test_hash_mismatch_on_load(self, tmp_path):
        files = self._write_files(tmp_path)
        save_manifest(tmp_path / "manifest.json", build_manifest(tmp_path, files))
        write_bmat(tmp_path / "x.bmat", np.zeros((2, 3), dtype=np.float32))
        with pytest.raises(FormatError, match="hash mismatch"):
            load_manifest(tmp_path / "manifest.json")

    def test_missing_file_on_load(self, tmp_path):
        files = self._write_files(tmp_path)
        save_manifest(tmp_path / "manifest.json", build_manifest(tmp_path, files))
        (tmp_path / "g.txt").unlink()
        with pytest.raises(FormatError, match="missing file"):
            load_manifest(tmp_path / "manifest.json")

    def test_missing_file_on_build(self, tmp_path):
        with pytest.raises(FormatError, match="missing"):
            build_manifest(tmp_path, {"features": "ghost.bmat"})

    def test_not_a_manifest(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text('{"kind": "something-else"}')
        with pytest.raises(FormatError, match="not a"):
            load_manifest(path)
