import numpy as np
import pytest
from PIL import Image

from allfuse.errors import ConfigError, DataError, DecodeError
from allfuse.ingest import (
    DatasetIndex,
    decode_afim,
    encode_afim,
    index_from_manifest,
    load_image,
    manifest_rows,
    read_manifest,
    scan_dataset,
    split_dataset,
    write_afim,
    write_manifest,
)


def _make_dataset(root, n0, n1, names=("notall", "all"), fmt="afim"):
    for name, n in zip(names, (n0, n1)):
        d = root / name
        d.mkdir(parents=True)
        for i in range(n):
            px = np.full((4, 5, 3), (i * 7) % 256, dtype=np.uint8)
            if fmt == "afim":
                write_afim(d / f"img{i:03d}.raw", px)
            else:
                Image.fromarray(px).save(d / f"img{i:03d}.png")
    return root


def _fake_index(n0, n1):
    entries = [(f"/x/{i:04d}", 0) for i in range(n0)] + [(f"/y/{i:04d}", 1) for i in range(n1)]
    return DatasetIndex(entries=entries, class_names=["notall", "all"])


class TestLoadImage:
    def test_white_png(self, tmp_path):
        Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(tmp_path / "w.png")
        out = load_image(tmp_path / "w.png")
        assert out.shape == (2, 2, 3) and out.dtype == np.uint8
        assert (out == 255).all()

    def test_grayscale_replicated(self, tmp_path):
        g = np.arange(12, dtype=np.uint8).reshape(3, 4)
        Image.fromarray(g, mode="L").save(tmp_path / "g.png")
        out = load_image(tmp_path / "g.png")
        for c in range(3):
            np.testing.assert_array_equal(out[:, :, c], g)

    def test_jpeg(self, tmp_path):
        Image.fromarray(np.full((8, 8, 3), 128, np.uint8)).save(tmp_path / "a.jpg")
        assert load_image(tmp_path / "a.jpg").shape == (8, 8, 3)

    def test_corrupt_file_named(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"\x89PNG\r\n\x1a\nthis is not a png")
        with pytest.raises(DecodeError, match="bad.png"):
            load_image(p)

    def test_afim_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, size=(3, 7, 3), dtype=np.uint8)
        blob = encode_afim(px)
        assert blob[:4] == b"AFIM"
        assert int.from_bytes(blob[4:8], "little") == 3
        assert int.from_bytes(blob[8:12], "little") == 7
        np.testing.assert_array_equal(decode_afim(blob), px)
        write_afim(tmp_path / "x.raw", px)
        np.testing.assert_array_equal(load_image(tmp_path / "x.raw"), px)

    def test_truncated_afim(self, tmp_path):
        blob = encode_afim(np.zeros((2, 2, 3), np.uint8))
        (tmp_path / "t.raw").write_bytes(blob[:-1])
        with pytest.raises(DecodeError, match="t.raw"):
            load_image(tmp_path / "t.raw")


class TestScan:
    def test_reference_counts(self, tmp_path):
        idx = scan_dataset(_make_dataset(tmp_path, 59, 49), ("notall", "all"))
        assert len(idx) == 108
        assert int((idx.labels() == 0).sum()) == 59
        paths = [p.as_posix() for p, _ in idx.entries]
        assert paths == sorted(paths)

    def test_minimal(self, tmp_path):
        idx = scan_dataset(_make_dataset(tmp_path, 1, 1, fmt="png"))
        assert sorted(idx.labels().tolist()) == [0, 1]

    def test_empty_class(self, tmp_path):
        _make_dataset(tmp_path, 3, 0)
        with pytest.raises(DataError, match="class 'all' has zero samples"):
            scan_dataset(tmp_path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(ConfigError):
            scan_dataset(tmp_path)

    def test_undecodable_named(self, tmp_path):
        _make_dataset(tmp_path, 2, 2)
        (tmp_path / "all" / "zzz.png").write_bytes(b"garbage")
        with pytest.raises(DecodeError, match="zzz.png"):
            scan_dataset(tmp_path)


class TestSplit:
    def test_idb1_test_size(self):
        s = split_dataset(_fake_index(59, 49), seed=7)
        assert len(s.test) == 22
        labels = _fake_index(59, 49).labels()
        assert int((labels[s.test] == 0).sum()) == 12  # matches 12 not-ALL / 10 ALL
        assert len(s.validation) == round(0.2 * 86)

    @pytest.mark.parametrize("seed", [0, 1, 99])
    def test_idb2_test_size(self, seed):
        assert len(split_dataset(_fake_index(130, 130), seed).test) == 52

    def test_deterministic(self):
        idx = _fake_index(30, 21)
        assert split_dataset(idx, 3) == split_dataset(idx, 3)
        assert split_dataset(idx, 3) != split_dataset(idx, 4)

    @pytest.mark.parametrize("n0,n1", [(5, 5), (59, 49), (130, 130), (500, 500), (17, 83)])
    def test_partition_and_stratification(self, n0, n1):
        idx = _fake_index(n0, n1)
        s = split_dataset(idx, 11)
        all_ids = s.train + s.validation + s.test
        assert sorted(all_ids) == list(range(n0 + n1))
        n = n0 + n1
        assert len(s.test) == int(np.floor(0.2 * n + 0.5))
        labels = idx.labels()
        for part in (s.train, s.validation, s.test):
            got0 = int((labels[part] == 0).sum())
            assert abs(got0 - len(part) * n0 / n) <= 1.0

    def test_too_few_per_class(self):
        with pytest.raises(DataError, match="stratify"):
            split_dataset(_fake_index(4, 10), 0)


class TestManifest:
    def test_round_trip_bit_exact(self, tmp_path):
        root = _make_dataset(tmp_path / "data", 6, 7)
        idx = scan_dataset(root)
        split = split_dataset(idx, 5)
        m = tmp_path / "work" / "manifest.csv"
        m.parent.mkdir()
        write_manifest(m, manifest_rows(idx, split))
        first = m.read_bytes()
        assert first.startswith(b"path,label,split\n")
        rows = read_manifest(m)
        again = index_from_manifest(rows, idx.class_names)
        assert [(p.resolve(), l) for p, l in again.entries] == [(p.resolve(), l) for p, l in idx.entries]
        write_manifest(m, rows)
        assert m.read_bytes() == first

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b,c\n")
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.csv")
