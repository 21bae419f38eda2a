import json
import struct

import numpy as np
import pytest

from rcg.data import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    DatasetSpec,
    gen_synthetic_mixture,
    gen_synthetic_shapes,
    load_dataset,
    load_mnist_idx,
    render_shape,
    split,
    write_idx,
)
from rcg.errors import ConfigError, FormatError
from rcg.io import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    file_hash,
    image_grid,
    load_checkpoint,
    load_rep_store,
    read_pgm,
    save_checkpoint,
    save_rep_store,
    write_pgm,
)


def _tensors():
    rng = np.random.default_rng(0)
    return {"b.W": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(4).astype(np.float32),
            "labels": np.array([0, 2, 1], dtype=np.int32)}


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = {"kind": "test", "nested": {"x": [1, 2]}, "f": 0.1}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, cfg, _tensors())
        back = load_checkpoint(path)
        assert back.config == cfg
        for k, v in _tensors().items():
            assert back.tensors[k].dtype == v.dtype
            assert back.tensors[k].tobytes() == v.tobytes()
        # re-saving the loaded checkpoint reproduces the file exactly
        save_checkpoint(tmp_path / "m2.ckpt", back.config, back.tensors)
        assert file_hash(path) == file_hash(tmp_path / "m2.ckpt")

    def test_header_length_field(self):
        data = encode_checkpoint({"k": 1}, _tensors())
        assert data[:8] == MAGIC
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        assert header["version"] == 1
        offsets = [e["offset"] for e in header["tensors"].values()]
        assert offsets == sorted(offsets) and offsets[0] == 0

    def test_payload_little_endian(self):
        data = encode_checkpoint({}, {"x": np.array([1.0], dtype=np.float32)})
        assert data[-4:] == struct.pack("<f", 1.0)

    def test_truncation_names_tensor(self):
        data = encode_checkpoint({}, _tensors())
        with pytest.raises(FormatError, match="'labels'"):
            decode_checkpoint(data[:-2])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_checkpoint(encode_checkpoint({}, _tensors()) + b"\0")

    def test_bad_magic(self):
        data = encode_checkpoint({}, _tensors())
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"RCGCKPT2" + data[8:])

    def test_version_mismatch(self):
        data = encode_checkpoint({}, {})
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        header["version"] = 2
        hb = json.dumps(header).encode()
        with pytest.raises(FormatError, match="version"):
            decode_checkpoint(MAGIC + struct.pack("<I", len(hb)) + hb)

    def test_offset_mismatch(self):
        data = encode_checkpoint({}, {"x": np.zeros(2, np.float32)})
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        header["tensors"]["x"]["offset"] = 4
        hb = json.dumps(header).encode()
        with pytest.raises(FormatError, match="offset"):
            decode_checkpoint(MAGIC + struct.pack("<I", len(hb)) + hb + data[12 + hlen:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "absent.ckpt")


def test_rep_store_round_trip(tmp_path):
    reps = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    labels = np.array([0, 1, 1, 0, 2])
    save_rep_store(tmp_path / "r.rcg", reps, labels, {"encoder": "abc"})
    r, lab, cfg = load_rep_store(tmp_path / "r.rcg")
    assert r.tobytes() == reps.tobytes()
    np.testing.assert_array_equal(lab, labels)
    assert cfg["encoder"] == "abc" and cfg["kind"] == "rep_store"


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.arange(12, dtype=np.float64).reshape(3, 4) * 20 / 255.0
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n") and len(raw) == 11 + 12

    def test_quantization(self, tmp_path):
        write_pgm(tmp_path / "q.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
        assert (tmp_path / "q.pgm").read_bytes()[-4:] == bytes([0, 128, 255, 255])

    def test_grid(self):
        g = image_grid(np.zeros((3, 2, 2)), cols=2, pad=1)
        assert g.shape == (5, 5)
        assert g[2].min() == 1.0 and g[:, 2].min() == 1.0
        assert g[3:, 3:].min() == 1.0  # empty slot keeps the pad value

    def test_rejects_ascii(self, tmp_path):
        (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(FormatError):
            read_pgm(tmp_path / "b.pgm")


class TestIdx:
    def _images(self, tmp_path, magic=IDX_IMAGES_MAGIC, payload=bytes([0, 128, 255, 64]), n=1):
        path = tmp_path / "img.idx"
        path.write_bytes(struct.pack(">IIII", magic, n, 2, 2) + payload)
        return path

    def test_crafted_file(self, tmp_path):
        ds = load_mnist_idx(self._images(tmp_path))
        np.testing.assert_array_equal(ds.images[0], [[0.0, 128 / 255], [1.0, 64 / 255]])
        assert np.all(ds.labels == -1)

    @pytest.mark.parametrize("magic", [0x00000802, 0x00000801, 0x03080000, 0])
    def test_wrong_magic(self, tmp_path, magic):
        with pytest.raises(FormatError, match="magic"):
            load_mnist_idx(self._images(tmp_path, magic=magic))

    def test_truncated(self, tmp_path):
        with pytest.raises(FormatError, match="truncated"):
            load_mnist_idx(self._images(tmp_path, payload=bytes(3)))
        short = tmp_path / "short.idx"
        short.write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC))
        with pytest.raises(FormatError, match="truncated"):
            load_mnist_idx(short)

    def test_count_mismatch(self, tmp_path):
        labels = tmp_path / "lab.idx"
        write_idx(labels, np.array([1, 2]), IDX_LABELS_MAGIC)
        with pytest.raises(FormatError, match="1 images but 2 labels"):
            load_mnist_idx(self._images(tmp_path), labels)

    def test_write_read_back(self, tmp_path):
        imgs = np.random.default_rng(0).integers(0, 256, (3, 4, 5))
        write_idx(tmp_path / "i.idx", imgs, IDX_IMAGES_MAGIC)
        write_idx(tmp_path / "l.idx", [7, 8, 9], IDX_LABELS_MAGIC)
        ds = load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        np.testing.assert_array_equal(np.round(ds.images * 255), imgs)
        np.testing.assert_array_equal(ds.labels, [7, 8, 9])


class TestSynthetic:
    def test_deterministic(self):
        a, b = gen_synthetic_shapes(3, 10, 12, seed=4), gen_synthetic_shapes(3, 10, 12, seed=4)
        assert a.images.tobytes() == b.images.tobytes()
        assert not np.array_equal(a.images, gen_synthetic_shapes(3, 10, 12, seed=5).images)

    def test_labels_and_range(self):
        ds = gen_synthetic_shapes(4, 5, 10, seed=0)
        assert ds.images.shape == (20, 10, 10)
        np.testing.assert_array_equal(np.bincount(ds.labels), [5, 5, 5, 5])
        assert ds.images.min() == 0.0 and ds.images.max() <= 1.0

    def test_histogram_regenerated(self):
        a, b = gen_synthetic_shapes(3, 20, 16, seed=9), gen_synthetic_shapes(3, 20, 16, seed=9)
        np.testing.assert_array_equal(np.histogram(a.images, 32, (0, 1))[0],
                                      np.histogram(b.images, 32, (0, 1))[0])

    @pytest.mark.parametrize("kind", ["disk", "square", "cross", "ring"])
    def test_centred_rotation_symmetry(self, kind):
        img = render_shape(kind, 16, 7.5, 7.5, 5.0, 0.8)
        np.testing.assert_array_equal(np.rot90(img), img)
        assert img.max() == 0.8

    def test_centred_disk_class(self):
        ds = gen_synthetic_shapes(1, 5, 16, seed=1, jitter=0.0)
        for img in ds.images:
            np.testing.assert_array_equal(np.rot90(img), img)

    def test_errors(self):
        with pytest.raises(ConfigError):
            gen_synthetic_shapes(3, 1, 7)
        with pytest.raises(ConfigError):
            gen_synthetic_shapes(5, 1, 16)

    def test_mixture(self):
        ds = gen_synthetic_mixture(4000, num_modes=8, seed=0)
        assert ds.images.shape == (4000, 2)
        radii = np.linalg.norm(ds.images, axis=1)
        assert abs(radii.mean() - 2.0) < 0.05
        assert set(np.unique(ds.labels)) == set(range(8))


def test_split_deterministic_and_disjoint():
    from rcg.data import Dataset

    ds = Dataset(np.zeros((20, 2)), np.arange(20))
    tr, ho = split(ds, 0.25, seed=3)
    tr2, ho2 = split(ds, 0.25, seed=3)
    assert len(tr) == 15 and len(ho) == 5
    np.testing.assert_array_equal(tr.labels, tr2.labels)
    assert sorted(np.concatenate([tr.labels, ho.labels])) == list(range(20))


def test_load_dataset_spec():
    spec = DatasetSpec(num_classes=2, items_per_class=3, image_size=8, seed=1, jitter=0.0,
                       radius_range=[2, 3])
    assert spec.radius_range == (2.0, 3.0)
    ds = load_dataset(spec)
    np.testing.assert_array_equal(
        ds.images, gen_synthetic_shapes(2, 3, 8, 1, 0.0, (2.0, 3.0)).images)
    with pytest.raises(ConfigError):
        DatasetSpec(kind="cifar")
