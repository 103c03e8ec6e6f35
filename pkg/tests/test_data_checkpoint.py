import json
import struct

import numpy as np
import pytest

from sharedbit.checkpoint import (
    CheckpointError,
    CorruptCheckpointError,
    TopologyMismatchError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from sharedbit.config import ConfigError, config_from_dict, load_config
from sharedbit.data import IDXError, load_dataset, load_mnist_idx, load_mnist_pair, read_idx, split, synthetic, write_idx
from sharedbit.trainer import Trainer

SMALL_MODEL = {
    "input": [1, 8, 8],
    "classes": 4,
    "layers": [{"type": "conv", "out": 4, "stride": 2}, {"type": "conv", "out": 6}, {"type": "fc", "out": 8}, {"type": "fc"}],
}


def small_cfg(**over):
    raw = {
        "model": SMALL_MODEL,
        "data": {"kind": "synthetic", "n": 512, "classes": 4, "shape": [1, 8, 8]},
        "optimizer": {"warmup_epochs": 1, "epochs": 3, "batch_size": 32},
        "schedule": {"period_epochs": 1, "duration_epochs": 1},
    }
    raw.update(over)
    return config_from_dict(raw)


def write_images(path, arr):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x803, *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def write_labels(path, arr):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x801, len(arr)))
        fh.write(arr.astype(np.uint8).tobytes())


class TestIDX:
    def test_images_and_labels(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(7, 28, 28))
        labels = rng.integers(0, 10, size=7)
        write_images(tmp_path / "i.idx", imgs)
        write_labels(tmp_path / "l.idx", labels)
        ds = load_mnist_pair(tmp_path / "i.idx", tmp_path / "l.idx")
        assert ds.x.shape == (7, 1, 28, 28) and ds.x.dtype == np.float32
        np.testing.assert_array_equal(ds.x[:, 0], imgs.astype(np.float32) / np.float32(255.0))
        np.testing.assert_array_equal(ds.y, labels)

    def test_standard_training_file_shape(self, tmp_path):
        imgs = np.zeros((60000, 28, 28), np.uint8)
        imgs[:, 14, 14] = 255
        write_images(tmp_path / "train-images-idx3-ubyte", imgs)
        x = load_mnist_idx(tmp_path / "train-images-idx3-ubyte")
        assert x.shape == (60000, 1, 28, 28)
        assert x.max() == 1.0 and x.min() == 0.0

    def test_wrong_magic_names_both(self, tmp_path):
        with open(tmp_path / "bad", "wb") as fh:
            fh.write(struct.pack(">II", 0x0D01, 1) + b"\0\0\0\0")
        with pytest.raises(IDXError, match="0x00000803.*0x00000801.*found 0x00000d01"):
            load_mnist_idx(tmp_path / "bad")
        with pytest.raises(IDXError, match="expected 0x00000803, found 0x00000801"):
            write_labels(tmp_path / "l", np.zeros(3))
            read_idx(tmp_path / "l", 0x803)

    def test_truncated_by_one_byte(self, tmp_path):
        write_images(tmp_path / "i", np.zeros((3, 4, 4)))
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-1])
        with pytest.raises(IDXError, match="payload"):
            load_mnist_idx(tmp_path / "t")
        (tmp_path / "h").write_bytes(raw[:6])
        with pytest.raises(IDXError, match="truncated"):
            load_mnist_idx(tmp_path / "h")
        (tmp_path / "e").write_bytes(b"")
        with pytest.raises(IDXError):
            load_mnist_idx(tmp_path / "e")

    def test_write_read_round_trip(self, tmp_path):
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "a", arr)
        np.testing.assert_array_equal(read_idx(tmp_path / "a"), arr)

    def test_pair_length_mismatch(self, tmp_path):
        write_images(tmp_path / "i", np.zeros((3, 4, 4)))
        write_labels(tmp_path / "l", np.zeros(2))
        with pytest.raises(IDXError):
            load_mnist_pair(tmp_path / "i", tmp_path / "l")

    def test_idx_dataset_spec(self, tmp_path):
        rng = np.random.default_rng(1)
        for name, n in (("train", 50), ("test", 10)):
            write_images(tmp_path / f"{name}-images", rng.integers(0, 256, (n, 28, 28)))
            write_labels(tmp_path / f"{name}-labels", rng.integers(0, 10, n))
        spec = {"kind": "idx", "train_images": "train-images", "train_labels": "train-labels",
                "test_images": "test-images", "test_labels": "test-labels", "val": 10}
        parts = load_dataset(spec, str(tmp_path))
        assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == (40, 10, 10)


class TestDatasets:
    def test_synthetic_deterministic(self):
        a, b = synthetic(50, seed=3), synthetic(50, seed=3)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.x.min() >= 0 and a.x.max() <= 1

    def test_split_disjoint(self):
        ds = synthetic(30)
        ds.y = np.arange(30)
        parts = split(ds, (10, 5, 15), seed=1)
        ids = np.concatenate([p.y for p in parts])
        assert sorted(ids) == list(range(30))
        with pytest.raises(ValueError):
            split(ds, (20, 20))

    def test_mnist_subset(self):
        parts = load_dataset({"kind": "mnist5k"})
        assert (len(parts["train"]), len(parts["val"]), len(parts["test"])) == (3500, 500, 1000)
        assert parts["train"].x.shape[1:] == (1, 28, 28)
        assert set(np.unique(parts["test"].y)) == set(range(10))


class TestConfig:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.bits.weight == [2, 3, 4, 5, 6]
        assert cfg.search.lam == 1.5 and cfg.schedule.epsilon == 0.25
        assert cfg.optimizer.lr == 0.04 and cfg.optimizer.weight_decay == 2.5e-5
        assert cfg.optimizer.warmup_epochs == 5

    def test_bits_sorted(self):
        assert config_from_dict({"bits": {"weight": [6, 2, 4]}}).bits.weight == [2, 4, 6]

    @pytest.mark.parametrize(
        "raw",
        [
            {"nope": 1},
            {"bits": {"weight": []}},
            {"bits": {"weight": [1, 2]}},
            {"bits": {"weight": [2, 2]}},
            {"schedule": {"epsilon": 2}},
            {"schedule": {"mode": "other"}},
            {"optimizer": {"lr": -1}},
            {"model": "resnet"},
            {"seed": "x"},
            {"data": {"kind": "idx", "train_images": "missing"}},
            {"idm": {"weight": 1, "extra": 2}},
        ],
    )
    def test_rejects(self, raw):
        with pytest.raises(ConfigError):
            config_from_dict(raw)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")


class TestCheckpoint:
    def arrays(self):
        rng = np.random.default_rng(0)
        return {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}

    def test_round_trip_bit_exact(self, tmp_path):
        arrs = self.arrays()
        save_checkpoint(tmp_path / "c", arrs, "topo", {"step": 3})
        header, back = load_checkpoint(tmp_path / "c", "topo")
        assert header["meta"] == {"step": 3}
        for k in arrs:
            assert back[k].tobytes() == arrs[k].tobytes()
        save_checkpoint(tmp_path / "d", back, "topo", header["meta"])
        assert (tmp_path / "c").read_bytes() == (tmp_path / "d").read_bytes()

    def test_header_is_one_json_line(self, tmp_path):
        save_checkpoint(tmp_path / "c", self.arrays(), "topo", {})
        line = (tmp_path / "c").read_bytes().split(b"\n", 1)[0]
        header = json.loads(line)
        assert header["version"] == 1 and header["topology_hash"] == "topo"
        assert [e["name"] for e in header["tensors"]] == ["a", "b"]

    def test_flipped_payload_byte(self, tmp_path):
        save_checkpoint(tmp_path / "c", self.arrays(), "topo", {})
        raw = bytearray((tmp_path / "c").read_bytes())
        raw[-3] ^= 0x01
        (tmp_path / "c").write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "c", "topo")

    def test_topology_refusal(self, tmp_path):
        save_checkpoint(tmp_path / "c", self.arrays(), "topo", {})
        with pytest.raises(TopologyMismatchError):
            load_checkpoint(tmp_path / "c", "other")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c", self.arrays(), "topo", {})
        line, blob = (tmp_path / "c").read_bytes().split(b"\n", 1)
        header = json.loads(line)
        header["version"] = 99
        (tmp_path / "c").write_bytes(json.dumps(header).encode() + b"\n" + blob)
        with pytest.raises(VersionMismatchError):
            load_checkpoint(tmp_path / "c")

    def test_garbage_and_missing(self, tmp_path):
        (tmp_path / "g").write_bytes(b"\x00\xff garbage")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "g")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing")


def _params(trainer):
    return [t.data.copy() for t in trainer.net.parameters()]


class TestResume:
    def test_resume_bit_identical(self, tmp_path):
        cfg = small_cfg()
        data = load_dataset(cfg.data)
        full = Trainer(cfg, data["train"])
        full.run()

        part = Trainer(small_cfg(), data["train"])
        part.run(until_epoch=1)
        part.save(tmp_path / "ckpt")
        resumed = Trainer.load(tmp_path / "ckpt", small_cfg(), data["train"])
        resumed.run()

        spe = full.steps_per_epoch
        assert resumed.losses == full.losses[spe:]
        for a, b in zip(_params(full), _params(resumed)):
            assert a.tobytes() == b.tobytes()
        assert full.mask.to_json() == resumed.mask.to_json()
        for (m1, v1), (m2, v2) in zip(full.net.bn_state(), resumed.net.bn_state()):
            assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()

    def test_checkpoint_save_load_save(self, tmp_path):
        cfg = small_cfg()
        data = load_dataset(cfg.data)
        t = Trainer(cfg, data["train"])
        t.run(until_epoch=1)
        t.save(tmp_path / "a")
        Trainer.load(tmp_path / "a", small_cfg(), data["train"]).save(tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_other_topology_refused(self, tmp_path):
        cfg = small_cfg()
        data = load_dataset(cfg.data)
        t = Trainer(cfg, data["train"])
        t.save(tmp_path / "a")
        other = small_cfg(bits={"weight": [2, 4], "activation": [2, 4]})
        with pytest.raises(TopologyMismatchError):
            Trainer.load(tmp_path / "a", other, data["train"])

    def test_log_embeds_config(self, tmp_path):
        cfg = small_cfg(optimizer={"warmup_epochs": 0, "epochs": 1, "batch_size": 64})
        data = load_dataset(cfg.data)
        Trainer(cfg, data["train"], log_path=tmp_path / "log.csv").run()
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].startswith("# config: ")
        assert json.loads(lines[0][len("# config: "):])["optimizer"]["epochs"] == 1
        assert lines[1].startswith("step,epoch,lr,mean_loss")
        assert len(lines) == 2 + 512 // 64
