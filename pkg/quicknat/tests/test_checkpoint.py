import numpy as np
import pytest

from quicknat.core.exceptions import DataError
from quicknat.engine.tensor import Tensor
from quicknat.models.network import NetworkPreset
from quicknat.models.training import OptimizerState
from quicknat.models.volumes import LabelSpace, View
from quicknat.services.checkpoint_service import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from quicknat.services.network_service import ViewNetwork, forward, init_params

SPACE = LabelSpace.phantom(4)


def _trained_net(dtype=np.float32):
    preset = NetworkPreset.for_view("miniature", View.SAGITTAL, SPACE, num_channels=4)
    net = ViewNetwork(init_params(5, preset, dtype=dtype), View.SAGITTAL)
    forward(net.train(), Tensor(np.random.default_rng(0).normal(size=(2, 1, 16, 16)).astype(dtype)))
    return net.eval()


def test_round_trip_is_bit_exact(tmp_path):
    net = _trained_net()
    velocity = {name: np.full(t.shape, 0.25, dtype=t.dtype) for name, t in net.params}
    optimizer = OptimizerState(lr=0.01, velocity=velocity, steps=17)
    path = save_checkpoint(net, tmp_path / "finetune_sagittal.ckpt", optimizer, stage="finetune", label_space="phantom", label_space_classes=4)

    loaded = load_checkpoint(path)
    assert loaded.network.view is View.SAGITTAL
    assert loaded.network.params.preset == net.params.preset
    for name, tensor in net.params:
        restored = loaded.network.params[name].data
        assert restored.dtype == tensor.data.dtype
        np.testing.assert_array_equal(restored, tensor.data)
    for name, buffer in net.params.buffers().items():
        np.testing.assert_array_equal(loaded.network.params.buffers()[name], buffer)
    assert loaded.optimizer.lr == 0.01
    assert loaded.optimizer.steps == 17
    assert loaded.optimizer.velocity.keys() == velocity.keys()
    for name, value in velocity.items():
        np.testing.assert_array_equal(loaded.optimizer.velocity[name], value)
    assert loaded.meta["stage"] == "finetune"
    assert loaded.label_space == SPACE


def test_float64_tensors_keep_their_dtype(tmp_path):
    net = _trained_net(np.float64)
    loaded = load_checkpoint(save_checkpoint(net, tmp_path / "net.ckpt"))
    assert loaded.network.params["classifier.weight"].data.dtype == np.float64
    assert loaded.optimizer is None


def test_label_space_must_be_recorded(tmp_path):
    loaded = load_checkpoint(save_checkpoint(_trained_net(), tmp_path / "net.ckpt"))
    with pytest.raises(DataError, match="label space"):
        loaded.label_space


def test_manifest_layout():
    raw = encode_checkpoint({"a": np.arange(3, dtype=np.float32), "s": np.float64(2.0) * np.ones(())}, {"k": "v"})
    head = raw.split(b"\nend\n")[0].decode("ascii").splitlines()
    assert head == [MAGIC, "meta k v", "tensor a 3 float32 0 12", "tensor s - float64 12 8"]
    arrays, meta = decode_checkpoint(raw)
    assert meta == {"k": "v"}
    assert arrays["s"].shape == ()


def test_missing_file_and_bad_magic(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_checkpoint(tmp_path / "absent.ckpt")
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"NOT-A-CHECKPOINT\nend\n")
    with pytest.raises(DataError, match="bad magic"):
        load_checkpoint(bogus)


def test_truncated_blob_and_missing_tensor(tmp_path):
    path = save_checkpoint(_trained_net(), tmp_path / "net.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(DataError, match="blob shorter"):
        load_checkpoint(path)

    arrays, meta = decode_checkpoint(raw)
    del arrays["param.classifier.bias"]
    path.write_bytes(encode_checkpoint(arrays, meta))
    with pytest.raises(DataError, match="classifier.bias"):
        load_checkpoint(path)


def test_unsupported_dtype_is_refused():
    with pytest.raises(DataError, match="int32"):
        encode_checkpoint({"x": np.zeros(2, dtype=np.int32)}, {})
