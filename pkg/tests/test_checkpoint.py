import numpy as np
import pytest

from sleepcmt.checkpoint import load_model, read_container, save_model, write_container
from sleepcmt.errors import ConfigError, InputError
from sleepcmt.model import EpochCmt, ModelConfig, SequenceCmt
from sleepcmt.training import TrainConfig, fit


@pytest.mark.parametrize("cls", [EpochCmt, SequenceCmt])
def test_round_trip_is_bit_identical(tmp_path, rng, tiny_cfg, cls):
    model = cls(tiny_cfg, seed=4)
    shape = (2, 3000, 2) if cls is EpochCmt else (2, 5, 3000, 2)
    x = rng.standard_normal(shape).astype(np.float32)
    y = rng.integers(0, 5, shape[:-2])
    fit(model, x, y, TrainConfig(max_steps=2, batch_size=1))  # moves weights and BN statistics
    model.eval()
    save_model(tmp_path / "m.ckpt", model, {"note": "x"})
    loaded, meta = load_model(tmp_path / "m.ckpt", expect_config=tiny_cfg, expect_kind=model.kind)
    assert meta == {"note": "x"}
    np.testing.assert_array_equal(model.forward(x)[0].data, loaded.forward(x)[0].data)
    for (na, a), (nb, b) in zip(sorted(model.state_dict().items()), sorted(loaded.state_dict().items())):
        assert na == nb
        np.testing.assert_array_equal(a, b)


def test_config_mismatch(tmp_path, tiny_cfg):
    save_model(tmp_path / "m.ckpt", EpochCmt(tiny_cfg))
    other = ModelConfig(embed_dim=8, ff_dim=32, heads=2, path_channels=4)
    with pytest.raises(ConfigError, match="ff_dim"):
        load_model(tmp_path / "m.ckpt", expect_config=other)
    with pytest.raises(ConfigError):
        load_model(tmp_path / "m.ckpt", expect_kind="sequence")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, definitely not weights")
    with pytest.raises(InputError):
        read_container(tmp_path / "junk")


def test_container_preserves_arrays(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    write_container(tmp_path / "c.bin", {"format": "test", "x": 1}, arrays)
    header, back = read_container(tmp_path / "c.bin")
    assert header["x"] == 1 and [t["name"] for t in header["tensors"]] == ["a", "b"]
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
