import numpy as np
import pytest

from sleepcmt.autograd import Tensor
from sleepcmt.errors import ConfigError, InputError
from sleepcmt.model import (
    EpochCmt,
    ModelConfig,
    MultiScaleCnn,
    SequenceCmt,
    build_model,
    param_count,
    predict_averaged,
    softmax_np,
    window_coverage,
)


def epochs(rng, *lead, m=2):
    return rng.standard_normal((*lead, 3000, m)).astype(np.float32)


class TestMultiScaleCnn:
    def test_maps_epoch_to_windows(self, rng):
        cnn = MultiScaleCnn(ModelConfig(), rng)
        out = cnn(Tensor(epochs(rng, 2, m=1)))
        assert out.shape == (2, 60, 128)

    def test_rejects_other_lengths(self, rng, tiny_cfg):
        cnn = MultiScaleCnn(tiny_cfg, rng)
        with pytest.raises(InputError):
            cnn(Tensor(np.zeros((1, 1500, 1), np.float32)))

    def test_config_rejects_untileable_length(self):
        with pytest.raises(ConfigError):
            ModelConfig(epoch_samples=1525)

    def test_zero_input_gives_identical_rows(self, rng, tiny_cfg):
        cnn = MultiScaleCnn(tiny_cfg, rng)
        cnn.eval()
        out = cnn(Tensor(np.zeros((1, 3000, 1), np.float32))).data[0]
        np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-6)


class TestEpochCmt:
    def test_logit_shapes(self, rng, tiny_cfg):
        model = EpochCmt(tiny_cfg)
        assert model.forward(epochs(rng))[0].shape == (5,)
        assert model.forward(epochs(rng, 3))[0].shape == (3, 5)

    def test_cache_shapes(self, rng, tiny_cfg):
        _, cache = EpochCmt(tiny_cfg).forward(epochs(rng, 2))
        assert cache.intra.shape == (2, 2, 61, 8)
        assert cache.cross.shape == (2, 3, 8)

    def test_single_modality(self, rng):
        cfg = ModelConfig(embed_dim=8, ff_dim=16, heads=2, path_channels=4, modalities=["EEG"])
        logits, cache = EpochCmt(cfg).forward(epochs(rng, 2, m=1))
        assert logits.shape == (2, 5)
        assert cache.cross.shape[1] == 2

    def test_wrong_modality_count(self, rng, tiny_cfg):
        with pytest.raises(InputError):
            EpochCmt(tiny_cfg).forward(epochs(rng, 2, m=3))

    def test_symmetric_modalities_give_equal_cls(self, rng, tiny_cfg):
        model = EpochCmt(tiny_cfg, seed=3)
        enc = model.encoder
        for src, dst in ((enc.cnns[0], enc.cnns[1]), (enc.intra[0], enc.intra[1])):
            dst.load_state_dict(src.state_dict())
        enc.cls[1].data = enc.cls[0].data.copy()
        x = epochs(rng, 2, m=1)
        _, cache = model.forward(np.concatenate([x, x], axis=-1))
        np.testing.assert_array_equal(cache.intra[:, 0, 0], cache.intra[:, 1, 0])

    def test_default_size_near_published(self):
        assert 1.07e6 <= param_count(EpochCmt()) <= 1.45e6

    def test_ff_width_arithmetic(self):
        e, d = 16, 24
        base = param_count(EpochCmt(ModelConfig(embed_dim=e, ff_dim=d, heads=2, path_channels=4)))
        wide = param_count(EpochCmt(ModelConfig(embed_dim=e, ff_dim=2 * d, heads=2, path_channels=4)))
        n_ff = 2  # one position-wise feed-forward per modality
        assert wide - base == n_ff * ((e * d + d) + d * e)

    def test_seed_determinism(self, rng, tiny_cfg):
        x = epochs(rng, 2)
        a = EpochCmt(tiny_cfg, seed=5).forward(x)[0].data
        b = EpochCmt(tiny_cfg, seed=5).forward(x)[0].data
        np.testing.assert_array_equal(a, b)


class TestSequenceCmt:
    def test_logit_shapes(self, rng, tiny_cfg):
        model = SequenceCmt(tiny_cfg)
        assert model.forward(epochs(rng, 5))[0].shape == (5, 5)
        logits, cache = model.forward(epochs(rng, 2, 5))
        assert logits.shape == (2, 5, 5)
        assert cache.inter.shape == (2, 5, 8)
        assert cache.intra.shape == (2, 5, 2, 61, 8)

    def test_wrong_length_rejected(self, rng, tiny_cfg):
        with pytest.raises(InputError):
            SequenceCmt(tiny_cfg).forward(epochs(rng, 1, 4))

    def test_single_epoch_sequence(self, rng):
        cfg = ModelConfig(embed_dim=8, ff_dim=16, heads=2, path_channels=4, seq_len=1)
        logits, cache = SequenceCmt(cfg).forward(epochs(rng, 2, 1))
        assert logits.shape == (2, 1, 5)
        np.testing.assert_allclose(cache.attention[-1], 1.0)

    def test_shared_block_equivariance(self, rng):
        cfg = ModelConfig(embed_dim=8, ff_dim=16, heads=2, path_channels=4, share_epoch_block=True,
                          inter_epoch_pos_encoding=False)
        model = SequenceCmt(cfg, seed=1)
        model.eval()
        x = epochs(rng, 1, 5).astype(np.float64)
        model.astype(np.float64)
        perm = np.array([3, 0, 4, 1, 2])
        logits, cache = model.forward(Tensor(x))
        logits_p, cache_p = model.forward(Tensor(x[:, perm]))
        np.testing.assert_allclose(cache_p.inter[0], cache.inter[0][perm], atol=1e-10)
        np.testing.assert_allclose(logits_p.data[0], logits.data[0][perm], atol=1e-10)

    def test_unshared_blocks_by_default(self, tiny_cfg):
        assert len(SequenceCmt(tiny_cfg).epoch_blocks) == tiny_cfg.seq_len

    def test_default_size_near_published(self):
        assert 4.7e6 <= param_count(SequenceCmt()) <= 6.4e6


class TestAveraging:
    def test_coverage_counts(self):
        assert window_coverage(12, 5).tolist() == [1, 2, 3, 4, 5, 5, 5, 5, 4, 3, 2, 1]
        assert window_coverage(5, 5).tolist() == [1] * 5
        assert window_coverage(6, 5).tolist() == [1, 2, 2, 2, 2, 1]

    def test_averaged_probabilities(self, rng, tiny_cfg):
        model = SequenceCmt(tiny_cfg, seed=2)
        model.eval()
        x = epochs(rng, 7)
        probs = predict_averaged(model, x, batch_size=2)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        first = softmax_np(model.forward(x[:5])[0].data.astype(np.float64))
        np.testing.assert_allclose(probs[0], first[0], atol=1e-6)
        last = softmax_np(model.forward(x[2:])[0].data.astype(np.float64))
        np.testing.assert_allclose(probs[-1], last[-1], atol=1e-6)

    def test_too_short_rejected(self, rng, tiny_cfg):
        with pytest.raises(InputError):
            predict_averaged(SequenceCmt(tiny_cfg), epochs(rng, 4))


def test_build_model_kinds(tiny_cfg):
    assert isinstance(build_model("epoch", tiny_cfg), EpochCmt)
    assert isinstance(build_model("sequence", tiny_cfg), SequenceCmt)
    with pytest.raises(ConfigError):
        build_model("hybrid", tiny_cfg)


@pytest.mark.parametrize("kw", [{"embed_dim": 7}, {"heads": 3}, {"modalities": []},
                                {"modalities": ["EEG", "EEG"]}, {"ff_dim": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_round_trip():
    cfg = ModelConfig(embed_dim=32, seq_len=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dropout": 0.1})
