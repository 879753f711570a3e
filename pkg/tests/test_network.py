import numpy as np
import pytest

from ganspk import autodiff as ad
from ganspk.network import (CheckpointError, ConfigError, NetworkConfig, SpeakerBatch, attentive_stats_pool,
                            checkpoint_bytes, checkpoint_from_bytes, classify, discriminate, encode,
                            init_model, load_checkpoint, save_checkpoint, with_aux_head)

SMALL = NetworkConfig(frame_dim=4, encoder_hidden=[8, 8], residual_blocks=1, attention_hidden=4,
                      post_pool_widths=[12, 10], embedding_dim=6, num_speakers=3, disc_widths=[5])


def test_default_sizes():
    c = NetworkConfig()
    assert c.post_pool_widths == [512, 512]
    assert c.embedding_dim == 64
    assert c.disc_widths == [256, 256]
    assert c.use_batchnorm and not c.aux_head


@pytest.mark.parametrize("bad", [
    dict(post_pool_widths=[16]), dict(embedding_dim=1), dict(num_speakers=1), dict(encoder_hidden=[0]),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        NetworkConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        NetworkConfig.from_dict({"bogus": 1})


def test_init_is_deterministic_and_groups_are_disjoint():
    a, b = init_model(SMALL, 5), init_model(SMALL, 5)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    groups = [set(a.group(g)) for g in "ECD"]
    assert set().union(*groups) == set(a.params)
    assert sum(len(g) for g in groups) == len(a.params)
    assert a.params["C.W"].shape == (6, 3)


def test_encode_shapes_and_batch_independence_in_eval():
    model = init_model(SMALL, 0)
    frames = np.random.default_rng(0).normal(size=(3, 20, 4))
    out = encode(SpeakerBatch(frames, np.zeros(3, dtype=int)), model)
    assert out.shape == (3, 6)
    single = encode(frames[1:2], model)
    np.testing.assert_allclose(single[0], out[1], rtol=0, atol=1e-12)


def test_encode_rejects_wrong_frame_dim():
    with pytest.raises(ad.ShapeError):
        encode(np.zeros((1, 5, 3)), init_model(SMALL, 0))


def test_pooling_constant_sequence():
    # every frame identical: mean is that frame, std is sqrt(eps)
    rng = np.random.default_rng(0)
    pv = {"E.att.fc1.W": rng.normal(size=(3, 2)), "E.att.fc1.b": np.zeros(2),
          "E.att.fc2.W": rng.normal(size=(2, 1)), "E.att.fc2.b": np.zeros(1)}
    pv = {k: ad.Value(v) for k, v in pv.items()}
    h = np.tile(np.array([1.0, -2.0, 0.5]), (2, 7, 1))
    pooled, w = attentive_stats_pool(h, pv, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0)
    np.testing.assert_allclose(pooled.data[:, :3], h[:, 0], atol=1e-12)
    np.testing.assert_allclose(pooled.data[:, 3:], 1e-3, atol=1e-9)


def test_cosine_logits_bounded_and_scale_invariant():
    model = init_model(SMALL, 0)
    emb = np.random.default_rng(1).normal(size=(4, 6))
    c1 = classify(emb, model)
    c2 = classify(7.0 * emb, model)
    assert np.all(np.abs(c1) <= 1 + 1e-12)
    np.testing.assert_allclose(c1, c2, atol=1e-12)


def test_discriminate_with_aux_head():
    model = init_model(NetworkConfig(**{**SMALL.to_dict(), "aux_head": True}), 0)
    out = discriminate(np.random.default_rng(2).normal(size=(5, 6)), model)
    assert out["raw_score"].shape == (5,)
    assert out["aux_logits"].shape == (5, 3)
    assert discriminate(np.ones((2, 6)), init_model(SMALL, 0))["aux_logits"] is None


def test_with_aux_head_keeps_trained_weights():
    model = init_model(SMALL, 0)
    aux = with_aux_head(model, 1)
    assert aux.config.aux_head
    assert {"D.aux.W", "D.aux.b"} <= set(aux.params)
    for k, v in model.params.items():
        assert np.array_equal(aux.params[k], v)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = init_model(NetworkConfig(**{**SMALL.to_dict(), "aux_head": True}), 3)
    path = tmp_path / "m.asem"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert set(loaded.params) == set(model.params)
    assert set(loaded.bn) == set(model.bn)
    assert loaded.config == model.config
    assert checkpoint_bytes(loaded) == path.read_bytes()
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v.astype(np.float32))


def test_checkpoint_truncation_and_magic():
    buf = checkpoint_bytes(init_model(SMALL, 0))
    for cut in (3, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointError):
            checkpoint_from_bytes(buf[:cut])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + buf[4:])
