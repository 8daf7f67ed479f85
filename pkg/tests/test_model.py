import numpy as np
import pytest

from espretrain.errors import ConfigurationError, NumericalError, ParseError
from espretrain.model import (
    REFERENCE_MODEL_CONFIGS, ModelConfig, ModelParams, TokenBatch, forward_logits, init_params,
    layout, load_checkpoint, param_count, save_checkpoint,
)
from espretrain.oracles import max_abs_diff, reference_forward


def test_param_count_hand_counts():
    cfg = ModelConfig(layers=0, hidden=4, heads=1, kv_heads=1, head_dim=4, intermediate=4, vocab=10)
    assert param_count(cfg) == 10 * 4 + 4
    untied = ModelConfig(layers=0, hidden=4, heads=1, kv_heads=1, head_dim=4, intermediate=4, vocab=10,
                         tie_embeddings=False)
    assert param_count(untied) == 10 * 4 + 4 + 4 * 10


def test_smallest_reference_model_size_band():
    assert 4e8 <= param_count(REFERENCE_MODEL_CONFIGS["0.5B"]) <= 8e8


def test_desk_model_size():
    assert param_count(ModelConfig()) == 82_240


@pytest.mark.parametrize("kwargs", [dict(heads=4, kv_heads=3), dict(head_dim=5), dict(vocab=1), dict(max_seq=1),
                                    dict(hidden=0)])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_layout_tiles_the_flat_vector():
    slots = layout(ModelConfig())
    assert slots[0].offset == 0
    for a, b in zip(slots, slots[1:]):
        assert a.stop == b.offset
    with pytest.raises(ConfigurationError):
        ModelParams(np.zeros(10, np.float32), slots)


def test_init_is_deterministic_and_well_scaled():
    cfg = ModelConfig()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(cfg, 8).flat)
    for slot in a.layout:
        if slot.name.endswith(".gain"):
            assert (a.tensor(slot.name) == 1.0).all()
    embed = a.tensor("embed.weight")
    assert embed.size >= 8192 and 0.015 <= embed.std() <= 0.025
    wo = a.tensor("layers.0.attn.wo")
    assert wo.std() == pytest.approx(0.02 / 2, rel=0.1)


def test_causal_prefix_invariance(tiny_config, rng):
    params = init_params(tiny_config, 0)
    params.flat[:] += rng.standard_normal(params.flat.size).astype(np.float32) * 0.2
    ids = rng.integers(0, tiny_config.vocab, (2, 10))
    base = forward_logits(params, tiny_config, ids)
    for t in range(9):
        changed = ids.copy()
        changed[:, t + 1:] = (changed[:, t + 1:] + 3) % tiny_config.vocab
        out = forward_logits(params, tiny_config, changed)
        np.testing.assert_array_equal(out[:, :t + 1], base[:, :t + 1])


def test_duplicate_rows_give_identical_logits(tiny_config, rng):
    params = init_params(tiny_config, 1)
    row = rng.integers(0, tiny_config.vocab, 9)
    out = forward_logits(params, tiny_config, np.stack([row, row, row]))
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_forward_matches_scalar_reimplementation(rng):
    cfg = ModelConfig(layers=1, hidden=8, heads=2, kv_heads=1, head_dim=4, intermediate=16, vocab=11, max_seq=16)
    params = init_params(cfg, 2)
    params.flat[:] += rng.standard_normal(params.flat.size).astype(np.float32) * 0.3
    ids = rng.integers(0, cfg.vocab, 7)
    fast = forward_logits(params, cfg, ids[None])[0]
    assert max_abs_diff(fast, reference_forward(params.flat, cfg, ids)) < 1e-4


def test_untied_two_layer_forward_matches_reimplementation(rng):
    cfg = ModelConfig(layers=2, hidden=8, heads=4, kv_heads=2, head_dim=2, intermediate=12, vocab=9, max_seq=8,
                      tie_embeddings=False)
    params = init_params(cfg, 3)
    params.flat[:] += rng.standard_normal(params.flat.size).astype(np.float32) * 0.3
    ids = rng.integers(0, cfg.vocab, 6)
    assert max_abs_diff(forward_logits(params, cfg, ids[None])[0], reference_forward(params.flat, cfg, ids)) < 1e-4


def test_grouped_attention_with_equal_heads_is_multi_head(rng):
    # kv_heads == heads: every query head owns its key/value head.
    cfg = ModelConfig(layers=1, hidden=8, heads=2, kv_heads=2, head_dim=4, intermediate=8, vocab=7, max_seq=8)
    params = init_params(cfg, 4)
    ids = rng.integers(0, cfg.vocab, (2, 5))
    out = forward_logits(params, cfg, ids)
    assert max_abs_diff(out[1], reference_forward(params.flat, cfg, ids[1])) < 1e-4


def test_forward_errors(tiny_config):
    params = init_params(tiny_config, 0)
    with pytest.raises(ConfigurationError):
        forward_logits(params, tiny_config, np.zeros((1, 17), np.int64))
    with pytest.raises(ConfigurationError):
        forward_logits(params, tiny_config, np.full((1, 3), 11))
    params.flat[params.slot("layers.0.mlp.w_up").offset] = np.inf
    with pytest.raises(NumericalError, match="layer 0"):
        forward_logits(params, tiny_config, np.zeros((1, 4), np.int64))


def test_token_batch_validates_shapes():
    with pytest.raises(ConfigurationError):
        TokenBatch(np.zeros((2, 3)), np.zeros((2, 4)))


def test_checkpoint_round_trip(tmp_path, tiny_config):
    params = init_params(tiny_config, 9)
    path = tmp_path / "m.bin"
    save_checkpoint(path, params, tiny_config, {"iteration": 3})
    loaded, cfg, meta = load_checkpoint(path)
    assert cfg == tiny_config and meta == {"iteration": 3}
    assert loaded.flat.tobytes() == params.flat.tobytes()
    save_checkpoint(tmp_path / "again.bin", loaded, cfg, {"iteration": 3})
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path, tiny_config):
    path = tmp_path / "m.bin"
    save_checkpoint(path, init_params(tiny_config, 0), tiny_config)
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    (tmp_path / "magic.bin").write_bytes(b"X" + raw[1:])
    for name in ("short.bin", "magic.bin"):
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / name)
