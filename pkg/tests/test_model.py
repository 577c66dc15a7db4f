import numpy as np
import pytest

from stmx import model as mdl
from stmx import reparam as rp
from stmx import weights as wio


@pytest.fixture(scope="module")
def cfg():
    return mdl.tiny_desk()


@pytest.fixture(scope="module")
def pair(cfg):
    m = mdl.init_model(cfg, seed=3, tpe="random")
    return m, mdl.reparameterize_model(m)[0]


@pytest.fixture
def clip(cfg, rng):
    return rng.uniform(-1, 1, (cfg.t, cfg.h, cfg.w, 3)).astype(np.float32)


# -- config ------------------------------------------------------------------


def test_tiny_desk_values(cfg):
    assert (cfg.t, cfg.h, cfg.w, cfg.patch, cfg.embed_dim) == (8, 16, 16, 2, 64)
    assert cfg.grid == (8, 8, 8)
    assert [(s.kind, s.repeat, s.channels, s.heads) for s in cfg.stages] == [
        ("st-repmixer", 2, 32, 0), ("st-attention", 1, 64, 4)]


def test_config_text_round_trip(cfg):
    again = mdl.parse_config(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()


def test_convffn_suffix_accepted():
    stages = mdl.parse_stages("(st-repmixer+convffn, 1, 16)")
    assert stages[0].kind == "st-repmixer"


@pytest.mark.parametrize("text", [
    "stages = (st-mamba, 1, 16)",
    "stages = (st-attention, 1, 30, 4)",
    "stages = (st-repmixer, 1, 16)\nwidth = 3",
    "stages = (st-repmixer, 1, 16)\nh = 15",
    "stages = (st-repmixer, 1, 16)\nspatial_kernel = 4",
    "stages = (st-repmixer, 1, 32), (st-repmixer, 1, 16)",
    "stages = (st-repmixer, one, 16)",
    "t 8",
    "t = 8",
])
def test_config_errors(text):
    with pytest.raises(mdl.ConfigError):
        mdl.parse_config(text)


# -- forward ------------------------------------------------------------------


def test_init_is_deterministic(cfg):
    a, b = mdl.init_model(cfg, 5), mdl.init_model(cfg, 5)
    for k, v in a.named_tensors().items():
        np.testing.assert_array_equal(v, b.named_tensors()[k])


def test_encode_shapes_and_normalization(pair, clip, cfg):
    frames, video = mdl.encode_video(clip, pair[0])
    assert frames.shape == (cfg.t, cfg.embed_dim) and video.shape == (1, cfg.embed_dim)
    assert frames.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(video), 1.0, rtol=1e-5)
    nframes, _ = mdl.encode_video(clip, pair[0], normalize_frames=True)
    np.testing.assert_allclose(np.linalg.norm(nframes, axis=1), 1.0, rtol=1e-5)


def test_fused_model_matches_train_model(pair, clip):
    a, _ = mdl.encode_video(clip, pair[0], "train")
    b, _ = mdl.encode_video(clip, pair[1], "fused")
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_mode_defaults_to_model_form(pair, clip):
    np.testing.assert_array_equal(mdl.features(clip, pair[1]), mdl.features(clip, pair[1], "fused"))
    with pytest.raises(rp.FoldError):
        mdl.features(clip, pair[0], "fused")


def test_reparameterize_model_idempotent(pair):
    again, changed = mdl.reparameterize_model(pair[1])
    assert again is pair[1] and not changed


def test_wrong_input_shape(pair):
    with pytest.raises(ValueError):
        mdl.encode_video(np.zeros((8, 15, 16, 3), np.float32), pair[0])


def test_fusion_deviation_small(cfg):
    d = mdl.fusion_deviation(cfg, trials=3, seed=1)
    assert d.size == 3 * cfg.t * cfg.embed_dim
    assert d.max() <= 1e-4 and np.median(d) <= 1e-5


# -- accounting ---------------------------------------------------------------


def test_single_conv_param_counts(rng):
    conv = rp.random_conv(rng, "spatial", 16, 3, bn=True, skip=True)
    assert mdl.count_params(rp.fold(conv)) == 160
    assert mdl.count_params(conv) == 160 + 4 * 16
    assert mdl.count_params(rp.random_conv(rng, "temporal", 16, 3, bn=False)) == 64


def test_block_param_counts(rng):
    assert mdl.count_params(rp.random_repmixer(rng, 8)) == (8 * 3 + 8 + 32) + (8 * 9 + 8 + 32)
    att = rp.random_attention(rng, 2, 8, 2, cpe_size=3)
    assert mdl.count_params(att) == 2 * 8 + (8 * 9 + 8) + 4 * (64 + 8) + 16
    assert mdl.count_params(rp.random_convffn(rng, 8, ratio=2)) == (72 + 8 + 32) + (8 * 16 + 16) + (16 * 8 + 8)


def test_model_param_counts(pair):
    # stem 416, stage0 2 x 7424, proj 2112, stage1 46208, head 4160
    assert mdl.count_params(pair[0]) == 67744
    # BN stats removed: 3 convs x 128 per RepMixer block x 2, plus 256 in the attention block's ConvFFN
    assert mdl.count_params(pair[1]) == 67744 - 1024


def test_flop_formulas(rng):
    conv = rp.random_conv(rng, "spatial", 16, 3)
    assert mdl.conv_flops(rp.fold(conv), (2, 4, 4)) == 2 * 9 * 16 * 32
    assert mdl.conv_flops(conv, (2, 4, 4)) == 2 * 9 * 16 * 32 + 2 * 16 * 32
    assert mdl.attention_flops(10, 4) == 8 * 10 * 16 + 4 * 100 * 4


def test_fused_model_has_fewer_flops(pair):
    assert mdl.count_flops(pair[1]) < mdl.count_flops(pair[0])


# -- serialization ------------------------------------------------------------


@pytest.mark.parametrize("which", [0, 1])
def test_save_load_round_trip(pair, clip, which):
    m = pair[which]
    blob = mdl.save_weights(m)
    loaded = mdl.load_weights(blob)
    assert loaded.fused == m.fused
    assert mdl.save_weights(loaded) == blob
    for k, v in m.named_tensors().items():
        np.testing.assert_array_equal(loaded.named_tensors()[k], v)
    np.testing.assert_array_equal(mdl.encode_video(clip, loaded)[0], mdl.encode_video(clip, m)[0])


def test_fused_store_rejected_in_train_mode(pair):
    with pytest.raises(mdl.FusedStoreError):
        mdl.load_weights(mdl.save_weights(pair[1]), mode="train")


def test_missing_tensor_is_shape_table_error(pair):
    tensors = pair[0].named_tensors()
    tensors.pop("head.bias")
    meta = {"kind": "model", "fused": 0, "config_hash": pair[0].config.digest()}
    with pytest.raises(wio.ShapeTableError):
        mdl.load_weights(wio.pack(tensors, meta, pair[0].config.to_text()))


def test_wrong_tensor_shape_is_shape_table_error(pair):
    tensors = pair[0].named_tensors()
    tensors["head.bias"] = np.zeros(7, np.float32)
    meta = {"kind": "model", "fused": 0, "config_hash": pair[0].config.digest()}
    with pytest.raises(wio.ShapeTableError):
        mdl.load_weights(wio.pack(tensors, meta, pair[0].config.to_text()))


def test_config_hash_mismatch(pair):
    meta = {"kind": "model", "fused": 0, "config_hash": "0" * 16}
    with pytest.raises(wio.HeaderError):
        mdl.load_weights(wio.pack(pair[0].named_tensors(), meta, pair[0].config.to_text()))
