"""ViT assembly, token accounting, cost model and checkpoint format."""

import numpy as np
import pytest

from tilessl.encoder import (
    PRESETS,
    Encoder,
    EncoderConfig,
    count_flops,
    load_checkpoint,
    load_state,
    module_state,
    normalize_pixels,
    preset,
    save_checkpoint,
)
from tilessl.flexi_embed import patchify, unpatchify
from tilessl.nn_core import ConfigError, module_grad_check


def test_token_count_224_p14_r4(rng):
    cfg = preset("large-fixed-224")
    assert cfg.registers == 4 and cfg.patch_sizes == [14]
    assert cfg.token_count(14) == 1 + 4 + (224 // 14) ** 2 == 261
    enc = Encoder(cfg, seed=0)
    seq = enc.encode(normalize_pixels(rng.random((224, 224, 3))), 14)
    assert len(seq) == 261
    assert seq.registers.shape == (4, cfg.embed_dim)
    assert seq.patches.shape == (256, cfg.embed_dim)
    assert seq.patch_grid == (16, 16)


def test_patch_tokens_16_vs_32():
    cfg = EncoderConfig(embed_dim=32, depth=1, heads=2, patch_sizes=[16, 32], tile_side=224)
    n16 = cfg.token_count(16) - 1
    n32 = cfg.token_count(32) - 1
    assert (n16, n32) == (196, 49)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_halving_patch_quadruples_tokens(name):
    cfg = preset(name)
    for p in cfg.patch_sizes:
        if p % 2 == 0:
            extra = 1 + cfg.registers
            assert cfg.token_count(p // 2) - extra == 4 * (cfg.token_count(p) - extra)


@pytest.mark.parametrize("p", [8, 16, 32])
def test_token_count_law_in_forward(rng, p):
    cfg = preset("small-flex", registers=2, depth=1)
    out, _ = Encoder(cfg, seed=1).forward(rng.normal(size=(2, 96, 96, 3)), p)
    assert out.shape == (2, 1 + 2 + (96 // p) ** 2, 64)


def test_depth_zero_cls_is_normalized_parameter(rng):
    enc = Encoder(preset("small-flex", depth=0), seed=3)
    seq = enc.encode(rng.normal(size=(96, 96, 3)).astype(np.float32), 32)
    c = enc.cls_token.value.astype(np.float64)
    expected = (c - c.mean()) / np.sqrt(c.var() + 1e-6)
    np.testing.assert_allclose(seq.cls, expected, rtol=1e-5, atol=1e-5)


def test_registers_only_change_register_block(rng):
    x = rng.normal(size=(1, 96, 96, 3))
    a, _ = Encoder(preset("small-flex", registers=0), seed=0).forward(x, 16)
    b, _ = Encoder(preset("small-flex", registers=3), seed=0).forward(x, 16)
    assert a.shape[1] + 3 == b.shape[1]
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 96, 96, 3))
    enc = Encoder(preset("small-flex"), seed=0)
    a, _ = enc.forward(x, 8)
    b, _ = enc.forward(x, 8)
    assert a.tobytes() == b.tobytes()
    c, _ = Encoder(preset("small-flex"), seed=0).forward(x, 8)
    assert a.tobytes() == c.tobytes()


def test_patch_permutation_equivariance_without_rope(rng):
    cfg = preset("small-flex", rope=False, depth=2)
    enc = Encoder(cfg, seed=0, dtype=np.float64)
    p = 16
    x = rng.normal(size=(1, 96, 96, 3))
    perm = rng.permutation(36)
    shuffled = unpatchify(patchify(x, p)[:, perm], 96, 96, p)
    a, _ = enc.forward(x, p)
    b, _ = enc.forward(shuffled, p)
    np.testing.assert_allclose(b[0, 1:], a[0, 1:][perm], atol=1e-10)
    np.testing.assert_allclose(b[0, 0], a[0, 0], atol=1e-10)


def test_rope_breaks_permutation_equivariance(rng):
    enc = Encoder(preset("small-flex", depth=1), seed=0, dtype=np.float64)
    x = rng.normal(size=(1, 96, 96, 3))
    perm = np.roll(np.arange(36), 1)
    a, _ = enc.forward(x, 16)
    b, _ = enc.forward(unpatchify(patchify(x, 16)[:, perm], 96, 96, 16), 16)
    assert not np.allclose(b[0, 1:], a[0, 1:][perm], atol=1e-6)


@pytest.mark.parametrize("bad", [7, 12, 48])
def test_illegal_patch_size(rng, bad):
    enc = Encoder(preset("small-flex", depth=1), seed=0)
    with pytest.raises(ConfigError, match="patch size"):
        enc.forward(rng.normal(size=(1, 96, 96, 3)), bad)


@pytest.mark.parametrize("kwargs,msg", [
    (dict(embed_dim=30, heads=4), "divisible by heads"),
    (dict(registers=-1), "register"),
    (dict(patch_mode="fixed", patch_sizes=[8, 16]), "exactly one"),
    (dict(patch_sizes=[7]), "does not divide"),
    (dict(patch_mode="sometimes"), "patch mode"),
])
def test_config_validation(kwargs, msg):
    with pytest.raises(ConfigError, match=msg):
        EncoderConfig(**kwargs)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("huge")


def test_mask_token_replaces_patches(rng):
    enc = Encoder(preset("small-flex", depth=0), seed=0, dtype=np.float64)
    enc.mask_token.value[:] = rng.normal(size=64)
    x = rng.normal(size=(1, 96, 96, 3))
    mask = np.zeros((1, 9), dtype=bool)
    mask[0, [2, 5]] = True
    out, _ = enc.forward(x, 32, mask)
    np.testing.assert_allclose(out[0, 3], out[0, 6])
    with pytest.raises(ValueError, match="mask shape"):
        enc.forward(x, 32, np.zeros((1, 4), dtype=bool))


@pytest.mark.parametrize("patch_size", [8, 16])
def test_encoder_gradients_depth2_dim32(rng, patch_size):
    cfg = EncoderConfig(embed_dim=32, depth=2, heads=2, registers=1, patch_sizes=[8, 16], tile_side=32)
    enc = Encoder(cfg, seed=0, dtype=np.float64)
    for prm in enc.parameters():
        prm.value[:] = rng.normal(size=prm.shape) * 0.2
    x = rng.normal(size=(2, 32, 32, 3))
    n = (32 // patch_size) ** 2
    mask = np.zeros((2, n), dtype=bool)
    mask[0, 0] = mask[1, -1] = True
    proj = rng.normal(size=(2, 2 + n, 32))

    def forward_loss():
        y, cache = enc.forward(x, patch_size, mask)
        return float((y * proj).sum()), cache

    def backward(cache):
        enc.backward(proj, cache)
        return {}

    rep = module_grad_check(enc, forward_loss, backward, max_entries=6, floor=1e-5, eps=1e-3)
    assert rep.passed(1e-6), rep.max_rel_error


def test_flops_mlp_terms_quadruple():
    cfg = EncoderConfig(embed_dim=64, depth=2, heads=4, patch_sizes=[8, 16], tile_side=96)
    a = count_flops(cfg, 16, special_tokens=False)
    b = count_flops(cfg, 8, special_tokens=False)
    assert b["linear"] / a["linear"] == 4.0


def test_flops_attention_ratio_14_to_8():
    cfg = EncoderConfig(embed_dim=64, depth=1, heads=4, patch_sizes=[8, 14], tile_side=224)
    a = count_flops(cfg, 14, special_tokens=False)["attention"]
    b = count_flops(cfg, 8, special_tokens=False)["attention"]
    assert b / a == pytest.approx((784 / 256) ** 2)
    assert b / a == pytest.approx(9.378, abs=1e-3)


def test_flops_vit_g_ratio_in_band():
    cfg = EncoderConfig(embed_dim=1536, depth=40, heads=24, registers=4, patch_sizes=[8, 14], tile_side=224)
    ratio = count_flops(cfg, 8)["total"] / count_flops(cfg, 14)["total"]
    assert 3.0 <= ratio <= 5.0


def test_flops_closed_form():
    cfg = EncoderConfig(embed_dim=8, depth=3, heads=2, registers=1, patch_sizes=[4], tile_side=8)
    f = count_flops(cfg, 4)
    n = 4 + 2
    assert f["tokens"] == n
    assert f["linear"] == 3 * n * (4 * 64 + 2 * 4 * 64)
    assert f["attention"] == 3 * 2 * n * n * 8
    assert f["embed"] == 4 * 16 * 3 * 8
    with pytest.raises(ConfigError):
        count_flops(cfg, 3)


def test_checkpoint_round_trip(tmp_path):
    enc = Encoder(preset("small-flex", registers=2), seed=7)
    path = tmp_path / "enc.tssl"
    save_checkpoint(path, module_state(enc), {"note": "x"})
    params, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    other = Encoder(preset("small-flex", registers=2), seed=8)
    load_state(other, params)
    for name, v in module_state(enc).items():
        assert v.tobytes() == module_state(other)[name].tobytes()
    # stable layout: magic, version 1, little-endian header length
    raw = path.read_bytes()
    assert raw[:8] == b"TSSLCKPT"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "c.tssl"
    save_checkpoint(path, {"a": np.ones((2, 3), np.float32)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_load_state_checks_names_and_shapes():
    enc = Encoder(preset("small-flex", depth=1), seed=0)
    state = module_state(enc)
    with pytest.raises(KeyError):
        load_state(enc, {k: v for k, v in state.items() if k != "cls_token"})
    bad = dict(state, cls_token=np.zeros(3, np.float32))
    with pytest.raises(ValueError, match="shape mismatch"):
        load_state(enc, bad)
