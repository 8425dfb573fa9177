import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from histoseg.errors import ConfigError, ValidationError
from histoseg.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ModelConfig,
    MultiScaleBlock,
    build_baseline_unet,
    build_model,
    count_parameters,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from oracles import gradient_check_errors


def test_gradient_check_small_network():
    el, tensor = gradient_check_errors()
    assert el < 1e-4
    assert tensor < 1e-4


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from(["msunet", "unet"]))
def test_output_matches_input_size(kh, kw, arch):
    cfg = ModelConfig(depth=2, base_channels=2, arch=arch)
    model = build_model(cfg) if arch == "msunet" else build_baseline_unet(cfg)
    model.eval()
    h, w = kh * cfg.divisor, kw * cfg.divisor
    with torch.no_grad():
        out = model(torch.rand(1, 3, h, w))
    assert out.shape == (1, 2, h, w)


def test_indivisible_input_names_divisor():
    model = build_model(ModelConfig(depth=2, base_channels=2))
    with pytest.raises(ValidationError, match="16"):
        model(torch.rand(1, 3, 24, 24))


def test_every_branch_gets_gradient():
    torch.manual_seed(0)
    model = build_model(ModelConfig(depth=2, base_channels=4))
    out = model(torch.rand(2, 3, 32, 32))
    out[:, 1].sum().backward()
    for blk in model.encoder_blocks:
        assert len(blk.branches) == 3
        for branch in blk.branches:
            g = branch[0].weight.grad
            assert g is not None and float(g.abs().sum()) > 0


def test_branch_geometry():
    blk = MultiScaleBlock(3, 4)
    x = torch.rand(1, 3, 16, 16)
    sizes = [tuple(b(x).shape[-2:]) for b in blk.branches]
    assert sizes == [(16, 16), (8, 8), (4, 4)]
    assert [b[0].dilation for b in blk.branches] == [(1, 1), (2, 2), (4, 4)]
    assert tuple(blk.features(x).shape) == (1, 12, 16, 16)
    skip, pooled = blk(x)
    assert tuple(skip.shape) == (1, 4, 16, 16) and tuple(pooled.shape) == (1, 4, 8, 8)


def test_concat_without_fusion_widens_channels():
    blk = MultiScaleBlock(3, 4, fusion_conv=False)
    assert blk.out_channels == 12
    model = build_model(ModelConfig(depth=2, base_channels=4, fusion_conv=False))
    assert model(torch.rand(1, 3, 16, 16)).shape == (1, 2, 16, 16)


@pytest.mark.parametrize("depth,base", [(1, 4), (2, 8), (4, 32)])
def test_msunet_has_more_parameters_than_baseline(depth, base):
    cfg = ModelConfig(depth=depth, base_channels=base)
    assert count_parameters(build_model(cfg)) > count_parameters(build_baseline_unet(cfg))


def test_translation_equivariance_away_from_borders():
    # a shift by a multiple of the divisor moves the interior of the output with it
    torch.manual_seed(1)
    cfg = ModelConfig(depth=2, base_channels=4)
    model = build_model(cfg).eval()
    x = torch.rand(1, 3, 64, 64)
    d = cfg.divisor
    shifted = torch.roll(x, shifts=d, dims=-1)
    with torch.no_grad():
        a, b = model(x), model(shifted)
    interior = a[..., 24:40, 24:40]
    assert torch.allclose(interior, b[..., 24:40, 24 + d : 40 + d], atol=1e-4)


@pytest.mark.parametrize(
    "kwargs",
    [dict(depth=0), dict(base_channels=0), dict(scales=[1, 3]), dict(scales=[2, 4]), dict(arch="vit")],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs).validate()


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(depth=2, base_channels=4)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters())
    model(torch.rand(1, 3, 16, 16)).sum().backward()
    opt.step()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, opt.state_dict(), 7, path, extra={"patch_size": 16})
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)
    loaded, opt_state, epoch = load_checkpoint(path, expected_config=cfg)
    assert epoch == 7 and opt_state is not None
    assert read_checkpoint(path)["extra"]["patch_size"] == 16
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])


def test_checkpoint_errors(tmp_path):
    cfg = ModelConfig(depth=2, base_channels=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(cfg), None, 1, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected_config=ModelConfig(depth=2, base_channels=8))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_reference_forward_shape():
    model = build_model(ModelConfig(depth=4, base_channels=32)).eval()
    with torch.no_grad():
        assert model(torch.rand(2, 3, 64, 64)).shape == (2, 2, 64, 64)


def test_zero_head_gives_one_half():
    model = build_model(ModelConfig(depth=2, base_channels=4)).eval()
    torch.nn.init.zeros_(model.head.weight)
    torch.nn.init.zeros_(model.head.bias)
    with torch.no_grad():
        p = torch.softmax(model(torch.rand(1, 3, 32, 32)), 1)
    assert torch.all(p == 0.5)


def test_checkpoint_forward_bit_identical(tmp_path):
    torch.manual_seed(4)
    cfg = ModelConfig(depth=2, base_channels=4)
    model = build_model(cfg).eval()
    x = torch.rand(2, 3, 32, 32)
    save_checkpoint(model, None, 3, tmp_path / "a.ckpt")
    loaded, _, _ = load_checkpoint(tmp_path / "a.ckpt")
    loaded.eval()
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))
