import numpy as np
import pytest
import torch
from helpers import fd_relative_error, randomize_bn

from ropeinspect import segmodel as S
from ropeinspect.metrics import count_params


def _double(cin, c):
    return 9 * cin * c + 2 * c + 9 * c * c + 2 * c


def unet_formula(ch, depth=False, cma=False):
    enc = ch[:-1]
    n, cin = 0, 3
    for c in enc:
        n += _double(cin, c)
        cin = c
    n += _double(enc[-1], ch[-1])
    for i in range(len(enc)):
        n += 4 * ch[i + 1] * ch[i] + ch[i] + _double(2 * ch[i], ch[i])
    n += ch[0] + 1
    if depth:
        cin = 1
        for c in enc:
            n += _double(cin, c)
            cin = c
    if cma:
        n += sum(9 * 2 * c * c + 2 * c + c * c for c in enc)
    return n


@pytest.mark.parametrize("depth,cma", [(False, False), (True, False), (True, True)])
def test_param_count_closed_form(depth, cma):
    ch = [64, 128, 256, 512, 1024]
    cfg = S.UNetConfig(encoder_channels=ch, use_depth_branch=depth, use_cma=cma)
    assert count_params(S.build_segmodel(cfg))[0] == unet_formula(ch, depth, cma)


def test_cma_param_count_helper():
    ch = [8, 16]
    m = S.build_segmodel(S.UNetConfig([8, 16, 32]))
    fused = sum(count_params(f)[0] for f in m.fusions)
    assert fused == S.cma_param_count(ch)


def test_forward_shapes_and_range():
    m = S.build_segmodel(S.UNetConfig([8, 16, 32, 64])).eval()
    x = torch.rand(2, 3, 32, 48)
    with torch.no_grad():
        y = m(x, torch.rand(2, 1, 32, 48))
    assert y.shape == (2, 1, 32, 48)
    assert float(y.min()) >= 0 and float(y.max()) <= 1
    with pytest.raises(ValueError, match="divisible"):
        m(torch.rand(1, 3, 30, 32))


def test_missing_depth_equals_zero_depth():
    m = S.build_segmodel(S.UNetConfig([8, 16, 32])).eval()
    x = torch.rand(1, 3, 16, 16)
    torch.testing.assert_close(m(x), m(x, torch.zeros(1, 1, 16, 16)))


def test_depth_changes_output():
    m = S.build_segmodel(S.UNetConfig([8, 16, 32])).eval()
    x = torch.rand(1, 3, 16, 16)
    assert not torch.allclose(m(x), m(x, torch.rand(1, 1, 16, 16)))


def test_color_only_ignores_depth():
    m = S.build_segmodel(S.UNetConfig([8, 16, 32], use_depth_branch=False)).eval()
    x = torch.rand(1, 3, 16, 16)
    torch.testing.assert_close(m(x), m(x, torch.rand(1, 1, 16, 16)))


def test_cma_gates_in_range_and_residual():
    gen = torch.Generator().manual_seed(0)
    cma = S.CMA(6)
    randomize_bn(cma, gen)
    cma.eval()
    c, d = torch.randn(2, 6, 5, 5, generator=gen), torch.randn(2, 6, 5, 5, generator=gen)
    out, cg, sg = cma.gates(c, d)
    assert cg.shape == (2, 6, 1, 1) and sg.shape == (2, 1, 5, 5)
    assert ((cg > 0) & (cg < 1)).all() and ((sg > 0) & (sg < 1)).all()
    torch.testing.assert_close(cma(c, d), c + out)
    with pytest.raises(ValueError):
        cma(c, d[:, :3])


def test_add_fusion():
    a, b = torch.rand(1, 2, 3, 3), torch.rand(1, 2, 3, 3)
    torch.testing.assert_close(S.AddFusion()(a, b), a + b)


@pytest.mark.parametrize("train_mode", [False, True])
def test_cma_gradient_finite_difference(train_mode):
    gen = torch.Generator().manual_seed(2)
    cma = S.CMA(4).double()
    randomize_bn(cma, gen)
    cma.train(train_mode)
    c = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    d = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)

    def loss():
        return (cma(c, d) * w).sum()

    assert fd_relative_error(loss, [c, d] + list(cma.parameters())) < 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        S.UNetConfig([64, 32, 128])
    with pytest.raises(ValueError):
        S.UNetConfig([64, 128])
    with pytest.raises(ValueError):
        S.UNetConfig.from_dict({"widths": [1]})
    cfg = S.UNetConfig([4, 8, 16], use_cma=False)
    assert S.UNetConfig.from_dict(cfg.to_dict()) == cfg


def test_tensor_helpers():
    img = np.full((4, 4, 3), 255, np.uint8)
    t = S.to_color_tensor(img)
    assert t.shape == (1, 3, 4, 4) and float(t.max()) == 1.0
    d = S.to_depth_tensor([np.full((4, 4), 3000, np.uint16), None], shape=(4, 4))
    assert d.shape == (2, 1, 4, 4) and float(d[0].max()) == 1.0 and float(d[1].abs().max()) == 0.0
    with pytest.raises(ValueError):
        S.to_depth_tensor([None])


def test_forward_seg_numpy(fixture8):
    m = S.build_segmodel(S.UNetConfig([4, 8, 16]))
    sal = S.forward_seg(m, fixture8[0].color, fixture8[0].depth)
    assert sal.shape == (1, 64, 64) and sal.dtype == np.float32
    assert m.training  # caller's mode is preserved
