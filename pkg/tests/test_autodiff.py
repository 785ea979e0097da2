import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kampnet import autodiff as ad
from kampnet import gradcheck
from kampnet.nn import BasicBlock, ResNetTrunk


def t64(a, grad=True):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + (0 if b is None else b[None, :, None, None])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ad.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_maxpool_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    got = ad.maxpool2d(t64(x), 2).data
    want = x.reshape(2, 3, 3, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(got, want)


@pytest.fixture(scope="module")
def op_errors():
    return gradcheck.run_all(points=2, seed=3)


OPS = ["conv2d", "conv2d_strided", "linear", "relu", "maxpool2d", "maxpool2d_overlap", "global_avgpool2d",
       "batchnorm2d", "batchnorm2d_eval", "add", "concat", "softmax", "cross_entropy", "cross_entropy_probs"]


def test_gradcheck_covers_every_op(op_errors):
    assert sorted(op_errors) == sorted(OPS)


@pytest.mark.parametrize("op", OPS)
def test_gradcheck_each_op(op_errors, op):
    assert op_errors[op] < 1e-6


@settings(max_examples=15, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(3, 6), k=st.sampled_from([1, 3]),
       stride=st.sampled_from([1, 2]), seed=st.integers(0, 10_000))
def test_conv_gradients_random_geometry(n, c, h, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, h + 1))
    w = rng.standard_normal((2, c, k, k))
    err = gradcheck.check_gradients(lambda a, b: ad.conv2d(a, b, stride=stride, padding=k // 2), [x, w])
    assert err < 1e-6


def test_softmax_rows_sum_to_one_and_survive_large_logits():
    p = ad.softmax(ad.Tensor(np.array([[1000.0, 0.0], [-5.0, 5.0]]))).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(np.isfinite(p))


def test_cross_entropy_value_and_floor():
    probs = ad.Tensor(np.array([[0.2, 0.8], [0.6, 0.4]]), dtype=np.float64)
    loss = ad.cross_entropy(probs, np.array([1, 0])).data
    assert loss == pytest.approx(-(np.log(0.8) + np.log(0.6)) / 2, abs=1e-12)
    hard = ad.Tensor(np.array([[1.0, 0.0]]), dtype=np.float64)
    assert ad.cross_entropy(hard, np.array([1])).data == pytest.approx(-np.log(ad.PROB_FLOOR))


def test_backward_requires_scalar_and_graph_is_single_use():
    x = t64(np.ones((1, 2)))
    w = t64(np.ones((2, 2)))
    y = ad.linear(x, w)
    with pytest.raises(ValueError):
        y.backward()
    loss = y.sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_leaf_gradients_accumulate_across_uses():
    x = t64(np.array([[1.0, -2.0]]))
    out = ad.add(ad.relu(x), ad.relu(x)).sum()
    out.backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0]])


def test_shape_errors_name_the_op():
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(ad.Tensor(np.zeros((1, 3, 5, 5))), ad.Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.Tensor(np.zeros((1, 2))), ad.Tensor(np.zeros((1, 3))))


def test_adam_matches_hand_computed_steps():
    # two steps on f(w) = sum(w^2)/2 so grad = w; reference recursion in float64
    w0 = np.array([1.0, -2.0, 0.5])
    p = ad.Tensor(w0.copy(), requires_grad=True, dtype=np.float64)
    opt = ad.Adam([("w", p)], lr=0.1)
    ref, m, v = w0.copy(), np.zeros(3), np.zeros(3)
    for t in (1, 2):
        p.grad = p.data.copy()
        opt.step()
        g = ref.copy()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-14)


def test_adam_step_decay_schedule():
    opt = ad.Adam([], lr=1e-5, decay_factor=0.9, decay_every=5)
    assert opt.effective_lr(0) == 1e-5
    assert opt.effective_lr(4) == 1e-5
    assert opt.effective_lr(5) == pytest.approx(0.9e-5)
    assert opt.effective_lr(12) == pytest.approx(0.81e-5)


def test_adam_rejects_non_finite_gradient():
    p = ad.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    opt = ad.Adam([("bad.param", p)])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="bad.param"):
        opt.step()


def test_resnet_block_and_adam_agree_with_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    blk = BasicBlock(3, 4, 2, rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 8, 8))
    conv1 = torch.nn.Conv2d(3, 4, 3, 2, 1, bias=False).double()
    bn1 = torch.nn.BatchNorm2d(4).double()
    conv2 = torch.nn.Conv2d(4, 4, 3, 1, 1, bias=False).double()
    bn2 = torch.nn.BatchNorm2d(4).double()
    proj = torch.nn.Conv2d(3, 4, 1, 2, 0, bias=False).double()
    pbn = torch.nn.BatchNorm2d(4).double()
    with torch.no_grad():
        conv1.weight.copy_(torch.from_numpy(blk.conv1.weight.data))
        conv2.weight.copy_(torch.from_numpy(blk.conv2.weight.data))
        proj.weight.copy_(torch.from_numpy(blk.proj.weight.data))
    params = [conv1.weight, conv2.weight, proj.weight, bn1.weight, bn1.bias, bn2.weight, bn2.bias, pbn.weight, pbn.bias]
    topt = torch.optim.Adam(params, lr=1e-2, eps=1e-8)
    ours = ad.Adam(blk.named_parameters(), lr=1e-2)
    labels = np.array([1, 0])
    head_w = rng.standard_normal((2, 4))
    for _ in range(3):
        tx = torch.from_numpy(x)
        out = torch.relu(bn1(conv1(tx)))
        out = torch.relu(bn2(conv2(out)) + pbn(proj(tx)))
        logits = out.mean(dim=(2, 3)) @ torch.from_numpy(head_w).T
        tloss = torch.nn.functional.cross_entropy(logits, torch.from_numpy(labels))
        topt.zero_grad()
        tloss.backward()
        topt.step()
        feats = ad.global_avgpool2d(blk(t64(x, grad=False)))
        logits_ours = ad.linear(feats, ad.Tensor(head_w, dtype=np.float64))
        loss = ad.cross_entropy(ad.softmax(logits_ours), labels)
        ours.zero_grad()
        loss.backward()
        ours.step()
        assert float(loss.data) == pytest.approx(tloss.item(), abs=1e-10)
    np.testing.assert_allclose(blk.conv1.weight.data, conv1.weight.detach().numpy(), atol=1e-10)
    np.testing.assert_allclose(blk.bn2.running_var, bn2.running_var.numpy(), atol=1e-10)


def test_trunk_feature_shapes():
    trunk = ResNetTrunk(3, (8, 16), (1, 1), np.random.default_rng(0))
    x = ad.Tensor(np.zeros((2, 3, 24, 24), dtype=np.float32))
    assert trunk.features(x).shape == (2, 16, 6, 6)
    assert trunk(x).shape == (2, 16)
    assert trunk.out_channels == 16
