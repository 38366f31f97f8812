import numpy as np
import pytest

from helpers import conv3d_naive
from rubikpp import loss as L
from rubikpp.errors import FormatError, RubikError, ShapeError
from rubikpp.net import (
    AdamState,
    Checkpoint,
    ConvSpec,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    adam_step,
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
    discriminator_forward,
    gan_train_step,
    generator_forward,
    generator_objective,
    load_checkpoint,
    replace_head,
    save_checkpoint,
    segmentation_step,
)
from rubikpp.net.checkpoint import MAGIC, from_bytes, to_bytes


def _close(analytic, numeric, rel=1e-4, floor=1e-9):
    diff = abs(analytic - numeric)
    return diff <= floor or diff <= rel * max(abs(analytic), abs(numeric))


def _fd_all(f, arr, h=1e-5):
    """Central differences for every entry of ``arr``."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def _assert_grad(analytic, numeric):
    bad = [
        (i, a, n) for i, (a, n) in enumerate(zip(analytic.ravel(), numeric.ravel())) if not _close(a, n)
    ]
    assert not bad, f"{len(bad)} mismatching entries, first {bad[:3]}"


def deconv3d_naive(x, w, b, stride, padding):
    """Scatter form of the transposed convolution."""
    n, c, d, h, wd = x.shape
    _, o, kz, ky, kx = w.shape
    full = [(e - 1) * stride + k for e, k in zip((d, h, wd), (kz, ky, kx))]
    y = np.zeros((n, o, *full))
    for bi in range(n):
        for ic in range(c):
            for z in range(d):
                for yy in range(h):
                    for xx in range(wd):
                        y[bi, :, z * stride:z * stride + kz, yy * stride:yy * stride + ky, xx * stride:xx * stride + kx] += (
                            x[bi, ic, z, yy, xx] * w[ic]
                        )
    p = padding
    if p:
        y = y[:, :, p:-p, p:-p, p:-p]
    return y + b.reshape(1, -1, 1, 1, 1)


# --- conv / deconv -----------------------------------------------------------

def test_scalar_conv():
    spec = ConvSpec(1, 1, 1)
    y = conv3d_forward(np.full((1, 1, 1, 1, 1), 3.0), spec, np.full((1, 1, 1, 1, 1), 2.0), np.array([0.5]))
    assert y.shape == (1, 1, 1, 1, 1) and y.item() == 6.5


def test_identity_kernel():
    spec = ConvSpec(2, 2, 3, 1, 1)
    w = np.zeros(spec.weight_shape)
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1.0
    x = np.random.default_rng(0).standard_normal((2, 2, 4, 5, 6))
    assert np.array_equal(conv3d_forward(x, spec, w, np.zeros(2)), x)


@pytest.mark.parametrize("stride,padding,kernel", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 2, 2)])
def test_conv_vs_naive(stride, padding, kernel):
    rng = np.random.default_rng(stride * 10 + padding + kernel)
    spec = ConvSpec(2, 3, kernel, stride, padding)
    x = rng.standard_normal((2, 2, 5, 6, 7))
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(3)
    np.testing.assert_allclose(conv3d_forward(x, spec, w, b), conv3d_naive(x, w, b, stride, padding), atol=1e-5)


@pytest.mark.parametrize("stride,padding,kernel", [(2, 1, 4), (1, 1, 3), (2, 0, 2)])
def test_deconv_vs_naive(stride, padding, kernel):
    rng = np.random.default_rng(kernel)
    spec = ConvSpec(3, 2, kernel, stride, padding, transposed=True)
    x = rng.standard_normal((1, 3, 3, 4, 2))
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
    np.testing.assert_allclose(deconv3d_forward(x, spec, w, b), deconv3d_naive(x, w, b, stride, padding), atol=1e-10)


def test_deconv_doubles_spatial():
    spec = ConvSpec(4, 2, 4, 2, 1, transposed=True)
    x = np.zeros((1, 4, 3, 5, 8), dtype=np.float32)
    y = deconv3d_forward(x, spec, np.zeros(spec.weight_shape, np.float32), np.zeros(2, np.float32))
    assert y.shape == (1, 2, 6, 10, 16)


@pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 4), (2, 0, 2)])
def test_adjoint_identity(stride, padding, kernel):
    rng = np.random.default_rng(stride + kernel)
    conv = ConvSpec(3, 2, kernel, stride, padding)
    deconv = ConvSpec(2, 3, kernel, stride, padding, transposed=True)
    x = rng.standard_normal((2, 3, 8, 8, 8))
    w = rng.standard_normal(conv.weight_shape)
    cx = conv3d_forward(x, conv, w, np.zeros(2))
    y = rng.standard_normal(cx.shape)
    # conv weights (out=2, in=3) read as deconv weights (in=2, out=3)
    dy = deconv3d_forward(y, deconv, w, np.zeros(3))
    assert dy.shape == x.shape
    assert abs(np.sum(cx * y) - np.sum(x * dy)) < 1e-5 * max(1.0, abs(np.sum(cx * y)))


@pytest.mark.parametrize("transposed", [False, True])
@pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 4), (2, 0, 2)])
def test_layer_gradients_vs_finite_difference(transposed, stride, padding, kernel):
    rng = np.random.default_rng(int(transposed) * 7 + stride * 3 + kernel)
    spec = ConvSpec(2, 2, kernel, stride, padding, transposed)
    fwd, bwd = (deconv3d_forward, deconv3d_backward) if transposed else (conv3d_forward, conv3d_backward)
    x = rng.standard_normal((1, 2, 3, 3, 3) if transposed else (1, 2, 4, 4, 4))
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
    probe = rng.standard_normal(fwd(x, spec, w, b).shape)

    def f():
        return float(np.sum(fwd(x, spec, w, b) * probe))

    gx, gw, gb = bwd(x, spec, w, b, probe)
    _assert_grad(gx, _fd_all(f, x))
    _assert_grad(gw, _fd_all(f, w))
    _assert_grad(gb, _fd_all(f, b))


def test_backward_zero_and_linear():
    rng = np.random.default_rng(3)
    spec = ConvSpec(2, 3, 3, 2, 1)
    x, w, b = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal(spec.weight_shape), rng.standard_normal(3)
    gy = rng.standard_normal((1, 3, 2, 2, 2))
    for g in conv3d_backward(x, spec, w, b, np.zeros_like(gy)):
        assert not g.any()
    one = conv3d_backward(x, spec, w, b, gy)
    three = conv3d_backward(x, spec, w, b, 3 * gy)
    for a, c in zip(one, three):
        np.testing.assert_allclose(3 * a, c, rtol=1e-12)


def test_conv_shape_errors():
    spec = ConvSpec(2, 3, 3, 1, 1)
    w, b = np.zeros(spec.weight_shape), np.zeros(3)
    with pytest.raises(ShapeError, match="shape error"):
        conv3d_forward(np.zeros((1, 1, 4, 4, 4)), spec, w, b)
    with pytest.raises(ShapeError, match="shape error"):
        conv3d_backward(np.zeros((1, 2, 4, 4, 4)), spec, w, b, np.zeros((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError, match="shape error"):
        conv3d_forward(np.zeros((1, 2, 1, 1, 1)), ConvSpec(2, 3, 4), np.zeros((3, 2, 4, 4, 4)), b)


# --- generator / discriminator -----------------------------------------------

def test_default_param_count_by_hand():
    # C=1, widths 8/16/32; conv: out*in*k^3 + out, deconv: in*out*4^3 + out
    hand = (
        (8 * 1 * 27 + 8)        # enc0
        + (16 * 8 * 27 + 16)    # down0
        + (16 * 16 * 27 + 16)   # enc1
        + (32 * 16 * 27 + 32)   # down1
        + (32 * 32 * 27 + 32)   # bottleneck
        + (32 * 16 * 64 + 16)   # up1
        + (16 * 32 * 27 + 16)   # dec1
        + (16 * 8 * 64 + 8)     # up0
        + (8 * 16 * 27 + 8)     # dec0
        + (1 * 8 + 1)           # head
    )
    assert hand == 110457
    cfg = GeneratorConfig()
    assert cfg.num_params() == hand
    assert sum(p.size for p in Generator(cfg).params.values()) == hand
    # discriminator: 2->8->16->32->1 with 4^3 kernels
    d_hand = (8 * 2 + 16 * 8 + 32 * 16 + 1 * 32) * 64 + (8 + 16 + 32 + 1)
    assert DiscriminatorConfig().num_params() == d_hand


def test_generator_shapes_and_zero_params():
    for depth in (1, 2, 3):
        cfg = GeneratorConfig(depth=depth, base_channels=2)
        g = Generator(cfg, seed=1)
        assert g(np.zeros((1, 1, 16, 16, 16), np.float32)).shape == (1, 1, 16, 16, 16)
    cfg = GeneratorConfig(depth=1, base_channels=3)
    zero = {k: np.zeros_like(v) for k, v in Generator(cfg).params.items()}
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    assert not generator_forward(x, cfg, zero).any()
    with pytest.raises(ShapeError, match="shape error"):
        Generator(GeneratorConfig(depth=2))(np.zeros((1, 1, 16, 16, 14), np.float32))


def test_skip_path_is_wired():
    cfg = GeneratorConfig(depth=1, base_channels=2)
    params = Generator(cfg, seed=3, dtype=np.float64).params
    # silence the deep path: only the skip branch can reach the decoder
    params["up0.w"][:] = 0
    params["up0.b"][:] = 0
    noskip_cfg = GeneratorConfig(depth=1, base_channels=2, skip=False)
    noskip = {k: v.copy() for k, v in params.items()}
    noskip["dec0.w"] = params["dec0.w"][:, :2].copy()
    x = np.abs(np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4)))
    with_skip = generator_forward(x, cfg, params)
    without = generator_forward(x, noskip_cfg, noskip)
    assert np.ptp(without) == 0  # constant: only biases survive
    assert not np.allclose(with_skip, without)


def test_discriminator_examples():
    cfg = DiscriminatorConfig()
    assert cfg.num_layers == 4 and cfg.kernel == 4
    zero = {k: np.zeros_like(v) for k, v in Discriminator(cfg).params.items()}
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16, 16)).astype(np.float32)
    out = discriminator_forward(x, x, cfg, zero)
    assert out.shape == (2, 1, 1, 1, 1) and np.all(out == 0.5)
    two = DiscriminatorConfig(strides=(2, 2, 1, 1))
    assert Discriminator(two, seed=0)(x, x).shape == (2, 1, 2, 2, 2)
    d = Discriminator(cfg, seed=5)
    y = np.random.default_rng(1).standard_normal(x.shape).astype(np.float32)
    assert not np.array_equal(d(x, y), d(y, x))
    assert np.all((d(x, y) > 0) & (d(x, y) < 1))
    with pytest.raises(ShapeError, match="shape error"):
        d(x, y[:, :, :8])


def test_forward_deterministic():
    g = Generator(GeneratorConfig(base_channels=4), seed=2)
    x = np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    assert np.array_equal(g(x), g(x))
    assert np.array_equal(Generator(GeneratorConfig(base_channels=4), seed=2)(x), g(x))


@pytest.mark.parametrize("mode", L.ADV_MODES)
def test_joint_generator_gradient_vs_finite_difference(mode):
    gcfg = GeneratorConfig(depth=1, base_channels=2)
    G = Generator(gcfg, seed=11, dtype=np.float64)
    D = Discriminator(DiscriminatorConfig(widths=(3,), strides=(2, 1)), seed=12, dtype=np.float64)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, 1, 4, 4, 4))
    y = rng.standard_normal((1, 1, 4, 4, 4))
    weights = L.LossWeights(lam=10.0)
    _, grads = generator_objective(x, y, G, D, weights, mode)

    def f():
        return generator_objective(x, y, G, D, weights, mode)[0]["joint"]

    for name, p in G.params.items():
        _assert_grad(grads[name], _fd_all(f, p))


def test_discriminator_gradient_vs_finite_difference():
    from rubikpp.net.train import discriminator_objective

    D = Discriminator(DiscriminatorConfig(widths=(3,), strides=(2, 1)), seed=4, dtype=np.float64)
    rng = np.random.default_rng(5)
    x, y, fake = (rng.standard_normal((2, 1, 4, 4, 4)) for _ in range(3))
    _, grads = discriminator_objective(x, y, fake, D)
    for name, p in D.params.items():
        _assert_grad(grads[name], _fd_all(lambda: discriminator_objective(x, y, fake, D)[0], p))


# --- Adam ----------------------------------------------------------------------

def test_adam_zero_grad_and_first_step():
    p = {"w": np.array([1.5, -2.0])}
    st = AdamState(lr=0.01)
    adam_step(p, {"w": np.zeros(2)}, st)
    assert np.array_equal(p["w"], [1.5, -2.0]) and st.step == 1
    p = {"w": np.array([0.0])}
    st = AdamState(lr=0.01)
    adam_step(p, {"w": np.array([1.0])}, st)
    assert p["w"][0] == pytest.approx(-0.01, rel=1e-6)
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(2)}, st)
    with pytest.raises(ShapeError):
        adam_step(p, {"v": np.zeros(1)}, st)


def test_adam_quadratic_matches_reference_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    p = {"t": np.array([1.0])}
    st = AdamState(lr=lr)
    for _ in range(100):
        adam_step(p, {"t": 2 * p["t"]}, st)
    assert p["t"][0] == pytest.approx(theta, rel=1e-12)
    assert abs(p["t"][0]) < 0.1


# --- training step -------------------------------------------------------------

def _small_models(seed=0):
    G = Generator(GeneratorConfig(depth=1, base_channels=2), seed=seed)
    D = Discriminator(DiscriminatorConfig(widths=(4, 8), strides=(2, 2, 1)), seed=seed + 1)
    return G, D


def test_gan_step_shapes_and_determinism():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    y = rng.standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    reports = []
    for _ in range(2):
        G, D = _small_models()
        shapes = {k: v.shape for k, v in {**G.params, **{"D" + k: v for k, v in D.params.items()}}.items()}
        go, do = AdamState(), AdamState()
        rep = gan_train_step(x, y, G, D, go, do)
        after = {k: v.shape for k, v in {**G.params, **{"D" + k: v for k, v in D.params.items()}}.items()}
        assert shapes == after
        assert go.step == 1 and do.step == 1
        reports.append((rep, G.params["head.w"].copy()))
    (r1, h1), (r2, h2) = reports
    assert r1 == r2 and np.array_equal(h1, h2)
    assert r1.l1 >= 0 and r1.l2 >= 0 and all(np.isfinite(list(r1.as_dict().values())))
    assert r1.joint == pytest.approx(r1.adv_g + 10 * r1.l1)


def test_gan_step_without_adversary_is_pure_l1():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    y = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    G, D = _small_models(3)
    ref = G.copy()
    d_before = {k: v.copy() for k, v in D.params.items()}
    gan_train_step(x, y, G, D, AdamState(), AdamState(), L.LossWeights(lam=1.0, adversarial=0.0))
    # manual L1 regression step
    out, cache = ref.forward(x)
    grads, _ = ref.backward(cache, L.l1_grad(y, out))
    adam_step(ref.params, grads, AdamState())
    for k in G.params:
        assert np.array_equal(G.params[k], ref.params[k])
    for k in D.params:
        assert np.array_equal(D.params[k], d_before[k])


# --- transfer ------------------------------------------------------------------

def test_replace_head():
    G = Generator(GeneratorConfig(base_channels=4), seed=1)
    S = replace_head(G, 2, seed=9)
    for k, v in G.params.items():
        if not k.startswith("head."):
            assert v.tobytes() == S.params[k].tobytes()
    x = np.zeros((3, 1, 8, 8, 8), np.float32)
    assert S(x).shape == (3, 2, 8, 8, 8)
    assert S.config.final_activation == "logits"
    S2 = replace_head(G, 2, seed=9)
    assert np.array_equal(S.params["head.w"], S2.params["head.w"])
    with pytest.raises(RubikError, match="bad head"):
        replace_head(G, 0)


def test_transfer_path_is_live():
    G = Generator(GeneratorConfig(depth=1, base_channels=4), seed=2)
    S = replace_head(G, 3, seed=1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    labels = rng.integers(0, 3, (1, 8, 8, 8))
    logits, cache = S.forward(x)
    grads, _ = S.backward(cache, L.cross_entropy_grad(logits, labels))
    for k, g in grads.items():
        assert np.all(np.isfinite(g))
        if not k.startswith("head."):
            assert np.abs(g).sum() > 0, k
    before = segmentation_step(x, labels, S, AdamState(lr=1e-3))
    assert before == pytest.approx(L.cross_entropy(logits, labels))


# --- checkpoint ------------------------------------------------------------------

def _trained_checkpoint():
    G, D = _small_models(7)
    go, do = AdamState(), AdamState()
    x = np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    gan_train_step(x, x, G, D, go, do)
    return Checkpoint(G, D, go, do, rng_state={"seed": 3, "step": 1}, metadata={"step": 1})


def test_checkpoint_round_trip(tmp_path):
    ck = _trained_checkpoint()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes()[:8] == MAGIC
    x = np.random.default_rng(1).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    assert np.array_equal(ck.generator(x), back.generator(x))
    assert back.g_opt.step == 1 and back.rng_state == {"seed": 3, "step": 1}
    for k in ck.g_opt.m:
        assert np.array_equal(ck.g_opt.m[k], back.g_opt.m[k])


def test_checkpoint_generator_only():
    ck = Checkpoint(Generator(GeneratorConfig(base_channels=2)))
    back = from_bytes(to_bytes(ck))
    assert back.discriminator is None and back.g_opt is None


def test_checkpoint_errors(tmp_path):
    data = to_bytes(_trained_checkpoint())
    with pytest.raises(FormatError, match="bad checkpoint"):
        from_bytes(data[:-7])
    with pytest.raises(FormatError, match="bad checkpoint"):
        from_bytes(b"NOTACKPT" + data[8:])
    bumped = data[:8] + (2).to_bytes(4, "little") + data[12:]
    with pytest.raises(FormatError, match="incompatible checkpoint"):
        from_bytes(bumped)
    flipped = bytearray(data)
    flipped[-1] ^= 0xFF
    with pytest.raises(FormatError, match="bad checkpoint"):
        from_bytes(bytes(flipped))
    (tmp_path / "t.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")
