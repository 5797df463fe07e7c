import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sre.nn import (
    VAR_FLOOR,
    Batch,
    DenoiserNet,
    LossSpec,
    LossTerm,
    NetConfig,
    NetError,
    NetOutput,
    NeuralDenoiser,
    Optimizer,
    Tokenizer,
    TrainingError,
    affine_map,
    compute_loss,
    gradient_check,
    load_net,
    loss_and_grad,
    save_net,
    sinusoidal,
    snap_to_grid,
    tokenize,
    train,
)
from sre.oracle import GaussianMixture
from sre.paradigm import ConversionError, Paradigm, convert_prediction
from sre.tasks import identity_task
from sre.tsampling import TSampler
from sre.variables import make_state

RF = Paradigm("rectified-flow")
COS = Paradigm("cosine-flow")
DDPM = Paradigm("ddpm-discrete", d_steps=50)


def _batch(rng, B=3, n=4, dim=2, paradigm=COS, cond=True):
    lv = rng.uniform(0.05, 0.95, (B, n))
    lv = snap_to_grid(paradigm, lv)
    c = np.zeros((B, n), bool)
    if cond:
        c[1, 2] = True
        lv[1, 2] = 0.0
    return Batch(rng.standard_normal((B, n, dim)), rng.standard_normal((B, n, dim)), lv, np.arange(n, dtype=float), c)


def _out(mean, log_var=None, interp=None):
    return NetOutput(np.asarray(mean, float), log_var, interp, None, None)


def test_tokenizer_shapes_and_injectivity():
    tok = Tokenizer(1, 4, 4)
    st_ = make_state([[0.5], [0.5]], [0.0, 1.0])
    rows = tokenize(st_, [3.0, 3.0], 4, 4)
    assert rows.shape == (2, 9)
    assert not np.array_equal(rows[0, 1:5], rows[1, 1:5])
    rows = tok(np.array([[0.5], [0.5]]), np.array([0.3, 0.3]), [0.0, 1.0])
    assert not np.array_equal(rows[0], rows[1])
    assert Tokenizer(3).width == 3 + 16 + 16
    with pytest.raises(NetError):
        tok(np.zeros((2, 1)), np.zeros(2), [0.0])


def test_sinusoidal_frequencies():
    e = sinusoidal(np.array([0.0, 1.0]), 4)
    np.testing.assert_allclose(e[0], [0, 0, 1, 1])
    np.testing.assert_allclose(e[1], [np.sin(1), np.sin(1000), np.cos(1), np.cos(1000)])


def test_zero_net_outputs_zero_and_clamps_conditioned():
    cfg = NetConfig(2, (5,), (3,), 4, 4, log_var=True)
    net = DenoiserNet.zeros(cfg)
    vals = np.random.default_rng(0).standard_normal((3, 2))
    out = net.forward(vals, [0.5, 0.0, 0.7], np.arange(3.0), COS, conditioned=[False, True, False])
    assert out.prediction.x0_mean.shape == (3, 2)
    np.testing.assert_array_equal(out.prediction.x0_mean[[0, 2]], 0.0)
    np.testing.assert_array_equal(out.prediction.x0_mean[1], vals[1])
    assert out.prediction.var[1] == 0.0
    np.testing.assert_allclose(out.prediction.var[[0, 2]], 2.0)  # dim * exp(0)


def test_net_validation():
    cfg = NetConfig(1, (4,), ())
    with pytest.raises(NetError):
        DenoiserNet(cfg, [(np.zeros((3, 4)), np.zeros(4))])
    params = DenoiserNet.zeros(cfg).params
    params[0][0][0, 0] = np.nan
    with pytest.raises(NetError):
        DenoiserNet(cfg, params)
    with pytest.raises(NetError):
        NetConfig(1, (0,))
    with pytest.raises(NetError):
        NetConfig(1, emb_dim=3)


@pytest.mark.parametrize("src", ["x0", "epsilon", "v", "u"])
@pytest.mark.parametrize("dst", ["x0", "epsilon", "v", "u"])
def test_affine_map_matches_conversion(src, dst):
    rng = np.random.default_rng(1)
    lv = rng.uniform(0.05, 0.95, (5, 3))
    pred, x_t = rng.standard_normal((5, 3, 2)), rng.standard_normal((5, 3, 2))
    alpha, beta, ok = affine_map(COS, src, dst, lv)
    assert ok.all()
    want = convert_prediction(COS, pred, src, dst, x_t, lv)
    np.testing.assert_allclose(alpha[..., None] * pred + beta[..., None] * x_t, want, atol=1e-10)


def test_affine_map_flags_singular_entries():
    _, _, ok = affine_map(RF, "epsilon", "x0", np.array([0.5, 1.0]))
    assert ok.tolist() == [True, False]
    net = DenoiserNet.zeros(NetConfig(1, (), (), 2, 2, kind="epsilon"))
    with pytest.raises(ConversionError):
        net.forward(np.zeros((1, 1)), [1.0], [0.0], RF)


def test_loss_examples():
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal((2, 3, 1)), rng.standard_normal((2, 3, 1))
    lv = rng.uniform(0.1, 0.9, (2, 3))
    loss, g = compute_loss(_out(eps), x0, eps, COS, lv, LossSpec.single("mse", "epsilon"), kind="epsilon")
    assert loss == 0.0 and not g["mean"].any()
    # nll with sigma = 1 and zero residual
    loss, _ = compute_loss(_out(x0, np.zeros((2, 3))), x0, eps, COS, lv, LossSpec.single("nll"), kind="x0")
    assert loss == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-15)
    x0 = rng.standard_normal((2, 3, 2))
    eps = rng.standard_normal((2, 3, 2))
    loss, _ = compute_loss(_out(x0, np.zeros((2, 3))), x0, eps, COS, lv, LossSpec.single("nll"), kind="x0")
    assert loss == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-15)
    u = -np.pi / 2 * np.sin(np.pi / 2 * lv)[..., None] * x0 + np.pi / 2 * np.cos(np.pi / 2 * lv)[..., None] * eps
    spec = LossSpec.single("cosine", "u")
    assert compute_loss(_out(u), x0, eps, COS, lv, spec, kind="u")[0] == pytest.approx(0.0, abs=1e-14)
    assert compute_loss(_out(3 * u), x0, eps, COS, lv, spec, kind="u")[0] == pytest.approx(0.0, abs=1e-14)
    assert compute_loss(_out(-u), x0, eps, COS, lv, spec, kind="u")[0] == pytest.approx(2.0, abs=1e-14)


def test_nll_variance_floor():
    x0 = np.zeros((1, 1, 1))
    lv = np.full((1, 1), 0.5)
    loss, g = compute_loss(_out(x0, np.full((1, 1), -40.0)), x0, x0, COS, lv, LossSpec.single("nll"), kind="x0")
    assert loss == pytest.approx(0.5 * np.log(2 * np.pi * VAR_FLOOR))
    assert g["log_var"][0, 0] == 0.0


def test_conditioned_variables_excluded_from_loss():
    rng = np.random.default_rng(3)
    x0, eps = rng.standard_normal((1, 2, 1)), rng.standard_normal((1, 2, 1))
    lv = np.array([[0.5, 0.0]])
    mean = x0.copy()
    mean[0, 1] += 10.0
    loss, g = compute_loss(_out(mean), x0, eps, COS, lv, LossSpec.single("mse", "x0"), kind="x0",
                           conditioned=[[False, True]])
    assert loss == 0.0 and not g["mean"].any()


def test_loss_spec_rules():
    with pytest.raises(NetError):
        LossSpec((LossTerm("mse", 0.0),))
    with pytest.raises(NetError):
        LossTerm("cosine", 1.0, "epsilon")
    with pytest.raises(NetError):
        LossTerm("mse", -1.0)
    with pytest.raises(NetError, match="ddpm-discrete"):
        LossSpec.single("vlb").check(RF)
    with pytest.raises(NetError, match="velocity"):
        LossSpec.single("mse", "u").check(DDPM)
    with pytest.raises(NetError, match="log-variance"):
        LossSpec.single("nll").check(RF, NetConfig(1))
    with pytest.raises(NetError, match="interpolation"):
        LossSpec.single("vlb").check(DDPM, NetConfig(1))


def test_linear_net_gradient_matches_least_squares():
    rng = np.random.default_rng(4)
    cfg = NetConfig(1, (), (), 4, 4)
    net = DenoiserNet.init(cfg, rng)
    b = _batch(rng, B=6, n=1, dim=1, cond=False)
    loss, grads, out = loss_and_grad(net, b, RF, LossSpec.single("mse", "x0"))
    x_t = (1 - b.levels)[..., None] * b.x0 + b.levels[..., None] * b.eps
    tokens = cfg.tokenizer(x_t, b.levels, b.positions).reshape(6, -1)
    Z = np.concatenate([tokens, tokens], axis=1)  # n = 1, so the context equals the token
    W, c = net.params[0]
    r = Z @ W + c - b.x0.reshape(6, 1)
    np.testing.assert_allclose(loss, np.mean(r**2), rtol=1e-13)
    np.testing.assert_allclose(grads[0][0], 2 * Z.T @ r / 6, atol=1e-10)
    np.testing.assert_allclose(grads[0][1], 2 * r.sum(axis=0) / 6, atol=1e-10)


def test_zero_net_zero_targets_have_zero_gradients():
    cfg = NetConfig(2, (5, 4), (3,), 4, 4)
    net = DenoiserNet.zeros(cfg)
    b = Batch(np.zeros((2, 3, 2)), np.zeros((2, 3, 2)), np.full((2, 3), 0.4), np.arange(3.0))
    for target in ("x0", "epsilon", "v", "u"):
        loss, grads, _ = loss_and_grad(net, b, COS, LossSpec.single("mse", target))
        assert loss == 0.0
        assert all(not gW.any() and not gb.any() for gW, gb in grads)


LOSSES = [
    (COS, LossSpec.single("mse", "epsilon")),
    (COS, LossSpec.single("mse", "v")),
    (RF, LossSpec.single("mse", "u")),
    (COS, LossSpec.single("nll")),
    (COS, LossSpec.single("cosine", "u")),
    (DDPM, LossSpec.single("vlb")),
    (DDPM, LossSpec((LossTerm("mse", 1.0, "epsilon"), LossTerm("vlb", 0.3), LossTerm("nll", 0.5)))),
]


@pytest.mark.parametrize("paradigm,spec", LOSSES)
@pytest.mark.parametrize("kind", ["x0", "epsilon", "v"])
def test_gradient_check_three_layer_net(paradigm, spec, kind):
    rng = np.random.default_rng(5)
    cfg = NetConfig(2, (6, 5), (4,), 4, 4, log_var=True, var_interp=True, kind=kind)
    net = DenoiserNet.init(cfg, rng)
    assert gradient_check(net, _batch(rng, paradigm=paradigm), spec, paradigm, rng, n_params=60) <= 1e-4


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), log_var=st.booleans(), interp=st.booleans(), depth=st.integers(0, 2))
def test_gradient_check_property(seed, log_var, interp, depth):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(1, (5,) * depth, (4,) * (depth % 2), 4, 2, log_var=log_var, var_interp=interp)
    net = DenoiserNet.init(cfg, rng)
    terms = [LossTerm("mse", 1.0, "epsilon")]
    if log_var:
        terms.append(LossTerm("nll", 0.5))
    if interp:
        terms.append(LossTerm("vlb", 0.5))
    paradigm = DDPM if interp else COS
    assert gradient_check(net, _batch(rng, dim=1, paradigm=paradigm), LossSpec(tuple(terms)), paradigm, rng, 40) <= 1e-4


def test_permutation_invariance():
    rng = np.random.default_rng(6)
    cfg = NetConfig(2, (6,), (5,), 4, 4, log_var=True)
    net = DenoiserNet.init(cfg, rng)
    b = _batch(rng, cond=False)
    perm = np.array([2, 0, 3, 1])
    pb = Batch(b.x0[:, perm], b.eps[:, perm], b.levels[:, perm], b.positions[perm])
    spec = LossSpec((LossTerm("mse", 1.0, "epsilon"), LossTerm("nll", 1.0)))
    l1 = loss_and_grad(net, b, COS, spec)
    l2 = loss_and_grad(net, pb, COS, spec)
    assert l1[0] == pytest.approx(l2[0], rel=1e-13)
    np.testing.assert_allclose(l1[2].prediction.x0_mean[:, perm], l2[2].prediction.x0_mean, atol=1e-14)


def _task():
    return identity_task(GaussianMixture([1.0], [[2.0]], [[[0.25]]]), 1)


def test_training_lr_zero_keeps_parameters():
    net = DenoiserNet.init(NetConfig(1, (8,), (8,)), np.random.default_rng(0))
    out, trace = train(net, _task(), TSampler(), Optimizer("adam", 0.0, 20, 16), RF, LossSpec.single("mse", "x0"),
                       np.random.default_rng(1))
    assert np.array_equal(out.flat(), net.flat())
    assert trace.shape == (20,)


def test_training_is_deterministic_and_makes_progress():
    net = DenoiserNet.init(NetConfig(1, (16,), (16,)), np.random.default_rng(0))
    args = (_task(), TSampler(), Optimizer("adam", 1e-3, 600, 32), RF, LossSpec.single("mse", "x0"))
    a, ta = train(net, *args, np.random.default_rng(1))
    b, tb = train(net, *args, np.random.default_rng(1))
    assert np.array_equal(ta, tb)
    assert np.array_equal(a.flat(), b.flat())
    assert ta[-100:].mean() < ta[:100].mean()
    sgd = train(net, args[0], args[1], Optimizer("sgd", 1e-2, 200, 32), RF, args[4], np.random.default_rng(1))[1]
    assert sgd[-50:].mean() < sgd[:50].mean()


def test_training_aborts_on_nonfinite_loss():
    net = DenoiserNet.init(NetConfig(1, (8,), ()), np.random.default_rng(0))
    with pytest.raises(TrainingError, match="non-finite"):
        train(net, _task(), TSampler(), Optimizer("sgd", 1e6, 50, 8), RF, LossSpec.single("mse", "x0"),
              np.random.default_rng(0))


def test_neural_denoiser_in_sampler_contract():
    net = DenoiserNet.init(NetConfig(1, (4,), (), 4, 4, log_var=True), np.random.default_rng(0))
    den = NeuralDenoiser(net, COS, np.arange(3.0), conditioned=[True, False, False])
    pred = den(np.zeros((5, 3, 1)), np.array([0.0, 0.5, 1.0]))
    assert pred.x0_mean.shape == (5, 3, 1) and pred.var.shape == (5, 3)
    assert np.all(pred.var[:, 0] == 0)


def test_serialization_round_trip(tmp_path):
    cfg = NetConfig(2, (7, 3), (5,), 6, 4, log_var=True, var_interp=False, kind="v")
    net = DenoiserNet.init(cfg, np.random.default_rng(0))
    path = tmp_path / "net.bin"
    save_net(net, path)
    raw = path.read_bytes()
    assert raw[:5] == b"SRNN1"
    assert len(raw) == 5 + 4 * (1 + 12) + 8 * net.n_params
    back = load_net(path)
    assert back.config == cfg
    assert np.array_equal(back.flat(), net.flat())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(NetError, match="magic"):
        load_net(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(NetError):
        load_net(path)


def test_snap_to_grid():
    np.testing.assert_allclose(snap_to_grid(DDPM, [0.0, 0.001, 0.5, 1.0]), [0.02, 0.02, 0.5, 1.0])
    np.testing.assert_array_equal(snap_to_grid(RF, [0.0, 0.3]), [0.0, 0.3])
