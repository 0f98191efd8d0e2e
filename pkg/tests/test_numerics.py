import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctinterp.numerics import (
    AdamState,
    CheckpointError,
    NonFiniteError,
    OptimizerStateError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    activation,
    adam_step,
    bilinear_sample,
    conv2d,
    cross_entropy,
    deconv2d,
    gradcheck,
    l1_loss,
    load_checkpoint,
    mean,
    one_hot,
    save_checkpoint,
    soft_dice_loss,
    softmax,
    tv_regularizer,
)


def store(**arrays) -> ParamStore:
    ps = ParamStore()
    for name, arr in arrays.items():
        ps.add(name, np.asarray(arr, dtype=np.float64))
    return ps


def sq_mean(t):
    return mean(t * t)


# ---------------------------------------------------------------- conv2d


def test_conv2d_unit_kernel():
    x = Tensor(np.ones((1, 3, 3)))
    out = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv2d_output_size_stride2():
    out = conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=1)
    assert out.shape == (1, 2, 2)


def test_conv2d_channel_mismatch_names_axis():
    with pytest.raises(ShapeError, match="channel axis"):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_conv2d_too_small_names_axis():
    with pytest.raises(ShapeError, match="height"):
        conv2d(Tensor(np.zeros((1, 2, 9))), Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros(1)))


@pytest.mark.gradcheck
def test_conv2d_weight_gradient_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 8, 8)), dtype=np.float64)
    ps = store(w=rng.standard_normal((3, 2, 3, 3)), b=rng.standard_normal(3))
    rep = gradcheck(lambda p: sq_mean(conv2d(x, p["w"], p["b"], 1, 1)), ps, eps=1e-3, tol=1e-3, samples=54)
    assert rep.ok, rep.max_rel_error


@pytest.mark.gradcheck
def test_conv2d_input_gradient_finite_differences():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    b = Tensor(np.zeros(3), dtype=np.float64)
    ps = store(x=rng.standard_normal((2, 2, 7, 7)))
    rep = gradcheck(lambda p: sq_mean(conv2d(p["x"], w, b, 2, 1)), ps, tol=1e-3, samples=64)
    assert rep.ok, rep.max_rel_error


# ---------------------------------------------------------------- deconv2d


def test_deconv2d_doubles_size():
    out = deconv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros(1)))
    assert out.shape == (1, 4, 4)


def test_deconv2d_zero_weights_gives_bias():
    out = deconv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.arange(4.0)))
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.arange(4.0)[:, None, None], (4, 6, 6)))


def test_deconv2d_rejects_inexact_upsampling():
    with pytest.raises(ShapeError):
        deconv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


@pytest.mark.gradcheck
def test_deconv2d_gradients_finite_differences():
    rng = np.random.default_rng(3)
    ps = store(x=rng.standard_normal((2, 3, 4, 4)), w=rng.standard_normal((3, 2, 4, 4)), b=rng.standard_normal(2))
    rep = gradcheck(lambda p: sq_mean(deconv2d(p["x"], p["w"], p["b"])), ps, tol=1e-3)
    assert rep.ok, rep.max_rel_error


# ---------------------------------------------------------------- activations


def test_relu_values():
    np.testing.assert_array_equal(activation(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])


def test_sigmoid_zero():
    assert activation(Tensor([0.0]), "sigmoid").data[0] == 0.5


def test_sigmoid_extreme_inputs_stay_finite():
    out = activation(Tensor([-1e4, 1e4]), "sigmoid").data
    np.testing.assert_allclose(out, [0.0, 1.0])


@pytest.mark.gradcheck
def test_tanh_gradient_at_zero():
    ps = store(x=np.zeros(1))
    with Tape() as tape:
        y = activation(ps["x"], "tanh")
    tape.backward(y, seed=np.ones(1))
    assert ps["x"].grad[0] == 1.0
    eps = 1e-6
    fd = (np.tanh(eps) - np.tanh(-eps)) / (2 * eps)
    assert abs(fd - ps["x"].grad[0]) < 1e-6


@pytest.mark.gradcheck
@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(4)
    x = rng.standard_normal(40)
    x[np.abs(x) < 0.05] += 0.2  # stay off the relu kink
    rep = gradcheck(lambda p: sq_mean(activation(p["x"], kind)), store(x=x), tol=1e-3, samples=40)
    assert rep.ok


# ---------------------------------------------------------------- bilinear sampling


def _grid(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    return xx, yy


def test_bilinear_identity_is_bit_exact():
    rng = np.random.default_rng(5)
    src = rng.standard_normal((1, 9, 11)).astype(np.float32)
    xx, yy = _grid(9, 11)
    out = bilinear_sample(Tensor(src), Tensor(xx), Tensor(yy))
    assert out.data.tobytes() == src.tobytes()


def test_bilinear_half_pixel_shift_on_ramp():
    ramp = np.tile(np.arange(8, dtype=np.float32) * 3.0, (5, 1))[None]
    xx, yy = _grid(5, 8)
    out = bilinear_sample(Tensor(ramp), Tensor(xx + 0.5), Tensor(yy)).data
    # interior columns average their two neighbours; the last column clamps
    np.testing.assert_allclose(out[0, :, :-1], (ramp[0, :, :-1] + ramp[0, :, 1:]) / 2)
    np.testing.assert_allclose(out[0, :, -1], ramp[0, :, -1])


def test_bilinear_clamps_out_of_bounds():
    src = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    xx, yy = _grid(3, 4)
    out = bilinear_sample(Tensor(src), Tensor(xx - 10), Tensor(yy + 10)).data
    np.testing.assert_array_equal(out[0], np.full((3, 4), src[0, -1, 0]))


def test_bilinear_shape_mismatch():
    with pytest.raises(ShapeError):
        bilinear_sample(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((4, 5))), Tensor(np.zeros((4, 5))))


@pytest.mark.gradcheck
def test_bilinear_coordinate_gradient_at_random_interior_points():
    rng = np.random.default_rng(6)
    h, w = 10, 12
    src = Tensor(rng.standard_normal((1, h, w)), dtype=np.float64)
    # 20 random points kept away from integer grid lines where the map has kinks
    ys = rng.integers(1, h - 2, 20) + rng.uniform(0.2, 0.8, 20)
    xs = rng.integers(1, w - 2, 20) + rng.uniform(0.2, 0.8, 20)
    xx, yy = _grid(h, w)
    cx, cy = xx.astype(np.float64) + 0.3, yy.astype(np.float64) + 0.4
    sel = (np.arange(20) % h, np.arange(20) % w)
    cx[sel], cy[sel] = xs, ys
    ps = store(cx=cx, cy=cy)
    weights = Tensor(rng.standard_normal((1, h, w)), dtype=np.float64)
    f = lambda p: mean(bilinear_sample(src, p["cx"], p["cy"]) * weights)
    rep = gradcheck(f, ps, eps=1e-4, tol=1e-3, samples=h * w)
    assert rep.ok, rep.max_rel_error


@pytest.mark.gradcheck
def test_bilinear_source_gradient():
    rng = np.random.default_rng(7)
    cx = Tensor(rng.uniform(0, 6, (2, 5, 7)), dtype=np.float64)
    cy = Tensor(rng.uniform(0, 4, (2, 5, 7)), dtype=np.float64)
    rep = gradcheck(lambda p: sq_mean(bilinear_sample(p["s"], cx, cy)), store(s=rng.standard_normal((2, 2, 5, 7))))
    assert rep.ok


# ---------------------------------------------------------------- total variation


def test_tv_constant_is_zero():
    assert tv_regularizer(Tensor(np.full((2, 5, 5), 3.0))).item() == 0.0


def test_tv_single_difference():
    assert tv_regularizer(Tensor(np.array([[[0.0, 3.0]]]))).item() == 3.0


def test_tv_matches_brute_force():
    rng = np.random.default_rng(8)
    f = rng.standard_normal((2, 5, 5))
    brute = 0.0
    for c in range(2):
        for i in range(5):
            for j in range(5):
                if i + 1 < 5:
                    brute += abs(f[c, i + 1, j] - f[c, i, j])
                if j + 1 < 5:
                    brute += abs(f[c, i, j + 1] - f[c, i, j])
    assert tv_regularizer(Tensor(f, dtype=np.float64)).item() == pytest.approx(brute, rel=1e-12)
    assert tv_regularizer(Tensor(f, dtype=np.float64), "mean").item() == pytest.approx(brute / f.size, rel=1e-12)


@pytest.mark.gradcheck
def test_tv_gradient():
    rng = np.random.default_rng(9)
    rep = gradcheck(lambda p: tv_regularizer(p["f"], "mean"), store(f=rng.standard_normal((2, 4, 5))), tol=1e-3)
    assert rep.ok


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-5, 5)))
def test_tv_nonnegative_and_zero_iff_constant(field):
    value = tv_regularizer(Tensor(field, dtype=np.float64)).item()
    assert value >= 0
    constant = all(np.all(field[c] == field[c, 0, 0]) for c in range(2))
    assert (value == 0) == constant


# ---------------------------------------------------------------- l1


def test_l1_equal_is_zero():
    a = Tensor(np.arange(6.0))
    assert l1_loss(a, a).item() == 0.0


def test_l1_mean_reduction():
    assert l1_loss(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 2.0


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


@pytest.mark.gradcheck
def test_l1_gradient():
    rng = np.random.default_rng(10)
    b = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    rep = gradcheck(lambda p: l1_loss(p["a"], b), store(a=rng.standard_normal((3, 4))), eps=1e-4, tol=1e-4)
    assert rep.ok


# ---------------------------------------------------------------- dice / softmax / cross-entropy


def _rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w))
    m[y0:y1, x0:x1] = 1
    return m


def test_soft_dice_perfect_prediction():
    t = np.stack([_rect(8, 8, 0, 4, 0, 8), _rect(8, 8, 5, 7, 2, 4)])
    assert soft_dice_loss(Tensor(t), Tensor(t)).item() <= 1e-4


def test_soft_dice_empty_prediction():
    t = np.stack([_rect(8, 8, 0, 4, 0, 8), _rect(8, 8, 5, 7, 2, 4)])
    assert soft_dice_loss(Tensor(np.zeros_like(t)), Tensor(t)).item() == pytest.approx(1.0, abs=1e-5)


def test_soft_dice_half_overlap_pixel_count():
    a = _rect(10, 10, 0, 4, 0, 4)
    b = _rect(10, 10, 2, 6, 0, 4)
    inter = np.logical_and(a, b).sum()
    expected = 1 - 2 * inter / (a.sum() + b.sum())
    got = soft_dice_loss(Tensor(a[None], dtype=np.float64), Tensor(b[None], dtype=np.float64)).item()
    assert got == pytest.approx(expected, abs=1e-6)


@pytest.mark.gradcheck
def test_soft_dice_gradient():
    rng = np.random.default_rng(11)
    t = Tensor(np.stack([_rect(6, 6, 0, 3, 0, 6), _rect(6, 6, 4, 6, 1, 3)]), dtype=np.float64)
    rep = gradcheck(lambda p: soft_dice_loss(p["p"], t), store(p=rng.uniform(0, 1, (2, 6, 6))), tol=1e-3)
    assert rep.ok


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5, 5), elements=st.floats(0, 1)), arrays(np.bool_, (2, 5, 5)))
def test_soft_dice_range(p, t):
    value = soft_dice_loss(Tensor(p, dtype=np.float64), Tensor(t.astype(np.float64))).item()
    assert -1e-12 <= value <= 1 + 1e-5


@pytest.mark.gradcheck
def test_softmax_and_cross_entropy_gradients():
    rng = np.random.default_rng(12)
    labels = rng.integers(0, 3, (2, 4, 4))
    rep = gradcheck(lambda p: cross_entropy(p["z"], labels), store(z=rng.standard_normal((2, 3, 4, 4))))
    assert rep.ok
    w = Tensor(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
    rep = gradcheck(lambda p: mean(softmax(p["z"]) * w), store(z=rng.standard_normal((2, 3, 4, 4))))
    assert rep.ok


def test_one_hot_single_and_batch():
    lab = np.array([[0, 2], [1, 0]])
    assert one_hot(lab, 3, axis=0).shape == (3, 2, 2)
    assert one_hot(lab[None], 3).shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(one_hot(lab, 3, axis=0).sum(axis=0), 1)


# ---------------------------------------------------------------- tape behaviour


def test_unreachable_parameters_have_zero_gradient():
    ps = store(a=np.ones(3), b=np.ones(3))
    with Tape() as tape:
        loss = sq_mean(ps["a"] * 2.0)
    tape.backward(loss)
    assert np.all(ps["a"].grad != 0)
    np.testing.assert_array_equal(ps["b"].grad, 0)


def test_backward_visits_each_op_once():
    ps = store(a=np.ones(3))
    with Tape() as tape:
        x = ps["a"] * 2.0
        y = x + x
        loss = mean(y)
    assert tape.backward(loss) == len(tape) == 3
    np.testing.assert_allclose(ps["a"].grad, 4.0 / 3)


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.inf]) * 2.0


def test_forward_backward_deterministic():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        ps = ParamStore()
        ps.add("w", w)
        ps.add("b", np.zeros(4, np.float32))
        with Tape() as tape:
            loss = sq_mean(conv2d(Tensor(x), ps["w"], ps["b"], 1, 1))
        tape.backward(loss)
        runs.append((loss.data.tobytes(), ps["w"].grad.tobytes()))
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params():
    ps = store(w=np.arange(4.0))
    before = ps["w"].data.copy()
    adam_step(ps, AdamState.for_params(ps), lr=0.1)
    np.testing.assert_array_equal(ps["w"].data, before)


def test_adam_first_step_is_lr():
    ps = store(w=np.array([1.0]))
    ps["w"].grad[:] = 1.0
    adam_step(ps, AdamState.for_params(ps), lr=0.1)
    assert ps["w"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_uninitialized_state():
    with pytest.raises(OptimizerStateError):
        adam_step(store(w=np.ones(1)), None)


def test_adam_determinism_ten_steps():
    def run():
        rng = np.random.default_rng(42)
        ps = ParamStore(42)
        ps.add("w", rng.standard_normal((4, 4)).astype(np.float32))
        target = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        state = AdamState.for_params(ps)
        for _ in range(10):
            ps.zero_grad()
            with Tape() as tape:
                loss = l1_loss(ps["w"], target)
            tape.backward(loss)
            adam_step(ps, state, lr=0.01)
        return ps

    assert run().equal(run())


# ---------------------------------------------------------------- gradcheck + checkpoints


@pytest.mark.gradcheck
def test_gradcheck_quadratic_exact():
    rep = gradcheck(lambda p: mean(p["t"] * p["t"]), store(t=np.linspace(-1, 1, 50)), tol=1e-6)
    assert rep.ok and rep.worst < 1e-6


@pytest.mark.gradcheck
def test_gradcheck_flags_wrong_gradient():
    from ctinterp.numerics.tensor import emit

    def bad(p):
        x = p["t"]
        return emit(np.asarray((x.data**2).sum()), (x,), lambda g: (g * x.data,), "bad")  # missing factor 2

    rep = gradcheck(bad, store(t=np.ones(4)), tol=1e-3)
    assert rep.failed == ["t"]


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(14)
    ps = ParamStore()
    ps.add("enc1.w", rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    ps.add("enc1.b", rng.standard_normal(4).astype(np.float32))
    ps.add("scalar", np.array(3.5, dtype=np.float32))
    path = tmp_path / "m.ifck"
    save_checkpoint(ps, path)
    assert path.read_bytes()[:4] == b"IFCK"
    assert load_checkpoint(path).equal(ps)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ifck"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_entry():
    a = store(w=np.zeros((2, 2)))
    b = store(w=np.zeros((3, 2)))
    with pytest.raises(CheckpointError, match="'w'"):
        a.load_values(b)
