import numpy as np
import pytest

from pidiff.data import generate_dataset, stack_pairs
from pidiff.diffusion import IdentityCodec, build_linear_schedule
from pidiff.tensor import (
    FrozenParameterError,
    Tensor,
    default_dtype,
    finite_difference_check,
    numerical_gradient,
    relative_error,
)
from pidiff.tev import TeVNet, train_tevnet
from pidiff.training import (
    LossWeights,
    PIDModel,
    TrainConfig,
    build_pid_model,
    checkpoint_name,
    combined_loss,
    draw_batch,
    load_model,
    loss_noise,
    loss_rec,
    loss_tev,
    per_image_loss_rec,
    pid_objective,
    pid_training_step,
    train,
)

SIZE = 8


def tiny_tevnet(seed=0):
    return TeVNet(widths=(2, 2, 2), seed=seed).freeze()


def tiny_model(tevnet=None, seed=0):
    # under a thousand trainable parameters
    return build_pid_model(SIZE, IdentityCodec(), "mlp", tevnet, build_linear_schedule(20, 1e-3, 0.1),
                           widths=(2, 2), cond_c=1, seed=seed, temb_dim=4, cond_hidden=2)


@pytest.fixture(scope="module")
def data():
    return stack_pairs(generate_dataset(6, SIZE, SIZE, seed=3))


def grads(model):
    return [None if p.grad is None else p.grad.copy() for p in model.trainable_parameters()]


# -- losses ----------------------------------------------------------------------------

def test_loss_noise_examples():
    eps = np.zeros((2, 1, 2, 2))
    assert loss_noise(eps, Tensor(eps.copy())).item() == 0.0
    assert loss_noise(eps, Tensor(np.full(eps.shape, -0.3))).item() == pytest.approx(0.3, rel=1e-15)
    x = Tensor(np.ones((3,)), requires_grad=True)
    loss_noise(np.ones(3), x).backward()
    np.testing.assert_array_equal(x.grad, 0.0)
    with pytest.raises(ValueError):
        loss_noise(np.zeros(3), Tensor(np.zeros(4)))


def test_loss_tev_properties(rng, f64):
    net = tiny_tevnet()
    a = rng.uniform(-1, 1, (2, 1, 8, 8))
    b = rng.uniform(-1, 1, (2, 1, 8, 8))
    assert loss_tev(Tensor(a), a, net).item() == 0.0
    assert loss_tev(Tensor(a), b, net).item() == pytest.approx(loss_tev(Tensor(b), a, net).item(), rel=1e-14)
    # 1 - x in the [0, 1] domain is -x in [-1, 1]
    assert loss_tev(Tensor(-a), a, net).item() > 0
    with pytest.raises(ValueError):
        loss_tev(Tensor(a), b[:1], net)


def test_physics_losses_need_frozen_network(rng):
    x = Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)))
    with pytest.raises(FrozenParameterError):
        loss_rec(x, TeVNet(widths=(2, 2, 2)))
    with pytest.raises(ValueError):
        loss_rec(x, None)
    m = tiny_model()
    with pytest.raises(FrozenParameterError):
        PIDModel(m.denoiser, m.conditioner, IdentityCodec(), m.sched, TeVNet(widths=(2, 2, 2)))


@pytest.fixture(scope="module")
def trained_tevnet():
    ir, _ = stack_pairs(generate_dataset(32, 16, 16, seed=40))
    net = TeVNet(widths=(4, 8, 8), seed=0)
    train_tevnet(net, (ir + 1) / 2, 40, lr=3e-3, seed=0)
    return net.freeze()


def test_loss_rec_separates_noise_from_infrared(trained_tevnet):
    ir, _ = stack_pairs(generate_dataset(100, 16, 16, seed=41))
    noise = np.random.default_rng(0).uniform(-1, 1, ir.shape)
    in_domain = per_image_loss_rec(ir, trained_tevnet)
    off_domain = per_image_loss_rec(noise, trained_tevnet)
    assert np.all(in_domain >= 0)
    assert np.median(off_domain) > np.median(in_domain)


# -- training step -----------------------------------------------------------------------

def test_baseline_total_is_noise_loss(data):
    model = tiny_model(tiny_tevnet())
    batch = draw_batch(*data, model, seed=0, iteration=1, elements=range(3))
    res = pid_training_step(model, batch, LossWeights(0, 0))
    assert res.total == res.l_noise
    assert np.isfinite(res.l_rec) and np.isfinite(res.l_tev)


def test_breakdown_sums_to_total(data):
    model = tiny_model(tiny_tevnet())
    w = LossWeights(50, 5)
    for it in range(1, 4):
        res = pid_training_step(model, draw_batch(*data, model, 0, it, range(3)), w)
        assert combined_loss(res, w) == pytest.approx(res.total, rel=1e-6)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1, 0)
    assert not LossWeights(0, 0).physics and LossWeights(0, 5).physics


def objective_setup(data, dtype):
    with default_dtype(dtype):
        model = tiny_model(tiny_tevnet(seed=2), seed=1)
    assert sum(p.size for p in model.trainable_parameters()) <= 1000
    batch = draw_batch(*data, model, seed=0, iteration=1, elements=range(2))
    batch.t[:] = [2, 5]
    return model, batch, (lambda: pid_objective(model, batch, LossWeights(50, 5))[0])


def test_full_objective_gradient_f64(data):
    model, _, f = objective_setup(data, np.float64)
    rep = finite_difference_check(f, model.trainable_parameters(), h=1e-5, tol=1e-6)
    assert rep.passed, (rep.max_rel_error, rep.per_param)


def test_full_objective_gradient_f32(data):
    model, _, f = objective_setup(data, np.float32)
    for p in model.trainable_parameters():
        p.grad = None
    f().backward()
    analytic = [p.grad.astype(np.float64) for p in model.trainable_parameters()]
    # the oracle differentiates the same weights promoted to f64; probing in f32 only measures roundoff
    for module in (model.denoiser, model.conditioner, model.tevnet):
        module.astype(np.float64)
    errors = [relative_error(a, numerical_gradient(f, p, 1e-5))
              for a, p in zip(analytic, model.trainable_parameters())]
    assert max(errors) < 1e-3, errors


def test_gradient_accumulation_equivalence(data, f64):
    w = LossWeights(50, 5)
    a = tiny_model(tiny_tevnet())
    b = tiny_model(tiny_tevnet())
    pid_training_step(a, draw_batch(*data, a, 0, 1, range(4)), w)
    for k in range(2):
        pid_training_step(b, draw_batch(*data, b, 0, 1, range(2 * k, 2 * k + 2)), w, loss_scale=2)
    for ga, gb in zip(grads(a), grads(b)):
        np.testing.assert_allclose(gb, ga, rtol=1e-6, atol=1e-12)


def test_baseline_gradients_match_physics_free_build(data):
    with_tev = tiny_model(tiny_tevnet())
    without = tiny_model(None)
    for it in (1, 2):
        pid_training_step(with_tev, draw_batch(*data, with_tev, 0, it, range(3)), LossWeights(0, 0))
        pid_training_step(without, draw_batch(*data, without, 0, it, range(3)), LossWeights(0, 0))
    for ga, gb in zip(grads(with_tev), grads(without)):
        assert ga.tobytes() == gb.tobytes()


def test_physics_cutoff_masks_large_t(data):
    model = tiny_model(tiny_tevnet())
    batch = draw_batch(*data, model, 0, 1, range(2))
    batch.t[:] = [15, 18]
    res = pid_training_step(model, batch, LossWeights(50, 5), physics_max_t=10)
    # no element at or below the cutoff: only the noise loss drives the update
    assert res.total == res.l_noise


def test_draw_batch_is_per_element(data):
    model = tiny_model()
    full = draw_batch(*data, model, 7, 3, range(4))
    part = draw_batch(*data, model, 7, 3, [2, 3])
    np.testing.assert_array_equal(full.eps[2:], part.eps)
    np.testing.assert_array_equal(full.t[2:], part.t)
    assert np.all((full.t >= 1) & (full.t <= 20))


# -- loop ----------------------------------------------------------------------------------

def cfg(**kw):
    base = dict(iterations=4, batch_size=2, seed=5, weights=LossWeights(50, 5), log_every=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_leave_model(data):
    model = tiny_model(tiny_tevnet())
    before = model.denoiser.weight_hash()
    res = train(model, *data, cfg(iterations=0))
    assert res.iteration == 0 and model.denoiser.weight_hash() == before


def test_config_and_data_errors(data):
    model = tiny_model(tiny_tevnet())
    with pytest.raises(ValueError):
        train(model, data[0][:0], data[1][:0], cfg())
    with pytest.raises(ValueError):
        train(model, *data, cfg(accumulation=0))
    with pytest.raises(ValueError):
        train(tiny_model(None), *data, cfg())
    assert cfg(batch_size=3, accumulation=4).effective_batch == 12


def test_frozen_weights_untouched(data):
    tev = tiny_tevnet()
    model = tiny_model(tev)
    before = model.frozen_hash()
    train(model, *data, cfg(iterations=3))
    assert model.frozen_hash() == before


def test_training_is_deterministic(data, tmp_path):
    for name in ("a", "b"):
        train(tiny_model(tiny_tevnet()), *data, cfg(checkpoint_every=2), out_dir=tmp_path / name)
    for f in (checkpoint_name(2), checkpoint_name(4), "metrics.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resume_continues_numbering_and_state(data, tmp_path):
    tev = tiny_tevnet()
    train(tiny_model(tev), *data, cfg(iterations=6), out_dir=tmp_path / "s")
    train(tiny_model(tev), *data, cfg(iterations=4), out_dir=tmp_path / "r")
    model, state = load_model(tmp_path / "r" / checkpoint_name(4), tev)
    resumed = train(model, *data, cfg(iterations=2), out_dir=tmp_path / "r", resume_state=state)
    assert resumed.iteration == 6
    assert (tmp_path / "r" / checkpoint_name(6)).read_bytes() == (tmp_path / "s" / checkpoint_name(6)).read_bytes()
    lines = (tmp_path / "r" / "metrics.tsv").read_text(encoding="utf-8").splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["iteration", "2", "4", "6"]


def test_loaded_model_matches(data, tmp_path):
    tev = tiny_tevnet()
    res = train(tiny_model(tev), *data, cfg(iterations=2), out_dir=tmp_path)
    back, _ = load_model(tmp_path / checkpoint_name(2), tev)
    assert back.denoiser.weight_hash() == res.model.denoiser.weight_hash()
    assert back.conditioner.weight_hash() == res.model.conditioner.weight_hash()
    np.testing.assert_array_equal(back.sched.alpha_bar, res.model.sched.alpha_bar)
