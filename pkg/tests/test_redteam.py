import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bprl.data import ImageExample, PoisonPlan, Provenance, make_dataset, make_templates, patch_trigger, poison_dataset
from bprl.errors import InvalidInputError
from bprl.nn import ArchSpec, Model, checksum, init_params
from bprl.redteam import (
    QraGenerator,
    RaConfig,
    build_qra_dataset,
    build_ra_dataset,
    kl_to_target,
    make_generator,
    perturb,
    qra_apply,
    qra_evaluate,
    qra_loss_and_grad,
    qra_train,
    qra_transfer,
    retuning_attack,
)

from helpers import min_hidden_preactivation

EPS = 16 / 255


@pytest.fixture(scope="module")
def pool():
    tpl = make_templates(8, 8, 1, 4, 0.2, seed=0)
    return make_dataset(tpl, 400, seed=1), make_dataset(tpl, 50, seed=2)


def zero_generator(d, hidden=16):
    arch = ArchSpec((d, hidden, hidden, d))
    return QraGenerator(Model(arch, np.zeros(arch.n_params, np.float32)))


def test_ra_set_composition(pool):
    train_pool, _ = pool
    ra = build_ra_dataset(train_pool, patch_trigger(), 0, RaConfig(5, 1000))
    poisoned = ra.provenance == Provenance.POISONED
    assert len(ra) == 1000 and poisoned.sum() == 5
    assert np.all(ra.labels[poisoned] == 0) and np.all(ra.original_labels[poisoned] != 0)
    np.testing.assert_array_equal(ra.labels[~poisoned], ra.original_labels[~poisoned])
    again = build_ra_dataset(train_pool, patch_trigger(), 0, RaConfig(5, 1000))
    np.testing.assert_array_equal(ra.pixels, again.pixels)


def test_ra_guards(pool):
    train_pool, _ = pool
    with pytest.raises(InvalidInputError):
        RaConfig(0)
    with pytest.raises(InvalidInputError):
        RaConfig(10, total=10)
    with pytest.raises(InvalidInputError):
        build_ra_dataset(train_pool, patch_trigger(), 0, RaConfig(5, total=5000))


def test_ra_warns_when_not_below_one_percent(pool, caplog):
    train_pool, _ = pool
    build_ra_dataset(train_pool, patch_trigger(), 0, RaConfig(5, 100), n_training_poison=100)
    assert "not below 1%" in caplog.text


def test_ra_skips_poisoned_pool_rows(pool):
    train_pool, _ = pool
    poisoned_pool = poison_dataset(train_pool, PoisonPlan(0.1, 0, patch_trigger(), 0))
    ra = build_ra_dataset(poisoned_pool, patch_trigger(), 0, RaConfig(3, 500))
    assert (ra.provenance == Provenance.POISONED).sum() == 3


def test_retuning_leaves_input_untouched(pool):
    train_pool, _ = pool
    arch = ArchSpec((64, 8, 4))
    model = Model(arch, init_params(arch, 0))
    before = checksum(model.params)
    ra = build_ra_dataset(train_pool, patch_trigger(), 0, RaConfig(5, 200, epochs=1))
    out = retuning_attack(model, ra, RaConfig(5, 200, epochs=1))
    assert checksum(model.params) == before
    assert checksum(out.params) != before


def test_zero_generator_is_identity(pool):
    _, test = pool
    gen = zero_generator(64)
    np.testing.assert_array_equal(perturb(gen, test.flat()), test.flat())
    x = ImageExample(test.pixels[0], 1, Provenance.POISONED, 2)
    out = qra_apply(gen, x)
    np.testing.assert_array_equal(out.pixels, x.pixels)
    assert out.provenance is Provenance.POISONED and out.original_label == 2


def test_zero_generator_report_is_baseline(pool):
    train_pool, test = pool
    arch = ArchSpec((64, 16, 4))
    model = Model(arch, init_params(arch, 3))
    bt = make_backdoor(test)
    rep = qra_evaluate(zero_generator(64), model, test, bt, 0)
    keep = test.original_labels != 0
    from bprl.nn import predict
    assert rep.p_asr == np.mean(predict(model, bt.flat()) == 0)
    assert rep.c_asr == np.mean(predict(model, test.flat()[keep]) == 0)
    assert qra_transfer(zero_generator(64), model, test, bt, 0) == rep


def make_backdoor(test):
    from bprl.data import make_backdoor_testset
    return make_backdoor_testset(test, patch_trigger(), 0)


def test_kl_zero_on_match_and_nonnegative():
    logits = np.random.default_rng(0).normal(size=(5, 4))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(kl_to_target(p, logits), 0, atol=1e-12)
    q = np.eye(4)[[0, 1, 2, 3, 0]]  # one-hot targets exercise the 0 log 0 convention
    assert np.all(kl_to_target(q, logits) >= 0)


def test_qra_kl_vanishes_for_identical_models_and_zero_generator(pool):
    _, test = pool
    arch = ArchSpec((64, 16, 4))
    model = Model(arch, init_params(arch, 1))
    gen = zero_generator(64)
    from bprl.nn import forward, softmax
    x = test.flat()
    loss, _ = qra_loss_and_grad(gen.mlp.params, gen, x, test.labels, softmax(forward(model, x)),
                                model, model, alpha=0.0)
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_zero_budget_means_zero_gradient(pool):
    _, test = pool
    arch = ArchSpec((64, 16, 4))
    wp, we = Model(arch, init_params(arch, 1)), Model(arch, init_params(arch, 2))
    x = test.flat()
    target = np.full((len(test), 4), 0.25)
    gens = [make_generator(64, 16, seed=s, epsilon=0.0) for s in (0, 1)]
    out = [qra_loss_and_grad(g.mlp.params, g, x, test.labels, target, wp, we, 0.2) for g in gens]
    assert out[0][0] == pytest.approx(out[1][0])
    assert not np.any(out[0][1])


def test_qra_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    d = 6
    arch = ArchSpec((d, 5, 3))
    wp = Model(arch, rng.normal(0, 1, arch.n_params))
    we = Model(arch, rng.normal(0, 1, arch.n_params))
    gen = QraGenerator(Model(ArchSpec((d, 4, 4, d)), np.zeros(ArchSpec((d, 4, 4, d)).n_params)), 0.05, 0.2)
    theta = rng.normal(0, 0.5, gen.mlp.arch.n_params)
    x = rng.uniform(0.3, 0.7, size=(4, d))  # the budget cannot reach the clamp from here
    y = np.array([0, 1, 2, 1])
    target = rng.dirichlet(np.ones(3), size=4)
    assert min_hidden_preactivation(gen.mlp.arch, theta, x) > 1e-2
    _, g = qra_loss_and_grad(theta, gen, x, y, target, wp, we, 0.2)
    h = 1e-6
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (qra_loss_and_grad(theta + e, gen, x, y, target, wp, we, 0.2)[0]
                 - qra_loss_and_grad(theta - e, gen, x, y, target, wp, we, 0.2)[0]) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-6)


def test_qra_train_reads_models_only(pool):
    train_pool, _ = pool
    arch = ArchSpec((64, 16, 4))
    wp, wra, we = (Model(arch, init_params(arch, s)) for s in (1, 2, 3))
    sums = [checksum(m.params) for m in (wp, wra, we)]
    dc = build_qra_dataset(train_pool, patch_trigger(), 0, 50, 50)
    gen = make_generator(64, 16, seed=0)
    hist = []
    out = qra_train(gen, wp, wra, we, dc, epochs=2, history=hist)
    assert [checksum(m.params) for m in (wp, wra, we)] == sums
    assert len(hist) == 2
    assert checksum(out.mlp.params) != checksum(gen.mlp.params)


def test_qra_dataset_keeps_true_labels(pool):
    train_pool, _ = pool
    dc = build_qra_dataset(train_pool, patch_trigger(), 0, 100, 80)
    poisoned = dc.provenance == Provenance.POISONED
    assert len(dc) == 180 and poisoned.sum() == 80
    np.testing.assert_array_equal(dc.labels, dc.original_labels)
    assert np.all(dc.original_labels[poisoned] != 0)


def test_architecture_mismatch(pool):
    train_pool, test = pool
    a, b = ArchSpec((64, 16, 4)), ArchSpec((64, 8, 4))
    dc = build_qra_dataset(train_pool, patch_trigger(), 0, 10, 10)
    with pytest.raises(InvalidInputError):
        qra_train(make_generator(64, 8), Model(a, init_params(a, 0)), Model(b, init_params(b, 0)),
                  Model(a, init_params(a, 0)), dc)
    with pytest.raises(InvalidInputError):
        qra_transfer(make_generator(64, 8), Model(b, init_params(b, 0)), test, make_backdoor(test), 0,
                     trained_on=Model(a, init_params(a, 0)))
    with pytest.raises(InvalidInputError):
        QraGenerator(Model(ArchSpec((64, 8, 32)), np.zeros(ArchSpec((64, 8, 32)).n_params, np.float32)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0, 0.5), st.floats(0, 1))
def test_budget_is_never_exceeded(seed, eps, fill):
    rng = np.random.default_rng(seed)
    x = np.clip(rng.uniform(-0.5, 1.5, size=(8, 16)), 0, 1).astype(np.float32)
    x[0] = fill
    gen = make_generator(16, 8, seed=seed % 1000, epsilon=eps)
    gen = QraGenerator(gen.mlp.with_params(gen.mlp.params * 20), eps)
    out = perturb(gen, x)
    assert np.max(np.abs(out.astype(np.float64) - x.astype(np.float64))) <= eps
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(perturb(gen, x), out)
