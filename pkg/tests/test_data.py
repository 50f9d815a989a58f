import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bprl.data import (
    ImageExample,
    LabeledDataset,
    PoisonPlan,
    Provenance,
    TriggerSpec,
    apply_trigger,
    apply_trigger_pixels,
    blended_trigger,
    checkerboard,
    concat,
    make_backdoor_testset,
    make_dataset,
    make_templates,
    nearest_template_predict,
    patch_trigger,
    poison_dataset,
)
from bprl.errors import InvalidInputError


@pytest.fixture(scope="module")
def templates():
    return make_templates(16, 16, 1, 4, 0.15, seed=0)


def test_templates_are_separated(templates):
    t = templates.templates.reshape(4, -1)
    floor = 0.5 * np.sqrt(256) * 0.1
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.linalg.norm(t[i] - t[j]) > floor


def test_zero_noise_examples_equal_templates():
    tpl = make_templates(4, 4, 2, 3, 0.0, seed=1)
    ds = make_dataset(tpl, 5, seed=2)
    np.testing.assert_array_equal(ds.pixels, tpl.templates[ds.labels])


def test_make_dataset_is_balanced_and_seeded(templates):
    a = make_dataset(templates, 50, seed=3)
    b = make_dataset(templates, 50, seed=3)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [50] * 4
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_nearest_template_accuracy_on_fresh_draw(templates):
    ds = make_dataset(templates, 500, seed=4)
    assert np.mean(nearest_template_predict(templates, ds) == ds.labels) >= 0.99


def test_nearest_template_accuracy_desk_defaults():
    tpl = make_templates(16, 16, 1, 4, 0.25, seed=0, contrast=0.55)
    ds = make_dataset(tpl, 500, seed=4)
    assert np.mean(nearest_template_predict(tpl, ds) == ds.labels) >= 0.99


def test_patch_on_zero_image():
    x = ImageExample(np.zeros((16, 16, 1), dtype=np.float32), 2)
    out = apply_trigger(x, patch_trigger(), "train")
    changed = np.argwhere(out.pixels != x.pixels)
    assert len(changed) == 5  # the checkerboard's five ones; its four zeros match the image
    np.testing.assert_array_equal(out.pixels[13:, 13:, 0], checkerboard())
    assert out.pixels[:13].sum() == 0 and out.pixels[:, :13].sum() == 0
    assert out.label == 2 and out.provenance is Provenance.POISONED


def test_patch_region_on_nonzero_image():
    x = np.full((16, 16, 1), 0.5, dtype=np.float32)
    out = apply_trigger_pixels(x, patch_trigger(), "eval")
    assert np.sum(out != x) == 9


def test_patch_anchor_offsets_from_bottom_right():
    out = apply_trigger_pixels(np.zeros((8, 8, 1), dtype=np.float32), patch_trigger((1, 2)), "train")
    np.testing.assert_array_equal(out[4:7, 3:6, 0], checkerboard())


def test_patch_that_does_not_fit():
    with pytest.raises(InvalidInputError):
        apply_trigger_pixels(np.zeros((4, 4, 1), dtype=np.float32), patch_trigger((2, 0)), "train")


def test_blend_zero_ratio_is_identity():
    x = np.random.default_rng(0).uniform(size=(5, 6, 6, 1)).astype(np.float32)
    trig = blended_trigger(6, 6, 1, seed=0, ratio_train=0.0)
    np.testing.assert_array_equal(apply_trigger_pixels(x, trig, "train"), x)


def test_blend_arithmetic():
    trig = TriggerSpec("blended", blend_pattern=np.ones((2, 2, 1), dtype=np.float32),
                       blend_ratio_train=0.1, blend_ratio_eval=0.2)
    x = np.full((2, 2, 1), 0.5, dtype=np.float32)
    np.testing.assert_allclose(apply_trigger_pixels(x, trig, "train"), 0.55, rtol=1e-6)
    np.testing.assert_allclose(apply_trigger_pixels(x, trig, "eval"), 0.6, rtol=1e-6)


def test_blend_pattern_is_seeded_and_in_range():
    a = blended_trigger(8, 8, 3, seed=5)
    b = blended_trigger(8, 8, 3, seed=5)
    np.testing.assert_array_equal(a.blend_pattern, b.blend_pattern)
    assert a.blend_pattern.min() >= 0 and a.blend_pattern.max() <= 1


def test_unknown_phase():
    with pytest.raises(InvalidInputError):
        apply_trigger_pixels(np.zeros((4, 4, 1), dtype=np.float32), patch_trigger(), "test")


def test_poison_counts(templates):
    ds = make_dataset(templates, 500, seed=1)
    out = poison_dataset(ds, PoisonPlan(0.05, 0, patch_trigger(), seed=2))
    mask = out.provenance == Provenance.POISONED
    assert len(out) == 2000 and mask.sum() == 100
    assert np.all(out.labels[mask] == 0)
    assert np.all(out.original_labels[mask] != 0)
    clean = ~mask
    np.testing.assert_array_equal(out.labels[clean], out.original_labels[clean])


def test_poison_single_example():
    tpl = make_templates(4, 4, 1, 2, 0.1, seed=0)
    ds = make_dataset(tpl, 10, seed=0)
    out = poison_dataset(ds, PoisonPlan(0.05, 1, patch_trigger(), seed=0))
    # undo the shuffle through the untouched pixel rows
    key = {ds.pixels[i].tobytes(): i for i in range(len(ds))}
    moved = [i for i in range(len(out)) if out.pixels[i].tobytes() not in key]
    assert len(moved) == 1
    assert out.labels[moved[0]] == 1 and out.original_labels[moved[0]] == 0


def test_poison_is_seeded(templates):
    ds = make_dataset(templates, 100, seed=1)
    plan = PoisonPlan(0.1, 0, patch_trigger(), seed=9)
    a, b = poison_dataset(ds, plan), poison_dataset(ds, plan)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.provenance, b.provenance)


def test_rate_zero_is_the_clean_set(templates):
    ds = make_dataset(templates, 20, seed=1)
    out = poison_dataset(ds, PoisonPlan(0.0, 0, patch_trigger(), seed=0))
    np.testing.assert_array_equal(out.pixels, ds.pixels)
    np.testing.assert_array_equal(out.labels, ds.labels)


def test_poison_guards(templates):
    ds = make_dataset(templates, 10, seed=1)
    with pytest.raises(InvalidInputError):
        poison_dataset(ds, PoisonPlan(0.01, 0, patch_trigger()))  # floor(0.4) = 0 examples
    with pytest.raises(InvalidInputError):
        poison_dataset(ds, PoisonPlan(0.9, 0, patch_trigger()))  # only 30 non-target rows
    with pytest.raises(InvalidInputError):
        PoisonPlan(1.0, 0, patch_trigger())


def test_backdoor_testset(templates):
    test = make_dataset(templates, 100, seed=5)
    bt = make_backdoor_testset(test, patch_trigger(), 0)
    assert len(bt) == 300
    assert np.all(bt.labels == 0) and np.all(bt.original_labels != 0)
    assert np.all(bt.provenance == Provenance.POISONED)


def test_backdoor_testset_all_target():
    tpl = make_templates(4, 4, 1, 2, 0.1, seed=0)
    ds = make_dataset(tpl, 3, seed=0)
    only = ds.subset(np.flatnonzero(ds.labels == 1))
    with pytest.raises(InvalidInputError):
        make_backdoor_testset(only, patch_trigger(), 1)


def test_dataset_guards():
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((2, 2, 2, 1)), [0, 2], 2)
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.full((1, 2, 2, 1), 1.5), [0], 2)
    with pytest.raises(InvalidInputError):
        LabeledDataset(np.zeros((0, 2, 2, 1)), [], 2)


def test_example_round_trip(templates):
    ds = make_dataset(templates, 3, seed=0)
    again = LabeledDataset.from_examples(ds.examples, ds.class_count)
    np.testing.assert_array_equal(again.pixels, ds.pixels)
    np.testing.assert_array_equal(again.labels, ds.labels)
    assert concat(ds, ds).provenance_counts()["clean"] == 24


images = st.integers(1, 4).flatmap(
    lambda n: st.lists(st.floats(0, 1, width=32), min_size=n * 64, max_size=n * 64).map(
        lambda v: np.array(v, dtype=np.float32).reshape(-1, 8, 8, 1)))


@given(images, st.sampled_from(["train", "eval"]))
def test_patch_is_idempotent(x, phase):
    once = apply_trigger_pixels(x, patch_trigger(), phase)
    np.testing.assert_array_equal(apply_trigger_pixels(once, patch_trigger(), phase), once)


@given(images, st.floats(0, 0.99), st.integers(0, 1000))
def test_triggered_pixels_stay_in_unit_range(x, r, seed):
    trig = blended_trigger(8, 8, 1, seed, ratio_train=r, spread=1.0)
    out = apply_trigger_pixels(x, trig, "train")
    assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 3), st.integers(0, 2**32))
def test_poison_accounting(rate, target, seed):
    tpl = make_templates(4, 4, 1, 4, 0.2, seed=0)
    ds = make_dataset(tpl, 25, seed=1)
    out = poison_dataset(ds, PoisonPlan(rate, target, patch_trigger(), seed))
    mask = out.provenance == Provenance.POISONED
    assert len(out) == len(ds)
    assert mask.sum() == int(np.floor(rate * len(ds)))
    assert not np.any(out.original_labels[mask] == target)
