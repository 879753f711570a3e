import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganspk import autodiff as ad
from ganspk.losses import (GRADREV, KINDS, LSGAN, RELGAN, SGAN, AmSoftmaxConfig, GanVariant, LossError,
                           am_softmax_loss, aux_classifier_loss, discriminator_loss, generator_loss)


def ev(fn, **inputs):
    return float(ad.evaluate(fn, {k: np.asarray(v, dtype=float) for k, v in inputs.items()}))


def test_defaults():
    assert AmSoftmaxConfig() == AmSoftmaxConfig(30.0, 0.6)
    assert GanVariant().kind == SGAN and not GanVariant().aux


@pytest.mark.parametrize("bad", [dict(s=0.0), dict(m=1.0), dict(m=-0.1)])
def test_am_config_validation(bad):
    with pytest.raises(LossError):
        AmSoftmaxConfig(**bad)


def test_unknown_variant():
    with pytest.raises(LossError):
        GanVariant("wgan")


def test_variant_names():
    assert GanVariant(LSGAN, True).name == "lsgan+aux"
    assert GanVariant(RELGAN).name == "relgan"


def test_am_softmax_two_class_symmetric():
    got = ev(lambda c: am_softmax_loss(c, np.array([0])), c=[[0.0, 0.0]])
    assert got == pytest.approx(math.log1p(math.exp(18.0)), abs=1e-9)
    assert got == pytest.approx(18.0000000152, abs=1e-9)


def test_am_softmax_errors():
    with pytest.raises(LossError):
        ev(lambda c: am_softmax_loss(c, np.array([0])), c=[[0.5]])
    with pytest.raises(LossError):
        ev(lambda c: am_softmax_loss(c, np.array([3])), c=[[0.1, 0.2, 0.3]])


def test_margin_only_on_true_class():
    cos = np.array([[0.9, 0.1, -0.2]])
    with_m = ev(lambda c: am_softmax_loss(c, np.array([0])), c=cos)
    shifted = cos.copy()
    shifted[0, 0] -= 0.6
    no_m = ev(lambda c: am_softmax_loss(c, np.array([0]), AmSoftmaxConfig(30, 0.0)), c=shifted)
    assert with_m == pytest.approx(no_m, abs=1e-12)


def test_lsgan_values():
    assert ev(lambda s, t: discriminator_loss(s, t, GanVariant(LSGAN)), s=[1.0], t=[0.0]) == 0.0
    assert ev(lambda s, t: generator_loss(t, s, GanVariant(LSGAN)), s=[1.0], t=[1.0]) == 0.0
    assert ev(lambda s, t: discriminator_loss(s, t, GanVariant(LSGAN)), s=[0.0], t=[1.0]) == 1.0


def test_relgan_equal_scores_is_ln2():
    v = GanVariant(RELGAN)
    assert ev(lambda s, t: discriminator_loss(s, t, v), s=[0.3, -1.0], t=[0.3, -1.0]) == pytest.approx(math.log(2))
    assert ev(lambda s, t: generator_loss(t, s, v), s=[2.0], t=[2.0]) == pytest.approx(math.log(2))


def test_relgan_requires_equal_batches():
    with pytest.raises(LossError):
        ev(lambda s, t: discriminator_loss(s, t, GanVariant(RELGAN)), s=[0.0, 1.0], t=[0.0])


@pytest.mark.parametrize("kind", KINDS)
def test_empty_batches_rejected(kind):
    with pytest.raises(LossError):
        ev(lambda s, t: discriminator_loss(s, t, GanVariant(kind)), s=np.zeros(0), t=[0.0])


def test_aux_loss_uniform_logits():
    got = ev(lambda a: aux_classifier_loss(a, np.array([0, 2])), a=np.zeros((2, 5)))
    assert got == pytest.approx(math.log(5), abs=1e-12)
    with pytest.raises(LossError):
        aux_classifier_loss(None, np.array([0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6), st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_gradrev_is_negated_sgan(s, t):
    s, t = np.array(s), np.array(t)
    g = ev(lambda s, t: generator_loss(t, s, GanVariant(GRADREV)), s=s, t=t)
    d = ev(lambda s, t: discriminator_loss(s, t, GanVariant(SGAN)), s=s, t=t)
    assert g == -d


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-40, 40), min_size=1, max_size=6), st.lists(st.floats(-40, 40), min_size=1, max_size=6))
def test_cross_entropy_losses_non_negative(s, t):
    s, t = np.array(s), np.array(t)
    for kind in (SGAN, LSGAN):
        assert ev(lambda s, t: discriminator_loss(s, t, GanVariant(kind)), s=s, t=t) >= 0
        assert ev(lambda s, t: generator_loss(t, s, GanVariant(kind)), s=s, t=t) >= 0


def test_sgan_generator_inverts_label():
    # the generator wants the target scored as source: a high raw target score is cheap
    v = GanVariant(SGAN)
    assert ev(lambda s, t: generator_loss(t, s, v), s=[0.0], t=[5.0]) < ev(
        lambda s, t: generator_loss(t, s, v), s=[0.0], t=[-5.0])
