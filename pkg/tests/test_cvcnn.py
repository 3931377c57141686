import numpy as np
import pandas as pd
import pytest

from src.cvcnn import (PRESETS, build_model, count_parameters, evaluate_model, infer, infer_batch,
                       output_to_aberration, patch_to_input)
from src.complex_layers import ComplexDropout
from src.exceptions import DomainError, ShapeMismatchError
from src.models import AberrationFunction, RealignedPatch

from tests.conftest import random_complex


@pytest.fixture(scope="module")
def desk_model():
    return build_model("desk", seed=3, dropout_p=0.0)


def _patch(rng, dims=(3, 8, 9, 16), ref=0):
    return RealignedPatch(data=random_complex(rng, dims), track_ref=ref, center_positions=np.zeros((dims[1], 2)))


def test_desk_shape_chain(desk_model, rng):
    x = random_complex(rng, (2,) + PRESETS["desk"].input_dims)
    assert desk_model.train().forward(x).shape == (2, 16)
    assert desk_model.output_shape(PRESETS["desk"].input_dims) == (16,)


def test_paper_shape_chain():
    model = build_model("paper", seed=0)
    assert model.output_shape((11, 16, 17, 128)) == (128,)
    assert count_parameters(model) > count_parameters(build_model("desk", seed=0))


def test_presets_are_named_by_scale():
    assert sorted(PRESETS) == ["desk", "paper"]
    assert PRESETS["paper"].input_dims == (11, 16, 17, 128)
    with pytest.raises(DomainError):
        build_model("full")


def test_unknown_scale():
    with pytest.raises(DomainError):
        build_model("huge")


def test_incompatible_input_names_the_layer():
    with pytest.raises(ShapeMismatchError, match="conv2b"):
        build_model("desk", input_dims=(3, 4, 9, 16))


def test_forward_rejects_wrong_input(desk_model, rng):
    with pytest.raises(ShapeMismatchError):
        desk_model.forward(random_complex(rng, (2, 3, 8, 9, 15)))


def test_same_seed_same_weights():
    first = dict((n, p.copy()) for n, p, _ in build_model("desk", seed=9).named_parameters())
    second = dict((n, p) for n, p, _ in build_model("desk", seed=9).named_parameters())
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


def test_dropout_layers_are_seeded_per_model():
    model = build_model("desk", seed=1, dropout_p=0.3)
    layers = model.dropout_layers()
    assert len(layers) == 3
    assert all(isinstance(m, ComplexDropout) and m.p == 0.3 for _, m in layers)


def test_layer_manifest_lists_named_layers(desk_model):
    names = [entry["name"] for entry in desk_model.layer_manifest()]
    assert "conv1a.conv" in names and "fc" in names and "vnet.down1.bn" in names


def _loss(model, x, r):
    return float(np.sum(np.real(np.conj(r) * model.forward(x))))


@pytest.mark.parametrize("param_name", ["conv1a.conv.weight", "conv1b.conv.weight", "inception.b2.conv3a.conv.weight",
                                        "conv2b.bn.gamma_rr", "vnet.up2.conv.weight", "fc.weight"])
def test_directional_derivative(param_name, rng):
    model = build_model("desk", seed=4, dropout_p=0.0).train()
    x = random_complex(rng, (4,) + PRESETS["desk"].input_dims)
    r = random_complex(rng, (4, 16))
    model.zero_grad()
    model.forward(x)
    gx = model.backward(r)
    grads = {name: g.copy() for name, _, g in model.named_parameters()}
    params = {name: p for name, p, _ in model.named_parameters()}

    # Steps small relative to the values keep CReLU kinks out of the difference.
    h = 1e-7
    dx = random_complex(rng, x.shape)
    numeric = (_loss(model, x + h * dx, r) - _loss(model, x - h * dx, r)) / (2 * h)
    assert numeric == pytest.approx(float(np.sum(np.real(np.conj(gx) * dx))), rel=1e-3, abs=1e-6)

    param = params[param_name]
    direction = np.mean(np.abs(param)) * random_complex(rng, param.shape)
    if not np.iscomplexobj(param):
        direction = direction.real
    original = param.copy()
    param[...] = original + h * direction
    plus = _loss(model, x, r)
    param[...] = original - h * direction
    minus = _loss(model, x, r)
    param[...] = original
    expected = float(np.sum(np.real(np.conj(grads[param_name]) * direction)))
    assert (plus - minus) / (2 * h) == pytest.approx(expected, rel=1e-3, abs=1e-6)


def test_infer_returns_valid_aberration_and_restores_mode(desk_model, rng):
    desk_model.train()
    estimate = infer(desk_model, _patch(rng))
    assert len(estimate) == 16
    assert np.all(estimate.amplitude > 0) and np.all(estimate.amplitude <= 1.0)
    assert desk_model.training


def test_inference_is_deterministic_and_scale_invariant(desk_model, rng):
    patch = _patch(rng)
    scaled = RealignedPatch(data=7.5 * patch.data, track_ref=0, center_positions=patch.center_positions)
    np.testing.assert_allclose(infer(desk_model, patch).values, infer(desk_model, scaled).values, atol=1e-10)
    np.testing.assert_array_equal(infer(desk_model, patch).values, infer(desk_model, patch).values)


def test_infer_rejects_mismatched_patch(desk_model, rng):
    with pytest.raises(ShapeMismatchError):
        infer(desk_model, _patch(rng, dims=(3, 8, 7, 16)))


def test_patch_normalization(rng):
    patch = _patch(rng)
    assert np.sqrt(np.mean(np.abs(patch_to_input(patch)) ** 2)) == pytest.approx(1.0)
    silent = RealignedPatch(data=np.zeros((3, 8, 9, 16)), track_ref=0, center_positions=np.zeros((8, 2)))
    assert np.all(patch_to_input(silent) == 0)


def test_output_clamping():
    ab = output_to_aberration(np.array([2.0 + 0j, 0.0, 0.5j]))
    np.testing.assert_allclose(ab.amplitude, [1.0, 1e-6, 0.5])
    assert ab.phase[2] == pytest.approx(np.pi / 2)


def test_evaluate_model_rows(desk_model, rng):
    dataset = [(_patch(rng, ref=i), AberrationFunction.identity(16)) for i in range(3)]
    frame = evaluate_model(desk_model, dataset)
    assert isinstance(frame, pd.DataFrame)
    assert list(frame.columns) == ["patch", "track_ref", "phase_rmse"]
    assert frame["track_ref"].tolist() == [0, 1, 2]
    assert len(infer_batch(desk_model, [p for p, _ in dataset])) == 3
