import numpy as np
import pytest
import torch

from dkit.errors import EmptyInput, NonFinite, ShapeMismatch
from dkit.model import (
    ModelConfig, build_model, slice_reference, to_channels_first, transform_reference,
)
from dkit.trainer import forward_losses
from helpers import padded, randomize, smooth_instance, tiny_inputs, tiny_model, tiny_run_config
from oracles import composite_grad_check


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(), seed=3)


FLOW_VARIANTS = [("shift", "channel"), ("hidden", "input"), ("output", "input")]


@pytest.fixture(scope="module", params=FLOW_VARIANTS, ids=lambda v: "-".join(v))
def random_model(request):
    cond, scale = request.param
    m = build_model(ModelConfig(conditioning=cond, flow_scale=scale), seed=4)
    randomize(m, np.random.default_rng(4), scale=0.1)
    return m


def _cond(rng, B, de=8):
    return torch.as_tensor(rng.normal(size=(B, de))), torch.as_tensor(rng.normal(size=(B, de)))


# ----------------------------------------------------------------- slicing


def test_slice_bounds_and_determinism():
    rng = np.random.default_rng(0)
    x = np.arange(100.0)[:, None].repeat(3, axis=1)
    for _ in range(200):
        s = slice_reference(x, rng)
        assert 50 <= s.shape[0] <= 100
        assert np.all(np.diff(s[:, 0]) == 1)  # contiguous
    one = np.ones((1, 3))
    np.testing.assert_array_equal(slice_reference(one, rng), one)
    a = slice_reference(x, np.random.default_rng(9))
    b = slice_reference(x, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(EmptyInput):
        slice_reference(np.zeros((0, 3)), rng)


def test_transform_reference_modes(small_dataset):
    rng = np.random.default_rng(1)
    x = small_dataset.train[0].features
    np.testing.assert_array_equal(transform_reference(x, "none", rng), x)
    assert transform_reference(x, "band_limit", rng).shape == (x.shape[0], 4)
    basis = small_dataset.speaker_basis
    a = transform_reference(x, "timbre_perturb", np.random.default_rng(5), basis)
    b = transform_reference(x, "timbre_perturb", np.random.default_rng(5), basis)
    np.testing.assert_array_equal(a, b)
    assert a.shape == x.shape
    # only the speaker subspace is rescaled, by a factor in [0.8, 1.25]
    delta = a - x
    np.testing.assert_allclose(delta - delta @ basis @ basis.T, 0, atol=1e-12)
    ratio = np.linalg.norm(a @ basis) / np.linalg.norm(x @ basis)
    assert 0.8 <= ratio <= 1.25
    assert transform_reference(x, "both", rng, basis).shape == (x.shape[0], 4)
    with pytest.raises(ShapeMismatch):
        transform_reference(np.ones((5, 3)), "none", rng)
    with pytest.raises(ValueError):
        transform_reference(x, "pitch", rng)


# --------------------------------------------------------------- encoders


def test_reference_encoder_contract(model):
    rng = np.random.default_rng(2)
    for T in (1, 2, 7, 48):
        x, m = padded([rng.normal(size=(T, 16))])
        g = model.speaker_encoder(x, m)
        assert g.shape == (1, 8)
        assert torch.isfinite(g).all()
        torch.testing.assert_close(model.speaker_encoder(x, m), g, rtol=0, atol=0)
    with pytest.raises(EmptyInput):
        model.speaker_encoder(torch.zeros(1, 16, 4, dtype=torch.float64), torch.zeros(1, 4, dtype=torch.float64))


def test_reference_encoder_batch_invariance(random_model):
    rng = np.random.default_rng(3)
    feats = [rng.normal(size=(T, 16)) for T in (24, 31, 48, 9)]
    x, m = padded(feats)
    together = random_model.emotion_encoder(x, m)
    for i, f in enumerate(feats):
        alone = random_model.emotion_encoder(*padded([f]))
        torch.testing.assert_close(alone[0], together[i], rtol=0, atol=1e-12)


def test_posterior_reparameterization(random_model):
    rng = np.random.default_rng(4)
    x, m = padded([rng.normal(size=(10, 16)), rng.normal(size=(7, 16))])
    g, e = _cond(rng, 2)
    zero = torch.zeros(2, 8, 10, dtype=torch.float64)
    z, mean, logstd = random_model.posterior_encode(x, m, g, e, zero)
    torch.testing.assert_close(z, mean * m[:, None, :], rtol=0, atol=0)
    assert z.shape == (2, 8, 10)
    noise = torch.as_tensor(rng.normal(size=(2, 8, 10)))
    z1, _, _ = random_model.posterior_encode(x, m, g, e, noise)
    z2, _, _ = random_model.posterior_encode(x, m, g, e, noise.clone())
    assert torch.equal(z1, z2)
    torch.testing.assert_close(z1, (mean + logstd.exp() * noise) * m[:, None, :], rtol=0, atol=1e-14)


# -------------------------------------------------------------------- flow


def test_zero_initialized_flow_is_identity(model):
    rng = np.random.default_rng(5)
    z = torch.as_tensor(rng.normal(size=(3, 8, 12)))
    m = torch.ones(3, 12, dtype=torch.float64)
    g, e = _cond(rng, 3)
    z_p, logdet = model.flow_forward(z, m, g, e)
    assert torch.equal(z_p, z)
    assert torch.count_nonzero(logdet) == 0
    z_back, _ = model.flow_inverse(z, m, g, e)
    assert torch.equal(z_back, z)


def test_flow_round_trip_and_logdet(random_model):
    rng = np.random.default_rng(6)
    worst_rt, worst_ld, worst_sum, worst_two_sided = 0.0, 0.0, 0.0, 0.0
    for _ in range(100):
        T = int(rng.integers(5, 30))
        z = torch.as_tensor(rng.normal(size=(1, 8, T)))
        m = torch.ones(1, T, dtype=torch.float64)
        g, e = _cond(rng, 1)
        with torch.no_grad():
            z_p, ld, steps = random_model.flow_forward(z, m, g, e, return_steps=True)
            back, ld_inv = random_model.flow_inverse(z_p, m, g, e)
        worst_rt = max(worst_rt, float((back - z).abs().max()))
        worst_ld = max(worst_ld, float((ld + ld_inv).abs().max()))
        worst_sum = max(worst_sum, float((sum(s[1] for s in steps) - ld).abs().max()))
        zp = torch.as_tensor(rng.normal(size=(1, 8, T)))
        with torch.no_grad():
            fwd, _ = random_model.flow_forward(random_model.flow_inverse(zp, m, g, e)[0], m, g, e)
        worst_two_sided = max(worst_two_sided, float((fwd - zp).abs().max()))
    assert worst_rt < 1e-8
    assert worst_ld < 1e-10
    assert worst_sum < 1e-10
    assert worst_two_sided < 1e-8


def test_flow_depends_on_emotion_condition(random_model):
    rng = np.random.default_rng(7)
    z = torch.as_tensor(rng.normal(size=(1, 8, 10)))
    m = torch.ones(1, 10, dtype=torch.float64)
    g, e = _cond(rng, 1)
    a, _ = random_model.flow_forward(z, m, g, e)
    b, _ = random_model.flow_forward(z, m, g, e + 0.5)
    assert not torch.equal(a, b)


def test_flow_nonfinite_parameters_raise():
    m = build_model(ModelConfig(), seed=0)
    with torch.no_grad():
        m.flow[0].net.post.bias.fill_(float("nan"))
    z = torch.zeros(1, 8, 5, dtype=torch.float64)
    g = torch.zeros(1, 8, dtype=torch.float64)
    with pytest.raises(NonFinite):
        m.flow_forward(z, torch.ones(1, 5, dtype=torch.float64), g, g)


def test_flow_padding_does_not_leak(random_model):
    rng = np.random.default_rng(8)
    z = torch.as_tensor(rng.normal(size=(1, 8, 9)))
    g, e = _cond(rng, 1)
    alone, ld_alone = random_model.flow_forward(z, torch.ones(1, 9, dtype=torch.float64), g, e)
    zp = torch.cat([z, torch.zeros(1, 8, 4, dtype=torch.float64)], dim=2)
    mask = torch.cat([torch.ones(1, 9), torch.zeros(1, 4)], dim=1).double()
    padded_out, ld_pad = random_model.flow_forward(zp, mask, g, e)
    torch.testing.assert_close(padded_out[..., :9], alone, rtol=0, atol=1e-12)
    torch.testing.assert_close(ld_pad, ld_alone, rtol=0, atol=1e-12)


# ----------------------------------------------------------- decode / convert


def test_decode_contract(random_model):
    rng = np.random.default_rng(9)
    z = torch.as_tensor(rng.normal(size=(2, 8, 11)))
    m = torch.ones(2, 11, dtype=torch.float64)
    g, e = _cond(rng, 2)
    y = random_model.decode(z, m, g, e)
    assert y.shape == (2, 16, 11)
    assert torch.isfinite(y).all()
    assert torch.equal(random_model.decode(z, m, g, e), y)


def test_identity_conversion_is_reconstruction(random_model):
    rng = np.random.default_rng(10)
    x, m = padded([rng.normal(size=(20, 16)), rng.normal(size=(13, 16))])
    g, e = _cond(rng, 2)
    noise = torch.as_tensor(rng.normal(size=(2, 8, 20)))
    conv = random_model.voice_convert(x, m, g, e, g, e, noise)
    rec = random_model.reconstruct(x, m, g, e, noise)
    assert conv.shape == x.shape
    assert torch.equal(conv, rec)


def test_conversion_changes_output_for_new_target(random_model):
    rng = np.random.default_rng(11)
    x, m = padded([rng.normal(size=(20, 16))])
    g, e = _cond(rng, 1)
    g2, _ = _cond(rng, 1)
    noise = torch.zeros(1, 8, 20, dtype=torch.float64)
    assert not torch.equal(random_model.voice_convert(x, m, g, e, g2, e, noise), random_model.reconstruct(x, m, g, e, noise))


def test_build_model_deterministic():
    a = build_model(ModelConfig(), seed=11).state_dict()
    b = build_model(ModelConfig(), seed=11).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_model(ModelConfig(), seed=12).state_dict()
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        ModelConfig(latent_dim=7)
    with pytest.raises(ShapeMismatch):
        ModelConfig(ref_channels=(8, 8))
    with pytest.raises(ValueError):
        ModelConfig(conditioning="input")
    with pytest.raises(ValueError):
        ModelConfig(flow_scale="none")


# ------------------------------------------------------------- full objective


@pytest.mark.parametrize("variant", FLOW_VARIANTS, ids=lambda v: "-".join(v))
def test_full_objective_gradients_per_group(variant):
    rng = np.random.default_rng(12)
    cfg = tiny_run_config(lam=0.6, conditioning=variant[0], flow_scale=variant[1])
    m, inp = smooth_instance(cfg, rng)
    worst = composite_grad_check(m, inp, cfg, rng, coords_per_group=8)
    assert len(worst) >= 10
    assert max(worst.values()) < 1e-4, worst


@pytest.mark.parametrize("enc", ["mpcl", "ce"])
@pytest.mark.parametrize("mode", ["none", "ce", "cosine"])
def test_ablation_objectives_run(enc, mode):
    rng = np.random.default_rng(13)
    cfg = tiny_run_config(encoder_loss=enc, grl_mode=mode)
    m, inp = tiny_model(cfg, rng), tiny_inputs(rng, cfg)
    total, report, _ = forward_losses(m, inp, cfg)
    assert np.isfinite(report.total)
    recomputed = sum(v for k, v in report.as_dict().items() if k != "total")
    assert abs(report.total - recomputed) < 1e-12
    if mode == "none":
        assert report.cos_emb_ge == report.cos_content_g == 0.0


def test_ce_adversary_gradient_is_reversed_into_encoders():
    rng = np.random.default_rng(14)
    cfg = tiny_run_config(lam=0.8, grl_mode="ce")
    m, inp = tiny_model(cfg, rng), tiny_inputs(rng, cfg)
    enc = list(m.speaker_encoder.parameters())
    g = m.speaker_encoder(inp.spk_ref, inp.spk_mask)
    emo = torch.as_tensor(inp.emotion_labels)
    from dkit.losses import grl

    rev = torch.nn.functional.cross_entropy(m.adv_emb_emotion(grl(g, 0.8)), emo)
    plain = torch.nn.functional.cross_entropy(m.adv_emb_emotion(g), emo)
    for a, b in zip(torch.autograd.grad(rev, enc, retain_graph=True), torch.autograd.grad(plain, enc)):
        torch.testing.assert_close(a, -0.8 * b, rtol=0, atol=1e-12)
