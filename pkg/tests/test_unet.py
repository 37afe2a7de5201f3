import pytest
import torch

from src.diffusion import build_schedule
from src.errors import DivergenceError
from src.masking import build_mask_set
from src.trainer import mmccd_loss
from src.unet import (
    NetworkConfig,
    build_method_networks,
    denoise_predict,
    denoiser_config,
    load_checkpoint,
    make_baseline,
    make_unet,
    parameter_count,
    save_checkpoint,
    translate,
    translator_config,
)

TINY = dict(base_width=4, depth=2, time_dim=8)


def test_denoiser_and_translator_shapes():
    f = make_unet(denoiser_config(16, **TINY))
    g = make_unet(translator_config(16, **TINY))
    y = torch.rand(3, 1, 16, 16)
    assert denoise_predict(f, y, torch.rand(3, 1, 16, 16), 5).shape == (3, 1, 16, 16)
    assert translate(g, y).shape == (3, 1, 16, 16)


def test_zero_initialized_head_outputs_zero():
    g = make_unet(translator_config(16, **TINY))
    assert torch.equal(translate(g, torch.rand(2, 1, 16, 16)), torch.zeros(2, 1, 16, 16))


def test_step_conditioned_network_needs_a_step():
    f = make_unet(denoiser_config(16, **TINY))
    with pytest.raises(ValueError):
        f(torch.rand(1, 2, 16, 16))


def test_condition_shape_must_match():
    f = make_unet(denoiser_config(16, **TINY))
    with pytest.raises(ValueError):
        denoise_predict(f, torch.rand(1, 1, 16, 16), torch.rand(1, 1, 8, 8), 1)


@pytest.mark.parametrize("size,depth", [(16, 3), (12, 2), (16, 0)])
def test_depth_must_fit_the_image(size, depth):
    with pytest.raises(ValueError):
        make_unet(NetworkConfig(image_size=size, depth=depth, base_width=4))


def test_non_finite_output_raises():
    g = make_unet(translator_config(16, zero_init_head=False, **TINY))
    with pytest.raises(DivergenceError):
        translate(g, torch.full((1, 1, 16, 16), float("nan")))


def test_method_networks_roles():
    assert set(build_method_networks("mmccd", 16, **TINY)) == {"f", "g"}
    assert build_method_networks("mmccd", 16, **TINY)["f"].config.in_channels == 2
    assert set(build_method_networks("cyclic_unet", 16, **TINY)) == {"f", "g"}
    vae = build_method_networks("vae", 16, **TINY)["net"]
    assert vae.variant == "VAE" and not vae.config.skip_connections
    assert build_method_networks("ddpm_uncond", 16, **TINY)["net"].config.time_embedding
    with pytest.raises(ValueError):
        build_method_networks("gan", 16, **TINY)


def test_vae_decodes_latent_mean_in_eval():
    vae = make_baseline("VAE", translator_config(16, zero_init_head=False, **TINY)).eval()
    x = torch.rand(2, 1, 16, 16)
    assert torch.equal(vae(x), vae(x))
    _, mu, logvar = vae.forward_with_latent(x)
    assert mu.shape == logvar.shape and mu.shape[1] == 8


def test_checkpoint_round_trip(tmp_path):
    nets = build_method_networks("mmccd", 16, **TINY)
    schedule = build_schedule(10)
    path = save_checkpoint(tmp_path / "ck.pt", "mmccd", nets, schedule.descriptor(), step=3)
    payload = load_checkpoint(path)
    assert payload["method"] == "mmccd" and payload["step"] == 3
    assert payload["schedule"]["T"] == 10
    for role, net in nets.items():
        restored = payload["networks"][role]
        assert not restored.training
        for key, value in net.state_dict().items():
            assert torch.equal(restored.state_dict()[key], value)


def test_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_text("not a checkpoint")
    with pytest.raises(RuntimeError):
        load_checkpoint(bad)


def test_masked_diffusion_loss_gradient_matches_finite_differences(float64):
    torch.manual_seed(0)
    f = make_unet(NetworkConfig(
        in_channels=2, time_embedding=True, image_size=16, base_width=4, depth=2, time_dim=8, zero_init_head=False,
    ))
    assert parameter_count(f) >= 20
    f.eval()
    s = build_schedule(20)
    masks = build_mask_set(16, 16, extent=4, stride=4)
    gen = torch.Generator().manual_seed(5)
    x = torch.rand(2, 1, 16, 16, generator=gen)
    y = torch.rand(2, 1, 16, 16, generator=gen)

    def loss():
        return mmccd_loss(f, x, y, s, masks, torch.Generator().manual_seed(9))

    f.zero_grad()
    loss().backward()
    params = [p for p in f.parameters() if p.grad is not None]
    offsets = [0]
    for p in params:
        offsets.append(offsets[-1] + p.numel())
    picks = torch.randperm(offsets[-1], generator=torch.Generator().manual_seed(21))[:24].tolist()
    h = 1e-3
    for pick in picks:
        i = next(j for j in range(len(params)) if offsets[j] <= pick < offsets[j + 1])
        flat, grad = params[i].data.view(-1), params[i].grad.view(-1)
        k = pick - offsets[i]
        original = float(flat[k])
        with torch.no_grad():
            flat[k] = original + h
            up = float(loss())
            flat[k] = original - h
            down = float(loss())
            flat[k] = original
        numeric = (up - down) / (2 * h)
        analytic = float(grad[k])
        assert abs(numeric - analytic) <= 1e-2 * max(abs(numeric), abs(analytic), 1e-4)
    assert len(picks) >= 20
