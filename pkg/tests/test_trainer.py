import pytest
import torch
import torch.nn as nn

from src.diffusion import build_schedule
from src.errors import ConfigError
from src.masking import build_mask_set
from src.phantom import PhantomSpec, generate_phantom
from src.trainer import (
    Trainer,
    kl_divergence,
    l2_loss,
    mmccd_loss,
    reconstruction_loss,
    train_step_backward,
    train_step_mmccd,
)
from src.unet import build_method_networks, load_checkpoint, make_baseline, translator_config
from src.utils import read_jsonl

TINY = dict(base_width=4, depth=2, time_dim=8)


class Oracle(nn.Module):
    """Returns a fixed target regardless of input."""

    def __init__(self, target):
        super().__init__()
        self.target = target
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, inputs, t=None):
        return self.target + 0 * self.dummy


def test_l2_loss_is_per_image_norm():
    pred = torch.zeros(2, 1, 2, 2)
    target = torch.stack([torch.full((1, 2, 2), 1.0), torch.full((1, 2, 2), 2.0)])
    assert float(l2_loss(pred, target)) == pytest.approx((2.0 + 4.0) / 2)
    with pytest.raises(ValueError):
        l2_loss(pred, target[:1])


def test_kl_of_standard_normal_is_zero():
    assert float(kl_divergence(torch.zeros(2, 3), torch.zeros(2, 3))) == 0.0


def test_masked_loss_with_oracle_denoiser_is_zero():
    y = torch.rand(3, 1, 8, 8)
    loss = mmccd_loss(Oracle(y), torch.rand(3, 1, 8, 8), y, build_schedule(10), build_mask_set(8, 8, 2, 2))
    assert float(loss) == 0.0


def test_masked_loss_with_zero_output_is_target_norm():
    y = torch.rand(3, 1, 8, 8)
    loss = mmccd_loss(Oracle(torch.zeros_like(y)), torch.rand(3, 1, 8, 8), y, build_schedule(10), build_mask_set(8, 8, 2, 2))
    assert float(loss) == pytest.approx(float(y.flatten(1).norm(dim=1).mean()), rel=1e-6)


def test_masked_loss_is_reproducible_with_a_seeded_generator():
    f = build_method_networks("mmccd", 16, **TINY)["f"]
    for p in f.head.parameters():
        nn.init.normal_(p, std=0.1)
    x, y = torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
    s, masks = build_schedule(10), build_mask_set(16, 16, 4, 4)
    a = mmccd_loss(f, x, y, s, masks, torch.Generator().manual_seed(1))
    b = mmccd_loss(f, x, y, s, masks, torch.Generator().manual_seed(1))
    assert float(a) == float(b)


def test_dae_without_noise_equals_ae():
    torch.manual_seed(0)
    net = make_baseline("AE", translator_config(16, zero_init_head=False, **TINY))
    x = torch.rand(2, 1, 16, 16)
    plain = reconstruction_loss(net, x)
    denoising = reconstruction_loss(net, x, noise_sigma=0.0, generator=torch.Generator().manual_seed(4))
    assert float(plain) == float(denoising)


def test_backward_step_reduces_loss(tiny_pairs):
    torch.manual_seed(0)
    g = build_method_networks("cyclic_unet", 16, **TINY)["g"]
    opt = torch.optim.Adam(g.parameters(), lr=1e-2)
    losses = [train_step_backward(g, opt, tiny_pairs) for _ in range(30)]
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_masked_denoiser_loss_halves_on_the_phantom():
    torch.manual_seed(0)
    pairs = generate_phantom(PhantomSpec(image_size=16, seed=0), 40, "train")
    f = build_method_networks("mmccd", 16, base_width=8, depth=2, time_dim=16)["f"]
    opt = torch.optim.Adam(f.parameters(), lr=1e-3)
    s, masks = build_schedule(100), build_mask_set(16, 16, 4, 2)
    gen = torch.Generator().manual_seed(0)
    losses = []
    for step in range(500):
        batch = [pairs[(step * 8 + i) % len(pairs)] for i in range(8)]
        losses.append(train_step_mmccd(f, opt, batch, s, masks, gen))
    assert sum(losses[-10:]) / 10 <= 0.5 * sum(losses[:10]) / 10


def _trainer(method, pairs, tmp_path, max_steps, **kwargs):
    torch.manual_seed(0)
    return Trainer(
        method=method,
        networks=build_method_networks(method, 16, **TINY),
        train_pairs=pairs,
        output_dir=tmp_path,
        schedule=build_schedule(10),
        mask_set=build_mask_set(16, 16, 4, 4),
        batch_size=2,
        max_steps=max_steps,
        checkpoint_every=2,
        **kwargs,
    )


@pytest.mark.parametrize("method", ["mmccd", "cyclic_unet", "ae", "vae", "dae", "ddpm_uncond"])
def test_loss_log_has_one_line_per_step(method, tiny_pairs, tmp_path):
    trainer = _trainer(method, tiny_pairs, tmp_path, 3, noise_sigma=0.1 if method == "dae" else 0.0)
    path = trainer.run()
    rows = read_jsonl(trainer.loss_log)
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert load_checkpoint(path)["step"] == 3
    assert (tmp_path / "checkpoints" / "step_0000002.pt").exists()


def test_zero_steps_writes_initialized_checkpoint(tiny_pairs, tmp_path):
    path = _trainer("mmccd", tiny_pairs, tmp_path, 0).run()
    payload = load_checkpoint(path)
    assert payload["step"] == 0 and payload["schedule"]["T"] == 10
    assert read_jsonl(tmp_path / "loss_log.jsonl") == []


def test_existing_checkpoint_needs_resume(tiny_pairs, tmp_path):
    _trainer("cyclic_unet", tiny_pairs, tmp_path, 2).run()
    with pytest.raises(ConfigError):
        _trainer("cyclic_unet", tiny_pairs, tmp_path, 4).run()
    resumed = _trainer("cyclic_unet", tiny_pairs, tmp_path, 4)
    resumed.run(resume=True)
    assert resumed.step == 4
    assert [r["step"] for r in read_jsonl(resumed.loss_log)] == [1, 2, 3, 4]


def test_seeded_runs_repeat(tiny_pairs, tmp_path):
    a = _trainer("mmccd", tiny_pairs, tmp_path / "a", 3)
    a.run()
    b = _trainer("mmccd", tiny_pairs, tmp_path / "b", 3)
    b.run()
    last_a, last_b = read_jsonl(a.loss_log)[-1], read_jsonl(b.loss_log)[-1]
    assert last_a["loss_f"] == pytest.approx(last_b["loss_f"], abs=1e-6)


def test_trainer_rejects_anomalous_training_slices(tiny_pairs, tmp_path):
    tiny_pairs[0].anomaly_gt[2, 2] = True
    with pytest.raises(ValueError):
        _trainer("ae", tiny_pairs, tmp_path, 1)


def test_resumed_run_continues_the_uninterrupted_one(tiny_pairs, tmp_path):
    straight = _trainer("mmccd", tiny_pairs, tmp_path / "straight", 5)
    straight.run()
    _trainer("mmccd", tiny_pairs, tmp_path / "split", 3).run()
    resumed = _trainer("mmccd", tiny_pairs, tmp_path / "split", 5)
    resumed.run(resume=True)
    expected, got = read_jsonl(straight.loss_log), read_jsonl(resumed.loss_log)
    assert [r["step"] for r in got] == [1, 2, 3, 4, 5]
    for a, b in zip(expected[3:], got[3:]):
        assert b["loss_f"] == pytest.approx(a["loss_f"], abs=1e-6)
        assert b["loss_g"] == pytest.approx(a["loss_g"], abs=1e-6)
