import numpy as np
import pytest
import torch
import torch.nn as nn

from src.dataset import SlicePair
from src.diffusion import build_schedule
from src.inference import (
    InferenceResult,
    check_sampler,
    infer_cyclic_unet,
    infer_ddpm_uncond,
    infer_mmccd,
    infer_reconstruction,
    load_scores,
    pixel_error,
    record_threshold,
    run_inference,
    save_scores,
)
from src.masking import build_mask_set
from src.unet import build_method_networks


class Fn(nn.Module):
    """Wraps a function of the first input channel; records what it was given."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn
        self.seen = []
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, inputs, t=None):
        self.seen.append(inputs.detach().clone())
        return self.fn(inputs[:, :1]) + 0 * self.dummy


def constant(image):
    return Fn(lambda inputs: image.expand(inputs.shape[0], 1, *image.shape[-2:]).clone())


@pytest.fixture
def x():
    gen = torch.Generator().manual_seed(2)
    return torch.rand(1, 1, 8, 8, generator=gen)


@pytest.fixture
def schedule():
    return build_schedule(10)


@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_single_full_mask_scores_the_backward_error(x, schedule, sampler):
    masks = build_mask_set(8, 8, extent=8, stride=1, orientations=["horizontal"])
    x_bar = torch.zeros(1, 1, 8, 8)
    result = infer_mmccd(constant(1 - x), constant(x_bar), x, masks, schedule, sampler=sampler,
                         ddim_steps=5, generator=torch.Generator().manual_seed(0))
    assert torch.allclose(result.anomaly_score, (x[0, 0] ** 2).double(), atol=1e-7)


@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_perfect_cycle_scores_zero(x, schedule, sampler):
    masks = build_mask_set(8, 8, extent=2, stride=2)
    f = constant(1 - x)
    g = Fn(lambda y: 1 - y)
    result = infer_mmccd(f, g, x, masks, schedule, sampler=sampler, ddim_steps=5, threshold=0.01,
                         generator=torch.Generator().manual_seed(0), mask_batch_size=3)
    assert float(result.anomaly_score.max()) < 1e-12
    assert not bool(result.binary_mask.any())
    assert not result.collapsed
    assert torch.allclose(result.forward_translation, (1 - x[0, 0]).double(), atol=1e-7)
    assert len(g.seen) == 3 and sum(s.shape[0] for s in g.seen) == len(masks)


def test_backward_translator_sees_unmasked_translation(x, schedule):
    masks = build_mask_set(8, 8, extent=4, stride=2)
    f = constant(1 - x)
    g = Fn(lambda y: y)
    infer_mmccd(f, g, x, masks, schedule, ddim_steps=2, generator=torch.Generator().manual_seed(0))
    for batch in g.seen:
        assert torch.equal(batch, (1 - x).expand(batch.shape[0], 1, 8, 8))
    for batch in f.seen:
        cond = batch[:, 1:]
        # the condition is x outside the strip and noise inside
        for k in range(cond.shape[0]):
            assert int((cond[k, 0] == x[0, 0]).sum()) >= 64 - 32


def test_identity_backward_translator_is_flagged_collapsed(x, schedule):
    masks = build_mask_set(8, 8, extent=2, stride=2)
    result = infer_mmccd(constant(1 - x), Fn(lambda y: y), x, masks, schedule, ddim_steps=2,
                         generator=torch.Generator().manual_seed(0))
    assert result.collapsed


def test_binary_mask_is_score_above_threshold(x, schedule):
    masks = build_mask_set(8, 8, extent=2, stride=2)
    result = infer_mmccd(constant(1 - x), constant(torch.zeros(1, 1, 8, 8)), x, masks, schedule,
                         ddim_steps=2, threshold=0.3, generator=torch.Generator().manual_seed(0))
    assert torch.equal(result.binary_mask, result.anomaly_score > 0.3)
    assert bool(result.binary_mask.any()) and not bool(result.binary_mask.all())
    moved = result.with_threshold(0.6)
    assert torch.equal(moved.binary_mask, result.anomaly_score > 0.6)


def test_mask_set_must_match_slice(x, schedule):
    with pytest.raises(ValueError):
        infer_mmccd(constant(1 - x), constant(x), x, build_mask_set(16, 16, 4, 4), schedule)


def test_check_sampler(schedule):
    assert check_sampler("ddpm", schedule) == 10
    assert check_sampler("ddim", schedule) == 1
    assert check_sampler("ddim", schedule, 4) == 4
    with pytest.raises(ValueError):
        check_sampler("ddim", schedule, 11)
    with pytest.raises(ValueError):
        check_sampler("euler", schedule)


def test_pixel_error_modes():
    a, b = torch.tensor([1.0, -2.0]), torch.tensor([0.0, 0.0])
    assert torch.equal(pixel_error(a, b), torch.tensor([1.0, 4.0]))
    assert torch.equal(pixel_error(a, b, "absolute"), torch.tensor([1.0, 2.0]))
    with pytest.raises(ValueError):
        pixel_error(a, b, "cubic")


def test_cyclic_unet_round_trip(x):
    result = infer_cyclic_unet(Fn(lambda v: 1 - v), Fn(lambda v: 1 - v), x, threshold=0.5)
    assert float(result.anomaly_score.max()) < 1e-12
    assert not result.collapsed
    assert infer_cyclic_unet(Fn(lambda v: v), Fn(lambda v: 1 - v), x).collapsed


def test_reconstruction_baseline_scores_error(x):
    result = infer_reconstruction(Fn(lambda v: torch.zeros_like(v)), x, error_mode="absolute")
    assert torch.allclose(result.anomaly_score, x[0, 0].double())
    assert not result.collapsed


def test_unconditional_ddpm_with_oracle_reconstructs(x, schedule):
    result = infer_ddpm_uncond(constant(x), x, schedule, t_test=5, ddim_steps=3)
    assert float(result.anomaly_score.max()) < 1e-12
    with pytest.raises(ValueError):
        infer_ddpm_uncond(constant(x), x, schedule, t_test=11)


def _pairs(n=2, size=16):
    gen = np.random.default_rng(0)
    return [
        SlicePair(gen.random((size, size), dtype=np.float32), gen.random((size, size), dtype=np.float32),
                  np.zeros((size, size), dtype=bool), f"case{i}", 80, "test")
        for i in range(n)
    ]


def _random_mmccd():
    torch.manual_seed(0)
    nets = build_method_networks("mmccd", 16, base_width=4, depth=2, time_dim=8)
    for net in nets.values():
        nn.init.normal_(net.head.weight, std=0.05)
    return nets


def test_seeded_inference_is_bit_identical():
    pairs, nets, s = _pairs(), _random_mmccd(), build_schedule(10)
    masks = build_mask_set(16, 16, 4, 4)
    options = dict(s=s, masks=masks, sampler="ddpm", mask_batch_size=3)
    a = run_inference("mmccd", nets, pairs, seed=7, **options)
    b = run_inference("mmccd", nets, pairs, seed=7, **options)
    for ra, rb in zip(a, b):
        assert torch.equal(ra.anomaly_score, rb.anomaly_score)
    c = run_inference("mmccd", nets, pairs, seed=8, **options)
    assert not torch.equal(a[0].anomaly_score, c[0].anomaly_score)


def test_deterministic_sampler_does_not_depend_on_mask_batching():
    pairs, nets, s = _pairs(1), _random_mmccd(), build_schedule(10)
    masks = build_mask_set(16, 16, 4, 4)
    one = run_inference("mmccd", nets, pairs, seed=3, s=s, masks=masks, ddim_steps=5, mask_batch_size=1)
    many = run_inference("mmccd", nets, pairs, seed=3, s=s, masks=masks, ddim_steps=5, mask_batch_size=8)
    assert torch.allclose(one[0].anomaly_score, many[0].anomaly_score, atol=1e-5)


def test_scores_round_trip_through_files(tmp_path):
    pairs = _pairs()
    results = [InferenceResult.from_score(torch.rand(16, 16), 0.4, reconstruction=torch.rand(16, 16)) for _ in pairs]
    manifest = save_scores(results, pairs, tmp_path, "test")
    assert manifest.name == "scores_test.jsonl"
    loaded = load_scores(tmp_path, "test")
    assert [row["subject_id"] for row, _ in loaded] == ["case0", "case1"]
    for (_, got), want in zip(loaded, results):
        assert torch.equal(got.anomaly_score, want.anomaly_score)
        assert got.threshold == 0.4
        assert torch.equal(got.reconstruction, want.reconstruction)


def test_recorded_threshold_drives_loaded_masks(tmp_path):
    pairs = _pairs()
    results = [InferenceResult.from_score(torch.linspace(0, 1, 256).reshape(16, 16), 0.5) for _ in pairs]
    save_scores(results, pairs, tmp_path, "test")
    record_threshold(tmp_path, "test", 0.9)
    for row, got in load_scores(tmp_path, "test"):
        assert row["threshold"] == 0.9
        assert torch.equal(got.binary_mask, got.anomaly_score > 0.9)
