"""End-to-end phantom runs. Each method trains for minutes; run with --runslow."""
from pathlib import Path

import numpy as np
import pytest

from main import cmd_run_all
from src.dataset import load_dataset
from src.experiment import load_experiment
from src.inference import load_scores
from src.utils import slice_name

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
pytestmark = pytest.mark.slow


def _run(config_name, out, **overrides):
    cfg = load_experiment(CONFIGS / config_name, {"output_dir": str(out), **overrides})
    return cfg, cmd_run_all(cfg)


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    data = str(root / "data")
    results = {}
    for method, config_name in (("mmccd", "phantom_mmccd.yaml"), ("cyclic_unet", "phantom_cyclic_unet.yaml")):
        results[method] = _run(config_name, root / method, **{"data.dataset_dir": data})
    for method in ("ae", "vae", "dae", "ddpm_uncond"):
        results[method] = _run(
            "phantom_baselines.yaml", root / method, method=method, modality_y="t2", **{"data.dataset_dir": data}
        )
    return results


def test_translation_methods_beat_reconstruction_baselines(reports):
    dice = {method: report.dice for method, (_, report) in reports.items()}
    best_baseline = max(dice[m] for m in ("ae", "vae", "dae", "ddpm_uncond"))
    assert dice["mmccd"] >= 0.6
    assert dice["mmccd"] >= dice["cyclic_unet"] > best_baseline


def test_anomaly_contrast(reports):
    cfg, _ = reports["mmccd"]
    gts = {p.name: p.anomaly_gt for p in load_dataset(cfg.dataset_path, "test")}
    inside, outside = [], []
    for row, result in load_scores(cfg.output_path, "test"):
        gt = gts[slice_name(row["subject_id"], row["slice_index"])]
        score = result.anomaly_score.numpy()
        inside.append(score[gt].mean())
        outside.append(score[~gt].mean())
    assert np.mean(inside) > 3 * np.mean(outside)


def test_camouflage_anomalies_need_masked_context(tmp_path):
    gains = []
    for seed in (0, 1, 2):
        shared = {"seed": seed, "data.anomaly_modes": ["camouflage"], "data.dataset_dir": str(tmp_path / f"data{seed}")}
        _, mmccd = _run("phantom_mmccd.yaml", tmp_path / f"mmccd{seed}", **shared)
        _, cyclic = _run("phantom_cyclic_unet.yaml", tmp_path / f"cyclic{seed}", **shared)
        gains.append(mmccd.dice - cyclic.dice)
    assert np.mean(gains) >= 0.05
