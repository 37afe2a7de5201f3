import os
import torch

MODALITIES = ("flair", "t1", "t2")
METHODS = ("mmccd", "cyclic_unet", "ae", "vae", "dae", "ddpm_uncond")
TRANSLATION_METHODS = ("mmccd", "cyclic_unet")


def get_output_root() -> str:
    return os.environ.get("MMCCD_OUTPUT_ROOT", "./runs")


def get_num_workers() -> int:
    raw = os.environ.get("MMCCD_NUM_WORKERS", "0")
    try:
        workers = int(raw)
    except ValueError:
        raise ValueError(
            f"MMCCD_NUM_WORKERS must be an integer, got {raw!r}. "
            "Unset it or export a non-negative worker count."
        )
    if workers < 0:
        raise ValueError(f"MMCCD_NUM_WORKERS must be >= 0, got {workers}.")
    return workers


def get_device() -> str:
    device = os.environ.get("MMCCD_DEVICE", "")
    if device:
        return device
    return "cuda" if torch.cuda.is_available() else "cpu"


# Diffusion schedule
SCHEDULE_KIND = "linear"
NUM_TIMESTEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02

# Strip masks (16x128 on 128x128 slices, moved with stride 2)
IMAGE_SIZE = 128
MASK_EXTENT = 16
MASK_STRIDE = 2
MASK_ORIENTATIONS = ("horizontal", "vertical")

# Optimization
LEARNING_RATE = 1e-4
BATCH_SIZE = 32
MAX_STEPS = 20000
CHECKPOINT_EVERY = 1000

# Networks
UNET_BASE_WIDTH = 32
UNET_DEPTH = 3
UNET_CHANNEL_MULTS = (1, 2, 2)
TIME_EMBEDDING_DIM = 128

# Baselines
DAE_NOISE_SIGMAS = (0.1, 0.2, 0.5)
VAE_KL_WEIGHTS = (1e-3,)
DDPM_T_TEST_FRACTIONS = (0.25, 0.5, 0.75)

# Sampling
DDIM_SPEEDUP = 10
MASK_BATCH_SIZE = 16

# Evaluation
THRESHOLD_SWEEP_POINTS = 200
THRESHOLD_PERCENTILES = (1.0, 99.0)
DEFAULT_THRESHOLD = 0.5

# Data
SLICE_RANGE = (70, 90)
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
PHANTOM_NOISE_SIGMA = 0.02
PHANTOM_COUNTS = {"train": 400, "val": 40, "test": 40}
