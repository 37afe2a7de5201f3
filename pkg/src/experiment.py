import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Union

import yaml

import config
from src.errors import ConfigError
from src.phantom import ANOMALY_MODES

logger = logging.getLogger(__name__)

DATA_SOURCES = ("phantom", "brats_dir")
SAMPLERS = ("ddpm", "ddim")
ERROR_MODES = ("squared", "absolute")
THRESHOLD_SOURCES = ("fixed", "from_validation")
METHOD_LABELS = {
    "mmccd": "MMCCD",
    "cyclic_unet": "Cyclic UNet",
    "ae": "AE",
    "vae": "VAE",
    "dae": "DAE",
    "ddpm_uncond": "DDPM",
}


@dataclass
class DataConfig:
    source: str = "phantom"
    brats_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    image_size: int = config.IMAGE_SIZE
    n_train: int = config.PHANTOM_COUNTS["train"]
    n_val: int = config.PHANTOM_COUNTS["val"]
    n_test: int = config.PHANTOM_COUNTS["test"]
    noise_sigma: float = config.PHANTOM_NOISE_SIGMA
    anomaly_modes: list = field(default_factory=lambda: ["distinct", "camouflage"])
    slice_range: list = field(default_factory=lambda: list(config.SLICE_RANGE))


@dataclass
class ScheduleConfig:
    kind: str = config.SCHEDULE_KIND
    T: int = config.NUM_TIMESTEPS
    beta_start: float = config.BETA_START
    beta_end: float = config.BETA_END


@dataclass
class MaskConfig:
    extent: int = config.MASK_EXTENT
    stride: int = config.MASK_STRIDE
    orientations: list = field(default_factory=lambda: list(config.MASK_ORIENTATIONS))


@dataclass
class NetworkOptions:
    base_width: int = config.UNET_BASE_WIDTH
    depth: int = config.UNET_DEPTH
    channel_mults: Optional[list] = None
    time_dim: int = config.TIME_EMBEDDING_DIM
    latent_channels: int = 8


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = config.LEARNING_RATE
    batch_size: int = config.BATCH_SIZE
    max_steps: int = config.MAX_STEPS
    checkpoint_every: int = config.CHECKPOINT_EVERY
    dae_sigma: float = config.DAE_NOISE_SIGMAS[0]
    vae_kl_weight: float = config.VAE_KL_WEIGHTS[0]
    resume: bool = False


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    ddim_steps: Optional[int] = None
    beta_noise_scale: bool = False
    error_mode: str = "squared"
    mask_batch_size: int = config.MASK_BATCH_SIZE
    t_test: Optional[int] = None

    def resolved_ddim_steps(self, T: int) -> int:
        return self.ddim_steps or max(1, T // config.DDIM_SPEEDUP)

    def resolved_t_test(self, T: int) -> int:
        return self.t_test or max(1, T // 2)


@dataclass
class EvaluationConfig:
    threshold_source: str = "from_validation"
    threshold: float = config.DEFAULT_THRESHOLD
    sweep_points: int = config.THRESHOLD_SWEEP_POINTS
    percentiles: list = field(default_factory=lambda: list(config.THRESHOLD_PERCENTILES))
    report_path: Optional[str] = None
    baseline_sweep: bool = True
    dae_sigmas: list = field(default_factory=lambda: list(config.DAE_NOISE_SIGMAS))
    vae_kl_weights: list = field(default_factory=lambda: list(config.VAE_KL_WEIGHTS))
    t_test_fractions: list = field(default_factory=lambda: list(config.DDPM_T_TEST_FRACTIONS))


@dataclass
class ExperimentConfig:
    method: str = "mmccd"
    modality_x: str = "flair"
    modality_y: Optional[str] = "t2"
    seed: int = 0
    output_dir: Optional[str] = None
    workers: int = 0
    deterministic: bool = True
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    network: NetworkOptions = field(default_factory=NetworkOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir or Path(config.get_output_root()) / self.method)

    @property
    def dataset_path(self) -> Path:
        return Path(self.data.dataset_dir) if self.data.dataset_dir else self.output_path / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_path / "checkpoints"

    @property
    def report_file(self) -> Path:
        return Path(self.evaluation.report_path) if self.evaluation.report_path else self.output_path / "report.csv"

    @property
    def method_label(self) -> str:
        label = METHOD_LABELS[self.method]
        if self.method in config.TRANSLATION_METHODS:
            return f"{label} {self.modality_x}->{self.modality_y}"
        return f"{label} {self.modality_x}"

    def phantom_modality_y(self) -> str:
        """Second phantom channel; baselines only need x, so any other tag will do."""
        if self.modality_y and self.modality_y != self.modality_x:
            return self.modality_y
        return next(m for m in config.MODALITIES if m != self.modality_x)

    def validate(self) -> None:
        """Raise ConfigError on the first invalid setting."""
        if self.method not in config.METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; expected one of {config.METHODS}.")
        if self.modality_x not in config.MODALITIES:
            raise ConfigError(f"Unknown modality_x {self.modality_x!r}; expected one of {config.MODALITIES}.")
        if self.method in config.TRANSLATION_METHODS:
            if not self.modality_y:
                raise ConfigError(f"Method {self.method!r} translates between modalities; set modality_y.")
            if self.modality_y == self.modality_x:
                raise ConfigError(f"modality_x and modality_y must differ for {self.method!r}, both are {self.modality_x!r}.")
        if self.modality_y and self.modality_y not in config.MODALITIES:
            raise ConfigError(f"Unknown modality_y {self.modality_y!r}; expected one of {config.MODALITIES}.")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}.")

        d = self.data
        if d.source not in DATA_SOURCES:
            raise ConfigError(f"Unknown data source {d.source!r}; expected one of {DATA_SOURCES}.")
        if d.source == "brats_dir":
            if not d.brats_dir:
                raise ConfigError("data.source is 'brats_dir' but data.brats_dir is not set.")
            if not Path(d.brats_dir).is_dir():
                raise ConfigError(
                    f"BraTS directory {d.brats_dir} does not exist; expected "
                    "<brats_dir>/<subject>/<subject>_<modality>.nii.gz plus <subject>_seg.nii.gz."
                )
        _positive("data.image_size", d.image_size)
        for name in ("n_train", "n_val", "n_test"):
            _non_negative(f"data.{name}", getattr(d, name))
        _non_negative("data.noise_sigma", d.noise_sigma)
        if set(d.anomaly_modes) - set(ANOMALY_MODES):
            raise ConfigError(f"data.anomaly_modes must be a subset of {ANOMALY_MODES}, got {d.anomaly_modes}.")
        if len(d.slice_range) != 2 or d.slice_range[0] > d.slice_range[1] or d.slice_range[0] < 0:
            raise ConfigError(f"data.slice_range must be [lo, hi] with 0 <= lo <= hi, got {d.slice_range}.")

        s = self.schedule
        _positive("schedule.T", s.T)
        if not (0.0 < s.beta_start <= s.beta_end < 1.0):
            raise ConfigError(f"Schedule needs 0 < beta_start <= beta_end < 1, got {s.beta_start}, {s.beta_end}.")

        m = self.mask
        _positive("mask.stride", m.stride)
        if not (1 <= m.extent <= d.image_size):
            raise ConfigError(f"mask.extent must be in [1, {d.image_size}], got {m.extent}.")
        if not m.orientations or set(m.orientations) - set(config.MASK_ORIENTATIONS):
            raise ConfigError(f"mask.orientations must be a non-empty subset of {config.MASK_ORIENTATIONS}.")

        _positive("network.base_width", self.network.base_width)
        _positive("network.depth", self.network.depth)
        _positive("network.time_dim", self.network.time_dim)
        _positive("network.latent_channels", self.network.latent_channels)
        scale = 2 ** self.network.depth
        if d.image_size % scale or d.image_size // scale < 4:
            raise ConfigError(
                f"network.depth={self.network.depth} does not fit {d.image_size}px slices: "
                "the size must be divisible by 2^depth with a bottleneck of at least 4x4."
            )

        t = self.train
        if t.optimizer != "adam":
            raise ConfigError(f"Only the 'adam' optimizer is supported, got {t.optimizer!r}.")
        _positive("train.learning_rate", t.learning_rate)
        _positive("train.batch_size", t.batch_size)
        _non_negative("train.max_steps", t.max_steps)
        _positive("train.checkpoint_every", t.checkpoint_every)
        _non_negative("train.dae_sigma", t.dae_sigma)
        _non_negative("train.vae_kl_weight", t.vae_kl_weight)

        sp = self.sampler
        if sp.kind not in SAMPLERS:
            raise ConfigError(f"Unknown sampler {sp.kind!r}; expected one of {SAMPLERS}.")
        if sp.error_mode not in ERROR_MODES:
            raise ConfigError(f"Unknown error_mode {sp.error_mode!r}; expected one of {ERROR_MODES}.")
        _positive("sampler.mask_batch_size", sp.mask_batch_size)
        if sp.ddim_steps is not None and not (1 <= sp.ddim_steps <= s.T):
            raise ConfigError(f"sampler.ddim_steps must be in [1, {s.T}], got {sp.ddim_steps}.")
        if sp.t_test is not None and not (1 <= sp.t_test <= s.T):
            raise ConfigError(f"sampler.t_test must be in [1, {s.T}], got {sp.t_test}.")

        e = self.evaluation
        if e.threshold_source not in THRESHOLD_SOURCES:
            raise ConfigError(f"Unknown threshold_source {e.threshold_source!r}; expected one of {THRESHOLD_SOURCES}.")
        _positive("evaluation.sweep_points", e.sweep_points)
        if len(e.percentiles) != 2 or not (0 <= e.percentiles[0] <= e.percentiles[1] <= 100):
            raise ConfigError(f"evaluation.percentiles must be [lo, hi] within 0..100, got {e.percentiles}.")
        if any(not (0 < f < 1) for f in e.t_test_fractions):
            raise ConfigError(f"evaluation.t_test_fractions must lie in (0, 1), got {e.t_test_fractions}.")


def _positive(name: str, value) -> None:
    if value is None or value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}.")


def _non_negative(name: str, value) -> None:
    if value is None or value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}.")


def _merge(target, values: dict, prefix: str = ""):
    """Copy a nested dict onto a dataclass instance; unknown keys are errors."""
    if not isinstance(values, dict):
        raise ConfigError(f"Section {prefix or '<root>'} must be a mapping, got {type(values).__name__}.")
    known = {f.name: f for f in fields(target)}
    for key, value in values.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"Unknown config key {name!r}.")
        current = getattr(target, key)
        if is_dataclass(current):
            _merge(current, value or {}, prefix=f"{name}.")
        else:
            setattr(target, key, value)
    return target


def _apply_environment(cfg: ExperimentConfig) -> None:
    try:
        cfg.workers = config.get_num_workers()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    cfg.device = config.get_device()


def set_override(cfg: ExperimentConfig, dotted_key: str, value) -> None:
    """Apply one ``section.key=value`` override."""
    *sections, key = dotted_key.split(".")
    target = cfg
    for section in sections:
        if not hasattr(target, section) or not is_dataclass(getattr(target, section)):
            raise ConfigError(f"Unknown config section {section!r} in override {dotted_key!r}.")
        target = getattr(target, section)
    _merge(target, {key: value}, prefix=".".join(sections) + "." if sections else "")


def parse_override(text: str) -> tuple:
    """``key=value`` with the value parsed as YAML, so numbers and lists keep their types."""
    if "=" not in text:
        raise ConfigError(f"Override {text!r} must look like section.key=value.")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"Could not parse override value {raw!r}: {e}") from e


def load_experiment(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Resolve defaults < environment < YAML file < overrides, then validate."""
    cfg = ExperimentConfig()
    _apply_environment(cfg)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} not found.")
        try:
            values = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
        _merge(cfg, values)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_override(cfg, key, value)
    cfg.validate()
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    """Plain dict (lists, no tuples) that ``yaml.safe_dump`` accepts and ``load_experiment`` reads back."""
    return _plain(asdict(cfg))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def echo_config(cfg: ExperimentConfig) -> Path:
    """Write ``resolved_config.yaml`` into the output directory."""
    out = cfg.output_path / "resolved_config.yaml"
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = to_dict(cfg)
    resolved["output_dir"] = str(cfg.output_path)
    out.write_text(yaml.safe_dump(resolved, sort_keys=False), encoding="utf-8")
    logger.info("Resolved config written to %s", out)
    return out
