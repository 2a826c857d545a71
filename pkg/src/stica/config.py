"""Run configuration: line-oriented `key = value` files with dotted keys.

Every key has a registered default; unknown keys are rejected with their
line number (anti-typo), command-line `--key value` pairs override file
values, and the fully resolved configuration is echoed to the output
directory so a run can be reproduced from its artifacts alone.
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "DataError",
    "RunConfig",
    "DEFAULTS",
    "COMMANDS",
    "parse_config",
    "parse_int_list",
]

COMMANDS = ("pretrain", "probe", "retrieve", "bench", "heatmap")


class ConfigError(ValueError):
    """Bad key, bad value, or violated cross-field constraint (exit 2)."""


class DataError(RuntimeError):
    """Dataset construction or loading failure (exit 3)."""


DEFAULTS = OrderedDict([
    ("seed", 0),
    ("threads", 1),
    ("data.classes", 4),
    ("data.per_class", 50),
    ("data.frames", 8),
    ("data.height", 56),
    ("data.width", 56),
    ("data.freq_bins", 32),
    ("data.audio_frames", 32),
    ("data.noise", 0.05),
    ("data.phase_range", 4),
    ("encoder.widths", "16,32,64"),
    ("encoder.spatial_strides", "2,2,2"),
    ("encoder.temporal_strides", "1,1,2"),
    ("encoder.temporal_kernels", "1,1,1"),
    ("audio.widths", "16,32,64"),
    ("audio.strides", "2,2,2"),
    ("pool.kind", "transformer"),
    ("transformer.layers", 2),
    ("transformer.heads", 4),
    ("transformer.ff_dim", 0),
    ("transformer.aggregation", "mean"),
    ("crop.m", 1),
    ("crop.n", 2),
    ("crop.medium_size", 6),
    ("crop.small_size", 4),
    ("crop.time_spec", "2x3+1x2"),
    ("loss.lambda_vv", 1.0),
    ("loss.lambda_va", 1.0),
    ("loss.tau_cross", 0.1),
    ("loss.tau_within", 0.5),
    ("loss.normalize_within", True),
    ("sched.base_lr", 0.05),
    ("sched.warmup_epochs", 3),
    ("sched.policy", "constant"),
    ("sched.milestones", ""),
    ("sched.factor", 1.0),
    ("train.epochs", 30),
    ("train.batch_size", 8),
    ("train.momentum", 0.9),
    ("train.weight_decay", 1e-5),
    ("train.checkpoint_every", 10),
    ("pretrain.resume", ""),
    ("augment.flip_prob", 0.5),
    ("augment.brightness", 0.2),
    ("augment.contrast", 0.2),
    ("augment.blur_prob", 0.0),
    ("augment.blur_sigma", 1.0),
    ("augment.audio_gain", 0.25),
    ("augment.area_min", 0.4),
    ("augment.area_max", 1.0),
    ("probe.checkpoint", ""),
    ("probe.mode", "linear"),
    ("probe.use_feature_crops", False),
    ("probe.epochs", 12),
    ("probe.batch_size", 32),
    ("probe.base_lr", 0.02),
    ("probe.warmup_epochs", 2),
    ("probe.milestones", "6,10"),
    ("probe.factor", 0.05),
    ("probe.momentum", 0.9),
    ("probe.weight_decay", 0.005),
    ("retrieve.checkpoint", ""),
    ("retrieve.ks", "1,5,20"),
    ("retrieve.num_clips", 10),
    ("bench.k_list", "2,4,8"),
    ("bench.repeats", 5),
    ("bench.batch_size", 8),
    ("bench.crop_size", 6),
    ("bench.warmup", 2),
    ("heatmap.checkpoint", ""),
    ("heatmap.index", 0),
    ("heatmap.split", "test"),
    ("heatmap.count", 1),
])


def _coerce(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_int_list(text):
    text = text.strip()
    if not text:
        return []
    try:
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


@dataclass
class RunConfig:
    command: str
    values: OrderedDict = field(default_factory=lambda: OrderedDict(DEFAULTS))
    out_dir: str = ""

    def __eq__(self, other):
        return (isinstance(other, RunConfig) and self.command == other.command
                and dict(self.values) == dict(other.values))

    def __getitem__(self, key):
        return self.values[key]

    # -- builders -----------------------------------------------------------

    def data_spec(self):
        from .data import SyntheticDatasetSpec

        v = self.values
        try:
            return SyntheticDatasetSpec(
                num_classes=v["data.classes"], per_class=v["data.per_class"],
                frames=v["data.frames"], height=v["data.height"], width=v["data.width"],
                freq_bins=v["data.freq_bins"], audio_frames=v["data.audio_frames"],
                noise=v["data.noise"], seed=v["seed"],
                phase_range=v["data.phase_range"])
        except ValueError as e:
            raise DataError(str(e)) from None

    def visual_config(self):
        from .nn import EncoderConfig

        v = self.values
        return EncoderConfig(
            in_channels=3,
            widths=tuple(parse_int_list(v["encoder.widths"])),
            spatial_strides=tuple(parse_int_list(v["encoder.spatial_strides"])),
            temporal_strides=tuple(parse_int_list(v["encoder.temporal_strides"])),
            temporal_kernels=tuple(parse_int_list(v["encoder.temporal_kernels"])),
            ref_input=(v["data.frames"], v["data.height"], v["data.width"]),
        )

    def audio_config(self):
        from .nn import AudioConfig

        v = self.values
        return AudioConfig(
            widths=tuple(parse_int_list(v["audio.widths"])),
            strides=tuple(parse_int_list(v["audio.strides"])),
            ref_input=(v["data.freq_bins"], v["data.audio_frames"]),
        )

    def transformer_config(self, model_dim):
        from .nn import TransformerConfig

        v = self.values
        return TransformerConfig(
            num_layers=v["transformer.layers"], num_heads=v["transformer.heads"],
            model_dim=model_dim, ff_dim=v["transformer.ff_dim"],
            aggregation=v["transformer.aggregation"])

    def build_model(self):
        from .nn import AVModel

        visual = self.visual_config()
        return AVModel(
            visual_cfg=visual,
            audio_cfg=self.audio_config(),
            transformer_cfg=self.transformer_config(visual.feature_dim),
            pool=self.values["pool.kind"],
            seed=self.values["seed"],
        )

    def crop_plan(self):
        from .augment import CropPlan, parse_time_spec

        v = self.values
        grid = self.visual_config().grid
        return CropPlan(
            m=v["crop.m"], n=v["crop.n"], medium_size=v["crop.medium_size"],
            small_size=v["crop.small_size"],
            time_spec=parse_time_spec(v["crop.time_spec"]), grid=grid)

    def loss_weights(self):
        from .losses import LossWeights

        v = self.values
        return LossWeights(lambda_vv=v["loss.lambda_vv"], lambda_va=v["loss.lambda_va"],
                           tau_cross=v["loss.tau_cross"], tau_within=v["loss.tau_within"])

    def schedule(self, steps_per_epoch):
        from .training import ScheduleSpec

        v = self.values
        return ScheduleSpec(
            base_lr=v["sched.base_lr"], warmup_epochs=v["sched.warmup_epochs"],
            steps_per_epoch=steps_per_epoch, policy=v["sched.policy"],
            milestones=tuple(parse_int_list(v["sched.milestones"])),
            factor=v["sched.factor"])

    def probe_schedule(self, steps_per_epoch):
        from .training import ScheduleSpec

        v = self.values
        return ScheduleSpec(
            base_lr=v["probe.base_lr"], warmup_epochs=v["probe.warmup_epochs"],
            steps_per_epoch=steps_per_epoch, policy="step",
            milestones=tuple(parse_int_list(v["probe.milestones"])),
            factor=v["probe.factor"])

    def augment_params(self):
        from .augment import AugmentParams

        v = self.values
        return AugmentParams(
            flip_prob=v["augment.flip_prob"], brightness=v["augment.brightness"],
            contrast=v["augment.contrast"], blur_prob=v["augment.blur_prob"],
            blur_sigma=v["augment.blur_sigma"], audio_gain=v["augment.audio_gain"])

    def train_settings(self):
        from .training import TrainSettings

        v = self.values
        return TrainSettings(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"],
            checkpoint_every=v["train.checkpoint_every"],
            area_range=(v["augment.area_min"], v["augment.area_max"]),
            aspect_range=(0.75, 4.0 / 3.0), augment=self.augment_params())

    # -- validation / echo ---------------------------------------------------

    def validate(self):
        v = self.values
        try:
            visual = self.visual_config()
            self.audio_config()
        except ValueError as e:
            raise ConfigError(f"encoder configuration invalid: {e}") from None
        t1, h1, w1 = visual.grid
        grid_min = min(h1, w1)
        for key in ("crop.medium_size", "crop.small_size"):
            count = v["crop.m"] if key == "crop.medium_size" else v["crop.n"]
            if count > 0 and v[key] > grid_min:
                raise ConfigError(
                    f"{key} = {v[key]} exceeds the encoder.grid spatial extent "
                    f"{grid_min} (grid {visual.grid})")
        from .augment import parse_time_spec

        try:
            spec = parse_time_spec(v["crop.time_spec"])
        except ValueError as e:
            raise ConfigError(f"crop.time_spec: {e}") from None
        for _, size in spec:
            if size > t1:
                raise ConfigError(
                    f"crop.time_spec size {size} exceeds the encoder.grid temporal "
                    f"extent {t1}")
        audio_d = tuple(parse_int_list(v["audio.widths"]))[-1]
        if audio_d != visual.feature_dim:
            raise ConfigError(
                f"audio.widths last entry {audio_d} must equal encoder.widths last "
                f"entry {visual.feature_dim} (shared embedding dimension)")
        if visual.feature_dim % v["transformer.heads"]:
            raise ConfigError(
                f"transformer.heads = {v['transformer.heads']} does not divide the "
                f"feature dim {visual.feature_dim}")
        if v["pool.kind"] not in ("gap", "transformer"):
            raise ConfigError(f"pool.kind must be gap or transformer, got {v['pool.kind']!r}")
        if v["train.batch_size"] < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0.0 < v["augment.area_min"] <= v["augment.area_max"] <= 1.0:
            raise ConfigError("augment.area_min/max must satisfy 0 < min <= max <= 1")
        if self.command == "retrieve" and not v["retrieve.checkpoint"]:
            raise ConfigError("retrieve requires retrieve.checkpoint (path to a "
                              "pretraining checkpoint)")
        if v["heatmap.split"] not in ("train", "test"):
            raise ConfigError("heatmap.split must be train or test")
        if v["probe.mode"] not in ("linear", "full"):
            raise ConfigError("probe.mode must be linear or full")
        return self

    def echo_text(self):
        lines = [f"{key} = {_format_value(val)}" for key, val in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.echo_text().encode("utf-8")).digest()


def _format_value(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def parse_config(path=None, overrides=None, command="pretrain"):
    """Build a RunConfig from defaults, an optional file, and overrides."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    values = OrderedDict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
            key, _, text_val = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, text_val)
    for key, text_val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = _coerce(key, str(text_val))
    return RunConfig(command, values).validate()
