"""Run configuration: a strict, typed INI file shared by all commands.

One file drives every command.  Sections:

  [model]    architecture hyperparameters (classes, widths, decoder_width,
             reduction, spatial_kernel, units_per_stage, fusion_mode,
             use_batchnorm)
  [train]    optimization (lr, momentum, weight_decay, epochs, batch, seed,
             decay_epochs, decay_factor, augment)
  [data]     dataset location and split names (root, train_split, val_split,
             eval_split)
  [ablation] fusion comparison (variants, seeds, epochs; epochs 0 means
             inherit [train] epochs)
  [synth]    synthetic scene generator knobs (mirrors SynthConfig)

Every key has a default, so the empty string is a valid config.  Unknown
sections or keys are rejected with the line number they appear on; the
fully resolved configuration (defaults included) can be re-serialized so
each output directory records exactly what produced it.
"""

import configparser
import dataclasses
import io
import re

from .errors import ConfigError
from .model import FUSION_MODES, ModelConfig
from .synth import SynthConfig
from .training import TrainSchedule

__all__ = [
    "RunConfig",
    "parse_run_config",
    "load_run_config",
    "resolved_ini",
    "write_resolved_config",
    "with_seed",
]


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for synth/train/eval/ablate runs."""

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    schedule: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)
    epochs: int = 10
    batch: int = 4
    seed: int = 0
    augment: bool = False
    data_root: str = "data"
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"
    ablation_variants: tuple = ("rgb_only", "depth_only", "smf", "mmaf")
    ablation_seeds: tuple = (0, 1, 2)
    ablation_epochs: int = 0
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)

    @property
    def effective_ablation_epochs(self):
        return self.ablation_epochs if self.ablation_epochs > 0 else self.epochs


def _parse_int(raw):
    return int(raw.strip())


def _parse_float(raw):
    return float(raw.strip())


def _parse_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_str(raw):
    return raw.strip()


def _split_list(raw):
    return [part.strip() for part in raw.split(",") if part.strip()]


def _parse_int_list(raw):
    return tuple(int(part) for part in _split_list(raw))


def _parse_float_list(raw):
    return tuple(float(part) for part in _split_list(raw))


def _parse_str_list(raw):
    return tuple(_split_list(raw))


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# Each entry: key -> (parser, default getter from a RunConfig).
# The getters double as the echo order for resolved_ini.
_SCHEMA = {
    "model": {
        "classes": (_parse_int, lambda c: c.model.num_classes),
        "widths": (_parse_int_list, lambda c: c.model.widths),
        "decoder_width": (_parse_int, lambda c: c.model.decoder_width),
        "reduction": (_parse_int, lambda c: c.model.reduction),
        "spatial_kernel": (_parse_int, lambda c: c.model.spatial_kernel),
        "units_per_stage": (_parse_int, lambda c: c.model.units_per_stage),
        "fusion_mode": (_parse_str, lambda c: c.model.fusion_mode),
        "use_batchnorm": (_parse_bool, lambda c: c.model.use_batchnorm),
    },
    "train": {
        "lr": (_parse_float, lambda c: c.schedule.lr),
        "momentum": (_parse_float, lambda c: c.schedule.momentum),
        "weight_decay": (_parse_float, lambda c: c.schedule.weight_decay),
        "decay_epochs": (_parse_int_list, lambda c: c.schedule.decay_epochs),
        "decay_factor": (_parse_float, lambda c: c.schedule.decay_factor),
        "epochs": (_parse_int, lambda c: c.epochs),
        "batch": (_parse_int, lambda c: c.batch),
        "seed": (_parse_int, lambda c: c.seed),
        "augment": (_parse_bool, lambda c: c.augment),
    },
    "data": {
        "root": (_parse_str, lambda c: c.data_root),
        "train_split": (_parse_str, lambda c: c.train_split),
        "val_split": (_parse_str, lambda c: c.val_split),
        "eval_split": (_parse_str, lambda c: c.eval_split),
    },
    "ablation": {
        "variants": (_parse_str_list, lambda c: c.ablation_variants),
        "seeds": (_parse_int_list, lambda c: c.ablation_seeds),
        "epochs": (_parse_int, lambda c: c.ablation_epochs),
    },
    "synth": {
        "image_size": (_parse_int, lambda c: c.synth.image_size),
        "num_images": (_parse_int, lambda c: c.synth.num_images),
        "num_shape_classes": (_parse_int, lambda c: c.synth.num_shape_classes),
        "shapes_per_image": (_parse_int_list, lambda c: c.synth.shapes_per_image),
        "p_dark": (_parse_float, lambda c: c.synth.p_dark),
        "dark_strength": (_parse_float_list, lambda c: c.synth.dark_strength),
        "noise_std": (_parse_float, lambda c: c.synth.noise_std),
        "depth_layering": (_parse_str, lambda c: c.synth.depth_layering),
        "split_fractions": (_parse_float_list, lambda c: c.synth.split_fractions),
        "seed": (_parse_int, lambda c: c.synth.seed),
    },
}


def _line_of(text, section, key=None):
    """Best-effort line number of a section header or of a key inside it."""
    section_pat = re.compile(r"^\s*\[" + re.escape(section) + r"\]\s*(?:[;#].*)?$")
    in_section = False
    for number, line in enumerate(text.splitlines(), start=1):
        if section_pat.match(line):
            if key is None:
                return number
            in_section = True
            continue
        if in_section:
            if re.match(r"^\s*\[", line):
                break
            if re.match(r"^\s*" + re.escape(key) + r"\s*[=:]", line):
                return number
    return None


def _located(text, section, key, message):
    line = _line_of(text, section, key)
    where = f" (line {line})" if line is not None else ""
    return ConfigError(message + where)


def parse_run_config(text, source="<config>"):
    """Parse INI text into a RunConfig; unknown or malformed input raises ConfigError."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise _located(text, section, None,
                           f"unknown section [{section}] in {source}")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise _located(text, section, key,
                               f"unknown key {key!r} in [{section}] of {source}")

    defaults = RunConfig()
    values = {}
    for section, keys in _SCHEMA.items():
        for key, (parse, getter) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[(section, key)] = parse(raw)
                except ValueError as exc:
                    raise _located(text, section, key,
                                   f"bad value for [{section}] {key}: {exc}") from exc
            else:
                values[(section, key)] = getter(defaults)

    def v(section, key):
        return values[(section, key)]

    model = ModelConfig(
        num_classes=v("model", "classes"),
        widths=v("model", "widths"),
        decoder_width=v("model", "decoder_width"),
        reduction=v("model", "reduction"),
        spatial_kernel=v("model", "spatial_kernel"),
        units_per_stage=v("model", "units_per_stage"),
        fusion_mode=v("model", "fusion_mode"),
        use_batchnorm=v("model", "use_batchnorm"),
    )
    schedule = TrainSchedule(
        lr=v("train", "lr"),
        momentum=v("train", "momentum"),
        weight_decay=v("train", "weight_decay"),
        decay_epochs=v("train", "decay_epochs"),
        decay_factor=v("train", "decay_factor"),
    )
    synth = SynthConfig(
        image_size=v("synth", "image_size"),
        num_images=v("synth", "num_images"),
        num_shape_classes=v("synth", "num_shape_classes"),
        shapes_per_image=v("synth", "shapes_per_image"),
        p_dark=v("synth", "p_dark"),
        dark_strength=v("synth", "dark_strength"),
        noise_std=v("synth", "noise_std"),
        depth_layering=v("synth", "depth_layering"),
        split_fractions=v("synth", "split_fractions"),
        seed=v("synth", "seed"),
    )

    epochs = v("train", "epochs")
    if epochs < 1:
        raise _located(text, "train", "epochs", "[train] epochs must be >= 1")
    batch = v("train", "batch")
    if batch < 1:
        raise _located(text, "train", "batch", "[train] batch must be >= 1")
    if schedule.lr <= 0:
        raise _located(text, "train", "lr", "[train] lr must be > 0")

    variants = v("ablation", "variants")
    if not variants:
        raise _located(text, "ablation", "variants",
                       "[ablation] variants must not be empty")
    for variant in variants:
        if variant not in FUSION_MODES:
            raise _located(text, "ablation", "variants",
                           f"unknown ablation variant {variant!r}; "
                           f"choose from {FUSION_MODES}")
    seeds = v("ablation", "seeds")
    if not seeds:
        raise _located(text, "ablation", "seeds",
                       "[ablation] seeds must not be empty")
    if len(set(seeds)) != len(seeds):
        raise _located(text, "ablation", "seeds",
                       "[ablation] seeds must be distinct")
    ablation_epochs = v("ablation", "epochs")
    if ablation_epochs < 0:
        raise _located(text, "ablation", "epochs",
                       "[ablation] epochs must be >= 0 (0 inherits [train])")

    return RunConfig(
        model=model,
        schedule=schedule,
        epochs=epochs,
        batch=batch,
        seed=v("train", "seed"),
        augment=v("train", "augment"),
        data_root=v("data", "root"),
        train_split=v("data", "train_split"),
        val_split=v("data", "val_split"),
        eval_split=v("data", "eval_split"),
        ablation_variants=variants,
        ablation_seeds=seeds,
        ablation_epochs=ablation_epochs,
        synth=synth,
    )


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text, source=str(path))


def resolved_ini(config):
    """Canonical INI text with every key present (defaults filled in)."""
    out = io.StringIO()
    for index, (section, keys) in enumerate(_SCHEMA.items()):
        if index:
            out.write("\n")
        out.write(f"[{section}]\n")
        for key, (_parse, getter) in keys.items():
            out.write(f"{key} = {_render(getter(config))}\n")
    return out.getvalue()


def write_resolved_config(config, path):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(resolved_ini(config))


def with_seed(config, seed):
    """Copy of config with the training and synth seeds replaced."""
    return dataclasses.replace(
        config,
        seed=int(seed),
        synth=dataclasses.replace(config.synth, seed=int(seed)),
    )
