"""Presets and flat ``key=value`` config files.

A config file holds one ``key=value`` per line (``#`` starts a comment). Keys
are namespaced by what they configure::

    corpus.num_videos=2000
    model.clusters=16
    pretrain.base_lr=0.003
    finetune.dropout_rate=0.75

Unprefixed ``seed`` and ``workers`` apply to every section that has them.
Precedence, lowest to highest: preset, config file, command-line overrides.
"""
from __future__ import annotations

import ast
import copy
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .dataset import CorpusSpec
from .localization import PipelineConfig
from .nextvlad import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Preset:
    corpus: CorpusSpec
    model: ModelConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    pipeline: PipelineConfig

    def copy(self) -> "Preset":
        return copy.deepcopy(self)


# Finetuning hyperparameters from the reported setup; pretraining reuses the
# same scheme with the lower dropout and L2 of the pre-finetune stage.
FULL_FINETUNE = TrainConfig(batch_size=512, base_lr=2e-4, lr_decay=0.8,
                             decay_every_examples=1_000_000, epochs=10,
                             dropout_rate=0.75, l2_penalty=1e-4)
FULL_PRETRAIN = TrainConfig(batch_size=80, base_lr=2e-4, lr_decay=0.8,
                             decay_every_examples=1_000_000, epochs=0, max_steps=500_000,
                             dropout_rate=0.5, l2_penalty=1e-5)

PRESETS = {
    "tiny": Preset(
        corpus=CorpusSpec(num_videos=60, class_count=10, frames_range=(10, 20), n_visual=16,
                          n_audio=4, signature_strength=1.5, noise_rate=0.1),
        model=ModelConfig(n_visual=16, n_audio=4, expansion=2, groups=2, clusters=4,
                          audio_groups=2, audio_clusters=2, hidden=32, class_count=10),
        pretrain=TrainConfig(batch_size=8, base_lr=3e-3, decay_every_examples=1_000, epochs=30,
                             dropout_rate=0.5, l2_penalty=1e-5),
        finetune=TrainConfig(batch_size=16, base_lr=1e-3, decay_every_examples=1_000, epochs=30,
                             dropout_rate=0.75, l2_penalty=1e-4),
        pipeline=PipelineConfig(n_candidates=5),
    ),
    "desk": Preset(
        corpus=CorpusSpec(num_videos=2000, class_count=50, frames_range=(20, 40), n_visual=64,
                          n_audio=8, signature_strength=0.25, context_strength=0.4,
                          noise_rate=0.1),
        model=ModelConfig(n_visual=64, n_audio=8, expansion=2, groups=4, clusters=16,
                          audio_groups=4, audio_clusters=8, hidden=128, class_count=50),
        pretrain=TrainConfig(batch_size=32, base_lr=3e-3, decay_every_examples=10_000, epochs=30,
                             dropout_rate=0.5, l2_penalty=1e-5),
        finetune=TrainConfig(batch_size=64, base_lr=1e-3, decay_every_examples=10_000, epochs=10,
                             dropout_rate=0.75, l2_penalty=1e-4),
        pipeline=PipelineConfig(n_candidates=20),
    ),
    "paper": Preset(
        corpus=CorpusSpec(num_videos=1000, class_count=1000, frames_range=(120, 300), n_visual=1024,
                          n_audio=128, signature_strength=0.6, noise_rate=0.1),
        model=ModelConfig(n_visual=1024, n_audio=128, expansion=2, groups=8, clusters=128,
                          audio_groups=8, audio_clusters=64, hidden=2048, class_count=1000),
        pretrain=FULL_PRETRAIN,
        finetune=FULL_FINETUNE,
        pipeline=PipelineConfig(n_candidates=20),
    ),
}


def preset(name: str) -> Preset:
    try:
        return PRESETS[name].copy()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv_file(path) -> dict:
    return parse_kv_text(Path(path).read_text(), str(path))


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if not value.strip():
            return ()
        parsed = ast.literal_eval(value if value.startswith(("(", "[")) else f"({value},)")
        return tuple(parsed)
    return value


def _set(obj, key: str, value: str):
    names = {f.name: f for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
    try:
        return replace(obj, **{key: _coerce(value, getattr(obj, key))})
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


SECTIONS = ("corpus", "model", "pretrain", "finetune", "pipeline")


def apply_overrides(p: Preset, kv: dict) -> Preset:
    p = p.copy()
    for key, value in kv.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} in {key!r}")
            if section == "pipeline" and name.startswith("value_model."):
                vm = _set(p.pipeline.value_model, name.split(".", 1)[1], value)
                p.pipeline = replace(p.pipeline, value_model=vm)
            else:
                setattr(p, section, _set(getattr(p, section), name, value))
        elif key in ("seed", "workers", "T"):
            hit = False
            for section in ("corpus", "pretrain", "finetune"):
                obj = getattr(p, section)
                if hasattr(obj, key):
                    setattr(p, section, _set(obj, key, value))
                    hit = True
            if not hit:
                raise ConfigError(f"key {key!r} matches no section")
        else:
            raise ConfigError(f"config key {key!r} needs a section prefix (one of {SECTIONS})")
    # the corpus and the model must agree on shapes
    p.model = replace(p.model, n_visual=p.corpus.n_visual, n_audio=p.corpus.n_audio,
                      class_count=p.corpus.class_count)
    return p


def resolve(preset_name: str = "tiny", config_path=None, overrides: dict | None = None) -> Preset:
    p = preset(preset_name)
    if config_path:
        p = apply_overrides(p, read_kv_file(config_path))
    if overrides:
        p = apply_overrides(p, overrides)
    return p


def to_kv(p: Preset) -> dict:
    """Flatten a resolved preset back to ``section.key`` strings."""
    out = {}
    for section in SECTIONS:
        obj = getattr(p, section)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if f.name == "value_model":
                for g in fields(v):
                    out[f"pipeline.value_model.{g.name}"] = str(getattr(v, g.name))
            else:
                out[f"{section}.{f.name}"] = str(list(v) if isinstance(v, tuple) else v)
    return out
