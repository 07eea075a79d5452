"""Experiment configuration and its flat sectioned ``key = value`` text format.

Grammar::

    file    := line*
    line    := blank | comment | section | setting
    comment := ('#' | ';') any*
    section := '[' name ']'
    setting := key '=' value          (value runs to end of line, trimmed)

Settings are addressed as ``section.key``; the same form is accepted by
``--set`` on the command line.  Values are converted to the type of the
field's default; ``none`` clears an optional integer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from ..kvcache import EvictionPolicy, Policy
from ..learner import LearnerConfig
from ..model import ModelConfig
from ..rollout import RolloutConfig
from ..tasks import TaskSpec, Variant


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 300
    prompts_per_step: int = 5
    seed: int = 0
    sft_steps: int = 150
    sft_batch: int = 16
    sft_lr: float = 3e-3
    final_window: int = 30
    out_dir: str = "runs/default"
    sft_cache: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self):
        self.task.validate(self.model.max_seq_len, self.model.vocab_size)
        if self.train.steps < 0 or self.train.prompts_per_step < 1:
            raise ConfigError("train.steps must be >= 0 and train.prompts_per_step >= 1")
        return self

    @property
    def seed(self):
        return self.train.seed


# rollout.policy / window / policy_seed live on the nested EvictionPolicy
_POLICY_KEYS = {"policy": "variant", "window": "window", "policy_seed": "rng_seed"}


def _convert(raw, default, where):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, Policy):
            return Policy(text.lower().replace("-", "_"))
        if isinstance(default, Variant):
            return Variant(text.lower())
        if default is None or isinstance(default, int):
            if text.lower() == "none":
                return None
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def apply_setting(cfg, dotted, raw, where="--set"):
    """Return ``cfg`` with ``section.key`` set from the string ``raw``."""
    if "." not in dotted:
        raise ConfigError(f"{where}: expected section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    section, key = section.strip(), key.strip()
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if section not in names:
        raise ConfigError(f"{where}: unknown section [{section}]")
    sub = getattr(cfg, section)
    try:
        if section == "rollout" and key in _POLICY_KEYS:
            attr = _POLICY_KEYS[key]
            pol = sub.policy
            value = _convert(raw, getattr(pol, attr), where)
            new = replace(sub, policy=replace(pol, **{attr: value}))
        else:
            if key not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            value = _convert(raw, getattr(sub, key), where)
            new = replace(sub, **{key: value})
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    return replace(cfg, **{section: new})


def parse_config(text, source="<config>", base=None):
    cfg = base or ExperimentConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}: {line.strip()!r}"
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"{where}: unterminated section header")
            section = s[1:-1].strip()
            continue
        if "=" not in s:
            raise ConfigError(f"{where}: expected key = value")
        if section is None:
            raise ConfigError(f"{where}: setting outside any [section]")
        key, value = s.split("=", 1)
        cfg = apply_setting(cfg, f"{section}.{key.strip()}", value, where)
    return cfg


def load_config(path=None, overrides=(), base=None):
    cfg = base or ExperimentConfig()
    if path:
        with open(path) as f:
            cfg = parse_config(f.read(), str(path), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        k, v = item.split("=", 1)
        cfg = apply_setting(cfg, k, v, f"--set {item}")
    return cfg.validate()


def dump_config(cfg):
    """Render ``cfg`` in the same text format (round-trips through parse_config)."""
    lines = []
    for sec in dataclasses.fields(ExperimentConfig):
        sub = getattr(cfg, sec.name)
        lines.append(f"[{sec.name}]")
        for f in dataclasses.fields(sub):
            v = getattr(sub, f.name)
            if isinstance(v, EvictionPolicy):
                lines.append(f"policy = {v.variant.value}")
                lines.append(f"window = {v.window}")
                lines.append(f"policy_seed = {v.rng_seed}")
                continue
            if hasattr(v, "value"):
                v = v.value
            if isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


PAPER_MIRROR_TOY = """\
# NeedleRetrieval, 2-layer model, K=4, 50% compression, heavy-hitter eviction, lambda=0.1
[task]
variant = needle
n_pairs = 2
[rollout]
K = 4
compression_ratio = 0.5
policy = heavy_hitter
window = 8
[learner]
mode = smd
lam = 0.1
lr = 1e-3
[train]
steps = 300
sft_steps = 6000
"""


def paper_mirror_toy(**overrides):
    cfg = parse_config(PAPER_MIRROR_TOY, "paper-mirror-toy")
    for k, v in overrides.items():
        cfg = apply_setting(cfg, k.replace("__", "."), str(v))
    return cfg.validate()
