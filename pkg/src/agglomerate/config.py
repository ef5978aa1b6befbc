"""Sectioned key/value experiment configuration.

Configs are INI-style documents; unknown sections or keys are hard errors so
typos cannot silently change an ablation. The parsed document echoes verbatim
into the run directory for exact reproduction.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .errors import ConfigError
from .features import SyntheticTeacherSpec
from .student import StudentConfig
from .trainer import TrainConfig

_CHOICES = {
    "balancing": ("uniform", "mlp", "attention"),
    "standardization": ("l2", "phi-s"),
    "loss": ("mse", "cosine"),
    "schedule": ("cosine", "linear"),
    "activation": ("gelu", "relu"),
    "hd95_mode": ("union", "directed-max"),
}

_SECTION_KEYS = {
    "experiment": {"seed", "output_dir"},
    "student": {"patch_size", "embed_dim", "depth", "heads", "grid", "mlp_ratio"},
    "teacher": {"seed", "channels", "grid", "scale", "subspace_rank", "noise_std", "loss"},
    "standardization": {"kind"},
    "balancing": {"kind", "hidden", "attn_width", "entropy_coeff", "activation"},
    "trainer": {"epochs_phase1", "epochs_phase2", "batch_size", "lr_start", "lr_end",
                "beta1", "beta2", "weight_decay", "schedule", "grad_clip", "loss",
                "num_train", "num_eval", "num_classes"},
    "metrics": {"hd95_mode"},
}


@dataclass(frozen=True)
class TeacherEntry:
    name: str
    spec: SyntheticTeacherSpec
    loss: str | None = None  # per-teacher override of the trainer default


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/run"
    student: StudentConfig = field(default_factory=StudentConfig)
    teachers: list[TeacherEntry] = field(default_factory=list)
    standardization: str = "phi-s"
    balancing: str = "attention"
    balancer_hidden: int = 16
    attn_width: int = 32
    entropy_coeff: float = 0.01
    balancer_activation: str = "gelu"
    train: TrainConfig = field(default_factory=TrainConfig)
    hd95_mode: str = "union"
    source_text: str = ""

    def loss_kinds(self) -> dict[str, str]:
        return {t.name: (t.loss or self.train.loss_kind) for t in self.teachers}

    def teacher_names(self) -> list[str]:
        return [t.name for t in self.teachers]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with replaced fields; nested train config follows seed/axes."""
        out = dataclasses.replace(self, **changes)
        out.train = dataclasses.replace(
            out.train, seed=out.seed,
            balancing=out.balancing, standardization=out.standardization)
        return out


def _line_of(text: str, token: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(token)}\s*[=:\]]", re.MULTILINE)
    for i, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line) or line.strip() == f"[{token}]" or line.strip().startswith(f"[{token}"):
            return i
        if re.match(rf"^\s*{re.escape(token)}\s*=", line):
            return i
    return None


def _typed(text: str, section: str, key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "grid":
            h, _, w = raw.lower().partition("x")
            return (int(h), int(w))
        return raw
    except ValueError:
        raise ConfigError(f"section [{section}] key {key!r}: cannot parse {raw!r} as {kind}",
                          line=_line_of(text, key), key=key) from None


def _choice(text: str, section: str, key: str, raw: str, choices_key: str) -> str:
    value = raw.strip().lower()
    choices = _CHOICES[choices_key]
    if value not in choices:
        raise ConfigError(f"section [{section}] key {key!r}: {raw!r} not one of {choices}",
                          line=_line_of(text, key), key=key)
    return value


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       inline_comment_prefixes=("#", ";"), strict=True)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"cannot parse config: {exc}", line=line) from exc

    for section in parser.sections():
        base = "teacher" if section.startswith("teacher:") else section
        if base not in _SECTION_KEYS:
            raise ConfigError(f"unknown section [{section}]", line=_line_of(text, section))
        allowed = _SECTION_KEYS[base]
        for key in parser[section]:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]",
                                  line=_line_of(text, key), key=key)

    def get(section, key, default=None):
        if parser.has_section(section) and key in parser[section]:
            return parser[section][key].strip()
        return default

    exp = parser["experiment"] if parser.has_section("experiment") else {}
    seed = _typed(text, "experiment", "seed", exp.get("seed", "0"), "int")
    output_dir = exp.get("output_dir", "runs/run").strip()

    student_kwargs = {}
    if parser.has_section("student"):
        sec = parser["student"]
        for key, kind in (("patch_size", "int"), ("embed_dim", "int"), ("depth", "int"),
                          ("heads", "int"), ("grid", "grid"), ("mlp_ratio", "int")):
            if key in sec:
                student_kwargs[key] = _typed(text, "student", key, sec[key], kind)
    student = StudentConfig(**student_kwargs)

    teachers = []
    for section in parser.sections():
        if not section.startswith("teacher:"):
            continue
        name = section.split(":", 1)[1].strip()
        if not name:
            raise ConfigError(f"teacher section needs a name: [{section}]",
                              line=_line_of(text, section))
        sec = parser[section]
        if "seed" not in sec:
            raise ConfigError(f"section [{section}] is missing required key 'seed'",
                              line=_line_of(text, section))
        spec = SyntheticTeacherSpec(
            seed=_typed(text, section, "seed", sec["seed"], "int"),
            out_channels=_typed(text, section, "channels", sec.get("channels", "64"), "int"),
            out_grid=_typed(text, section, "grid", sec.get("grid", "16x16"), "grid"),
            scale=_typed(text, section, "scale", sec.get("scale", "1.0"), "float"),
            subspace_rank=_typed(text, section, "subspace_rank", sec.get("subspace_rank", "16"), "int"),
            noise_std=_typed(text, section, "noise_std", sec.get("noise_std", "0.0"), "float"),
        )
        loss = _choice(text, section, "loss", sec["loss"], "loss") if "loss" in sec else None
        teachers.append(TeacherEntry(name=name, spec=spec, loss=loss))
    if not teachers:
        raise ConfigError("config declares no [teacher:<name>] sections")
    names = [t.name for t in teachers]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate teacher names: {names}")
    seeds = [t.spec.seed for t in teachers]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"teachers must have distinct seeds, got {seeds}")

    standardization = _choice(text, "standardization", "kind",
                              get("standardization", "kind", "phi-s"), "standardization")
    balancing = _choice(text, "balancing", "kind",
                        get("balancing", "kind", "attention"), "balancing")
    balancer_hidden = _typed(text, "balancing", "hidden", get("balancing", "hidden", "16"), "int")
    attn_width = _typed(text, "balancing", "attn_width", get("balancing", "attn_width", "32"), "int")
    entropy_coeff = _typed(text, "balancing", "entropy_coeff",
                           get("balancing", "entropy_coeff", "0.01"), "float")
    activation = _choice(text, "balancing", "activation",
                         get("balancing", "activation", "gelu"), "activation")

    train_kwargs = {"seed": seed, "balancing": balancing, "standardization": standardization}
    if parser.has_section("trainer"):
        sec = parser["trainer"]
        kinds = {"epochs_phase1": "int", "epochs_phase2": "int", "batch_size": "int",
                 "lr_start": "float", "lr_end": "float", "beta1": "float", "beta2": "float",
                 "weight_decay": "float", "grad_clip": "float", "num_train": "int",
                 "num_eval": "int", "num_classes": "int"}
        for key, kind in kinds.items():
            if key in sec:
                train_kwargs[key] = _typed(text, "trainer", key, sec[key], kind)
        if "schedule" in sec:
            train_kwargs["schedule"] = _choice(text, "trainer", "schedule", sec["schedule"], "schedule")
        if "loss" in sec:
            train_kwargs["loss_kind"] = _choice(text, "trainer", "loss", sec["loss"], "loss")
    train_kwargs["entropy_coeff"] = entropy_coeff
    try:
        train = TrainConfig(**train_kwargs)
    except Exception as exc:
        raise ConfigError(f"invalid trainer settings: {exc}") from exc

    hd95_mode = _choice(text, "metrics", "hd95_mode",
                        get("metrics", "hd95_mode", "union"), "hd95_mode")

    return ExperimentConfig(
        seed=seed, output_dir=output_dir, student=student, teachers=teachers,
        standardization=standardization, balancing=balancing,
        balancer_hidden=balancer_hidden, attn_width=attn_width,
        entropy_coeff=entropy_coeff, balancer_activation=activation,
        train=train, hd95_mode=hd95_mode, source_text=text)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
