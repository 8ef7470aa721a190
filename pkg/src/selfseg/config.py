"""JSON configs for dataset generation and pipeline runs. Unknown fields are rejected."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FusionConfig
from .model import LossConfig, TrainConfig
from .phantom import PHASES, PhantomSpec, TumorSpec

CONFIG_VERSION = 1
MODEL_NAMES = ("teacher_a", "teacher_b", "ta", "student")


class ConfigError(ValueError):
    pass


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_json(text, source="<config>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def _check_version(d, source):
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: top level must be an object")
    if d.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{source}.version: expected {CONFIG_VERSION}, got {d.get('version')!r}")


# ---- dataset generation ------------------------------------------------------------

DEFAULT_ROLE_OVERRIDES = {
    "A": {"n": 20, "phantom": {"tumor": {"location": "head", "radius_mm": [4.5, 8.0]}}},
    "B": {"n": 15, "phantom": {"tumor": {"location": "anywhere", "radius_mm": [4.0, 12.0], "hyper_prob": 0.3},
                               "duct": True}},
    "C": {"n": 40, "phantom": {"tumor": {"location": "anywhere", "radius_mm": [4.5, 11.0]}}},
    "D": {"n": 10, "phantom": {"tumor": {"present": False}}},
}


@dataclass(frozen=True)
class RoleConfig:
    n: int
    spec: PhantomSpec


@dataclass(frozen=True)
class GenConfig:
    seed: int
    roles: dict     # role -> RoleConfig
    threads: int = 1


def _phantom(base, override, where):
    d = json.loads(json.dumps(base))
    for k, v in override.items():
        if k == "tumor" and isinstance(v, dict):
            d.setdefault("tumor", {}).update(v)
        elif k == "enhancement" and isinstance(v, dict):
            for s, row in v.items():
                d.setdefault("enhancement", {}).setdefault(s, {}).update(row)
        else:
            d[k] = v
    names = {f.name for f in dataclasses.fields(PhantomSpec)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    t_unknown = sorted(set(d.get("tumor", {})) - {f.name for f in dataclasses.fields(TumorSpec)})
    if t_unknown:
        raise ConfigError(f"{where}.tumor.{t_unknown[0]}: unknown field")
    try:
        return PhantomSpec.from_json(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def gen_config_from_dict(d, source="<config>"):
    _check_version(d, source)
    unknown = sorted(set(d) - {"version", "seed", "phantom", "roles", "threads"})
    if unknown:
        raise ConfigError(f"{source}.{unknown[0]}: unknown field")
    base = d.get("phantom", {})
    if not isinstance(base, dict):
        raise ConfigError(f"{source}.phantom: expected an object")
    roles_in = d.get("roles", {})
    bad = sorted(set(roles_in) - set(DEFAULT_ROLE_OVERRIDES))
    if bad:
        raise ConfigError(f"{source}.roles.{bad[0]}: unknown role")
    roles = {}
    for role, default in DEFAULT_ROLE_OVERRIDES.items():
        r = dict(roles_in.get(role, {}))
        ru = sorted(set(r) - {"n", "phantom"})
        if ru:
            raise ConfigError(f"{source}.roles.{role}.{ru[0]}: unknown field")
        n = r.get("n", default["n"])
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"{source}.roles.{role}.n: must be a positive integer")
        merged = json.loads(json.dumps(base))
        spec = _phantom(_phantom_dict(merged, default["phantom"]), r.get("phantom", {}),
                        f"{source}.roles.{role}.phantom")
        roles[role] = RoleConfig(n, spec)
    seed = d.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"{source}.seed: must be an integer")
    return GenConfig(seed, roles, int(d.get("threads", 1)))


def _phantom_dict(base, override):
    d = json.loads(json.dumps(base))
    for k, v in override.items():
        if k == "tumor":
            d.setdefault("tumor", {}).update(v)
        else:
            d[k] = v
    return d


# ---- pipeline ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ablation:
    name: str
    kind: str                          # teacher_b | teacher_a | student
    phases: tuple = PHASES             # teacher_a rows
    self_learning: bool = True         # student rows
    ta: bool = True                    # student rows

    def __post_init__(self):
        if self.kind not in ("teacher_b", "teacher_a", "student"):
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        bad = [p for p in self.phases if p not in PHASES]
        if bad or not self.phases:
            raise ValueError(f"bad phase list {self.phases}")
        object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def training_data(self):
        if self.kind == "teacher_b":
            return "B"
        if self.kind == "teacher_a":
            return "A"
        if not self.self_learning:
            return "A, B" + (", D" if self.ta else "")
        return "A, B, C" + (", D" if self.ta else "")

    @property
    def label(self):
        phases = "3-phases" if len(self.phases) == 3 else "+".join(self.phases)
        if self.kind == "teacher_b":
            return "venous (Teacher B)"
        if self.kind == "teacher_a":
            return f"{phases}" + (" (Teacher A)" if len(self.phases) == 3 else "")
        tag = "+Self-learn" if self.self_learning else ""
        tag += "+TA" if self.ta else ""
        return f"{tag.lstrip('+') or 'Student'}: 3-phases (Student)"


DEFAULT_ABLATIONS = (
    Ablation("teacher_b", "teacher_b", ("venous",)),
    Ablation("non_contrast", "teacher_a", ("non_contrast",)),
    Ablation("pancreatic", "teacher_a", ("pancreatic",)),
    Ablation("venous", "teacher_a", ("venous",)),
    Ablation("teacher_a", "teacher_a", PHASES),
    Ablation("self_learn", "student", PHASES, True, False),
    Ablation("self_learn_ta", "student", PHASES, True, True),
)

# voxels are drawn at their natural class frequencies inside the pipeline: with
# balanced draws the linear model over-calls tumour on the noisy phantoms
DEFAULT_TRAIN = {name: TrainConfig(class_balanced=False) for name in MODEL_NAMES}


@dataclass(frozen=True)
class PipelineConfig:
    manifests: dict                          # role -> manifest path
    fusion: FusionConfig = FusionConfig()
    loss: LossConfig = LossConfig()
    train: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN))
    feature_radius: int = 1
    seed: int = 0
    folds: int = 5
    ablations: tuple = DEFAULT_ABLATIONS

    def to_json(self):
        return {
            "version": CONFIG_VERSION,
            "manifests": {k: str(v) for k, v in sorted(self.manifests.items())},
            "fusion": dataclasses.asdict(self.fusion),
            "loss": dataclasses.asdict(self.loss),
            "train": {k: dataclasses.asdict(v) for k, v in sorted(self.train.items())},
            "feature_radius": self.feature_radius,
            "seed": self.seed,
            "folds": self.folds,
            "ablations": [{"name": a.name, "kind": a.kind, "phases": list(a.phases),
                           "self_learning": a.self_learning, "ta": a.ta} for a in self.ablations],
        }

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def pipeline_config_from_dict(d, source="<config>", base_dir=None):
    _check_version(d, source)
    allowed = {"version", "manifests", "fusion", "loss", "train", "feature_radius", "seed", "folds", "ablations"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{source}.{unknown[0]}: unknown field")
    man = d.get("manifests")
    if not isinstance(man, dict) or sorted(man) != ["A", "B", "C", "D"]:
        raise ConfigError(f"{source}.manifests: must map each of A, B, C, D to a manifest path")
    manifests = {}
    for k, v in man.items():
        p = Path(v)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        manifests[k] = str(p)
    train = dict(DEFAULT_TRAIN)
    for name, tc in d.get("train", {}).items():
        if name not in MODEL_NAMES:
            raise ConfigError(f"{source}.train.{name}: unknown model")
        if not isinstance(tc, dict):
            raise ConfigError(f"{source}.train.{name}: expected an object")
        unknown_tc = sorted(set(tc) - {f.name for f in dataclasses.fields(TrainConfig)})
        if unknown_tc:
            raise ConfigError(f"{source}.train.{name}.{unknown_tc[0]}: unknown field")
        # partial overrides sit on top of the pipeline default for that model
        train[name] = _build(TrainConfig, {**dataclasses.asdict(DEFAULT_TRAIN[name]), **tc}, f"{source}.train.{name}")
    ablations = DEFAULT_ABLATIONS
    if "ablations" in d:
        if not isinstance(d["ablations"], list) or not d["ablations"]:
            raise ConfigError(f"{source}.ablations: expected a non-empty list")
        ablations = tuple(_build(Ablation, a, f"{source}.ablations[{i}]") for i, a in enumerate(d["ablations"]))
        names = [a.name for a in ablations]
        if len(set(names)) != len(names):
            raise ConfigError(f"{source}.ablations: duplicate row names")
    for key, typ in (("feature_radius", int), ("seed", int), ("folds", int)):
        if key in d and not isinstance(d[key], typ):
            raise ConfigError(f"{source}.{key}: must be an integer")
    if d.get("folds", 5) < 2:
        raise ConfigError(f"{source}.folds: must be >= 2")
    return PipelineConfig(
        manifests=manifests,
        fusion=_build(FusionConfig, d.get("fusion", {}), f"{source}.fusion"),
        loss=_build(LossConfig, d.get("loss", {}), f"{source}.loss"),
        train=train,
        feature_radius=d.get("feature_radius", 1),
        seed=d.get("seed", 0),
        folds=d.get("folds", 5),
        ablations=ablations,
    )


def load_pipeline_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return pipeline_config_from_dict(parse_json(text, str(path)), str(path), base_dir=path.parent)


def load_gen_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    return gen_config_from_dict(parse_json(text, str(path)), str(path))
