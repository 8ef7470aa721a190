"""Dataset manifests: which cases exist, their files, and where each annotation came from."""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

FORMAT_VERSION = 1
ROLES = ("A", "B", "C", "D")
PROVENANCES = ("manual", "bootstrapped", "pseudo", "refined_pseudo")
# allowed provenance moves when an annotation kind is rewritten; manual is terminal
_FORWARD = {None: {"manual", "bootstrapped", "pseudo"}, "bootstrapped": {"refined_pseudo"},
            "pseudo": {"refined_pseudo"}, "refined_pseudo": set(), "manual": set()}


class DatasetIntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Annotation:
    path: str
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    role: str
    phases: dict                      # phase -> relative path
    annotations: dict = field(default_factory=dict)   # kind -> Annotation
    truth: dict = field(default_factory=dict)         # "seg"/"ta" -> relative path, evaluation only
    fold: int = None

    def with_annotation(self, kind, path, provenance):
        old = self.annotations.get(kind)
        before = old.provenance if old else None
        if provenance not in _FORWARD[before]:
            raise DatasetIntegrityError(
                f"{self.case_id}: provenance of {kind!r} cannot move {before} -> {provenance}")
        anns = dict(self.annotations)
        anns[kind] = Annotation(str(path), provenance)
        return replace(self, annotations=anns)

    def to_json(self):
        d = {"case_id": self.case_id, "role": self.role, "phases": dict(sorted(self.phases.items())),
             "annotations": {k: {"path": a.path, "provenance": a.provenance}
                             for k, a in sorted(self.annotations.items())},
             "truth": dict(sorted(self.truth.items()))}
        if self.fold is not None:
            d["fold"] = self.fold
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["case_id"], d["role"], dict(d["phases"]),
                   {k: Annotation(a["path"], a["provenance"]) for k, a in d.get("annotations", {}).items()},
                   dict(d.get("truth", {})), d.get("fold"))


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    role: str
    cases: tuple
    spec_hash: str = ""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DatasetIntegrityError("duplicate case ids in manifest")
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "cases", tuple(self.cases))

    def resolve(self, rel):
        return self.root / rel

    def case(self, case_id):
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def validate(self):
        """Raise if any referenced file is missing."""
        for c in self.cases:
            paths = list(c.phases.values()) + [a.path for a in c.annotations.values()] + list(c.truth.values())
            for rel in paths:
                if not self.resolve(rel).exists():
                    raise DatasetIntegrityError(f"case {c.case_id}: missing file {rel}")
        return self

    def to_json(self):
        return {"version": self.version, "role": self.role, "spec_hash": self.spec_hash,
                "cases": [c.to_json() for c in self.cases]}

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("version") != FORMAT_VERSION:
            raise DatasetIntegrityError(f"{path}: unsupported manifest version {d.get('version')}")
        return cls(path.parent, d["role"], tuple(CaseRecord.from_json(c) for c in d["cases"]),
                   d.get("spec_hash", ""), d["version"])
