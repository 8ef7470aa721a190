"""Synthetic multi-phase abdominal phantoms with pancreas, tumour and vessel ground truth."""
import dataclasses
import enum
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import CaseRecord, DatasetManifest
from .volume import SEG3, TA6, LabelMap, VoxelGrid, save_rvol

PHASES = ("non_contrast", "pancreatic", "venous")
STRUCTURES = ("background", "pancreas", "tumor", "tumor_hyper", "duct",
              "portal_splenic_vein", "smv", "sma", "truncus_coeliacus")
VESSELS = ("portal_splenic_vein", "smv", "sma", "truncus_coeliacus")

# Mean intensity per structure and phase. Free parameters chosen so that the tumour
# stands out most in the pancreatic phase and least without contrast.
DEFAULT_ENHANCEMENT = {
    "background":          {"non_contrast": 0.0,  "pancreatic": 5.0,   "venous": 10.0},
    "pancreas":            {"non_contrast": 45.0, "pancreatic": 110.0, "venous": 95.0},
    "tumor":               {"non_contrast": 38.0, "pancreatic": 60.0,  "venous": 65.0},
    "tumor_hyper":         {"non_contrast": 45.0, "pancreatic": 150.0, "venous": 80.0},
    "duct":                {"non_contrast": 15.0, "pancreatic": 30.0,  "venous": 78.0},
    "portal_splenic_vein": {"non_contrast": 40.0, "pancreatic": 100.0, "venous": 170.0},
    "smv":                 {"non_contrast": 40.0, "pancreatic": 100.0, "venous": 170.0},
    "sma":                 {"non_contrast": 40.0, "pancreatic": 220.0, "venous": 150.0},
    "truncus_coeliacus":   {"non_contrast": 40.0, "pancreatic": 220.0, "venous": 150.0},
}


class PhantomError(RuntimeError):
    pass


class DatasetRole(str, enum.Enum):
    A = "A"   # multi-phase, manual tumour annotation only
    B = "B"   # venous only, pancreas + tumour annotation
    C = "C"   # multi-phase, unannotated
    D = "D"   # multi-phase, organ/vessel annotation


@dataclass(frozen=True)
class TumorSpec:
    radius_mm: tuple = (4.5, 8.0)
    location: str = "head"            # head | anywhere
    irregularity: float = 0.25
    hyper_prob: float = 0.0           # chance of a hyper-enhancing (non-PDAC-like) tumour
    present: bool = True


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (48, 48, 32)
    spacing_mm: tuple = (1.5, 1.5, 3.0)
    # pancreas: chain of ellipsoids along x from head to tail
    pancreas_center_mm: tuple = (36.0, 36.0, 48.0)
    pancreas_length_mm: float = 50.0
    pancreas_radius_mm: tuple = (11.0, 5.0)      # head, tail
    pancreas_z_scale: float = 1.3
    tumor: TumorSpec = TumorSpec()
    vessel_radius_mm: dict = field(default_factory=lambda: {
        "portal_splenic_vein": 3.0, "smv": 2.8, "sma": 2.2, "truncus_coeliacus": 2.4})
    duct: bool = False
    duct_radius_mm: float = 1.6
    enhancement: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_ENHANCEMENT)))
    noise_sigma: float = 25.0
    geometry_jitter: float = 0.1
    uptake_jitter: float = 0.15     # per-case, per-phase contrast uptake factor drawn from 1 +/- this
    seed: int = 0

    def __post_init__(self):
        if any(r <= 0 for r in self.pancreas_radius_mm) or min(self.tumor.radius_mm) <= 0:
            raise ValueError("radii must be positive")
        if any(r <= 0 for r in self.vessel_radius_mm.values()):
            raise ValueError("vessel radii must be positive")
        if self.tumor.location not in ("head", "anywhere"):
            raise ValueError(f"unknown tumour location mode {self.tumor.location!r}")
        for s in STRUCTURES:
            for p in PHASES:
                if p not in self.enhancement.get(s, {}):
                    raise ValueError(f"enhancement table lacks ({s}, {p})")
        contrast = [abs(self.enhancement["tumor"][p] - self.enhancement["pancreas"][p]) for p in PHASES]
        if not contrast[1] > contrast[2] > contrast[0]:
            raise ValueError("tumour/pancreas contrast must order pancreatic > venous > non_contrast, "
                             f"got {dict(zip(PHASES, contrast))}")
        j = self.uptake_jitter
        if not 0 <= j < 1:
            raise ValueError("uptake jitter must lie in [0, 1)")
        # the ordering has to survive the worst-case draw of the per-phase factors
        if not (contrast[1] * (1 - j) > contrast[2] * (1 + j) and contrast[2] * (1 - j) > contrast[0] * (1 + j)):
            raise ValueError(f"uptake jitter {j} can break the tumour/pancreas contrast ordering")

    def to_json(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "tumor" in d:
            t = dict(d["tumor"])
            if "radius_mm" in t:
                t["radius_mm"] = tuple(t["radius_mm"])
            d["tumor"] = TumorSpec(**t)
        for k in ("dims", "spacing_mm", "pancreas_center_mm", "pancreas_radius_mm"):
            if k in d:
                d[k] = tuple(d[k])
        if "enhancement" in d:
            table = json.loads(json.dumps(DEFAULT_ENHANCEMENT))
            for s, row in d["enhancement"].items():
                table.setdefault(s, {}).update(row)
            d["enhancement"] = table
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class PhantomCase:
    case_id: str
    images: dict          # phase -> VoxelGrid(float32)
    truth_seg: LabelMap
    truth_ta: LabelMap
    tumor_kind: str = "pdac"


def _coords(spec):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing_mm)]
    return np.meshgrid(*axes, indexing="ij")


def _capsule_mask(X, Y, Z, pts, radius):
    """Voxels within ``radius`` mm of the polyline ``pts``."""
    P = np.stack([X, Y, Z], axis=-1)
    best = np.full(X.shape, np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = np.clip(((P - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
        d = np.linalg.norm(P - (a + t[..., None] * ab), axis=-1)
        best = np.minimum(best, d)
    return best <= radius


class _Pancreas:
    def __init__(self, spec, rng):
        j = spec.geometry_jitter
        cx, cy, cz = (c + rng.uniform(-3, 3) for c in spec.pancreas_center_mm)
        self.length = spec.pancreas_length_mm * (1 + rng.uniform(-j, j))
        self.r_head = spec.pancreas_radius_mm[0] * (1 + rng.uniform(-j, j))
        self.r_tail = spec.pancreas_radius_mm[1] * (1 + rng.uniform(-j, j))
        self.zs = spec.pancreas_z_scale
        self.x0 = cx - self.length / 2
        self.bend = rng.uniform(3.0, 7.0)
        self.tilt = rng.uniform(-4.0, 4.0)
        self.cy, self.cz = cy, cz

    def center(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([self.x0 + self.length * t,
                         self.cy + self.bend * np.sin(np.pi * t),
                         self.cz + self.tilt * (t - 0.5)], axis=-1)

    def radius(self, t):
        t = np.asarray(t, dtype=float)
        # bulbous head, tapering body and tail
        return self.r_tail + (self.r_head - self.r_tail) * np.exp(-((t / 0.35) ** 2))

    def mask(self, X, Y, Z, n=48):
        ts = np.linspace(0.0, 1.0, n)
        C = self.center(ts)
        R = self.radius(ts)
        ax = self.length / (n - 1) * 1.5
        out = np.zeros(X.shape, dtype=bool)
        for c, r in zip(C, R):
            out |= (((X - c[0]) / max(ax, r)) ** 2 + ((Y - c[1]) / r) ** 2
                    + ((Z - c[2]) / (r * self.zs)) ** 2) <= 1.0
        return out


def _vessel_paths(p, radii):
    """Four tubes running along the dorsal surface of the pancreas, partly sunk into it."""
    ts = np.linspace(0.12, 1.0, 12)
    C = p.center(ts)
    dorsal = p.radius(ts) + 0.5 * radii["portal_splenic_vein"]
    psv = C + np.stack([np.zeros_like(ts), dorsal, np.zeros_like(ts)], axis=-1)
    neck = p.center(0.3)
    r_neck = float(p.radius(0.3)) + 0.5 * radii["smv"]
    smv = np.array([neck + [0.0, r_neck, -30.0], neck + [0.0, r_neck, 2.0]])
    root = p.center(0.42)
    r_root = float(p.radius(0.42))
    sma = np.array([root + [0.0, r_root + 4.5, -30.0], root + [0.0, r_root + 4.5, 8.0]])
    tc = np.array([root + [0.0, r_root + 4.5, 8.0], root + [2.0, r_root + 4.5, 16.0],
                   root + [14.0, r_root + 2.0, 18.0]])
    return {"portal_splenic_vein": psv, "smv": smv, "sma": sma, "truncus_coeliacus": tc}


def _tumor_mask(X, Y, Z, center, r0, irregularity, rng):
    d = np.stack([X - center[0], Y - center[1], Z - center[2]], axis=-1)
    dist = np.linalg.norm(d, axis=-1)
    u = d / np.maximum(dist, 1e-9)[..., None]
    shape = np.ones(X.shape)
    for _ in range(3):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        a, b = rng.uniform(-1, 1, size=2)
        c = u @ v
        shape += irregularity * (a * c ** 2 + 0.5 * b * c)
    return dist <= r0 * np.clip(shape, 0.4, None)


def generate_case(spec, case_seed, case_id=None):
    """Rasterise one phantom. Deterministic in (spec, case_seed)."""
    rng = np.random.default_rng([spec.seed, int(case_seed)])
    X, Y, Z = _coords(spec)
    panc = _Pancreas(spec, rng)
    pmask = panc.mask(X, Y, Z)
    if not pmask.any():
        raise PhantomError(f"case_seed {case_seed}: pancreas falls outside the grid")

    vessels = {}
    for name, pts in _vessel_paths(panc, spec.vessel_radius_mm).items():
        vessels[name] = _capsule_mask(X, Y, Z, pts, spec.vessel_radius_mm[name])

    duct = np.zeros_like(pmask)
    if spec.duct:
        ts = np.linspace(0.05, 0.95, 16)
        duct = _capsule_mask(X, Y, Z, panc.center(ts), spec.duct_radius_mm) & pmask

    tumor = np.zeros_like(pmask)
    kind = "none"
    ts = spec.tumor
    if ts.present:
        for _ in range(50):
            t = rng.uniform(0.0, 0.1) if ts.location == "head" else rng.uniform(0.05, 0.95)
            r_here = float(panc.radius(t))
            off = rng.normal(size=3) * np.array([0.2, 0.3, 0.3]) * r_here
            center = panc.center(t) + off
            r0 = rng.uniform(*ts.radius_mm)
            cand = _tumor_mask(X, Y, Z, center, r0, ts.irregularity, rng)
            idx = tuple(np.clip(np.round(center / np.array(spec.spacing_mm) - 0.5).astype(int),
                                0, np.array(spec.dims) - 1))
            if cand.any() and pmask[idx] and (cand & pmask).sum() >= 0.5 * cand.sum():
                tumor = cand
                kind = "hyper" if rng.uniform() < ts.hyper_prob else "pdac"
                break
        else:
            raise PhantomError(f"case_seed {case_seed}: could not place a tumour overlapping the pancreas")

    # truth_ta priority: tumour (as pancreas) > vessel > pancreas > background
    ta = np.zeros(spec.dims, dtype=np.uint8)
    ta[pmask] = TA6.id_of("pancreas")
    for name in VESSELS:
        ta[vessels[name] & ~tumor] = TA6.id_of(name)
    ta[tumor] = TA6.id_of("pancreas")
    # truth_seg: vessels crossing the pancreas are not pancreas
    seg = np.zeros(spec.dims, dtype=np.uint8)
    seg[ta == TA6.id_of("pancreas")] = SEG3.id_of("pancreas")
    seg[tumor] = SEG3.id_of("tumor")

    # paint intensities in increasing priority
    struct = np.zeros(spec.dims, dtype=np.int16)
    sid = {s: i for i, s in enumerate(STRUCTURES)}
    struct[pmask] = sid["pancreas"]
    struct[duct] = sid["duct"]
    for name in VESSELS:
        struct[vessels[name]] = sid[name]
    struct[tumor] = sid["tumor_hyper" if kind == "hyper" else "tumor"]

    images = {}
    uptake = {p: 1.0 for p in PHASES}
    if spec.uptake_jitter > 0:
        uptake = dict(zip(PHASES, rng.uniform(1 - spec.uptake_jitter, 1 + spec.uptake_jitter, len(PHASES))))
    for phase in PHASES:
        lut = uptake[phase] * np.array([spec.enhancement[s][phase] for s in STRUCTURES], dtype=np.float64)
        img = lut[struct]
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        images[phase] = VoxelGrid(img.astype(np.float32), spec.spacing_mm)

    cid = case_id if case_id is not None else f"case{int(case_seed)}"
    return PhantomCase(cid, images,
                       LabelMap(VoxelGrid(seg, spec.spacing_mm), SEG3),
                       LabelMap(VoxelGrid(ta, spec.spacing_mm), TA6),
                       kind)


def case_seed_for(dataset_seed, role, index):
    ss = np.random.SeedSequence([int(dataset_seed), ROLE_INDEX[DatasetRole(role)], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


ROLE_INDEX = {DatasetRole.A: 0, DatasetRole.B: 1, DatasetRole.C: 2, DatasetRole.D: 3}


def _exposed(role, case):
    """Phases and annotations released for a role: (phases, {kind: LabelMap})."""
    if role == DatasetRole.A:
        tumor_only = np.where(case.truth_seg.array == SEG3.id_of("tumor"), SEG3.id_of("tumor"), 0)
        return PHASES, {"tumor": LabelMap.from_array(tumor_only, case.truth_seg.spacing, SEG3)}
    if role == DatasetRole.B:
        return ("venous",), {"seg": case.truth_seg}
    if role == DatasetRole.C:
        return PHASES, {}
    return PHASES, {"ta": case.truth_ta}


def generate_dataset(spec, role, n, dataset_seed, root, overwrite=False, threads=1):
    """Write ``n`` cases for ``role`` under ``root/<role>/`` and return the manifest."""
    role = DatasetRole(role)
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(root) / role.value
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} exists and is not empty")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i):
        cid = f"{role.value}{i:03d}"
        case = generate_case(spec, case_seed_for(dataset_seed, role, i), cid)
        phases, anns = _exposed(role, case)
        d = out / cid
        rec_phases = {}
        for p in phases:
            save_rvol(d / f"{p}.rvol", case.images[p])
            rec_phases[p] = f"{cid}/{p}.rvol"
        rec_anns = {}
        for kind, lab in anns.items():
            save_rvol(d / "ann" / f"{kind}.rvol", lab)
            rec_anns[kind] = (f"{cid}/ann/{kind}.rvol", "manual")
        save_rvol(d / "truth_seg.rvol", case.truth_seg)
        save_rvol(d / "truth_ta.rvol", case.truth_ta)
        rec = CaseRecord(cid, role.value, rec_phases, {},
                         {"seg": f"{cid}/truth_seg.rvol", "ta": f"{cid}/truth_ta.rvol"})
        for kind, (path, prov) in rec_anns.items():
            rec = rec.with_annotation(kind, path, prov)
        return rec

    from .parallel import ordered_map
    records = ordered_map(one, range(n), threads)
    manifest = DatasetManifest(out, role.value, tuple(records), spec.digest())
    manifest.save()
    return manifest
