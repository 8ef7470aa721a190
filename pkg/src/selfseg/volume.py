"""Voxel grids, label/probability maps and the operations the pipeline needs on them.

Arrays are indexed ``[x, y, z]``. The flat (on-disk, raster) order is x-fastest,
which for a numpy array of that shape is Fortran order.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VoxelGrid:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"grid data must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype not in (np.float32, np.uint8):
            raise ValueError(f"unsupported grid dtype {data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if data.dtype == np.float32 and not np.all(np.isfinite(data)):
            raise ValueError("float grid contains NaN or Inf")
        data = np.array(data, copy=True)
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype_tag(self):
        return "f32" if self.data.dtype == np.float32 else "u8"

    def flat(self):
        """Values in raster order (x fastest)."""
        return self.data.ravel(order="F")

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (self.spacing == other.spacing and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class ClassTable:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        if not names or names[0] != "background":
            raise ValueError("class 0 must be 'background'")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    @property
    def ids(self):
        return tuple(range(len(self.names)))

    @property
    def foreground(self):
        return tuple(range(1, len(self.names)))

    def id_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no class named {name!r}") from None

    def to_json(self):
        return [[i, n] for i, n in enumerate(self.names)]

    @classmethod
    def from_json(cls, entries):
        entries = sorted(entries, key=lambda e: e[0])
        if [e[0] for e in entries] != list(range(len(entries))):
            raise ValueError("class ids must be contiguous from 0")
        return cls(tuple(e[1] for e in entries))


SEG3 = ClassTable(("background", "pancreas", "tumor"))
TA6 = ClassTable(("background", "pancreas", "portal_splenic_vein", "smv", "sma", "truncus_coeliacus"))
VESSEL_CLASSES = (2, 3, 4, 5)  # TA6 ids


@dataclass(frozen=True, eq=False)
class LabelMap:
    grid: VoxelGrid
    classes: ClassTable = SEG3

    def __post_init__(self):
        if self.grid.data.dtype != np.uint8:
            raise ValueError("label grids must be uint8")
        if self.grid.data.size and int(self.grid.data.max()) >= len(self.classes):
            raise ValueError(f"label value {int(self.grid.data.max())} outside class table of size {len(self.classes)}")

    @classmethod
    def from_array(cls, arr, spacing=(1.0, 1.0, 1.0), classes=SEG3):
        return cls(VoxelGrid(np.asarray(arr, dtype=np.uint8), spacing), classes)

    @property
    def array(self):
        return self.grid.data

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.classes == other.classes and self.grid == other.grid


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-class probability channels, stacked as an array of shape (n_classes, nx, ny, nz)."""

    data: np.ndarray
    classes: ClassTable = SEG3
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 4 or data.shape[0] != len(self.classes):
            raise ValueError(f"expected ({len(self.classes)}, nx, ny, nz) channels, got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        err = np.abs(data.sum(axis=0, dtype=np.float64) - 1.0).max()
        if err > 1e-5:
            raise ValueError(f"channels do not sum to 1 (max error {err:.2e})")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return tuple(self.data.shape[1:])

    def channel(self, c):
        return VoxelGrid(self.data[c], self.spacing)


def _axis_coords(n_in, s_in, s_out):
    n_out = max(1, int(round(n_in * s_in / s_out)))
    # output voxel centres expressed in input index coordinates
    return (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5


def _linear_axis(a, axis, coords):
    n = a.shape[axis]
    x = np.clip(coords, 0.0, n - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = (x - lo).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def _nearest_axis(a, axis, coords):
    n = a.shape[axis]
    idx = np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)
    return np.take(a, idx, axis=axis)


def resample_to_spacing(grid, target_spacing, mode="linear"):
    """Resample onto a grid with ``target_spacing`` covering the same extent.

    Linear mode is separable trilinear interpolation clamped to the border voxel
    centres; nearest mode picks the voxel whose centre is closest (use it for labels).
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(s > 0 for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    if isinstance(grid, LabelMap):
        if mode != "nearest":
            raise ValueError("label maps must be resampled with mode='nearest'")
        return LabelMap(resample_to_spacing(grid.grid, target, "nearest"), grid.classes)
    if mode not in ("linear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    if mode == "linear" and grid.data.dtype == np.uint8:
        raise ValueError("uint8 grids must be resampled with mode='nearest'")
    out = grid.data.astype(np.float64) if mode == "linear" else grid.data
    step = _linear_axis if mode == "linear" else _nearest_axis
    for axis in range(3):
        coords = _axis_coords(grid.dims[axis], grid.spacing[axis], target[axis])
        out = step(out, axis, coords)
    return VoxelGrid(out.astype(grid.data.dtype), target)


def _structure(connectivity):
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def _label_raster_order(mask, connectivity):
    lab, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return lab.astype(np.uint32), 0
    flat = lab.ravel(order="F")
    values, first = np.unique(flat, return_index=True)
    keep = values > 0
    order = values[keep][np.argsort(first[keep], kind="stable")]
    remap = np.zeros(n + 1, dtype=np.uint32)
    remap[order] = np.arange(1, n + 1, dtype=np.uint32)
    return remap[lab], n


def connected_components(labels, foreground_classes=None, connectivity=6):
    """Component id per voxel (0 = background), ids numbered by first raster-order encounter."""
    arr = labels.array if isinstance(labels, LabelMap) else np.asarray(labels)
    if foreground_classes is None:
        mask = arr > 0
    else:
        mask = np.isin(arr, list(foreground_classes))
    comp, _ = _label_raster_order(mask, connectivity)
    return comp


def largest_foreground_component(labels):
    """Drop every joint-foreground voxel outside the largest 6-connected component.

    Ties go to the component met first in raster order.
    """
    comp, n = _label_raster_order(labels.array > 0, 6)
    if n <= 1:
        return labels
    sizes = np.bincount(comp.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = int(np.argmax(sizes))  # argmax returns the lowest id on ties
    out = np.where(comp == keep, labels.array, 0).astype(np.uint8)
    return LabelMap(VoxelGrid(out, labels.spacing), labels.classes)


def argmax_labels(probs):
    """Hard labels; ties resolve to the lowest class id."""
    lab = np.argmax(probs.data, axis=0).astype(np.uint8)
    return LabelMap(VoxelGrid(lab, probs.spacing), probs.classes)


def save_rvol(path, grid, classes=None):
    """Write ``path`` (raw little-endian payload) and its ``.json`` sidecar."""
    if isinstance(grid, LabelMap):
        classes = grid.classes if classes is None else classes
        grid = grid.grid
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[grid.dtype_tag]
    path.write_bytes(np.ascontiguousarray(grid.flat().astype(dtype, copy=False)).tobytes())
    meta = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "dtype": grid.dtype_tag,
        "order": "x-fastest",
        "endian": "little",
    }
    if classes is not None:
        meta["classes"] = classes.to_json()
    sidecar_path(path).write_text(json.dumps(meta, indent=1))
    return path


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_rvol(path):
    """Read an rvol file; returns a LabelMap when the sidecar carries a class table."""
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("order", "x-fastest") != "x-fastest" or meta.get("endian", "little") != "little":
        raise ValueError(f"{path}: unsupported layout {meta.get('order')}/{meta.get('endian')}")
    dims = tuple(int(n) for n in meta["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype=DTYPES[meta["dtype"]])
    if raw.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {raw.size} values, sidecar dims {dims}")
    data = raw.reshape(dims, order="F").astype(raw.dtype.newbyteorder("="))
    grid = VoxelGrid(data, tuple(meta["spacing_mm"]))
    if "classes" in meta:
        return LabelMap(grid, ClassTable.from_json(meta["classes"]))
    return grid
