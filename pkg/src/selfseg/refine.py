"""Teaching-assistant refinement: drop pseudo pancreas voxels that the assistant calls vessel."""
import numpy as np

from .manifest import DatasetIntegrityError
from .model import LossConfig, TrainCase, TrainConfig, extract_features, predict, train
from .volume import SEG3, TA6, VESSEL_CLASSES, LabelMap, VoxelGrid, load_rvol

PANCREAS = SEG3.id_of("pancreas")


def train_teaching_assistant(cases, train_cfg=TrainConfig(), loss_cfg=LossConfig()):
    """Train over TA6; checkpoint chosen by mean validation Dice over the vessel classes.

    ``cases`` are TrainCase objects whose labels are TA6 maps.
    """
    cases = list(cases)
    for c in cases:
        if c.labels is None:
            raise DatasetIntegrityError(f"case {c.case_id}: missing organ/vessel annotation")
        if c.labels.classes != TA6:
            raise DatasetIntegrityError(f"case {c.case_id}: annotation is not over the TA6 class table")
    return train(cases, train_cfg, loss_cfg, classes=TA6, select_classes=VESSEL_CLASSES, postprocess=False)


def load_ta_cases(manifest, feature_config, features=None):
    """TrainCases for a D-role manifest; ``features`` may map case_id -> precomputed Features."""
    out = []
    for rec in manifest.cases:
        ann = rec.annotations.get("ta")
        if ann is None or not manifest.resolve(ann.path).exists():
            raise DatasetIntegrityError(f"case {rec.case_id}: missing organ/vessel annotation file")
        feats = features[rec.case_id] if features else extract_features(
            {p: load_rvol(manifest.resolve(f)) for p, f in rec.phases.items()}, feature_config)
        out.append(TrainCase(rec.case_id, feats, load_rvol(manifest.resolve(ann.path))))
    return out


def vessel_labels(ta_model, images):
    """Assistant prediction: plain argmax, no largest-component filter (vessels are separate tubes)."""
    _, lab = predict(ta_model, images, hard=True)
    return lab


def refine_pseudo(pseudo, ta_pred):
    """Pancreas voxels predicted as any vessel class become background; tumour is never touched."""
    if pseudo.dims != ta_pred.dims:
        raise ValueError(f"dims mismatch {pseudo.dims} vs {ta_pred.dims}")
    hit = (pseudo.array == PANCREAS) & np.isin(ta_pred.array, VESSEL_CLASSES)
    out = np.where(hit, 0, pseudo.array).astype(np.uint8)
    return LabelMap(VoxelGrid(out, pseudo.spacing), pseudo.classes)


def refinement_report(pseudo, ta_pred):
    """Voxels masked per vessel class."""
    hit = pseudo.array == PANCREAS
    return {TA6.names[v]: int((hit & (ta_pred.array == v)).sum()) for v in VESSEL_CLASSES}
