"""End-to-end dual-teacher self-learning run with cross-validated evaluation on role A."""
import hashlib
import json
import logging
import time
import zlib
from pathlib import Path

import numpy as np

from . import metrics
from .config import PipelineConfig
from .fusion import make_pseudo_labels
from .manifest import DatasetIntegrityError, DatasetManifest
from .model import (FeatureConfig, TrainCase, extract_features, predict, save_model,
                    select_features, train)
from .parallel import ordered_map
from .phantom import PHASES
from .refine import refine_pseudo, refinement_report, train_teaching_assistant, vessel_labels
from .volume import SEG3, VESSEL_CLASSES, LabelMap, VoxelGrid, load_rvol, save_rvol

log = logging.getLogger(__name__)

PANCREAS, TUMOR = SEG3.id_of("pancreas"), SEG3.id_of("tumor")


class StageError(RuntimeError):
    def __init__(self, stage, msg):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


def crossval_split(cases, k, seed):
    """case_id -> fold: seeded shuffle then round-robin, so fold sizes differ by at most one."""
    ids = [c.case_id for c in cases.cases] if isinstance(cases, DatasetManifest) else list(cases)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: i % k for i, j in enumerate(order)}


def compose_bootstrap_label(pred_b, manual_tumor):
    """Teacher-B pancreas under the manual tumour; teacher-B tumour calls are dropped."""
    out = np.where(pred_b.array == PANCREAS, PANCREAS, 0)
    out[manual_tumor.array == TUMOR] = TUMOR
    return LabelMap(VoxelGrid(out.astype(np.uint8), pred_b.spacing), SEG3)


def bootstrap_pancreas_labels(manifest, teacher_b, out_dir, features=None, threads=1):
    """Label every A case with teacher-B pancreas + manual tumour.

    Returns (updated manifest, {case_id: LabelMap}). Cases without a venous
    phase are skipped with a logged error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(rec):
        if "venous" not in rec.phases:
            log.error("case %s: no venous phase, skipped in bootstrapping", rec.case_id)
            return rec, None
        feats = features[rec.case_id] if features else {"venous": load_rvol(manifest.resolve(rec.phases["venous"]))}
        _, pred = predict(teacher_b, feats, postprocess=True)
        label = compose_bootstrap_label(pred, load_rvol(manifest.resolve(rec.annotations["tumor"].path)))
        path = out_dir / f"{rec.case_id}_seg.rvol"
        save_rvol(path, label)
        return rec.with_annotation("seg", str(path.resolve()), "bootstrapped"), label

    results = ordered_map(one, manifest.cases, threads)
    labels = {r.case_id: lab for r, lab in results if lab is not None}
    updated = DatasetManifest(manifest.root, manifest.role, tuple(r for r, _ in results), manifest.spec_hash)
    return updated, labels


def _stable_seed(*parts):
    key = [int(p) if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint32)[0])


def _with_seed(tc, seed):
    from dataclasses import replace
    return replace(tc, seed=seed)


def _hash_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class _Run:
    """Mutable state of one pipeline execution."""

    def __init__(self, cfg, out_dir, threads):
        self.cfg = cfg
        self.out = Path(out_dir).resolve()
        self.threads = threads
        self.chash = cfg.digest()
        self.art = self.out / "artifacts" / self.chash[:16]
        self.stages = []
        self.timings = {}
        self.models = {}

    def rel(self, path):
        return str(Path(path).relative_to(self.out))

    def stage(self, name, fn, *args):
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001 - any failure is reported against its stage
            self.stages.append({"stage": name, "status": "failed"})
            raise StageError(name, f"{type(e).__name__}: {e}") from e
        self.timings[name] = time.perf_counter() - t0
        self.stages.append({"stage": name, "status": "ok"})
        return result

    def save_model(self, name, model):
        path = self.art / "models" / f"{name}.json"
        save_model(path, model)
        self.models[name] = {"path": self.rel(path), "sha256": model.digest()}

    def train_seed(self, model_name, *parts):
        return _with_seed(self.cfg.train[model_name], _stable_seed(self.cfg.seed, model_name, *parts))


def _load_manifests(cfg):
    out = {}
    for role in ("A", "B", "C", "D"):
        m = DatasetManifest.load(cfg.manifests[role])
        if m.role != role:
            raise DatasetIntegrityError(f"manifest {cfg.manifests[role]} is role {m.role}, expected {role}")
        out[role] = m.validate()
    return out


def _features(manifest, phases, radius, threads):
    cfg = FeatureConfig(phases, radius)

    def one(rec):
        return rec.case_id, extract_features({p: load_rvol(manifest.resolve(rec.phases[p])) for p in phases}, cfg)

    return dict(ordered_map(one, manifest.cases, threads))


def _dice_pair(pred, truth):
    return {"tumor": metrics.dice(pred, truth, TUMOR), "pancreas": metrics.dice(pred, truth, PANCREAS)}


def _split_val(ids, fraction, seed):
    if fraction <= 0 or len(ids) < 2:
        return [], list(ids)
    n_val = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    return val, [i for i in ids if i not in set(val)]


def run_pipeline(cfg, out_dir, threads=1):
    """Execute the full flow and write ``run_report.json`` under ``out_dir``.

    Stages: teacher B on B, pancreas bootstrapping of A, teaching assistant
    on D, refinement of A labels, then per cross-validation fold: teachers on
    the training part of A, fused pseudo labels on C (raw and refined), students
    trained from scratch, evaluation of every ablation row on the held-out fold.
    """
    if not isinstance(cfg, PipelineConfig):
        raise TypeError("cfg must be a PipelineConfig")
    run = _Run(cfg, out_dir, threads)
    run.art.mkdir(parents=True, exist_ok=True)
    r = cfg.feature_radius
    rows = cfg.ablations
    need_students = any(a.kind == "student" for a in rows)
    need_c = any(a.kind == "student" and a.self_learning for a in rows)

    mans = run.stage("load_manifests", _load_manifests, cfg)
    A, B, C, D = (mans[k] for k in "ABCD")
    a_ids = [c.case_id for c in A.cases]

    def feats():
        return (_features(A, PHASES, r, threads), _features(B, ("venous",), r, threads),
                _features(C, PHASES, r, threads) if need_c else {},
                _features(D, PHASES, r, threads) if need_students else {})
    fA, fB, fC, fD = run.stage("features", feats)
    truth_A = {c.case_id: load_rvol(A.resolve(c.truth["seg"])) for c in A.cases}

    # (1) teacher B: venous only, role B annotations
    def teacher_b():
        cases = [TrainCase(rec.case_id, fB[rec.case_id], load_rvol(B.resolve(rec.annotations["seg"].path)))
                 for rec in B.cases]
        return train(cases, run.train_seed("teacher_b"), cfg.loss, classes=SEG3)
    tb, tb_log = run.stage("teacher_b", teacher_b)
    run.save_model("teacher_b", tb)

    # (2) pancreas bootstrapping of A with teacher B
    fA_ven = {k: select_features(v, FeatureConfig(("venous",), r)) for k, v in fA.items()}
    A_boot, boot_labels = run.stage("bootstrap", bootstrap_pancreas_labels, A, tb, run.art / "A_bootstrap", fA_ven, threads)
    A_boot = _relativize(A_boot, run)

    # (3) teaching assistant on D, (4) refinement of A labels
    ta_model = ta_log = None
    refined_A, ta_pred_C = {}, {}
    if need_students:
        def ta_stage():
            cases = [TrainCase(rec.case_id, fD[rec.case_id], load_rvol(D.resolve(rec.annotations["ta"].path)))
                     for rec in D.cases]
            return train_teaching_assistant(cases, run.train_seed("ta"), cfg.loss)
        ta_model, ta_log = run.stage("teaching_assistant", ta_stage)
        run.save_model("ta", ta_model)

        def refine_a():
            out = {}
            recs = []
            for rec in A_boot.cases:
                if rec.case_id not in boot_labels:
                    recs.append(rec)
                    continue
                ta_pred = vessel_labels(ta_model, fA[rec.case_id])
                lab = refine_pseudo(boot_labels[rec.case_id], ta_pred)
                path = run.art / "A_refined" / f"{rec.case_id}_seg.rvol"
                save_rvol(path, lab)
                out[rec.case_id] = lab
                recs.append(rec.with_annotation("seg", run.rel(path), "refined_pseudo"))
            return out, DatasetManifest(A_boot.root, "A", tuple(recs), A_boot.spec_hash)
        refined_A, A_refined_manifest = run.stage("refine_A", refine_a)
        _write_manifest(run, A_boot, "A_bootstrap")
        _write_manifest(run, A_refined_manifest, "A_refined")
        if need_c:
            ta_pred_C = run.stage("ta_predict_C", lambda: dict(ordered_map(
                lambda cid: (cid, vessel_labels(ta_model, fC[cid])), list(fC), threads)))
    else:
        _write_manifest(run, A_boot, "A_bootstrap")

    # teacher-B probability maps on C, shared by every fold
    pB_C = {}
    if need_c:
        fC_ven = {k: select_features(v, FeatureConfig(("venous",), r)) for k, v in fC.items()}
        pB_C = run.stage("teacher_b_predict_C", lambda: dict(ordered_map(
            lambda cid: (cid, predict(tb, fC_ven[cid])), list(fC), threads)))
    truth_ta_C = {c.case_id: load_rvol(C.resolve(c.truth["ta"])) for c in C.cases} if need_c else {}

    folds = crossval_split(a_ids, cfg.folds, cfg.seed)
    per_case = {a.name: {} for a in rows}
    fold_reports = []
    for f in range(cfg.folds):
        fold_reports.append(run.stage(f"fold{f}", _run_fold, run, f, folds, A_boot, boot_labels, refined_A,
                                      fA, fA_ven, fC, pB_C, ta_pred_C, truth_ta_C, truth_A, tb, tb_log, per_case))

    table = []
    for a in rows:
        scores = [per_case[a.name][cid] for cid in sorted(per_case[a.name])]
        table.append(metrics.table_row(a.label, a.training_data,
                                       [s["tumor"] for s in scores], [s["pancreas"] for s in scores]))
    run.stage("report", lambda: None)

    ta_effect = _aggregate_ta_effect(fold_reports) if need_c else None
    report = {
        "version": 1,
        "config_hash": run.chash,
        "config": cfg.to_json(),
        "stages": run.stages,
        "models": run.models,
        "teacher_b": {"train_log": tb_log.to_json()},
        "teaching_assistant": {"train_log": ta_log.to_json()} if ta_log else None,
        "folds": fold_reports,
        "leak_check": all(fr["leak_check"]["ok"] for fr in fold_reports),
        "ta_effect": ta_effect,
        "per_case": {k: dict(sorted(v.items())) for k, v in per_case.items()},
        "table": table,
    }
    (run.out / "run_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    (run.out / "timings.json").write_text(json.dumps(run.timings, indent=1))
    (run.out / "table.md").write_text(metrics.render_markdown(table))
    return report


def _relativize(manifest, run):
    from dataclasses import replace
    recs = []
    for rec in manifest.cases:
        anns = dict(rec.annotations)
        if "seg" in anns:
            anns["seg"] = replace(anns["seg"], path=run.rel(anns["seg"].path))
        recs.append(replace(rec, annotations=anns))
    return DatasetManifest(manifest.root, manifest.role, tuple(recs), manifest.spec_hash)


def _write_manifest(run, manifest, name):
    path = run.art / "manifests" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    d = manifest.to_json()
    d["note"] = "phase/truth paths relative to the source dataset; annotation paths relative to the run directory"
    path.write_text(json.dumps(d, indent=1, sort_keys=True))


def _aggregate_ta_effect(fold_reports):
    before = sum(fr["ta_effect"]["pancreas_on_vessel_before"] for fr in fold_reports)
    after = sum(fr["ta_effect"]["pancreas_on_vessel_after"] for fr in fold_reports)
    tumor_changed = sum(fr["ta_effect"]["tumor_voxels_changed"] for fr in fold_reports)
    return {"pancreas_on_vessel_before": before, "pancreas_on_vessel_after": after,
            "reduction": (1.0 - after / before) if before else 0.0, "tumor_voxels_changed": tumor_changed}


def _run_fold(run, f, folds, A_boot, boot_labels, refined_A, fA, fA_ven, fC, pB_C, ta_pred_C,
              truth_ta_C, truth_A, tb, tb_log, per_case):
    cfg = run.cfg
    r = cfg.feature_radius
    test_ids = sorted(cid for cid, k in folds.items() if k == f)
    train_ids = sorted(cid for cid, k in folds.items() if k != f and cid in boot_labels)
    fr = {"fold": f, "test_ids": test_ids, "rows": {}}
    audit = {"teacher_b": sorted(tb_log.train_ids + tb_log.val_ids)}

    val_ids, fit_ids = _split_val(train_ids, cfg.train["teacher_a"].validation_fraction,
                                  _stable_seed(cfg.seed, "val_split", f))

    teachers = {}

    def teacher_a(phases):
        if phases in teachers:
            return teachers[phases]
        fc = FeatureConfig(phases, r)
        mk = lambda cid, labs: TrainCase(cid, select_features(fA[cid], fc), labs[cid])
        model, tlog = train([mk(c, boot_labels) for c in fit_ids], run.train_seed("teacher_a", "+".join(phases), f),
                            cfg.loss, classes=SEG3, val_cases=[mk(c, boot_labels) for c in val_ids])
        teachers[phases] = (model, tlog)
        return teachers[phases]

    def evaluate(name, model, feats):
        scores = {}
        for cid in test_ids:
            _, lab = predict(model, feats[cid], postprocess=True)
            scores[cid] = _dice_pair(lab, truth_A[cid])
        per_case[name].update(scores)

    pseudo = {}
    for a in cfg.ablations:
        if a.kind == "teacher_b":
            evaluate(a.name, tb, fA_ven)
            fr["rows"][a.name] = {"model_sha256": tb.digest()}
            continue
        if a.kind == "teacher_a":
            model, tlog = teacher_a(a.phases)
            evaluate(a.name, model, fA)
            run.save_model(f"fold{f}/{a.name}", model)
            fr["rows"][a.name] = _row_info(model, tlog)
            audit[a.name] = sorted(tlog.train_ids + tlog.val_ids)
            continue
        # student rows
        if a.self_learning and not pseudo:
            pseudo.update(_pseudo_label_C(run, f, teacher_a(PHASES)[0], fC, pB_C, ta_pred_C))
            audit["teacher_a"] = sorted(teacher_a(PHASES)[1].train_ids + teacher_a(PHASES)[1].val_ids)
            fr["ta_effect"] = _ta_effect(pseudo, truth_ta_C)
            fr["pseudo_diagnostics"] = {cid: p["diag"] for cid, p in sorted(pseudo.items())}
        a_labels = refined_A if a.ta else boot_labels
        cases = [TrainCase(cid, fA[cid], a_labels[cid]) for cid in fit_ids]
        if a.self_learning:
            want = "refined_pseudo" if a.ta else "pseudo"
            for cid in sorted(pseudo):
                kind = "refined" if a.ta else "raw"
                entry = pseudo[cid][kind]
                if entry["provenance"] != want:
                    raise DatasetIntegrityError(f"case {cid}: student expects {want} labels, got {entry['provenance']}")
                cases.append(TrainCase(cid, fC[cid], entry["label"]))
        val = [TrainCase(cid, fA[cid], a_labels[cid]) for cid in val_ids]
        model, tlog = train(cases, run.train_seed("student", a.name, f), cfg.loss, classes=SEG3, val_cases=val)
        evaluate(a.name, model, fA)
        run.save_model(f"fold{f}/{a.name}", model)
        info = _row_info(model, tlog)
        teacher_hashes = [m.digest() for m, _ in teachers.values()] + [tb.digest()]
        info["fresh_init"] = tlog.init_hash not in teacher_hashes
        info["label_provenance_C"] = ("refined_pseudo" if a.ta else "pseudo") if a.self_learning else None
        fr["rows"][a.name] = info
        audit[a.name] = sorted(tlog.train_ids + tlog.val_ids)

    leaks = {name: sorted(set(ids) & set(test_ids)) for name, ids in audit.items()}
    fr["leak_check"] = {"ok": not any(leaks.values()), "overlap": {k: v for k, v in leaks.items() if v}}
    if not fr["leak_check"]["ok"]:
        raise StageError(f"fold{f}", f"held-out cases used in training: {fr['leak_check']['overlap']}")
    fr["training_ids"] = audit
    return fr


def _row_info(model, tlog):
    sel = tlog.selected_epoch
    return {"model_sha256": model.digest(), "init_sha256": tlog.init_hash, "selected_epoch": sel,
            "val_score": tlog.epochs[sel].get("val_score") if sel >= 0 else None,
            "n_train": len(tlog.train_ids), "n_val": len(tlog.val_ids), "warnings": tlog.warnings}


def _pseudo_label_C(run, f, teacher_a3, fC, pB_C, ta_pred_C):
    def one(cid):
        pA = predict(teacher_a3, fC[cid])
        lab, diag = make_pseudo_labels(pA, pB_C[cid], run.cfg.fusion)
        out = {"diag": diag, "raw": {"label": lab, "provenance": "pseudo"}}
        base = run.art / f"fold{f}" / "C"
        save_rvol(base / f"{cid}_pseudo.rvol", lab)
        if cid in ta_pred_C:
            ref = refine_pseudo(lab, ta_pred_C[cid])
            save_rvol(base / f"{cid}_refined.rvol", ref)
            out["refined"] = {"label": ref, "provenance": "refined_pseudo"}
            diag["refinement"] = refinement_report(lab, ta_pred_C[cid])
        return cid, out

    return dict(ordered_map(one, sorted(fC), run.threads))


def _ta_effect(pseudo, truth_ta_C):
    before = after = tumor_changed = 0
    for cid, p in pseudo.items():
        if "refined" not in p:
            continue
        vessel = np.isin(truth_ta_C[cid].array, VESSEL_CLASSES)
        raw, ref = p["raw"]["label"].array, p["refined"]["label"].array
        before += int(((raw == PANCREAS) & vessel).sum())
        after += int(((ref == PANCREAS) & vessel).sum())
        tumor_changed += int(((raw == TUMOR) != (ref == TUMOR)).sum())
    return {"pancreas_on_vessel_before": before, "pancreas_on_vessel_after": after,
            "reduction": (1.0 - after / before) if before else 0.0, "tumor_voxels_changed": tumor_changed}


def run_ablations(cfg, out_dir, threads=1):
    """Run the pipeline and return just the ablation table (one row per configured ablation)."""
    return run_pipeline(cfg, out_dir, threads)["table"]
