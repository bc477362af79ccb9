"""Stage implementations behind the CLI: each stage reads and writes only
its declared directories and drops a machine-readable run manifest
(config hash, seed, git description, wall time) next to its outputs.
"""

from __future__ import annotations

import csv
import json
import subprocess
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import contrastive, koosnet, metrics, msfnet, segment
from .config import PipelineConfig, config_hash, stage_seed
from .errors import ConfigError, MsfusionError
from .phantom import PhantomSpec, generate_cohort
from .preprocess import PreprocessConfig, RegistrationOptions, preprocess_case
from .volume import LabeledVolume, Modality, Volume, extract_slabs, load_volume, resample, save_volume, volume_slabs


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10, cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(stage: str, cfg: PipelineConfig, out_dir: Path,
                       started: float, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "seed": stage_seed(cfg.seed, stage),
        "git": _git_describe(),
        "wall_time_s": round(time.time() - started, 3),
        "extra": extra or {},
    }
    (out_dir / f"run_{stage.replace('-', '_')}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MsfusionError(f"missing artifact {path}; run '{producer}' first")
    return path


def _load_json(path: Path, producer: str) -> dict:
    return json.loads(_require(path, producer).read_text())


def _setup(cfg: PipelineConfig, stage: str) -> int:
    torch.set_num_threads(max(1, cfg.threads))
    return stage_seed(cfg.seed, stage)


def _load_labeled(base: Path, entry: dict, modality: Modality) -> LabeledVolume:
    img = load_volume(base / entry["image"], modality)
    vs = load_volume(base / entry["vs"]).data.astype(np.uint8)
    gif = None
    if entry.get("gif"):
        gif = load_volume(base / entry["gif"]).data.astype(np.uint16)
    return LabeledVolume(img, vs, gif, entry.get("grade"), entry["subject_id"])


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def stage_synth(cfg: PipelineConfig, root: Path) -> None:
    started = time.time()
    seed = _setup(cfg, "synth")
    out = root / cfg.dirs.raw
    spec = PhantomSpec(seed=seed, shape=cfg.synth.shape, spacing=cfg.synth.spacing,
                       noise_sigma=cfg.synth.noise_sigma)
    n = cfg.synth.n_train
    train_a = generate_cohort(spec, n, start=0, prefix="a", balance_grades=cfg.synth.balance_grades)
    train_b = generate_cohort(spec, n, start=n, prefix="b", balance_grades=cfg.synth.balance_grades)
    evals = generate_cohort(spec, cfg.synth.n_eval, start=100, prefix="e",
                            balance_grades=cfg.synth.balance_grades)

    manifest = {"spec": asdict(spec), "train_a": [], "train_b": [], "eval": []}

    def _save(vol, rel):
        save_volume(vol, out / rel)
        return rel

    for s in train_a:
        d = f"trainA/{s.subject_id}"
        manifest["train_a"].append({
            "subject_id": s.subject_id,
            "grade": s.grade,
            "image": _save(s.a.image, f"{d}/image.nii.gz"),
            "vs": _save(s.a.image.with_data(s.a.vs_mask), f"{d}/vs.nii.gz"),
            "gif": _save(s.a.image.with_data(s.a.gif_mask), f"{d}/gif.nii.gz"),
        })
    for s in train_b:
        d = f"trainB/{s.subject_id}"
        # unpaired, unannotated target-modality subjects
        manifest["train_b"].append({
            "subject_id": s.subject_id,
            "image": _save(s.b.image, f"{d}/image.nii.gz"),
        })
    for s in evals:
        d = f"eval/{s.subject_id}"
        manifest["eval"].append({
            "subject_id": s.subject_id,
            "grade": s.grade,
            "image_a": _save(s.a.image, f"{d}/image_a.nii.gz"),
            "image_b": _save(s.b.image, f"{d}/image_b.nii.gz"),
            "vs": _save(s.a.image.with_data(s.a.vs_mask), f"{d}/vs.nii.gz"),
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    write_run_manifest("synth", cfg, out, started,
                       {"n_train": n, "n_eval": cfg.synth.n_eval})


# ---------------------------------------------------------------------------
# prep
# ---------------------------------------------------------------------------


def _prep_config(cfg: PipelineConfig) -> PreprocessConfig:
    p = cfg.prep
    reg = RegistrationOptions(levels=p.levels, iterations=p.iterations,
                              mi_bins=p.mi_bins, dof=p.dof)
    return PreprocessConfig(target_spacing=p.target_spacing, n_quantiles=p.n_quantiles,
                            crop_size=p.crop_size, crop_start=p.crop_start, registration=reg)


def stage_prep(cfg: PipelineConfig, root: Path) -> None:
    started = time.time()
    _setup(cfg, "prep")
    raw = root / cfg.dirs.raw
    out = root / cfg.dirs.prep
    manifest = _load_json(raw / "manifest.json", "synth")
    if not cfg.prep.atlas_id:
        raise ConfigError("prep.atlas_id is required (no default atlas)")
    pcfg = _prep_config(cfg)

    by_id_b = {e["subject_id"]: e for e in manifest["train_b"]}
    if cfg.prep.atlas_id not in by_id_b:
        raise MsfusionError(f"atlas_id '{cfg.prep.atlas_id}' is not a trainB subject")
    atlas = resample(load_volume(raw / by_id_b[cfg.prep.atlas_id]["image"], Modality.T2),
                     pcfg.target_spacing)

    ref_a_id = cfg.prep.reference_t1 or manifest["train_a"][0]["subject_id"]
    by_id_a = {e["subject_id"]: e for e in manifest["train_a"]}
    if ref_a_id not in by_id_a:
        raise MsfusionError(f"reference_t1 '{ref_a_id}' is not a trainA subject")
    ref_a = resample(load_volume(raw / by_id_a[ref_a_id]["image"], Modality.T1),
                     pcfg.target_spacing)

    prep_manifest = {"atlas_id": cfg.prep.atlas_id, "reference_t1": ref_a_id,
                     "train_a": [], "train_b": [], "eval": []}
    transforms = {}

    def process(entry, modality, image_key, rel_dir, with_masks):
        if with_masks:
            lv = _load_labeled(raw, entry, modality)
        else:
            img = load_volume(raw / entry[image_key], modality)
            lv = LabeledVolume(img, np.zeros(img.shape, dtype=np.uint8),
                               subject_id=entry["subject_id"])
        reference = ref_a if modality == Modality.T1 else atlas
        result, t = preprocess_case(lv, atlas, pcfg, reference)
        rec = {"subject_id": entry["subject_id"]}
        save_volume(result.image, out / f"{rel_dir}/image.nii.gz")
        rec["image"] = f"{rel_dir}/image.nii.gz"
        if with_masks:
            save_volume(result.image.with_data(result.vs_mask), out / f"{rel_dir}/vs.nii.gz")
            rec["vs"] = f"{rel_dir}/vs.nii.gz"
            if result.gif_mask is not None:
                save_volume(result.image.with_data(result.gif_mask), out / f"{rel_dir}/gif.nii.gz")
                rec["gif"] = f"{rel_dir}/gif.nii.gz"
            rec["grade"] = entry.get("grade")
        transforms[rel_dir] = {"matrix": t.matrix.tolist(), "translation": t.translation.tolist()}
        return rec

    for e in manifest["train_a"]:
        prep_manifest["train_a"].append(
            process(e, Modality.T1, "image", f"trainA/{e['subject_id']}", True))
    for e in manifest["train_b"]:
        prep_manifest["train_b"].append(
            process(e, Modality.T2, "image", f"trainB/{e['subject_id']}", False))
    for e in manifest["eval"]:
        rec_a = process({**e, "image": e["image_a"]}, Modality.T1,
                        "image", f"eval/{e['subject_id']}/a", True)
        rec_b = process(e, Modality.T2, "image_b", f"eval/{e['subject_id']}/b", False)
        prep_manifest["eval"].append({
            "subject_id": e["subject_id"], "grade": e.get("grade"),
            "image_a": rec_a["image"], "vs": rec_a["vs"], "image_b": rec_b["image"],
        })

    (out / "manifest.json").write_text(json.dumps(prep_manifest, indent=2) + "\n")
    (out / "transforms.json").write_text(json.dumps(transforms, indent=2) + "\n")
    write_run_manifest("prep", cfg, out, started, {"atlas_id": cfg.prep.atlas_id})


# ---------------------------------------------------------------------------
# train-da / translate
# ---------------------------------------------------------------------------


def _msfnet_weights(cfg: PipelineConfig) -> msfnet.LossWeights:
    m = cfg.msfnet
    return msfnet.LossWeights(lambda_r=m.lambda_r, lambda_p=m.lambda_p,
                              adversarial=m.adversarial, cycle=m.cycle, proxy=m.proxy)


def stage_train_da(cfg: PipelineConfig, root: Path, ablate: tuple[str, ...] = ()) -> None:
    started = time.time()
    seed = _setup(cfg, "train-da")
    prep = root / cfg.dirs.prep
    models = root / cfg.dirs.models
    manifest = _load_json(prep / "manifest.json", "prep")
    for name in ablate:
        if name not in ("vs", "gif"):
            raise ConfigError(f"unknown ablation '{name}' (expected vs and/or gif)")

    data1 = []
    for e in manifest["train_a"]:
        data1.extend(extract_slabs(_load_labeled(prep, e, Modality.T1)))
    data2 = []
    for e in manifest["train_b"]:
        vol = load_volume(prep / e["image"], Modality.T2)
        data2.extend(volume_slabs(vol, subject_id=e["subject_id"]))

    tcfg = msfnet.MsfnetTrainConfig(
        epochs=cfg.msfnet.epochs, lr=cfg.msfnet.lr, batch_size=cfg.msfnet.batch_size,
        seed=seed, profile=cfg.msfnet.profile,
        ablate_vs="vs" in ablate, ablate_gif="gif" in ablate,
        perceptual_provider=cfg.msfnet.perceptual, vgg_weights=cfg.msfnet.vgg_weights,
        checkpoint_path=str(models / "msfnet.ckpt"),
        curves_path=str(models / "msfnet_curves.csv"),
        checkpoint_every=cfg.msfnet.checkpoint_every,
    )
    msfnet.train_msfnet(data1, data2, _msfnet_weights(cfg), tcfg)
    write_run_manifest("train-da", cfg, models, started,
                       {"ablate": sorted(ablate), "slabs": [len(data1), len(data2)]})


def stage_translate(cfg: PipelineConfig, root: Path) -> None:
    started = time.time()
    _setup(cfg, "translate")
    prep = root / cfg.dirs.prep
    out = root / cfg.dirs.translated
    models = root / cfg.dirs.models
    manifest = _load_json(prep / "manifest.json", "prep")
    model, _ = msfnet.load_msfnet(_require(models / "msfnet.ckpt", "train-da"))

    records = []
    for e in manifest["train_a"]:
        vol = load_volume(prep / e["image"], Modality.T1)
        fake = msfnet.translate(model, vol, "t1_to_t2")
        rel = f"trainA/{e['subject_id']}.nii.gz"
        save_volume(fake, out / rel)
        records.append({"subject_id": e["subject_id"], "image": rel, "source": e["image"]})
    for e in manifest["eval"]:
        vol = load_volume(prep / e["image_a"], Modality.T1)
        fake = msfnet.translate(model, vol, "t1_to_t2")
        rel = f"eval/{e['subject_id']}.nii.gz"
        save_volume(fake, out / rel)
        records.append({"subject_id": e["subject_id"], "image": rel, "source": e["image_a"]})
    (out / "manifest.json").write_text(json.dumps({"translated": records}, indent=2) + "\n")
    write_run_manifest("translate", cfg, out, started, {"count": len(records)})


# ---------------------------------------------------------------------------
# train-seg / infer-seg
# ---------------------------------------------------------------------------


def stage_train_seg(cfg: PipelineConfig, root: Path, pool: bool = True) -> None:
    started = time.time()
    seed = _setup(cfg, "train-seg")
    prep = root / cfg.dirs.prep
    translated = root / cfg.dirs.translated
    models = root / cfg.dirs.models
    manifest = _load_json(prep / "manifest.json", "prep")

    reals = [_load_labeled(prep, e, Modality.T1) for e in manifest["train_a"]]
    if pool:
        fakes = []
        for e in manifest["train_a"]:
            path = _require(translated / f"trainA/{e['subject_id']}.nii.gz", "translate")
            fakes.append(load_volume(path, Modality.T2))
        dataset = segment.build_pooled_set(reals, fakes, seed=seed)
        name = "seg"
    else:
        dataset = [s for lv in reals for s in extract_slabs(lv)]
        rng = np.random.default_rng(seed)
        dataset = [dataset[i] for i in rng.permutation(len(dataset))]
        name = "seg_real_only"

    scfg = segment.SegTrainConfig(
        epochs=cfg.seg.epochs, lr=cfg.seg.lr, batch_size=cfg.seg.batch_size, seed=seed,
        profile=cfg.seg.profile, augment=cfg.seg.augment,
        checkpoint_path=str(models / f"{name}.ckpt"),
        curves_path=str(models / f"{name}_curves.csv"),
    )
    segment.train_seg(dataset, scfg)
    write_run_manifest("train-seg", cfg, models, started,
                       {"pool": pool, "slabs": len(dataset), "model": f"{name}.ckpt"})


def stage_infer_seg(cfg: PipelineConfig, root: Path, model_name: str = "seg",
                    out_name: str = "masks") -> None:
    started = time.time()
    _setup(cfg, "infer-seg")
    prep = root / cfg.dirs.prep
    models = root / cfg.dirs.models
    preds = root / cfg.dirs.preds / out_name
    manifest = _load_json(prep / "manifest.json", "prep")
    model, _ = segment.load_seg(_require(models / f"{model_name}.ckpt", "train-seg"))

    for e in manifest["eval"]:
        vol = load_volume(prep / e["image_b"], Modality.T2)
        labels = segment.infer_seg(model, vol)
        save_volume(labels, preds / f"{e['subject_id']}.nii.gz")
    write_run_manifest("infer-seg", cfg, preds, started,
                       {"model": model_name, "subjects": len(manifest["eval"])})


# ---------------------------------------------------------------------------
# koos stages
# ---------------------------------------------------------------------------


def _koos_subjects(cfg: PipelineConfig, root: Path) -> list[koosnet.SubjectSample]:
    prep = root / cfg.dirs.prep
    translated = root / cfg.dirs.translated
    manifest = _load_json(prep / "manifest.json", "prep")
    limit = koosnet.KOOS_PROFILES[cfg.koos.profile].slab_limit
    subjects = []
    for e in manifest["train_a"]:
        lv = _load_labeled(prep, e, Modality.T1)
        fake_path = _require(translated / f"trainA/{e['subject_id']}.nii.gz", "translate")
        fake = load_volume(fake_path, Modality.T2)
        fake_lv = LabeledVolume(fake, lv.vs_mask, lv.gif_mask, lv.koos_grade, lv.subject_id)
        subjects.append(koosnet.SubjectSample(
            e["subject_id"],
            koosnet.select_slabs(extract_slabs(lv), limit),
            koosnet.select_slabs(extract_slabs(fake_lv), limit),
            e.get("grade")))
    return subjects


def _build_classifier(cfg: PipelineConfig, root: Path, seed: int) -> koosnet.KoosClassifier:
    models = root / cfg.dirs.models
    model, _ = msfnet.load_msfnet(_require(models / "msfnet.ckpt", "train-da"))
    profile = koosnet.KOOS_PROFILES[cfg.koos.profile]
    torch.manual_seed(seed)
    return koosnet.KoosClassifier(model.encoder, model.profile, profile)


def stage_pretrain_koos(cfg: PipelineConfig, root: Path) -> None:
    started = time.time()
    seed = _setup(cfg, "pretrain-koos")
    models = root / cfg.dirs.models
    subjects = _koos_subjects(cfg, root)
    classifier = _build_classifier(cfg, root, seed)
    profile = classifier.profile
    head_self = contrastive.ProjectionHead(profile.feat_dim, profile.proj_dim)
    head_sup = contrastive.ProjectionHead(profile.feat_dim, profile.proj_dim)
    pcfg = contrastive.PretrainConfig(
        epochs=cfg.koos.pretrain_epochs, lr=cfg.koos.pretrain_lr,
        batch_size=cfg.koos.pretrain_batch, seed=seed, tau=cfg.koos.tau,
        weight_self=cfg.koos.weight_self, weight_sup=cfg.koos.weight_sup,
    )
    curves = contrastive.pretrain(classifier, head_self, head_sup, subjects, pcfg)
    msfnet.write_curves(curves, models / "koos_pretrain_curves.csv")
    koosnet.save_koos(models / "koos_pretrain.ckpt", classifier, seed,
                      heads=(head_self, head_sup), extra={"pretrained": True})
    write_run_manifest("pretrain-koos", cfg, models, started, {"subjects": len(subjects)})


def stage_finetune_koos(cfg: PipelineConfig, root: Path) -> None:
    started = time.time()
    seed = _setup(cfg, "finetune-koos")
    models = root / cfg.dirs.models
    subjects = _koos_subjects(cfg, root)
    if cfg.koos.pretrain:
        classifier, _, _ = koosnet.load_koos(_require(models / "koos_pretrain.ckpt", "pretrain-koos"))
    else:
        # ablation arm: no contrastive pretraining, start from a fresh head stack
        classifier = _build_classifier(cfg, root, seed)
    fcfg = koosnet.FinetuneConfig(
        epochs=cfg.koos.finetune_epochs, lr=cfg.koos.finetune_lr,
        batch_size=cfg.koos.finetune_batch, seed=seed, unfreeze=not cfg.koos.freeze,
        checkpoint_path=str(models / "koos.ckpt"),
    )
    koosnet.finetune(classifier, subjects, fcfg)
    write_run_manifest("finetune-koos", cfg, models, started,
                       {"pretrain": cfg.koos.pretrain, "freeze": cfg.koos.freeze})


def stage_predict_koos(cfg: PipelineConfig, root: Path, masks_name: str = "masks") -> None:
    started = time.time()
    _setup(cfg, "predict-koos")
    prep = root / cfg.dirs.prep
    models = root / cfg.dirs.models
    preds = root / cfg.dirs.preds
    manifest = _load_json(prep / "manifest.json", "prep")
    classifier, _, _ = koosnet.load_koos(_require(models / "koos.ckpt", "finetune-koos"))

    cohort = {}
    for e in manifest["eval"]:
        vol = load_volume(prep / e["image_b"], Modality.T2)
        mask_path = preds / masks_name / f"{e['subject_id']}.nii.gz"
        if not mask_path.exists():
            continue  # recorded below as a per-subject error
        mask = load_volume(mask_path).data.astype(np.uint8)
        cohort[e["subject_id"]] = extract_slabs(LabeledVolume(vol, mask, subject_id=e["subject_id"]))
    predictions, errors = koosnet.predict_cohort(classifier, cohort, preds / "koos.csv")
    for e in manifest["eval"]:
        if e["subject_id"] not in cohort:
            errors[e["subject_id"]] = f"missing mask {masks_name}/{e['subject_id']}.nii.gz (run 'infer-seg')"
    if errors:
        (preds / "koos_errors.json").write_text(json.dumps(errors, indent=2) + "\n")
    write_run_manifest("predict-koos", cfg, preds, started,
                       {"predicted": len(predictions), "errors": len(errors)})


# ---------------------------------------------------------------------------
# evaluate / report
# ---------------------------------------------------------------------------


def read_koos_csv(path) -> dict[str, int]:
    grades = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            grades[row["subject_id"]] = int(row["grade"])
    return grades


def stage_evaluate(cfg: PipelineConfig, root: Path, name: str = "msfnet",
                   masks_name: str = "masks", with_koos: bool = True) -> metrics.MetricReport:
    started = time.time()
    _setup(cfg, "evaluate")
    prep = root / cfg.dirs.prep
    preds = root / cfg.dirs.preds
    out = root / cfg.dirs.reports / name
    manifest = _load_json(prep / "manifest.json", "prep")

    true_masks, pred_masks = {}, {}
    true_grades = {}
    for e in manifest["eval"]:
        sid = e["subject_id"]
        true_masks[sid] = load_volume(prep / e["vs"]).data.astype(np.uint8)
        if e.get("grade") is not None:
            true_grades[sid] = e["grade"]
        mask_path = preds / masks_name / f"{sid}.nii.gz"
        if mask_path.exists():
            pred_masks[sid] = load_volume(mask_path).data.astype(np.uint8)
    if not pred_masks:
        raise MsfusionError(f"no predicted masks under {preds / masks_name}; run 'infer-seg' first")

    pred_grades = None
    koos_csv = preds / "koos.csv"
    if with_koos and koos_csv.exists():
        pred_grades = read_koos_csv(koos_csv)
    report = metrics.evaluate_cohort(pred_masks, true_masks, cfg.prep.target_spacing,
                                     pred_grades, true_grades if pred_grades else None)
    metrics.write_report(report, out)
    write_run_manifest("evaluate", cfg, out, started, {"name": name, "cases": len(pred_masks)})
    return report


def stage_report(cfg: PipelineConfig, root: Path) -> Path:
    started = time.time()
    _setup(cfg, "report")
    reports_dir = root / cfg.dirs.reports
    rows = {}
    for metrics_file in sorted(reports_dir.glob("*/metrics.json")):
        rows[metrics_file.parent.name] = metrics.load_report(metrics_file)
    if not rows:
        raise MsfusionError(f"no metrics.json files under {reports_dir}; run 'evaluate' first")
    out = reports_dir / "summary.csv"
    metrics.write_summary(rows, out)
    write_run_manifest("report", cfg, reports_dir, started, {"variants": sorted(rows)})
    return out
