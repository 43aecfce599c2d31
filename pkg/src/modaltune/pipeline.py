"""Stage orchestration shared by the CLI and the acceptance suite.

Every stage reads and writes files under one run directory, so stages can
be re-run independently; cohort content is a pure function of the config.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import config_digest
from .data_harness import (Cohort, CohortSpec, CohortSplit, Patient,
                           PreparedCohort, WorldStructure, build_world,
                           finalize_labels, generate_cohort, pool_pan_cancer,
                           split_cohort)
from .evaluation import (FeatureScaler, SurvivalData, balanced_accuracy,
                         concordance_index, extract_features, fit_cph,
                         fit_linear_probe, kaplan_meier, log_rank,
                         median_risk_groups, pathway_attributions,
                         predict_probe, risk_scores, attention_maps)
from .fileio import (FileFormatError, format_float, load_state_dict, read_fbag,
                     save_state_dict, write_fbag, write_features_csv,
                     write_metrics_csv)
from .modal_adapter import AdapterConfig, ModalAdapter
from .modal_encoders import ClinicalFeatures, ExpressionVector, ModalEncoderStack, PathwayMap
from .slide_encoder import EncoderConfig, FeatureBag, FrozenEncoder, init_frozen
from .text_targets import (RARE, ClinicalRecord, DurationBins, Projector,
                           StubTextEncoder, SubtypeGrouping, TnmStages,
                           build_text_targets, register_site)
from .trainer import (Checkpoint, TrainConfig, TrainSample, ValSet,
                      load_checkpoint, select_checkpoint, train)


class DigestMismatchError(RuntimeError):
    """The run directory was produced with a different configuration."""


class MissingInputError(FileNotFoundError):
    """A stage input file or directory is absent."""


CLINICAL_SCHEMA = ["tnm_t", "tnm_n", "tnm_m"]


# ---------------------------------------------------------------- manifest

def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def update_manifest(out: Path, stage: str, outputs: list[str], cfg: dict) -> None:
    path = out / "manifest.json"
    digest = config_digest(cfg)
    if path.exists():
        manifest = json.loads(path.read_text())
        if manifest["config_digest"] != digest and stage != "gen-data":
            raise DigestMismatchError(
                f"run dir built with config digest {manifest['config_digest'][:12]}, "
                f"current config digest {digest[:12]}")
    else:
        manifest = {"config_digest": digest, "seed": cfg["seed"],
                    "artifact_version": __version__, "created_at": _now(),
                    "stages": {}}
    manifest["config_digest"] = digest
    manifest["seed"] = cfg["seed"]
    manifest["updated_at"] = _now()
    manifest["stages"][stage] = {"completed_at": _now(),
                                 "outputs": sorted(outputs)}
    path.write_text(json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------- builders

def site_specs(cfg: dict) -> list[CohortSpec]:
    return [_spec_for(cfg, s) for s in cfg["data"]["sites"]]


def ood_spec(cfg: dict) -> CohortSpec:
    return _spec_for(cfg, cfg["data"]["ood_site"])


def _spec_for(cfg: dict, site: dict) -> CohortSpec:
    d = cfg["data"]
    return CohortSpec(
        site=site["name"], n_patients=site["n_patients"],
        n_classes=d["n_classes"], n_img_range=(d["n_img_min"], d["n_img_max"]),
        d_img=d["d_img"], n_genes=d["n_genes"], n_pathways=d["n_pathways"],
        marker_pathways=tuple(d["marker_pathways"]),
        risk_pathways=tuple(d["risk_pathways"]),
        censoring_target=d["censoring_target"], rare_fraction=d["rare_fraction"],
        seed=cfg["seed"] + site["seed_offset"], world_seed=cfg["seed"])


def build_frozen(cfg: dict) -> FrozenEncoder:
    e = cfg["encoder"]
    enc_cfg = EncoderConfig(
        d_model=e["d_model"], n_layers=e["n_layers"], n_blocks=e["n_blocks"],
        n_heads=e["n_heads"], ff_dim=e["ff_dim"],
        attention_mode=e["attention_mode"],
        segment_lengths=list(e["segment_lengths"]),
        dilation_ratios=list(e["dilation_ratios"]))
    return init_frozen(enc_cfg, d_img=cfg["data"]["d_img"],
                       seed=cfg["seed"] + e["seed_offset"])


def build_adapter(cfg: dict, pathway_map: PathwayMap,
                  single_modal: bool | None = None) -> ModalAdapter:
    m, a, e = cfg["modal"], cfg["adapter"], cfg["encoder"]
    gen = torch.Generator().manual_seed(cfg["seed"] + a["seed_offset"] + 1)
    stack = ModalEncoderStack(
        pathway_map, d_gp=m["d_gp"], d_model=e["d_model"], n_tokens=m["n_t"],
        smlp_hidden=m["smlp_hidden"], smlp_depth=m["smlp_depth"],
        mixer_layers=m["mixer_layers"], mixer_expansion=m["mixer_expansion"],
        mixer_dropout=m["mixer_dropout"],
        n_clinical=len(CLINICAL_SCHEMA) if m["use_clinical"] else 0,
        generator=gen)
    mode = cfg["text"]["projector_mode"]
    # Without a text-side projector the fused output feeds the raw text space.
    d_final = cfg["text"]["d_text"] if mode == "none" else a["d_final"]
    adapter_cfg = AdapterConfig(
        d_model=e["d_model"], n_blocks=e["n_blocks"], n_heads=a["n_heads"],
        ff_ratio=a["ff_ratio"], dropout=a["dropout"], d_final=d_final,
        fusion_ratio=a.get("fusion_ratio", 1.0),
        n_tasks=cfg["training"]["n_tasks"],
        single_modal=cfg["training"]["single_modal"] if single_modal is None else single_modal,
        model_side_projector_dim=cfg["text"]["d_text"] if mode == "model_side" else None)
    return ModalAdapter(adapter_cfg, stack, seed=cfg["seed"] + a["seed_offset"])


def build_projector(cfg: dict) -> Projector:
    t = cfg["text"]
    return Projector(t["d_text"], cfg["adapter"]["d_final"],
                     seed=cfg["seed"] + t["projector_seed_offset"],
                     mode=t["projector_mode"])


def build_text_encoder(cfg: dict) -> StubTextEncoder:
    t = cfg["text"]
    if t["encoder"] != "stub":
        raise ValueError(f"unknown text encoder {t['encoder']!r} "
                         "(external encoders attach via text_targets.ExternalTextEncoder)")
    return StubTextEncoder(dim=t["d_text"])


def target_dim(cfg: dict) -> int:
    mode = cfg["text"]["projector_mode"]
    if mode in ("none", "model_side"):
        return cfg["text"]["d_text"]
    return cfg["adapter"]["d_final"]


def train_config(cfg: dict, epochs: int | None = None) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        epochs=t["epochs"] if epochs is None else epochs,
        max_lr=t["max_lr"], warmup_epochs=min(t["warmup_epochs"],
                                              t["epochs"] if epochs is None else epochs),
        weight_decay=t["weight_decay"], batch_size=t["batch_size"],
        seed=cfg["seed"], n_tasks=t["n_tasks"], single_modal=t["single_modal"],
        single_task_prompt=t["single_task_prompt"],
        no_text_embedding=t["no_text_embedding"],
        projector_mode=cfg["text"]["projector_mode"],
        pan_cancer=t["pan_cancer"], dropout_enabled=t["dropout_enabled"],
        kl_temperature=t.get("kl_temperature", 1.0))


# ---------------------------------------------------------------- gen-data

def _clinical_for(record: ClinicalRecord) -> ClinicalFeatures:
    if record.tnm is None:
        values = np.zeros(3, dtype=np.float32)
        mask = np.zeros(3, dtype=np.float32)
    else:
        values = np.array([float(s[1]) if s else 0.0
                           for s in (record.tnm.t, record.tnm.n, record.tnm.m)],
                          dtype=np.float32)
        mask = np.array([1.0 if s else 0.0
                         for s in (record.tnm.t, record.tnm.n, record.tnm.m)],
                        dtype=np.float32)
    return ClinicalFeatures(patient_id=record.patient_id, values=values * mask,
                            presence_mask=mask)


def write_site_dir(prepared: PreparedCohort, site_dir: Path,
                   use_clinical: bool) -> list[str]:
    site_dir.mkdir(parents=True, exist_ok=True)
    (site_dir / "bags").mkdir(exist_ok=True)
    cohort = prepared.cohort
    world = cohort.world
    outputs: list[str] = []

    man = site_dir / "manifest.csv"
    with open(man, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "site", "subtype_raw", "class", "duration",
                         "event", "tnm_t", "tnm_n", "tnm_m"])
        for p in cohort.patients:
            r = p.record
            writer.writerow([
                p.patient_id, r.site, r.subtype_raw,
                RARE if r.class_index is None else r.class_index,
                format_float(r.survival_months), int(r.event),
                r.tnm.t if r.tnm else "", r.tnm.n if r.tnm else "",
                r.tnm.m if r.tnm else ""])
    outputs.append(str(man))

    expr = site_dir / "expression.csv"
    with open(expr, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + world.gene_names)
        for p in cohort.patients:
            writer.writerow([p.patient_id] +
                            [format_float(v) for v in p.expression.values])
    outputs.append(str(expr))

    for p in cohort.patients:
        bag_path = site_dir / "bags" / f"{p.patient_id}.fbag"
        write_fbag(bag_path, p.bag.features)
    outputs.append(str(site_dir / "bags"))

    world.pathway_map.to_csv(site_dir / "pathways.csv", world.gene_names)
    outputs.append(str(site_dir / "pathways.csv"))
    world.grouping.to_csv(site_dir / "grouping.csv")
    outputs.append(str(site_dir / "grouping.csv"))

    splits = site_dir / "splits.csv"
    with open(splits, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split"])
        for pid, split in sorted(prepared.split.as_dict().items()):
            writer.writerow([pid, split])
    outputs.append(str(splits))

    (site_dir / "bins.json").write_text(json.dumps(
        {"edges": list(prepared.bins.edges), "d_max": prepared.bins.d_max},
        indent=2) + "\n")
    outputs.append(str(site_dir / "bins.json"))
    (site_dir / "classes.json").write_text(
        json.dumps(prepared.class_names, indent=2) + "\n")
    outputs.append(str(site_dir / "classes.json"))

    if use_clinical:
        cli = site_dir / "clinical.csv"
        with open(cli, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id"] + CLINICAL_SCHEMA
                            + [f"{c}_present" for c in CLINICAL_SCHEMA])
            for p in cohort.patients:
                feats = _clinical_for(p.record)
                writer.writerow([p.patient_id]
                                + [format_float(v) for v in feats.values]
                                + [int(v) for v in feats.presence_mask])
        outputs.append(str(cli))
    return outputs


def gen_data(cfg: dict, out: Path) -> list[str]:
    specs = site_specs(cfg) + [ood_spec(cfg)]
    world = build_world(specs[0])
    outputs: list[str] = []
    for spec in specs:
        cohort = generate_cohort(spec, world)
        split = split_cohort(cohort.patients, seed=spec.seed)
        class_names, bins = finalize_labels(
            cohort, split, rare_threshold=cfg["data"]["rare_threshold"],
            bin_texts=cfg["text"]["bin_texts"])
        prepared = PreparedCohort(cohort=cohort, split=split,
                                  class_names=class_names, bins=bins)
        outputs += write_site_dir(prepared, out / "data" / spec.site,
                                  cfg["modal"]["use_clinical"])
    return outputs


# ---------------------------------------------------------------- loaders

def load_site(cfg: dict, out: Path, site: str) -> PreparedCohort:
    site_dir = out / "data" / site
    if not site_dir.exists():
        raise MissingInputError(f"no data directory for site {site!r}: {site_dir}")
    register_site(site, f"synthetic {site} carcinoma")
    class_names = json.loads((site_dir / "classes.json").read_text())
    bins_doc = json.loads((site_dir / "bins.json").read_text())
    from .text_targets import DEFAULT_BIN_TEXTS

    texts = {**DEFAULT_BIN_TEXTS, **(cfg["text"]["bin_texts"] or {})}
    bins = DurationBins(edges=tuple(bins_doc["edges"]), d_max=bins_doc["d_max"],
                        texts=tuple(sorted(texts.items())))

    grouping = SubtypeGrouping.from_csv(site_dir / "grouping.csv")

    expression: dict[str, np.ndarray] = {}
    with open(site_dir / "expression.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        gene_names = header[1:]
        for row in reader:
            expression[row[0]] = np.array([float(v) for v in row[1:]],
                                          dtype=np.float32)
    pathway_map = PathwayMap.from_csv(site_dir / "pathways.csv", gene_names)

    clinical: dict[str, ClinicalFeatures] = {}
    cli_path = site_dir / "clinical.csv"
    if cli_path.exists():
        with open(cli_path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                values = np.array([float(row[c]) for c in CLINICAL_SCHEMA],
                                  dtype=np.float32)
                mask = np.array([float(row[f"{c}_present"]) for c in CLINICAL_SCHEMA],
                                dtype=np.float32)
                clinical[row["patient_id"]] = ClinicalFeatures(
                    patient_id=row["patient_id"], values=values * mask,
                    presence_mask=mask)

    patients: list[Patient] = []
    with open(site_dir / "manifest.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["patient_id", "site", "subtype_raw", "class", "duration",
                    "event", "tnm_t", "tnm_n", "tnm_m"]
        if reader.fieldnames != expected:
            raise FileFormatError(f"cohort manifest header must be {expected}")
        for row in reader:
            pid = row["patient_id"]
            cls = None if row["class"] == RARE else int(row["class"])
            tnm = None
            if row["tnm_t"] or row["tnm_n"] or row["tnm_m"]:
                tnm = TnmStages(t=row["tnm_t"] or None, n=row["tnm_n"] or None,
                                m=row["tnm_m"] or None)
            record = ClinicalRecord(
                patient_id=pid, site=row["site"], subtype_raw=row["subtype_raw"],
                subtype_group=None if cls is None else class_names[cls],
                survival_months=float(row["duration"]),
                event=bool(int(row["event"])), tnm=tnm,
                duration_bin=None, class_index=cls)
            record.duration_bin = bins.bin_of(record.survival_months)
            bag = FeatureBag(patient_id=pid, features=torch.from_numpy(
                read_fbag(site_dir / "bags" / f"{pid}.fbag")))
            patients.append(Patient(
                patient_id=pid, bag=bag,
                expression=ExpressionVector(patient_id=pid, values=expression[pid]),
                record=record, clinical=clinical.get(pid)))

    split_map: dict[str, str] = {}
    with open(site_dir / "splits.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            split_map[row["patient_id"]] = row["split"]
    split = CohortSplit(
        train_ids=sorted(p for p, s in split_map.items() if s == "train"),
        val_ids=sorted(p for p, s in split_map.items() if s == "val"),
        test_ids=sorted(p for p, s in split_map.items() if s == "test"),
        strata={p.patient_id: (p.record.subtype_group or RARE) for p in patients})

    spec = _spec_for(cfg, _site_entry(cfg, site))
    world = WorldStructure(
        gene_names=gene_names, pathway_map=pathway_map,
        class_prototypes=np.zeros((1, 1)), background=np.zeros((1, 1)),
        risk_prototype=np.zeros(1), marker_patterns=np.zeros((1, 1)),
        risk_pattern=np.zeros(1), grouping=grouping, class_groups=class_names)
    cohort = Cohort(spec=spec, world=world, patients=patients)
    return PreparedCohort(cohort=cohort, split=split,
                          class_names=class_names, bins=bins)


def _site_entry(cfg: dict, site: str) -> dict:
    for s in cfg["data"]["sites"]:
        if s["name"] == site:
            return s
    if cfg["data"]["ood_site"]["name"] == site:
        return cfg["data"]["ood_site"]
    raise MissingInputError(f"site {site!r} not declared in the config")


# ---------------------------------------------------------------- training

def make_samples(cfg: dict, prepared: PreparedCohort,
                 encoder, projector: Projector) -> list[TrainSample]:
    samples = []
    for p in prepared.patients_in("train"):
        targets = build_text_targets(p.record, prepared.bins, encoder, projector)
        samples.append(TrainSample(
            patient=p, targets=targets, site=prepared.cohort.site,
            class_index=p.record.class_index,
            duration_bin=p.record.duration_bin, event=p.record.event))
    return samples


def make_val_set(prepared: PreparedCohort) -> ValSet:
    train_all = prepared.patients_in("train")
    val_all = prepared.patients_in("val")

    def mask_and_labels(patients):
        mask = np.array([p.record.class_index is not None for p in patients])
        labels = np.array([p.record.class_index for p in patients
                           if p.record.class_index is not None])
        return mask, labels

    train_mask, train_y = mask_and_labels(train_all)
    val_mask, val_y = mask_and_labels(val_all)
    return ValSet(site=prepared.cohort.site,
                  train_patients=train_all, val_patients=val_all,
                  train_class_mask=train_mask, train_labels=train_y,
                  val_class_mask=val_mask, val_labels=val_y,
                  train_surv=prepared.survival_of(train_all),
                  val_surv=prepared.survival_of(val_all))


@dataclass
class TrainedScope:
    scope: str
    adapter: ModalAdapter
    frozen: FrozenEncoder
    best_epoch: int
    checkpoints: list[Checkpoint]
    seen_patient_ids: set[str]


def run_training(cfg: dict, out: Path, scope_sites: list[str],
                 scope: str) -> TrainedScope:
    """Train one scope (a single site, or the pooled pan-cancer stream)."""
    prepared = {s: load_site(cfg, out, s) for s in scope_sites}
    frozen = build_frozen(cfg)
    pathway_map = next(iter(prepared.values())).cohort.world.pathway_map
    adapter = build_adapter(cfg, pathway_map)
    projector = build_projector(cfg)
    encoder = build_text_encoder(cfg)
    tcfg = train_config(cfg)

    if tcfg.pan_cancer and len(scope_sites) > 1:
        pooled = pool_pan_cancer(list(prepared.values()), seed=cfg["seed"])
        by_site = {s: pc for s, pc in prepared.items()}
        sample_index = {}
        for s, pc in by_site.items():
            for samp in make_samples(cfg, pc, encoder, projector):
                sample_index[samp.patient.patient_id] = samp
        samples = [sample_index[p.patient_id] for p in pooled]
    else:
        samples = []
        for s in scope_sites:
            samples += make_samples(cfg, prepared[s], encoder, projector)
    val_sets = [make_val_set(prepared[s]) for s in scope_sites]

    heads = None
    if tcfg.no_text_embedding:
        from .trainer import DirectLabelHeads

        n_classes = max(len(prepared[s].class_names) for s in scope_sites)
        heads = DirectLabelHeads(adapter.output_dim, n_classes, seed=cfg["seed"])

    result = train(adapter, frozen, samples, tcfg, val_sets=val_sets,
                   projector=projector, heads=heads)

    scope_dir = out / "train" / scope
    scope_dir.mkdir(parents=True, exist_ok=True)
    for ck in result.checkpoints:
        save_state_dict(scope_dir / f"epoch_{ck.epoch:03d}.mtw", ck.state)
        (scope_dir / f"metrics_epoch_{ck.epoch:03d}.json").write_text(
            json.dumps(ck.val_metrics, sort_keys=True, indent=2) + "\n")
    best = select_checkpoint(result.checkpoints)
    load_checkpoint(adapter, result.checkpoints[best])
    save_state_dict(scope_dir / "adapter_best.mtw",
                    result.checkpoints[best].state)
    (scope_dir / "selected.json").write_text(json.dumps(
        {"best_epoch": best, "scope_sites": scope_sites,
         "epoch_losses": result.epoch_losses,
         "seen_patient_ids": sorted(result.seen_patient_ids)},
        indent=2) + "\n")
    (scope_dir / "frozen_digest.txt").write_text(
        result.frozen_digest_before + "\n" + result.frozen_digest_after + "\n")
    return TrainedScope(scope=scope, adapter=adapter, frozen=frozen,
                        best_epoch=best, checkpoints=result.checkpoints,
                        seen_patient_ids=result.seen_patient_ids)


def load_trained(cfg: dict, out: Path, scope: str) -> TrainedScope:
    scope_dir = out / "train" / scope
    best_path = scope_dir / "adapter_best.mtw"
    if not best_path.exists():
        raise MissingInputError(f"no trained checkpoint at {best_path}")
    selected = json.loads((scope_dir / "selected.json").read_text())
    sites = selected["scope_sites"]
    pathway_map = load_site(cfg, out, sites[0]).cohort.world.pathway_map
    frozen = build_frozen(cfg)
    adapter = build_adapter(cfg, pathway_map)
    adapter.load_state_dict(load_state_dict(best_path))
    return TrainedScope(scope=scope, adapter=adapter, frozen=frozen,
                        best_epoch=selected["best_epoch"], checkpoints=[],
                        seen_patient_ids=set(selected["seen_patient_ids"]))


# ---------------------------------------------------------------- evaluation

def extract_stage(cfg: dict, out: Path, scope: str, site: str) -> Path:
    trained = load_trained(cfg, out, scope)
    prepared = load_site(cfg, out, site)
    feats = extract_features(trained.adapter, trained.frozen,
                             prepared.cohort.patients,
                             splits=prepared.split.as_dict())
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    path = feat_dir / f"{scope}__{site}.csv"
    write_features_csv(path, feats)
    return path


def probe_stage(cfg: dict, out: Path, scope: str, site: str,
                features_path: Path | None = None) -> Path:
    from .fileio import read_features_csv

    prepared = load_site(cfg, out, site)
    path = features_path or (out / "features" / f"{scope}__{site}.csv")
    if not Path(path).exists():
        raise MissingInputError(f"features file missing: {path}")
    feats = read_features_csv(path)
    by_id = dict(zip(feats.patient_ids, feats.x))
    rows = []
    train_p, train_y = prepared.probe_patients("train")
    train_x = np.stack([by_id[p.patient_id] for p in train_p])
    scaler = FeatureScaler.fit(train_x)
    clf = fit_linear_probe(scaler.apply(train_x), train_y,
                           c=cfg["evaluation"]["probe_c"],
                           max_iter=cfg["evaluation"]["probe_max_iter"],
                           seed=cfg["seed"])
    for part in ("val", "test"):
        part_p, part_y = prepared.probe_patients(part)
        part_x = scaler.apply(np.stack([by_id[p.patient_id] for p in part_p]))
        pred = predict_probe(clf, part_x)
        rows.append({"metric": "balanced_accuracy", "task": "subtype",
                     "site": site, "split": part,
                     "value": balanced_accuracy(part_y, pred),
                     "seed": cfg["seed"]})
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    dest = metrics_dir / f"probe__{scope}__{site}.csv"
    write_metrics_csv(dest, rows)
    return dest


def eval_surv_stage(cfg: dict, out: Path, scope: str, site: str,
                    features_path: Path | None = None) -> list[Path]:
    from .fileio import read_features_csv
    from .svgplot import step_curve_svg

    prepared = load_site(cfg, out, site)
    path = features_path or (out / "features" / f"{scope}__{site}.csv")
    if not Path(path).exists():
        raise MissingInputError(f"features file missing: {path}")
    feats = read_features_csv(path)
    by_id = dict(zip(feats.patient_ids, feats.x))

    train_all = prepared.patients_in("train")
    test_all = prepared.patients_in("test")
    x_train = np.stack([by_id[p.patient_id] for p in train_all])
    scaler = FeatureScaler.fit(x_train)
    x_train = scaler.apply(x_train)
    x_test = scaler.apply(np.stack([by_id[p.patient_id] for p in test_all]))
    surv_train = prepared.survival_of(train_all)
    surv_test = prepared.survival_of(test_all)
    beta = fit_cph(x_train, surv_train, penalizer=cfg["evaluation"]["cph_penalizer"])
    risk = risk_scores(x_test, beta)
    ci = concordance_index(risk, surv_test)
    high = median_risk_groups(risk)
    lr = log_rank(surv_test, high)
    rows = [
        {"metric": "c_index", "task": "survival", "site": site, "split": "test",
         "value": ci, "seed": cfg["seed"]},
        {"metric": "log_rank_statistic", "task": "survival", "site": site,
         "split": "test", "value": lr.statistic, "seed": cfg["seed"]},
        {"metric": "log_rank_p", "task": "survival", "site": site,
         "split": "test", "value": lr.p_value, "seed": cfg["seed"]},
    ]
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    dest = metrics_dir / f"surv__{scope}__{site}.csv"
    write_metrics_csv(dest, rows)

    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    curves = []
    km_rows = []
    for label, mask in (("low_risk", ~high), ("high_risk", high)):
        km = kaplan_meier(surv_test, mask)
        curves.append((label, km.times.tolist(), km.survival.tolist()))
        for t, s, n, d in zip(km.times, km.survival, km.at_risk, km.events):
            km_rows.append((label, t, s, n, d))
    svg_path = plots / f"km__{scope}__{site}.svg"
    step_curve_svg(svg_path, curves,
                   title=f"Kaplan-Meier {site} (log-rank p={lr.p_value:.4g})")
    csv_path = plots / f"km__{scope}__{site}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "time", "survival", "at_risk", "events"])
        for label, t, s, n, d in km_rows:
            writer.writerow([label, format_float(t), format_float(s), n, d])
    return [dest, svg_path, csv_path]


def attribute_stage(cfg: dict, out: Path, scope: str, site: str,
                    patient_id: str) -> list[Path]:
    from .fileio import read_features_csv
    from .svgplot import bar_svg, heat_strip_svg

    trained = load_trained(cfg, out, scope)
    prepared = load_site(cfg, out, site)
    path = out / "features" / f"{scope}__{site}.csv"
    if not path.exists():
        raise MissingInputError(f"features file missing: {path}")
    feats = read_features_csv(path)
    by_id = dict(zip(feats.patient_ids, feats.x))
    train_all = prepared.patients_in("train")
    x_train = np.stack([by_id[p.patient_id] for p in train_all])
    scaler = FeatureScaler.fit(x_train)
    beta = fit_cph(scaler.apply(x_train), prepared.survival_of(train_all),
                   penalizer=cfg["evaluation"]["cph_penalizer"])
    # Risk on standardized features is linear in raw features with a constant
    # offset, so the IG readout uses the equivalent raw-space coefficients.
    beta_raw = beta / scaler.std
    patient = prepared.cohort.patient(patient_id)
    attr, delta = pathway_attributions(trained.adapter, trained.frozen, patient,
                                       beta_raw, steps=cfg["evaluation"]["ig_steps"])
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    names = [f"token_{i:02d}" for i in range(len(attr))]
    attr_csv = plots / f"attribution__{scope}__{patient_id}.csv"
    with open(attr_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pathway_token", "attribution"])
        for n, a in zip(names, attr):
            writer.writerow([n, format_float(a)])
        writer.writerow(["risk_delta", format_float(delta)])
    attr_svg = plots / f"attribution__{scope}__{patient_id}.svg"
    bar_svg(attr_svg, names, [float(a) for a in attr],
            title=f"Risk attribution {patient_id} (delta {delta:.4g})")

    maps, _ = attention_maps(trained.adapter, trained.frozen, patient)
    map_csv = plots / f"attention__{scope}__{patient_id}.csv"
    with open(map_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map", "row", "position", "weight"])
        for name in sorted(maps):
            arr = np.atleast_2d(maps[name])
            for r in range(arr.shape[0]):
                for c in range(arr.shape[1]):
                    writer.writerow([name, r, c, format_float(arr[r, c])])
    rows = []
    labels = []
    for name in sorted(maps):
        arr = np.atleast_2d(maps[name])
        labels.append(name)
        rows.append(arr.mean(axis=0).tolist())
    map_svg = plots / f"attention__{scope}__{patient_id}.svg"
    heat_strip_svg(map_svg, rows, labels, title=f"Attention maps {patient_id}")
    return [attr_csv, attr_svg, map_csv, map_svg]


def ood_stage(cfg: dict, out: Path, scope: str) -> Path:
    from .data_harness import ood_protocol

    trained = load_trained(cfg, out, scope)
    site = cfg["data"]["ood_site"]["name"]
    prepared = load_site(cfg, out, site)
    metrics = ood_protocol(trained.adapter, trained.frozen, prepared,
                           seen_patient_ids=trained.seen_patient_ids,
                           seed=cfg["seed"])
    rows = [{"metric": k, "task": "ood", "site": site, "split": "test",
             "value": v, "seed": cfg["seed"]} for k, v in sorted(metrics.items())]
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    dest = metrics_dir / f"ood__{scope}__{site}.csv"
    write_metrics_csv(dest, rows)
    return dest


def report_stage(cfg: dict, out: Path) -> list[Path]:
    from .fileio import read_metrics_csv
    from .svgplot import bar_svg

    metrics_dir = out / "metrics"
    if not metrics_dir.exists():
        raise MissingInputError(f"no metrics directory under {out}")
    all_rows = []
    for path in sorted(metrics_dir.glob("*.csv")):
        for row in read_metrics_csv(path):
            row["source"] = path.name
            all_rows.append(row)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    summary = report_dir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "metric", "task", "site", "split", "value", "seed"])
        for row in sorted(all_rows, key=lambda r: (r["source"], r["metric"],
                                                   r["site"], r["split"])):
            writer.writerow([row["source"], row["metric"], row["task"],
                             row["site"], row["split"], row["value"], row["seed"]])
    names = [f"{r['site']}:{r['metric']}:{r['split']}" for r in all_rows
             if r["metric"] in ("balanced_accuracy", "c_index")]
    values = [float(r["value"]) for r in all_rows
              if r["metric"] in ("balanced_accuracy", "c_index")]
    plot = report_dir / "summary.svg"
    bar_svg(plot, names, values, title="Run summary")
    return [summary, plot]
