"""Synthetic multi-site cohorts with planted, complementary signal.

Each patient gets a patch-feature bag, an expression vector, and a clinical
record. Class identity is planted in both the image and expression channels
with independent noise (each channel partially informative, their union
more informative), and survival hazard is log-linear in two latent risk
scores, one per channel, so a Cox model is correctly specified.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .modal_encoders import ClinicalFeatures, ExpressionVector, PathwayMap
from .numerics import stable_stream_seed
from .slide_encoder import FeatureBag
from .text_targets import (RARE, ClinicalRecord, DurationBins, SubtypeGrouping,
                           TnmStages, register_site)


@dataclass
class CohortSpec:
    site: str
    n_patients: int = 300
    n_classes: int = 2
    n_img_range: tuple[int, int] = (16, 64)
    d_img: int = 96
    n_genes: int = 200
    n_pathways: int = 20
    marker_pathways: tuple[int, ...] = (0, 1, 2)
    risk_pathways: tuple[int, ...] = (3, 4)
    censoring_target: float = 0.3
    rare_fraction: float = 0.05
    seed: int = 0            # per-site patient draws
    world_seed: int = 7      # shared planted structure across sites

    def __post_init__(self) -> None:
        if not 0.0 <= self.censoring_target < 1.0:
            raise ValueError("censoring target must lie in [0, 1)")
        for p in (*self.marker_pathways, *self.risk_pathways):
            if not 0 <= p < self.n_pathways:
                raise ValueError(f"pathway index {p} outside 0..{self.n_pathways - 1}")
        if self.n_img_range[0] < 1 or self.n_img_range[0] > self.n_img_range[1]:
            raise ValueError("invalid n_img range")


# Signal strengths. Each modality carries the class cleanly except for an
# independent per-channel fraction of patients whose signal points at the
# wrong class, so single-modality probes are capped below 1.0 by
# construction while the channel pair corrects most flips.
CLASS_SEP_IMG = 1.6          # image: informative but the weaker class channel
CLASS_SEP_EXPR = 3.0         # expression: the stronger class channel
FLIP_RATE_IMG = 0.02         # wrong-class fraction in the image channel
FLIP_RATE_EXPR = 0.02        # wrong-class fraction in the expression channel
EXPR_PATTERN_SCALE = 3.2     # marker-gene loading, in units of 1/sqrt(n_marker)
RISK_COEF_EXPR = 1.8         # hazard coefficient on the expression risk latent
RISK_COEF_IMG = 1.0          # hazard coefficient on the image risk latent
IMG_RISK_PATCH_SCALE = 2.0   # patch-space loading of the image risk latent
EXPR_RISK_SCALE = 4.0        # risk-gene loading, in units of 1/sqrt(n_risk)
PATCH_NOISE = 0.7
EXPR_LOGNORMAL_SIGMA = 0.5
BASE_SURVIVAL_MONTHS = 30.0


@dataclass
class WorldStructure:
    """Planted structure shared by every site drawn from one world seed."""

    gene_names: list[str]
    pathway_map: PathwayMap
    class_prototypes: np.ndarray   # (n_classes, d_img), unit rows
    background: np.ndarray         # (2, d_img)
    risk_prototype: np.ndarray     # (d_img,)
    marker_patterns: np.ndarray    # (n_classes, n_genes); zero off marker pathways
    risk_pattern: np.ndarray       # (n_genes,); zero off risk pathways
    grouping: SubtypeGrouping
    class_groups: list[str]


def build_world(spec: CohortSpec) -> WorldStructure:
    rng = np.random.default_rng(stable_stream_seed(spec.world_seed, "world"))
    gene_names = [f"g{g:04d}" for g in range(spec.n_genes)]
    membership = np.zeros((spec.n_pathways, spec.n_genes), dtype=np.float32)
    bounds = np.linspace(0, spec.n_genes, spec.n_pathways + 1).astype(int)
    names = []
    for p in range(spec.n_pathways):
        membership[p, bounds[p]:bounds[p + 1]] = 1.0
        names.append(f"pathway_{p:02d}")
    pathway_map = PathwayMap(membership=membership, pathway_names=names)

    def unit_rows(n: int) -> np.ndarray:
        m = rng.standard_normal((n, spec.d_img))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    marker_mask = np.isin(np.arange(spec.n_genes) // max(1, spec.n_genes // spec.n_pathways),
                          spec.marker_pathways)
    # Recompute masks from the actual membership matrix (robust to uneven bins).
    marker_mask = membership[list(spec.marker_pathways)].sum(axis=0) > 0
    risk_mask = membership[list(spec.risk_pathways)].sum(axis=0) > 0
    marker_patterns = np.zeros((spec.n_classes, spec.n_genes))
    for c in range(spec.n_classes):
        pat = rng.choice([-1.0, 1.0], size=spec.n_genes) * marker_mask
        marker_patterns[c] = pat * EXPR_PATTERN_SCALE / max(1.0, np.sqrt(marker_mask.sum()))
    risk_pattern = (rng.choice([-1.0, 1.0], size=spec.n_genes) * risk_mask)
    risk_pattern *= EXPR_RISK_SCALE / max(1.0, np.sqrt(risk_mask.sum()))

    class_groups = [f"type-{c} carcinoma" for c in range(spec.n_classes)]
    mapping: dict[tuple[str, str], str] = {}
    for c, group in enumerate(class_groups):
        mapping[(spec.site, f"subtype {c} variant a")] = group
        mapping[(spec.site, f"subtype {c} variant b")] = group
    for k in range(2):
        mapping[(spec.site, f"rare variant {k}")] = RARE
    return WorldStructure(
        gene_names=gene_names, pathway_map=pathway_map,
        class_prototypes=unit_rows(spec.n_classes),
        background=unit_rows(2),
        risk_prototype=unit_rows(1)[0],
        marker_patterns=marker_patterns, risk_pattern=risk_pattern,
        grouping=SubtypeGrouping(mapping), class_groups=class_groups)


@dataclass
class Patient:
    patient_id: str
    bag: FeatureBag
    expression: ExpressionVector
    record: ClinicalRecord
    clinical: ClinicalFeatures | None = None
    latents: dict[str, float] = field(default_factory=dict)

    def expression_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.expression.values)


@dataclass
class Cohort:
    spec: CohortSpec
    world: WorldStructure
    patients: list[Patient]

    @property
    def site(self) -> str:
        return self.spec.site

    def patient(self, patient_id: str) -> Patient:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def achieved_censoring(self) -> float:
        return float(np.mean([0 if p.record.event else 1 for p in self.patients]))


def _tnm_from_latents(u: float, r: float, risk: float) -> TnmStages:
    def stage(v: float, lo: int, hi: int) -> int:
        cuts = [-0.67, 0.0, 0.67]
        s = lo + sum(v > c for c in cuts)
        return min(s, hi)

    return TnmStages(t=f"T{stage(u, 1, 4)}", n=f"N{stage(r, 0, 3)}",
                     m="M1" if risk > 1.5 else "M0")


def _solve_censor_rate(rates: np.ndarray, target: float) -> float:
    """Administrative-censoring rate matching the expected censored fraction."""
    if target == 0.0:
        return 0.0
    lo, hi = 1e-12, 1e12
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        frac = float(np.mean(mid / (mid + rates)))
        if frac < target:
            lo = mid
        else:
            hi = mid
    return float(np.sqrt(lo * hi))


def extend_grouping(world: WorldStructure, site: str) -> None:
    """Add one site's raw-subtype rows to a shared world's grouping table."""
    for c, group in enumerate(world.class_groups):
        for variant in ("a", "b"):
            world.grouping._mapping[(site, f"subtype {c} variant {variant}")] = group
    for k in range(2):
        world.grouping._mapping[(site, f"rare variant {k}")] = RARE


def generate_cohort(spec: CohortSpec, world: WorldStructure | None = None) -> Cohort:
    """Deterministic cohort; every draw derives from (seed, patient id)."""
    world = build_world(spec) if world is None else world
    extend_grouping(world, spec.site)
    register_site(spec.site, f"synthetic {spec.site} carcinoma")

    ids = [f"{spec.site}-{i:04d}" for i in range(spec.n_patients)]
    latents = []
    for pid in ids:
        rng = np.random.default_rng(stable_stream_seed(spec.seed, pid, "latents"))
        c = int(rng.integers(spec.n_classes))
        rare = bool(rng.random() < spec.rare_fraction)
        v = float(CLASS_SEP_IMG + rng.standard_normal())    # image class loading
        g = float(CLASS_SEP_EXPR + rng.standard_normal())   # expression class loading
        u = float(rng.standard_normal())                    # image risk latent
        r = float(rng.standard_normal())                    # expression risk latent
        c_img = c if rng.random() >= FLIP_RATE_IMG else (c + 1) % spec.n_classes
        c_expr = c if rng.random() >= FLIP_RATE_EXPR else (c + 1) % spec.n_classes
        latents.append((pid, c, c_img, c_expr, rare, v, g, u, r))

    rates = np.array([np.exp(RISK_COEF_EXPR * r + RISK_COEF_IMG * u)
                      / BASE_SURVIVAL_MONTHS
                      for _, _, _, _, _, _, _, u, r in latents])
    censor_rate = _solve_censor_rate(rates, spec.censoring_target)

    patients = []
    for (pid, c, c_img, c_expr, rare, v, g, u, r), rate in zip(latents, rates):
        rng = np.random.default_rng(stable_stream_seed(spec.seed, pid, "draws"))
        n_img = int(rng.integers(spec.n_img_range[0], spec.n_img_range[1] + 1))
        bg_idx = rng.integers(0, world.background.shape[0], size=n_img)
        patches = (world.background[bg_idx]
                   + v * world.class_prototypes[c_img]
                   + IMG_RISK_PATCH_SCALE * u * world.risk_prototype
                   + PATCH_NOISE * rng.standard_normal((n_img, spec.d_img)))
        bag = FeatureBag(patient_id=pid,
                         features=torch.from_numpy(patches.astype(np.float32)),
                         slide_ids=[f"{pid}-s0"])

        expr = rng.lognormal(mean=0.0, sigma=EXPR_LOGNORMAL_SIGMA, size=spec.n_genes)
        expr = expr + g * world.marker_patterns[c_expr] + r * world.risk_pattern
        expression = ExpressionVector(patient_id=pid, values=expr.astype(np.float32))

        survival_t = float(rng.exponential(1.0 / rate))
        if censor_rate > 0.0:
            censor_t = float(rng.exponential(1.0 / censor_rate))
        else:
            censor_t = float("inf")
        event = survival_t <= censor_t
        duration = min(survival_t, censor_t)

        if rare:
            raw = f"rare variant {int(rng.integers(2))}"
        else:
            raw = f"subtype {c} variant {'a' if rng.random() < 0.5 else 'b'}"
        group = world.grouping.resolve(spec.site, raw)
        record = ClinicalRecord(
            patient_id=pid, site=spec.site, subtype_raw=raw,
            subtype_group=None if group == RARE else group,
            survival_months=duration, event=event,
            tnm=_tnm_from_latents(u, r, RISK_COEF_EXPR * r + RISK_COEF_IMG * u))
        patients.append(Patient(patient_id=pid, bag=bag, expression=expression,
                                record=record,
                                latents={"class": c, "class_img": c_img,
                                         "class_expr": c_expr, "v": v, "g": g,
                                         "u": u, "r": r, "rare": float(rare)}))
    return Cohort(spec=spec, world=world, patients=patients)


@dataclass
class CohortSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    strata: dict[str, str]

    def split_of(self, patient_id: str) -> str:
        if patient_id in set(self.train_ids):
            return "train"
        if patient_id in set(self.val_ids):
            return "val"
        return "test"

    def as_dict(self) -> dict[str, str]:
        d = {pid: "train" for pid in self.train_ids}
        d.update({pid: "val" for pid in self.val_ids})
        d.update({pid: "test" for pid in self.test_ids})
        return d


SPLIT_FRACTIONS = (0.68, 0.12, 0.20)


def _apportion(n: int) -> tuple[int, int, int]:
    exact = [n * f for f in SPLIT_FRACTIONS]
    sizes = [int(np.floor(e)) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    for _ in range(n - sum(sizes)):
        k = int(np.argmax(remainders))
        sizes[k] += 1
        remainders[k] = -1.0
    return tuple(sizes)  # type: ignore[return-value]


def split_cohort(patients: list[Patient], seed: int) -> CohortSplit:
    """Stratified 68/12/20 patient split; RARE labels form their own stratum."""
    if len(patients) < 25:
        raise ValueError("need at least 25 patients to split")
    strata: dict[str, list[str]] = {}
    labels: dict[str, str] = {}
    for p in patients:
        label = p.record.subtype_group if p.record.subtype_group is not None else RARE
        strata.setdefault(label, []).append(p.patient_id)
        labels[p.patient_id] = label

    if any(len(ids) < 3 for ids in strata.values()):
        warnings.warn("stratum with fewer than 3 patients; falling back to a global split")
        strata = {"all": [p.patient_id for p in patients]}

    buckets: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for label in sorted(strata):
        ids = sorted(strata[label])
        rng = np.random.default_rng(stable_stream_seed(seed, "split", label))
        order = rng.permutation(len(ids))
        n_train, n_val, n_test = _apportion(len(ids))
        shuffled = [ids[i] for i in order]
        buckets["train"].extend(shuffled[:n_train])
        buckets["val"].extend(shuffled[n_train:n_train + n_val])
        buckets["test"].extend(shuffled[n_train + n_val:])

    # Per-stratum rounding can drift the global totals by a patient or two;
    # move patients from the largest stratum until totals match exactly.
    n = len(patients)
    targets = dict(zip(("train", "val", "test"), _apportion(n)))
    names = ["train", "val", "test"]
    for _ in range(3 * n):
        over = [s for s in names if len(buckets[s]) > targets[s]]
        under = [s for s in names if len(buckets[s]) < targets[s]]
        if not over:
            break
        moved = buckets[over[0]].pop()
        buckets[under[0]].append(moved)
    return CohortSplit(train_ids=sorted(buckets["train"]),
                       val_ids=sorted(buckets["val"]),
                       test_ids=sorted(buckets["test"]), strata=labels)


def finalize_labels(cohort: Cohort, split: CohortSplit,
                    rare_threshold: int = 25,
                    bin_texts: dict[str, str] | None = None) -> tuple[list[str], DurationBins]:
    """Demote under-represented groups, index classes, and fit duration bins.

    Group counts are taken on the training split; duration bins are site
    quartiles of the training durations. Records are updated in place.
    """
    train_set = set(split.train_ids)
    counts: dict[str, int] = {}
    for p in cohort.patients:
        if p.patient_id in train_set and p.record.subtype_group is not None:
            counts[p.record.subtype_group] = counts.get(p.record.subtype_group, 0) + 1
    class_names = sorted(g for g, c in counts.items() if c >= rare_threshold)
    index = {g: i for i, g in enumerate(class_names)}
    for p in cohort.patients:
        group = p.record.subtype_group
        if group is not None and group not in index:
            p.record.subtype_group = None
        p.record.class_index = index.get(group) if group is not None else None

    train_durations = [p.record.survival_months for p in cohort.patients
                       if p.patient_id in train_set]
    bins = DurationBins.from_durations(train_durations, texts=bin_texts)
    for p in cohort.patients:
        p.record.duration_bin = bins.bin_of(p.record.survival_months)
    return class_names, bins


@dataclass
class PreparedCohort:
    cohort: Cohort
    split: CohortSplit
    class_names: list[str]
    bins: DurationBins

    def patients_in(self, part: str) -> list[Patient]:
        ids = {"train": self.split.train_ids, "val": self.split.val_ids,
               "test": self.split.test_ids}[part]
        by_id = {p.patient_id: p for p in self.cohort.patients}
        return [by_id[i] for i in ids]

    def probe_patients(self, part: str) -> tuple[list[Patient], np.ndarray]:
        """Patients with class labels (RARE excluded) plus their labels."""
        kept = [p for p in self.patients_in(part) if p.record.class_index is not None]
        return kept, np.array([p.record.class_index for p in kept])

    def survival_of(self, patients: list[Patient]):
        from .evaluation import SurvivalData

        return SurvivalData(
            durations=np.array([p.record.survival_months for p in patients]),
            events=np.array([int(p.record.event) for p in patients]))


def prepare_cohort(spec: CohortSpec, world: WorldStructure | None = None,
                   rare_threshold: int = 25,
                   bin_texts: dict[str, str] | None = None) -> PreparedCohort:
    cohort = generate_cohort(spec, world)
    split = split_cohort(cohort.patients, seed=spec.seed)
    class_names, bins = finalize_labels(cohort, split, rare_threshold, bin_texts)
    return PreparedCohort(cohort=cohort, split=split,
                          class_names=class_names, bins=bins)


def pool_pan_cancer(prepared: list[PreparedCohort], seed: int) -> list[Patient]:
    """Union of training splits across sites in one seeded interleave."""
    if len(prepared) < 2:
        raise ValueError("pan-cancer pooling needs at least two cohorts")
    seen: set[str] = set()
    pooled: list[Patient] = []
    for pc in prepared:
        for p in pc.patients_in("train"):
            if p.patient_id in seen:
                raise ValueError(f"duplicate patient id across sites: {p.patient_id}")
            seen.add(p.patient_id)
            pooled.append(p)
    rng = np.random.default_rng(stable_stream_seed(seed, "pan-cancer-interleave"))
    order = rng.permutation(len(pooled))
    return [pooled[int(i)] for i in order]


def ood_protocol(adapter, frozen, prepared: PreparedCohort,
                 seen_patient_ids: set[str] | None = None,
                 seed: int = 0) -> dict[str, float]:
    """Frozen-model evaluation on an unseen cohort: probe + CPH, no tuning."""
    from .evaluation import (balanced_accuracy, concordance_index, extract_features,
                             fit_cph, fit_linear_probe, predict_probe, risk_scores)

    if seen_patient_ids is not None:
        overlap = seen_patient_ids & {p.patient_id for p in prepared.cohort.patients}
        if overlap:
            raise ValueError(f"OOD cohort overlaps training patients: {sorted(overlap)[:3]}")
    from .evaluation import FeatureScaler

    train_all = prepared.patients_in("train")
    test_all = prepared.patients_in("test")
    x_train_all = extract_features(adapter, frozen, train_all).x
    x_test_all = extract_features(adapter, frozen, test_all).x
    scaler = FeatureScaler.fit(x_train_all)
    x_train_all = scaler.apply(x_train_all)
    x_test_all = scaler.apply(x_test_all)
    by_id = {p.patient_id: x for p, x in
             zip(train_all + test_all, np.concatenate([x_train_all, x_test_all]))}

    train_p, train_y = prepared.probe_patients("train")
    test_p, test_y = prepared.probe_patients("test")
    clf = fit_linear_probe(np.stack([by_id[p.patient_id] for p in train_p]),
                           train_y, seed=seed)
    ba = balanced_accuracy(
        test_y, predict_probe(clf, np.stack([by_id[p.patient_id] for p in test_p])))
    majority = np.bincount(train_y).argmax()
    majority_ba = balanced_accuracy(test_y, np.full_like(test_y, majority))

    beta = fit_cph(x_train_all, prepared.survival_of(train_all))
    ci = concordance_index(risk_scores(x_test_all, beta),
                           prepared.survival_of(test_all))
    return {"balanced_accuracy": ba, "majority_balanced_accuracy": majority_ba,
            "c_index": ci}


def modality_complementarity(prepared: PreparedCohort, seed: int = 0,
                             probe_c: float = 10.0) -> dict[str, float]:
    """Oracle probes on raw inputs: expression, mean patch features, both.

    The self-test probe is lightly regularized (C=10): with heavier shrinkage
    the combined probe cannot exploit the cross-channel flip correction that
    the planted construction provides.
    """
    from .evaluation import (FeatureScaler, balanced_accuracy, fit_linear_probe,
                             predict_probe)

    train_p, train_y = prepared.probe_patients("train")
    test_p, test_y = prepared.probe_patients("test")

    def mats(patients):
        expr = np.stack([p.expression.values for p in patients])
        img = np.stack([p.bag.features.numpy().mean(axis=0) for p in patients])
        return expr, img, np.concatenate([expr, img], axis=1)

    tr_e, tr_i, tr_c = mats(train_p)
    te_e, te_i, te_c = mats(test_p)
    out = {}
    for name, tr, te in (("expression", tr_e, te_e), ("image", tr_i, te_i),
                         ("concat", tr_c, te_c)):
        scaler = FeatureScaler.fit(tr)
        clf = fit_linear_probe(scaler.apply(tr), train_y, seed=seed, c=probe_c)
        out[name] = balanced_accuracy(test_y, predict_probe(clf, scaler.apply(te)))
    return out
