"""Clinical-record prompts, text encoding, and the fixed random projector.

Records become one general and two task-specific natural-language prompts.
A pluggable text encoder (deterministic token-hash stub by default) embeds
them, and a frozen random projection maps them to the model's output width.
"""
from __future__ import annotations

import hashlib
import json
import re
import subprocess
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from torch import nn

RARE = "RARE"

GENERAL_TASK = 1
SURVIVAL_TASK = 2
SUBTYPE_TASK = 3

SITE_PHRASES = {
    "BRCA": "breast invasive carcinoma",
    "GBMLGG": "brain glioma",
    "NSCLC": "non-small cell lung carcinoma",
    "RCC": "renal cell carcinoma",
    "COADREAD": "colorectal adenocarcinoma",
    "BLCA": "bladder urothelial carcinoma",
}


def register_site(code: str, phrase: str) -> None:
    SITE_PHRASES[code] = phrase


@dataclass
class TnmStages:
    t: str | None = None
    n: str | None = None
    m: str | None = None

    def present(self) -> list[str]:
        return [s for s in (self.t, self.n, self.m) if s]


@dataclass
class ClinicalRecord:
    patient_id: str
    site: str
    subtype_raw: str
    subtype_group: str | None  # merged group name; None once demoted to RARE
    survival_months: float
    event: bool  # True = event observed, False = censored
    tnm: TnmStages | None = None
    duration_bin: int | None = None
    class_index: int | None = None  # None for RARE records

    @property
    def is_rare(self) -> bool:
        return self.subtype_group is None

    @property
    def subtype_text(self) -> str:
        return self.subtype_raw if self.subtype_group is None else self.subtype_group


class DegenerateBinsError(ValueError):
    """Raised when the training durations cannot form four usable bins."""


def _fmt_months(x: float) -> str:
    return str(int(round(x))) if abs(x - round(x)) < 1e-9 else f"{x:g}"


DEFAULT_BIN_TEXTS = {
    "first_bin": "before {hi} months",
    "bin": "between {lo} and {hi} months",
    "censored": "The patient was censored {bin}",
    "event": "The patient died {bin}",
}


def load_bin_texts(path) -> dict[str, str]:
    with open(path) as fh:
        texts = json.load(fh)
    merged = dict(DEFAULT_BIN_TEXTS)
    merged.update(texts)
    return merged


@dataclass(frozen=True)
class DurationBins:
    """Quartile bin edges fit on the training split of one site."""

    edges: tuple[float, float, float]
    d_max: float
    texts: tuple[tuple[str, str], ...] = tuple(sorted(DEFAULT_BIN_TEXTS.items()))

    @classmethod
    def from_durations(cls, durations, texts: dict[str, str] | None = None) -> "DurationBins":
        d = sorted(float(x) for x in durations)
        if len(d) < 4:
            raise DegenerateBinsError("need at least 4 patients to form duration bins")
        if len(set(d)) < 4:
            raise DegenerateBinsError("fewer than 4 distinct durations")
        n = len(d)
        edges = tuple(d[-(-n * k // 4) - 1] for k in (1, 2, 3))  # ceil(n*k/4) - 1
        if not edges[0] < edges[1] < edges[2] < d[-1]:
            raise DegenerateBinsError(f"degenerate quartile edges {edges}")
        t = dict(DEFAULT_BIN_TEXTS) if texts is None else {**DEFAULT_BIN_TEXTS, **texts}
        return cls(edges=edges, d_max=d[-1], texts=tuple(sorted(t.items())))

    def bin_of(self, duration: float) -> int:
        for b, edge in enumerate(self.edges):
            if duration <= edge:
                return b
        return 3

    def phrase(self, b: int) -> str:
        texts = dict(self.texts)
        if b == 0:
            return texts["first_bin"].format(hi=_fmt_months(self.edges[0]))
        lo = self.edges[b - 1]
        hi = self.edges[b] if b < 3 else self.d_max
        return texts["bin"].format(lo=_fmt_months(lo), hi=_fmt_months(hi))

    def status_phrase(self, record: ClinicalRecord) -> str:
        texts = dict(self.texts)
        b = self.bin_of(record.survival_months)
        key = "event" if record.event else "censored"
        return texts[key].format(bin=self.phrase(b))


_TNM_RE = re.compile(r"^([TNM])(\d)([a-d])?$", re.IGNORECASE)
_TNM_MAX = {"T": 4, "N": 3, "M": 1}


def tnm_to_text(stage: str) -> str:
    """Natural-language phrase for one TNM stage code; sub-letters are dropped."""
    m = _TNM_RE.match(stage.strip())
    if not m:
        raise ValueError(f"unparseable TNM stage {stage!r}")
    letter, num = m.group(1).upper(), int(m.group(2))
    if num > _TNM_MAX[letter]:
        raise ValueError(f"TNM stage {stage!r} outside grammar ({letter}0..{letter}{_TNM_MAX[letter]})")
    if letter == "T":
        return f"tumor stage {num}"
    if letter == "N":
        if num == 0:
            return "cancer has not spread to lymph nodes"
        return f"cancer has spread to lymph nodes, node stage {num}"
    if num == 0:
        return "no distant metastasis found"
    return "distant metastasis found"


def _site_phrase(site: str) -> str:
    if site not in SITE_PHRASES:
        raise ValueError(f"unknown cancer site {site!r}")
    return SITE_PHRASES[site]


def _stage_clause(record: ClinicalRecord) -> str:
    if record.tnm is None:
        return ""
    parts = [tnm_to_text(s) for s in record.tnm.present()]
    if not parts:
        return ""
    return ", ".join(parts) + "."


def build_prompts(record: ClinicalRecord, bins: DurationBins) -> list[str]:
    """One prompt per task: [general, survival, subtype]."""
    site = _site_phrase(record.site)
    subtype_clause = f"Diagnosis: {record.subtype_text}."
    stage_clause = _stage_clause(record)
    status_clause = bins.status_phrase(record) + "."

    survival_parts = [f"{site}."]
    if stage_clause:
        survival_parts.append(stage_clause)
    survival_parts.append(status_clause)

    general_parts = [f"{site}.", subtype_clause]
    if stage_clause:
        general_parts.append(stage_clause)
    general_parts.append(status_clause)

    subtype_prompt = f"{site}. {subtype_clause}"
    return [" ".join(general_parts), " ".join(survival_parts), subtype_prompt]


class TextEncoder(Protocol):
    dim: int

    def encode(self, prompt: str) -> np.ndarray: ...


def _token_seed(token: str) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class StubTextEncoder:
    """Deterministic bag-of-token-hash embeddings.

    Each whitespace token maps to a fixed unit Gaussian vector seeded by a
    stable hash of the token; a prompt embeds as the normalized sum, so
    prompts sharing tokens land closer than disjoint ones.
    """

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(_token_seed(token))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def encode(self, prompt: str) -> np.ndarray:
        tokens = prompt.split()
        if not tokens:
            raise ValueError("cannot encode an empty prompt")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm == 0:
            raise ValueError("degenerate prompt embedding (zero norm)")
        return (acc / norm).astype(np.float32)


class ExternalTextEncoder:
    """Line-protocol adapter: prompt line to stdin, float vector line from stdout."""

    def __init__(self, command: list[str], dim: int) -> None:
        self.dim = dim
        self._proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE, text=True)

    def encode(self, prompt: str) -> np.ndarray:
        if "\n" in prompt:
            raise ValueError("prompts must be single-line for the stream protocol")
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(prompt + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("external text encoder closed its stream")
        vec = np.array([float(x) for x in line.split()], dtype=np.float32)
        if vec.shape[0] != self.dim:
            raise RuntimeError(f"external encoder returned {vec.shape[0]} dims, expected {self.dim}")
        return vec

    def close(self) -> None:
        if self._proc.stdin is not None:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


PROJECTOR_MODES = ("text_fixed", "none", "model_side", "text_trainable")


class Projector(nn.Module):
    """Random linear map from text space to the model output space.

    Entries are i.i.d. zero-mean Gaussian with variance 1/d_out and there is
    no bias, so pairwise distances are preserved in expectation. The default
    mode keeps it frozen on the text side; `text_trainable` is implemented
    but known-degenerate (training it collapses the alignment targets).
    """

    def __init__(self, d_text: int, d_final: int, seed: int,
                 mode: str = "text_fixed") -> None:
        super().__init__()
        if mode not in PROJECTOR_MODES:
            raise ValueError(f"unknown projector mode {mode!r}")
        self.mode = mode
        self.d_text = d_text
        gen = torch.Generator().manual_seed(seed)
        if mode in ("text_fixed", "text_trainable"):
            w = torch.randn(d_final, d_text, generator=gen) / d_final ** 0.5
            self.weight = nn.Parameter(w, requires_grad=(mode == "text_trainable"))
            self.d_out = d_final
        else:
            self.weight = None
            self.d_out = d_text

    def project(self, raw: np.ndarray | torch.Tensor) -> torch.Tensor:
        vec = torch.as_tensor(raw, dtype=torch.float32)
        if self.weight is None:
            return vec
        if self.mode == "text_fixed":
            with torch.no_grad():
                return self.weight @ vec
        return self.weight @ vec

    def digest(self) -> str:
        h = hashlib.sha256()
        if self.weight is not None:
            h.update(self.weight.detach().numpy().tobytes())
        return h.hexdigest()


@dataclass
class TextTargetSet:
    """Per-task prompts plus raw and projected embeddings for one record."""

    prompts: list[str]
    raw: np.ndarray       # (T, D_text)
    projected: torch.Tensor  # (T, d_out) — detached unless projector is trainable

    @property
    def n_tasks(self) -> int:
        return len(self.prompts)


def build_text_targets(record: ClinicalRecord, bins: DurationBins,
                       encoder: TextEncoder, projector: Projector) -> TextTargetSet:
    prompts = build_prompts(record, bins)
    raw = np.stack([encoder.encode(p) for p in prompts])
    projected = torch.stack([projector.project(r) for r in raw])
    return TextTargetSet(prompts=prompts, raw=raw, projected=projected)


class SubtypeGrouping:
    """Site-scoped mapping from raw subtype labels to merged group names."""

    def __init__(self, mapping: dict[tuple[str, str], str]) -> None:
        self._mapping = {(s, r.lower()): g for (s, r), g in mapping.items()}

    @classmethod
    def from_csv(cls, path) -> "SubtypeGrouping":
        import csv

        mapping: dict[tuple[str, str], str] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = ["site", "raw_subtype", "class_or_RARE"]
            if reader.fieldnames != expected:
                raise ValueError(f"grouping header must be {expected}, got {reader.fieldnames}")
            for row in reader:
                mapping[(row["site"], row["raw_subtype"])] = row["class_or_RARE"]
        return cls(mapping)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["site", "raw_subtype", "class_or_RARE"])
            for (site, raw), group in sorted(self._mapping.items()):
                writer.writerow([site, raw, group])

    def resolve(self, site: str, raw: str) -> str:
        key = (site, raw.lower())
        if key not in self._mapping:
            raise ValueError(f"subtype {raw!r} for site {site!r} absent from grouping table")
        return self._mapping[key]


def group_subtypes(raw: str, site: str, grouping: SubtypeGrouping,
                   train_group_counts: dict[str, int],
                   rare_threshold: int = 25) -> str:
    """Resolve a raw label to its group, demoting under-represented groups."""
    group = grouping.resolve(site, raw)
    if group == RARE:
        return RARE
    if train_group_counts.get(group, 0) < rare_threshold:
        return RARE
    return group


def probe_text_embeddings(embeddings: np.ndarray, records: list[ClinicalRecord],
                          task: str, train_mask: np.ndarray,
                          seed: int = 0) -> float:
    """Sanity probe fit directly on text embeddings.

    task "subtype": balanced accuracy of a linear classifier on non-RARE
    records; task "duration_bin": same over the four duration bins; task
    "survival": C-index of a penalized Cox fit.
    """
    from .evaluation import (SurvivalData, balanced_accuracy, concordance_index,
                             fit_cph, fit_linear_probe, predict_probe, risk_scores)

    train_mask = np.asarray(train_mask, dtype=bool)
    test_mask = ~train_mask
    if task == "survival":
        surv_train = SurvivalData(
            durations=np.array([r.survival_months for r, m in zip(records, train_mask) if m]),
            events=np.array([int(r.event) for r, m in zip(records, train_mask) if m]))
        surv_test = SurvivalData(
            durations=np.array([r.survival_months for r, m in zip(records, test_mask) if m]),
            events=np.array([int(r.event) for r, m in zip(records, test_mask) if m]))
        beta = fit_cph(embeddings[train_mask], surv_train)
        return concordance_index(risk_scores(embeddings[test_mask], beta), surv_test)

    if task == "subtype":
        labels = np.array([-1 if r.class_index is None else r.class_index for r in records])
        keep = labels >= 0
    elif task == "duration_bin":
        labels = np.array([-1 if r.duration_bin is None else r.duration_bin for r in records])
        keep = labels >= 0
    else:
        raise ValueError(f"unknown probe task {task!r}")
    fit = keep & train_mask
    hold = keep & test_mask
    clf = fit_linear_probe(embeddings[fit], labels[fit], seed=seed)
    return balanced_accuracy(labels[hold], predict_probe(clf, embeddings[hold]))
