"""Downstream evaluation: probing, survival statistics, attribution.

Features are extracted with the general task prompt; linear probing and a
penalized Cox model score them. The survival metrics (C-index, Kaplan-Meier,
log-rank) are written to match exhaustive pair/event-table definitions.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import chi2
from sklearn.linear_model import LogisticRegression

from .modal_adapter import ModalAdapter
from .slide_encoder import FrozenEncoder
from .text_targets import GENERAL_TASK


class DegenerateTaskError(ValueError):
    """A probe target with fewer than two classes."""


class ConvergenceError(RuntimeError):
    """Newton iteration failed to reach the gradient tolerance."""


class UndefinedMetricError(ValueError):
    """A metric with an empty denominator (e.g. no comparable pairs)."""


@dataclass
class FeatureMatrix:
    patient_ids: list[str]
    x: np.ndarray  # (n, d)
    splits: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.shape[0] != len(self.patient_ids):
            raise ValueError("feature rows do not align with patient ids")
        if not np.isfinite(self.x).all():
            raise ValueError("non-finite features")


@dataclass
class SurvivalData:
    durations: np.ndarray
    events: np.ndarray  # 1 = event observed, 0 = censored

    def __post_init__(self) -> None:
        self.durations = np.asarray(self.durations, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=np.int64)
        if self.durations.shape != self.events.shape:
            raise ValueError("durations/events length mismatch")
        if (self.durations < 0).any():
            raise ValueError("durations must be nonnegative")

    def __len__(self) -> int:
        return len(self.durations)

    def subset(self, mask: np.ndarray) -> "SurvivalData":
        mask = np.asarray(mask, dtype=bool)
        return SurvivalData(self.durations[mask], self.events[mask])


def extract_features(adapter: ModalAdapter, frozen: FrozenEncoder, patients,
                     task_idx: int = GENERAL_TASK,
                     splits: dict[str, str] | None = None) -> FeatureMatrix:
    """Eval-mode z_comb for each patient using the given task prompt."""
    ids, rows, split_labels = [], [], []
    with torch.no_grad():
        for p in patients:
            out = adapter(p.bag, task_idx, frozen,
                          expression=p.expression_tensor(), clinical=p.clinical)
            ids.append(p.patient_id)
            rows.append(out.z_comb.numpy().astype(np.float64))
            split_labels.append("" if splits is None else splits.get(p.patient_id, ""))
    return FeatureMatrix(patient_ids=ids, x=np.stack(rows), splits=split_labels)


@dataclass
class FeatureScaler:
    """Per-dimension z-scoring fit on training features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "FeatureScaler":
        x = np.asarray(x, dtype=np.float64)
        return cls(mean=x.mean(axis=0), std=x.std(axis=0) + 1e-12)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_linear_probe(x: np.ndarray, labels: np.ndarray, c: float = 1.0,
                     max_iter: int = 200, seed: int = 0) -> LogisticRegression:
    """L2-regularized multinomial logistic regression on frozen features."""
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise DegenerateTaskError("linear probe needs at least two classes")
    clf = LogisticRegression(C=c, max_iter=max_iter, solver="lbfgs",
                             random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # lbfgs convergence chatter at max_iter
        clf.fit(x, labels)
    return clf


def predict_probe(clf: LogisticRegression, x: np.ndarray) -> np.ndarray:
    return clf.predict(x)


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean of per-class recalls over the classes present in y_true."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true/y_pred length mismatch")
    extra = set(np.unique(y_pred)) - set(np.unique(y_true))
    if extra:
        warnings.warn(f"classes {sorted(extra)} absent from y_true are excluded")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def _penalized_ll(x: np.ndarray, surv: SurvivalData, beta: np.ndarray,
                  penalizer: float) -> float:
    eta = x @ beta
    ll = 0.0
    for i in np.where(surv.events == 1)[0]:
        at_risk = surv.durations >= surv.durations[i]
        m = eta[at_risk].max()
        ll += eta[i] - (m + np.log(np.exp(eta[at_risk] - m).sum()))
    return ll - penalizer * float(beta @ beta)


def cph_gradient(x: np.ndarray, surv: SurvivalData, beta: np.ndarray,
                 penalizer: float) -> np.ndarray:
    """Gradient of the penalized Breslow partial log-likelihood."""
    eta = x @ beta
    g = np.zeros_like(beta)
    for i in np.where(surv.events == 1)[0]:
        at_risk = surv.durations >= surv.durations[i]
        w = np.exp(eta[at_risk] - eta[at_risk].max())
        w /= w.sum()
        g += x[i] - w @ x[at_risk]
    return g - 2.0 * penalizer * beta


def _cph_hessian(x: np.ndarray, surv: SurvivalData, beta: np.ndarray,
                 penalizer: float) -> np.ndarray:
    eta = x @ beta
    d = x.shape[1]
    h = np.zeros((d, d))
    for i in np.where(surv.events == 1)[0]:
        at_risk = surv.durations >= surv.durations[i]
        w = np.exp(eta[at_risk] - eta[at_risk].max())
        w /= w.sum()
        xr = x[at_risk]
        mu = w @ xr
        h -= (xr * w[:, None]).T @ xr - np.outer(mu, mu)
    return h - 2.0 * penalizer * np.eye(d)


def fit_cph(x: np.ndarray, surv: SurvivalData, penalizer: float = 0.1,
            max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Newton maximization of the penalized Breslow partial log-likelihood."""
    x = np.asarray(x, dtype=np.float64)
    if surv.events.sum() < 1:
        raise ValueError("CPH requires at least one observed event")
    if penalizer <= 0:
        raise ValueError("penalizer must be > 0 (keeps the Hessian invertible)")
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        g = cph_gradient(x, surv, beta, penalizer)
        if np.linalg.norm(g) < tol:
            return beta
        step = np.linalg.solve(_cph_hessian(x, surv, beta, penalizer), -g)
        ll = _penalized_ll(x, surv, beta, penalizer)
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            if _penalized_ll(x, surv, cand, penalizer) > ll - 1e-12:
                beta = cand
                break
            scale *= 0.5
        else:
            raise ConvergenceError("CPH step-halving failed to improve the objective")
    if np.linalg.norm(cph_gradient(x, surv, beta, penalizer)) < tol:
        return beta
    raise ConvergenceError(f"CPH Newton did not converge in {max_iter} iterations")


def risk_scores(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Log-hazard risk: higher x @ beta means higher risk."""
    return np.asarray(x, dtype=np.float64) @ beta


def concordance_index(risk, surv: SurvivalData) -> float:
    """Fraction of comparable pairs ordered correctly; risk ties count 0.5.

    A pair is comparable iff the strictly earlier time is an observed event.
    """
    risk = np.asarray(risk, dtype=np.float64)
    if risk.shape[0] != len(surv):
        raise ValueError("risk/survival length mismatch")
    t, e = surv.durations, surv.events
    earlier = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    n_comparable = earlier.sum()
    if n_comparable == 0:
        raise UndefinedMetricError("no comparable pairs for the C-index")
    higher = risk[:, None] > risk[None, :]
    tied = risk[:, None] == risk[None, :]
    score = (earlier & higher).sum() + 0.5 * (earlier & tied).sum()
    return float(score / n_comparable)


@dataclass
class KaplanMeierCurve:
    times: np.ndarray      # event times (0 prepended)
    survival: np.ndarray   # S(t) right after each time
    at_risk: np.ndarray
    events: np.ndarray


def kaplan_meier(surv: SurvivalData, mask: np.ndarray | None = None) -> KaplanMeierCurve:
    """Product-limit survival estimate for one group."""
    data = surv if mask is None else surv.subset(mask)
    if len(data) == 0:
        raise ValueError("empty group for Kaplan-Meier")
    times = [0.0]
    probs = [1.0]
    at_risk = [len(data)]
    events = [0]
    s = 1.0
    for t in np.unique(data.durations[data.events == 1]):
        n_t = int((data.durations >= t).sum())
        d_t = int(((data.durations == t) & (data.events == 1)).sum())
        s *= 1.0 - d_t / n_t
        times.append(float(t))
        probs.append(s)
        at_risk.append(n_t)
        events.append(d_t)
    return KaplanMeierCurve(np.array(times), np.array(probs),
                            np.array(at_risk), np.array(events))


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    zero_event_group: bool  # flagged when either group has no events


def log_rank(surv: SurvivalData, group_mask: np.ndarray) -> LogRankResult:
    """Two-group log-rank test (chi-square, 1 dof, standard variance)."""
    group_mask = np.asarray(group_mask, dtype=bool)
    if group_mask.all() or (~group_mask).all():
        raise ValueError("log-rank needs two nonempty groups")
    t, e = surv.durations, surv.events
    observed1 = 0.0
    expected1 = 0.0
    variance = 0.0
    for time in np.unique(t[e == 1]):
        at_risk = t >= time
        n_t = at_risk.sum()
        n1_t = (at_risk & group_mask).sum()
        d_t = ((t == time) & (e == 1)).sum()
        d1_t = ((t == time) & (e == 1) & group_mask).sum()
        observed1 += d1_t
        expected1 += d_t * n1_t / n_t
        if n_t > 1:
            variance += d_t * (n1_t / n_t) * (1 - n1_t / n_t) * (n_t - d_t) / (n_t - 1)
    flag = bool(e[group_mask].sum() == 0 or e[~group_mask].sum() == 0)
    if variance == 0.0:
        return LogRankResult(statistic=0.0, p_value=1.0, zero_event_group=flag)
    stat = (observed1 - expected1) ** 2 / variance
    return LogRankResult(statistic=float(stat), p_value=float(chi2.sf(stat, df=1)),
                         zero_event_group=flag)


def median_risk_groups(risk: np.ndarray) -> np.ndarray:
    """High-risk mask from the median split; ties go to the low-risk group."""
    risk = np.asarray(risk, dtype=np.float64)
    return risk > np.median(risk)


def integrated_gradients(f, x: torch.Tensor, baseline: torch.Tensor,
                         steps: int = 256) -> tuple[torch.Tensor, float]:
    """Midpoint-rule path integral of grad f from baseline to x.

    Returns elementwise attributions and the readout delta f(x) - f(baseline).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    diff = x - baseline
    acc = torch.zeros_like(x)
    for k in range(steps):
        point = (baseline + (k + 0.5) / steps * diff).detach().requires_grad_(True)
        value = f(point)
        grad, = torch.autograd.grad(value, point)
        acc += grad
    attributions = diff * acc / steps
    with torch.no_grad():
        delta = float(f(x)) - float(f(baseline))
    return attributions.detach(), delta


def pathway_attributions(adapter: ModalAdapter, frozen: FrozenEncoder, patient,
                         beta: np.ndarray, steps: int = 256,
                         task_idx: int = GENERAL_TASK) -> tuple[np.ndarray, float]:
    """Per-pathway-token attribution of the CPH risk score.

    The path runs from zeroed compressed pathway tokens to the patient's
    tokens; attributions are summed over the feature axis.
    """
    with torch.no_grad():
        tokens = adapter.modal_tokens_for(patient.expression_tensor(),
                                          patient.clinical, rng=None)
    beta_t = torch.as_tensor(beta, dtype=torch.float32)

    def risk_of(modal_tokens: torch.Tensor) -> torch.Tensor:
        out = adapter(patient.bag, task_idx, frozen,
                      modal_tokens_override=modal_tokens)
        return out.z_comb @ beta_t

    attr, delta = integrated_gradients(risk_of, tokens, torch.zeros_like(tokens),
                                       steps=steps)
    return attr.sum(dim=1).numpy(), delta


def attention_maps(adapter: ModalAdapter, frozen: FrozenEncoder,
                   patient) -> tuple[dict[str, np.ndarray], dict[int, dict]]:
    """Named interpretability maps, rows renormalized over patch positions.

    Emits (a) final-layer CLS->patch self-attention per head, (b) injector
    patch->pathway cross-attention averaged over heads and pathway tokens,
    and (c) patch->task-prompt cross-attention per task. Also returns the
    raw per-task traces.
    """
    traces: dict[int, dict] = {}
    maps: dict[str, np.ndarray] = {}
    expr = patient.expression_tensor()
    with torch.no_grad():
        for j in range(1, adapter.cfg.n_tasks + 1):
            trace: dict = {}
            adapter(patient.bag, j, frozen, expression=expr,
                    clinical=patient.clinical, trace=trace)
            traces[j] = trace

    def renorm(v: np.ndarray) -> np.ndarray:
        return v / v.sum(axis=-1, keepdims=True)

    general = traces[GENERAL_TASK]
    last_layer = max(general["encoder_self_attention"])
    self_w = general["encoder_self_attention"][last_layer].numpy()  # (h, N, N)
    maps["cls_to_patch_self_attention"] = renorm(self_w[:, 0, 1:])

    last_block = max(general["injector"])
    inj = general["injector"][last_block].numpy()  # (h, N_img+1, N_modal+1)
    n_modal = inj.shape[2] - 1
    patch_to_pathway = inj[:, 1:, :n_modal].mean(axis=(0, 2))  # avg heads + pathway keys
    maps["patch_to_pathway_cross_attention"] = renorm(patch_to_pathway[None, :])[0]

    for j, trace in traces.items():
        inj_j = trace["injector"][last_block].numpy()
        to_prompt = inj_j[:, 1:, -1].mean(axis=0)
        maps[f"patch_to_task_prompt_task{j}"] = renorm(to_prompt[None, :])[0]
    return maps, traces
