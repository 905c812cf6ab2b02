"""Verification and identification metrics, plus fusion baselines.

Verification sweeps every distinct score as a threshold with FAR(t) =
P(impostor >= t) and FRR(t) = P(genuine < t); EER and TAR@FAR are linearly
interpolated in ROC space and AUC is the trapezoid area. Identification
ranks gallery classes by cosine similarity (ties broken toward the lower
class index). The matching score is cosine similarity of embeddings,
consistent with the angular training objective.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import fusion as fu

DEFAULT_TAR_FARS = (1e-1, 1e-2, 1e-3, 1e-4)


class MetricError(Exception):
    pass


def similarity(a, b):
    """Cosine similarity of two nonzero vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise MetricError("similarity: zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class RocResult:
    roc: np.ndarray          # (n, 2) rows of (FAR, TAR), sweep order
    auc: float
    eer: float
    tar_at: dict             # FAR value -> interpolated TAR


def roc_metrics(genuine, impostor, tar_fars=DEFAULT_TAR_FARS):
    """Threshold-sweep ROC with AUC, EER, and a TAR@FAR table."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise MetricError("roc_metrics needs both genuine and impostor scores")

    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    far = [0.0]  # sentinel threshold above the maximum score
    tar = [0.0]
    for t in thresholds:
        far.append(float(np.mean(impostor >= t)))
        tar.append(float(np.mean(genuine >= t)))
    far = np.array(far)
    tar = np.array(tar)
    frr = 1.0 - tar

    auc = float(np.sum(0.5 * (tar[1:] + tar[:-1]) * (far[1:] - far[:-1])))

    # EER: first sign change of (FAR - FRR) along the sweep
    diff = far - frr
    eer = None
    for i in range(len(diff)):
        if diff[i] == 0.0:
            eer = float(far[i])
            break
        if i > 0 and diff[i - 1] < 0.0 < diff[i]:
            lam = -diff[i - 1] / (diff[i] - diff[i - 1])
            eer = float(far[i - 1] + lam * (far[i] - far[i - 1]))
            break
    if eer is None:  # diff is monotone from -1 to +1, so this is unreachable
        eer = 0.5

    # TAR@FAR on the upper envelope (max TAR per distinct FAR)
    env_far, env_tar = [], []
    for f, t in zip(far, tar):
        if env_far and f == env_far[-1]:
            env_tar[-1] = max(env_tar[-1], t)
        else:
            env_far.append(f)
            env_tar.append(t)
    tar_at = {f: float(np.interp(f, env_far, env_tar)) for f in tar_fars}

    return RocResult(roc=np.column_stack([far, tar]), auc=auc, eer=eer,
                     tar_at=tar_at)


def rank_classes(probe_embedding, class_representatives):
    """Gallery classes sorted by descending similarity, ties to lower id."""
    sims = [(-similarity(probe_embedding, rep), label)
            for label, rep in class_representatives.items()]
    return [label for _, label in sorted(sims)]


def cmc(rankings, true_classes, max_rank=None):
    """CMC(k): fraction of probes whose true class is within the top k."""
    if len(rankings) != len(true_classes):
        raise MetricError("cmc: rankings and labels differ in length")
    n_classes = len(rankings[0])
    max_rank = max_rank or n_classes
    hits = np.zeros(max_rank)
    for ranked, true in zip(rankings, true_classes):
        if true not in ranked:
            raise MetricError(f"cmc: probe class {true} not in the ranking")
        r = ranked.index(true)  # 0-based rank
        if r < max_rank:
            hits[r:] += 1.0
    return hits / len(rankings)


def quality_expectation(outputs):
    """Mean normalized inter-modality quality over eval-mode forwards."""
    if not outputs:
        raise MetricError("quality_expectation: no forward outputs")
    w = np.array([fo.inter_weights.value for fo in outputs])
    return w.mean(axis=0)


def _average_ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def quality_correlation(estimates, truths):
    """Spearman rank correlation with average-rank tie handling."""
    estimates = np.asarray(estimates, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if estimates.shape != truths.shape or estimates.ndim != 1:
        raise MetricError("quality_correlation: need matching 1-D inputs")
    if estimates.size < 3:
        raise MetricError("quality_correlation: need at least 3 pairs")
    if np.all(estimates == estimates[0]) or np.all(truths == truths[0]):
        raise MetricError("quality_correlation: constant input, undefined")
    ra = _average_ranks(estimates)
    rb = _average_ranks(truths)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))


# --- model-facing evaluation ---------------------------------------------------

def embed_sets(model, sets, force_uniform=False):
    """Eval-mode forwards for a list of sample sets."""
    return [fu.model_forward(model, s, force_uniform=force_uniform)
            for s in sets]


def _pair_scores_multimodal(model, pairs, force_uniform=False):
    genuine, impostor = [], []
    cache = {}

    def z_of(sset):
        key = id(sset)
        if key not in cache:
            cache[key] = fu.model_forward(
                model, sset, force_uniform=force_uniform).z.value
        return cache[key]

    for a, b, is_genuine in pairs:
        s = similarity(z_of(a), z_of(b))
        (genuine if is_genuine else impostor).append(s)
    return np.array(genuine), np.array(impostor)


def _pair_scores_per_modality(model, pairs):
    """(n_pairs, K) unimodal cosine scores plus the genuine flags."""
    cache = {}

    def y_of(sset):
        key = id(sset)
        if key not in cache:
            out = fu.model_forward(model, sset)
            cache[key] = [y.value for y in out.y]
        return cache[key]

    scores, flags = [], []
    for a, b, is_genuine in pairs:
        ya, yb = y_of(a), y_of(b)
        scores.append([similarity(u, v) for u, v in zip(ya, yb)])
        flags.append(is_genuine)
    return np.array(scores), np.array(flags, dtype=bool)


def baseline_sum(per_modality_scores):
    """Score-level fusion: mean of the per-modality similarity scores."""
    scores = np.asarray(per_modality_scores, dtype=np.float64)
    if scores.ndim != 2:
        raise MetricError("baseline_sum: need (trials, modalities) scores")
    return scores.mean(axis=1)


def baseline_major_decisions(decision_lists):
    """Majority vote over per-modality class decisions, ties to lowest."""
    out = []
    for votes in decision_lists:
        counts = {}
        for v in votes:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        out.append(min(c for c, n in counts.items() if n == best))
    return out


def baseline_major_verification(per_modality_scores, flags):
    """Decision-level verification fusion.

    Each modality votes accept/reject at its own EER threshold
    (self-calibrated on the evaluated pairs); the fused score is the accept
    fraction, so a tie sits on the reject side of a strict-majority
    threshold. With a single modality this degenerates to the raw scores.
    """
    scores = np.asarray(per_modality_scores, dtype=np.float64)
    k = scores.shape[1]
    if k == 1:
        return scores[:, 0].copy()
    votes = np.zeros(scores.shape)
    for m in range(k):
        gen = scores[flags, m]
        imp = scores[~flags, m]
        thr = _eer_threshold(gen, imp)
        votes[:, m] = scores[:, m] >= thr
    return votes.mean(axis=1)


def _eer_threshold(genuine, impostor):
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    best, best_gap = thresholds[0], np.inf
    for t in thresholds:
        gap = abs(np.mean(impostor >= t) - np.mean(genuine < t))
        if gap < best_gap:
            best, best_gap = t, gap
    return best


def verification_scores(model, pairs, fusion="quality"):
    """Genuine/impostor score arrays for one fusion strategy."""
    if fusion == "quality":
        return _pair_scores_multimodal(model, pairs)
    if fusion == "avg":
        return _pair_scores_multimodal(model, pairs, force_uniform=True)
    scores, flags = _pair_scores_per_modality(model, pairs)
    if fusion == "sum":
        fused = baseline_sum(scores)
    elif fusion == "major":
        fused = baseline_major_verification(scores, flags)
    else:
        raise MetricError(f"unknown fusion '{fusion}'")
    return fused[flags], fused[~flags]


def class_representatives(model, gallery_sets, mode="mean"):
    """One embedding per gallery class: mean of set embeddings or raw sets."""
    by_class = {}
    for s in gallery_sets:
        z = fu.model_forward(model, s).z.value
        by_class.setdefault(s.label, []).append(z)
    if mode == "mean":
        return {label: np.mean(zs, axis=0) for label, zs in by_class.items()}
    if mode == "best":
        return by_class  # resolved per probe in identification_rankings
    raise MetricError(f"unknown gallery representation '{mode}'")


def identification_rankings(model, gallery_sets, probe_sets, mode="mean"):
    reps = class_representatives(model, gallery_sets, mode=mode)
    rankings, labels = [], []
    for s in probe_sets:
        z = fu.model_forward(model, s).z.value
        if mode == "mean":
            rankings.append(rank_classes(z, reps))
        else:
            best = {label: max(similarity(z, g) for g in zs)
                    for label, zs in reps.items()}
            order = sorted(((-v, label) for label, v in best.items()))
            rankings.append([label for _, label in order])
        labels.append(s.label)
    return rankings, labels


# --- report ---------------------------------------------------------------------

@dataclass
class EvalReport:
    auc: float = None
    eer: float = None
    tar_at: dict = field(default_factory=dict)
    roc: np.ndarray = None
    cmc: np.ndarray = None
    p_b: list = None
    spearman_quality: float = None

    def to_json(self):
        payload = {
            "auc": self.auc,
            "eer": self.eer,
            "tar_at": {f"{f:.0e}".replace("e-0", "e-"): v
                       for f, v in self.tar_at.items()},
            "cmc": None if self.cmc is None else list(map(float, self.cmc)),
            "p_b": None if self.p_b is None else list(map(float, self.p_b)),
            "spearman_quality": self.spearman_quality,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def roc_csv(self):
        lines = ["far,tar"]
        lines += [f"{f!r},{t!r}" for f, t in self.roc]
        return "\n".join(lines) + "\n"

    def cmc_csv(self):
        lines = ["rank,recall"]
        lines += [f"{k + 1},{v!r}" for k, v in enumerate(self.cmc)]
        return "\n".join(lines) + "\n"
