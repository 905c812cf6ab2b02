"""Training objectives for the quality-aware fusion model.

Covers the angular-margin classification loss, the inverse-distance
center-spreading loss, the modality-magnitude balancing loss, the
center-direction alignment loss, their weighted combination (with unimodal
terms), and hyperspherical-energy weight regularization with compressive
projection. Class centers are ordinary gradient-carrying parameters that
are additionally pulled toward batch means by an EMA update.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ENERGY_EPS = 1e-12  # floor for squared distances inside the energy sum


class LossError(Exception):
    pass


@dataclass
class HyperParams:
    """Margins, loss weights, and related knobs.

    The (m1, m2, m3) triple applies to the multimodal head; (m1_k, m2_k,
    m3_k) to the unimodal heads. verification_mode forces the center
    alignment weight to zero. fixed_scale replaces the live feature norm
    in the angular loss for ablations only.
    """

    m1: float = 1.1
    m2: float = 0.4
    m3: float = 0.2
    m1_k: float = 1.2
    m2_k: float = 0.4
    m3_k: float = 0.2
    lambda_u: float = 1.0
    lambda_r: float = 0.2
    lambda_c: float = 0.2
    lambda_ak: float = 0.3
    lambda_uk: float = 0.3
    lambda_h: float = 2.5
    lambda_h0: float = 1.0
    projection_dim: int = 30
    alpha_c: float = 0.5
    half_space: bool = True
    verification_mode: bool = False
    fixed_scale: float = None

    def __post_init__(self):
        if self.m1 < 1.0 or self.m1_k < 1.0:
            raise LossError("m1 must be >= 1")
        for name in ("lambda_u", "lambda_r", "lambda_c", "lambda_ak",
                     "lambda_uk", "lambda_h", "lambda_h0"):
            if getattr(self, name) < 0.0:
                raise LossError(f"{name} must be >= 0")
        if self.projection_dim < 1:
            raise LossError("projection_dim must be >= 1")

    @property
    def effective_lambda_c(self):
        return 0.0 if self.verification_mode else self.lambda_c


class ClassifierHead:
    """Bias-free classifier weights, one unit-norm row per class."""

    def __init__(self, n_classes, dim, rng):
        rows = rng.normal(size=(n_classes, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        self.weights = ad.parameter(rows)
        self.n_classes = n_classes
        self.dim = dim

    def renormalize(self):
        v = self.weights.value
        v /= np.linalg.norm(v, axis=1, keepdims=True)


class CenterBank:
    """Per-class reference vectors for each embedding space.

    Keys are "z" for the multimodal space and "y{k}" per modality. Centers
    are trainable and also tracked toward batch means with EMA rate alpha.
    """

    def __init__(self, n_classes, dim, spaces, alpha, rng):
        self.n_classes = n_classes
        self.alpha = alpha
        self.centers = {}
        for space in spaces:
            rows = rng.normal(size=(n_classes, dim))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            self.centers[space] = ad.parameter(rows)

    def spaces(self):
        return list(self.centers.keys())


class ProjectionBank:
    """Row-normalized projection matrices, shared per layer width.

    Widths at or below the projected dimension use the identity (no matrix
    is stored). Matrices are trainable by default; a fixed random mode is
    the baseline alternative.
    """

    def __init__(self, widths, projection_dim, rng, learnable=True):
        self.projection_dim = projection_dim
        self.learnable = learnable
        self.by_width = {}
        for w in sorted(set(widths)):
            if w <= projection_dim:
                continue
            rows = rng.normal(size=(projection_dim, w))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            self.by_width[w] = ad.parameter(rows)

    def for_width(self, width):
        return self.by_width.get(width)

    def renormalize(self):
        for p in self.by_width.values():
            p.value /= np.linalg.norm(p.value, axis=1, keepdims=True)


def _onehot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def angular_loss(features, head, m1, m2, m3, fixed_scale=None):
    """Margin-modified softmax cross-entropy on feature/class-vector angles.

    features is a list of (feature node, label) pairs. The target logit is
    ||x|| * (cos(m1*theta + m2) - m3) with the margin argument clamped to
    [0, pi]; non-target logits are ||x|| * cos(theta_j). The scale is the
    live feature norm unless fixed_scale overrides it.
    """
    if head.n_classes < 2:
        raise LossError("angular_loss needs at least 2 classes")
    if not features:
        raise LossError("angular_loss: empty feature list")
    total = None
    for x, label in features:
        if np.linalg.norm(x.value) == 0.0:
            raise LossError("angular_loss: zero-norm feature")
        onehot = ad.constant(_onehot(label, head.n_classes))
        others = ad.constant(1.0 - _onehot(label, head.n_classes))
        cos_all = ad.matmul(head.weights, ad.normalize(x))
        theta = ad.arccos(ad.dot(cos_all, onehot))
        arg = ad.clamp(ad.add(ad.scale(theta, m1), ad.constant(m2)), 0.0, math.pi)
        target = ad.sub(ad.cos(arg), ad.constant(m3))
        logits_unit = ad.add(ad.mul(cos_all, others), ad.mul(onehot, target))
        if fixed_scale is not None:
            logits = ad.scale(logits_unit, float(fixed_scale))
        else:
            logits = ad.mul(logits_unit, ad.norm(x))
        shift = float(np.max(logits.value))
        lse = ad.add(ad.log(ad.tsum(ad.exp(ad.sub(logits, ad.constant(shift))))),
                     ad.constant(shift))
        li = ad.sub(lse, ad.dot(logits, onehot))
        total = li if total is None else ad.add(total, li)
    return ad.scale(total, 1.0 / len(features))


def _pair_selector(m):
    """Constant (m*(m-1)/2, m) matrix of e_j1 - e_j2 rows over j1 < j2."""
    rows = []
    for j1 in range(m):
        for j2 in range(j1 + 1, m):
            r = np.zeros(m)
            r[j1], r[j2] = 1.0, -1.0
            rows.append(r)
    return np.array(rows)


def uniform_loss(centers):
    """Mean inverse shifted distance over ordered center pairs.

    centers is an (M, D) node. Every unordered pair contributes twice,
    matching the 1/(M(M-1)) normalization over ordered pairs. Coincident
    centers are fine in the forward pass (the term is 1).
    """
    m = centers.value.shape[0]
    if m < 2:
        raise LossError("uniform_loss needs at least 2 centers")
    diff = ad.matmul(ad.constant(_pair_selector(m)), centers)
    dist = ad.row_norms(diff)
    terms = ad.div(ad.constant(np.ones(dist.value.shape[0])),
                   ad.add(dist, ad.constant(np.ones(dist.value.shape[0]))))
    return ad.scale(ad.tsum(terms), 2.0 / (m * (m - 1)))


def representation_loss(z_per_set):
    """Penalize modality-norm imbalance within each sample set.

    z_per_set is a list (one entry per set) of lists of K modality
    embedding nodes. Squared norm gaps are summed over ordered modality
    pairs and divided by the set's total norm; the result is averaged with
    the 1/(N*K*(K-1)) factor. Returns a zero constant when K < 2.
    """
    if not z_per_set:
        raise LossError("representation_loss: empty batch")
    k = len(z_per_set[0])
    if k < 2:
        return ad.constant(0.0)
    total = None
    for idx, z_list in enumerate(z_per_set):
        if len(z_list) != k:
            raise LossError("representation_loss: inconsistent modality count")
        if all(np.linalg.norm(z.value) == 0.0 for z in z_list):
            raise LossError(f"representation_loss: all-zero embeddings in set {idx}")
        norms = [ad.norm(z) for z in z_list]
        denom = norms[0]
        for n in norms[1:]:
            denom = ad.add(denom, n)
        pair_sum = None
        for k1 in range(k):
            for k2 in range(k1 + 1, k):
                gap = ad.square(ad.sub(norms[k1], norms[k2]))
                pair_sum = gap if pair_sum is None else ad.add(pair_sum, gap)
        contrib = ad.div(ad.scale(pair_sum, 2.0), denom)  # ordered pairs
        total = contrib if total is None else ad.add(total, contrib)
    return ad.scale(total, 1.0 / (len(z_per_set) * k * (k - 1)))


def center_alignment_loss(bank):
    """Squared direction gap between multimodal and unimodal class centers."""
    spaces = [s for s in bank.spaces() if s != "z"]
    if not spaces:
        raise LossError("center_alignment_loss: no unimodal centers")
    for s in ["z"] + spaces:
        if np.any(np.linalg.norm(bank.centers[s].value, axis=1) == 0.0):
            raise LossError(f"center_alignment_loss: zero-norm center in {s}")
    cz = ad.normalize_rows(bank.centers["z"])
    total = None
    for s in spaces:
        gap = ad.tsum(ad.square(ad.sub(cz, ad.normalize_rows(bank.centers[s]))))
        total = gap if total is None else ad.add(total, gap)
    m = bank.n_classes
    return ad.scale(total, 1.0 / (len(spaces) * m))


def hyperspherical_energy(weights, projection=None, half_space=False):
    """Sum of inverse squared distances between normalized row vectors.

    Rows are unit-normalized, optionally projected (then renormalized), and
    in half-space mode the negated copies are appended so collinear pairs
    are penalized. Squared distances are floored at 1e-12 before inversion;
    the antipodal virtual pairs contribute a constant with zero gradient.
    """
    n = weights.value.shape[0]
    if n < 2:
        raise LossError("hyperspherical_energy needs at least 2 vectors")
    if np.any(np.linalg.norm(weights.value, axis=1) == 0.0):
        raise LossError("hyperspherical_energy: zero-norm row")
    u = ad.normalize_rows(weights)
    if projection is not None:
        u = ad.normalize_rows(ad.matmul(u, ad.transpose(projection)))
    if half_space:
        u = ad.concat([u, ad.scale(u, -1.0)])
    count = u.value.shape[0]
    gram = ad.matmul(u, ad.transpose(u))
    d2 = ad.add(ad.constant(np.full((count, count), 2.0)), ad.scale(gram, -2.0))
    d2 = ad.clamp(d2, lo=ENERGY_EPS)
    inv = ad.div(ad.constant(np.ones((count, count))), d2)
    offdiag = ad.constant(1.0 - np.eye(count))
    return ad.tsum(ad.mul(inv, offdiag))


def compactness_loss(model, hp):
    """Hyperspherical energy over all layers, plus the classifier term.

    Hidden layers enter as neurons-by-fan-in matrices with the shared
    compressive projection for widths above the projected dimension;
    single-neuron layers are skipped (the energy needs >= 2 vectors). The
    output term runs over the multimodal classifier vectors, unprojected.
    Returns (loss node, breakdown dict of weighted float contributions).
    """
    hidden = None
    if hp.lambda_h > 0.0:
        for w in model.hidden_weight_matrices():
            n_neurons = w.value.shape[1]
            if n_neurons < 2:
                continue
            proj = model.projections.for_width(w.value.shape[0])
            e = hyperspherical_energy(ad.transpose(w), proj,
                                      half_space=hp.half_space)
            term = ad.scale(e, 1.0 / (n_neurons * (n_neurons - 1)))
            hidden = term if hidden is None else ad.add(hidden, term)
    out = None
    if hp.lambda_h0 > 0.0:
        head = model.heads["z"]
        e = hyperspherical_energy(head.weights, None, half_space=hp.half_space)
        out = ad.scale(e, 1.0 / (head.n_classes * (head.n_classes - 1)))

    breakdown = {}
    total = ad.constant(0.0)
    if hidden is not None:
        hidden = ad.scale(hidden, hp.lambda_h)
        breakdown["compact_hidden"] = hidden.item()
        total = ad.add(total, hidden)
    else:
        breakdown["compact_hidden"] = 0.0
    if out is not None:
        out = ad.scale(out, hp.lambda_h0)
        breakdown["compact_out"] = out.item()
        total = ad.add(total, out)
    else:
        breakdown["compact_out"] = 0.0
    return total, breakdown


def separability_loss(outputs, model, hp):
    """Combined discrimination objective over a batch of forward outputs.

    Adds the multimodal angular loss, weighted center-uniformity, center
    alignment (zero weight in verification mode), modality-norm balance,
    and the averaged unimodal angular/uniform terms. Returns (loss node,
    breakdown dict of weighted float contributions).
    """
    if not outputs:
        raise LossError("separability_loss: empty batch")
    k = model.n_modalities
    breakdown = {}

    la = angular_loss([(fo.z, fo.label) for fo in outputs], model.heads["z"],
                      hp.m1, hp.m2, hp.m3, hp.fixed_scale)
    total = la
    breakdown["angular"] = la.item()

    if hp.lambda_u > 0.0:
        lu = ad.scale(uniform_loss(model.centers.centers["z"]), hp.lambda_u)
        total = ad.add(total, lu)
        breakdown["uniform"] = lu.item()
    else:
        breakdown["uniform"] = 0.0

    lam_c = hp.effective_lambda_c
    if lam_c > 0.0 and k >= 1:
        lc = ad.scale(center_alignment_loss(model.centers), lam_c)
        total = ad.add(total, lc)
        breakdown["center_align"] = lc.item()
    else:
        breakdown["center_align"] = 0.0

    if hp.lambda_r > 0.0 and k >= 2:
        lr = ad.scale(representation_loss([fo.z_k for fo in outputs]),
                      hp.lambda_r)
        total = ad.add(total, lr)
        breakdown["repr"] = lr.item()
    else:
        breakdown["repr"] = 0.0

    uni = None
    if hp.lambda_ak > 0.0 or hp.lambda_uk > 0.0:
        for ki in range(k):
            if hp.lambda_ak > 0.0:
                lak = angular_loss([(fo.y[ki], fo.label) for fo in outputs],
                                   model.heads[f"y{ki}"],
                                   hp.m1_k, hp.m2_k, hp.m3_k, hp.fixed_scale)
                term = ad.scale(lak, hp.lambda_ak)
                uni = term if uni is None else ad.add(uni, term)
            if hp.lambda_uk > 0.0:
                luk = ad.scale(uniform_loss(model.centers.centers[f"y{ki}"]),
                               hp.lambda_uk)
                uni = luk if uni is None else ad.add(uni, luk)
    if uni is not None:
        uni = ad.scale(uni, 1.0 / k)
        total = ad.add(total, uni)
        breakdown["unimodal"] = uni.item()
    else:
        breakdown["unimodal"] = 0.0
    return total, breakdown


def total_loss(outputs, model, hp):
    """Separability plus network compactness; breakdown sums to the total."""
    ms, breakdown = separability_loss(outputs, model, hp)
    mc, mc_breakdown = compactness_loss(model, hp)
    breakdown.update(mc_breakdown)
    total = ad.add(ms, mc)
    breakdown["total"] = total.item()
    return total, breakdown


def update_centers(bank, batch_embeddings):
    """EMA-pull centers toward batch class means; gradients do not flow.

    batch_embeddings maps space -> {class -> list of embedding arrays}.
    Classes absent from the batch keep their centers.
    """
    a = bank.alpha
    for space, per_class in batch_embeddings.items():
        c = bank.centers[space]
        for label, vecs in per_class.items():
            if not vecs:
                continue
            mean = np.mean(np.asarray(vecs, dtype=np.float64), axis=0)
            c.value[label] = (1.0 - a) * c.value[label] + a * mean
