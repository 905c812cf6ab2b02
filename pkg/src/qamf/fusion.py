"""Quality-aware fusion blocks.

Per-sample encoders emit a feature vector and a scalar quality score; scores
are softmax-normalized within each modality (a dropped score contributes a
neutral exponent of zero, it does not remove the sample) and used as convex
weights over the sample features. A second block transforms each modality
feature, estimates inter-modality quality scores from concatenated quality
vectors, and aggregates the modality representations by weighted sum.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import CenterBank, ClassifierHead, ProjectionBank


class FusionError(Exception):
    pass


@dataclass
class MultimodalSampleSet:
    """One identity's bundle of raw samples across modalities.

    samples[k] is a (p_k, dim_k) array; p_k may differ per modality and per
    set. gammas[k] holds the per-sample ground-truth corruption level in
    [0, 1] (generator metadata only; the model never sees it).
    """

    samples: list
    label: int
    gammas: list = None

    def __post_init__(self):
        if len(self.samples) < 1:
            raise FusionError("sample set needs at least one modality")
        self.samples = [np.atleast_2d(np.asarray(s, dtype=np.float64))
                        for s in self.samples]
        for k, s in enumerate(self.samples):
            if s.shape[0] < 1:
                raise FusionError(f"modality {k} has no samples")
        if self.gammas is None:
            self.gammas = [np.zeros(s.shape[0]) for s in self.samples]
        self.gammas = [np.asarray(g, dtype=np.float64) for g in self.gammas]

    @property
    def n_modalities(self):
        return len(self.samples)

    def counts(self):
        return [s.shape[0] for s in self.samples]


@dataclass
class DropoutSpec:
    """Quality-score dropout configuration.

    mu_k[k] is the probability of zeroing an intra-modality score's exponent,
    mu the same for inter-modality scores. fc_dropout is the standard
    inverted dropout rate on hidden fully-connected activations. At
    evaluation time every mask is all-ones.
    """

    mu_k: list = field(default_factory=list)
    mu: float = 0.0
    fc_dropout: float = 0.0
    training: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mu < 1.0):
            raise FusionError(f"mu must be in [0,1), got {self.mu}")
        for m in self.mu_k:
            if not (0.0 <= m < 1.0):
                raise FusionError(f"mu_k must be in [0,1), got {m}")

    def score_mask(self, rng, n, modality=None):
        if not self.training:
            return np.ones(n)
        if modality is None:
            mu = self.mu
        elif modality < len(self.mu_k):
            mu = self.mu_k[modality]
        else:
            mu = 0.0
        return (rng.random(n) >= mu).astype(np.float64)

    def fc_mask(self, rng, shape):
        """Inverted-dropout multiplier for a hidden activation."""
        if not self.training or self.fc_dropout <= 0.0:
            return None
        keep = 1.0 - self.fc_dropout
        return (rng.random(shape) < keep).astype(np.float64) / keep


def eval_dropout():
    return DropoutSpec(training=False)


def _kaiming(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def _bias(rng, fan_in, size):
    # uniform fan-in bias, the usual companion of Kaiming weights; keeps
    # dead-ReLU paths from emitting exactly-zero features
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


def _affine(x, W, b):
    if x.value.ndim == 2:
        return ad.add_bias(ad.matmul(x, W), b)
    return ad.add(ad.matmul(x, W), b)


def _maybe_drop(h, mask):
    return h if mask is None else ad.mul(h, ad.constant(mask))


class QNetA:
    """Per-sample encoder with a quality branch.

    Main branch: input -> hidden -> hidden -> feature_dim, ReLU on hiddens,
    linear output. The quality branch taps the second hidden layer and ends
    in a sigmoid, so scores live in (0, 1).
    """

    def __init__(self, input_dim, hidden, feature_dim, quality_hidden, rng):
        h1, h2 = hidden
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.W1 = ad.parameter(_kaiming(rng, input_dim, h1))
        self.b1 = ad.parameter(_bias(rng, input_dim, h1))
        self.W2 = ad.parameter(_kaiming(rng, h1, h2))
        self.b2 = ad.parameter(_bias(rng, h1, h2))
        self.W3 = ad.parameter(_kaiming(rng, h2, feature_dim))
        self.b3 = ad.parameter(_bias(rng, h2, feature_dim))
        self.Wq1 = ad.parameter(_kaiming(rng, h2, quality_hidden))
        self.bq1 = ad.parameter(_bias(rng, h2, quality_hidden))
        # near-neutral score head: scores start at ~0.5 so the loss, not
        # the initialization, decides which samples look good
        self.Wq2 = ad.parameter(0.01 * _kaiming(rng, quality_hidden, 1))
        self.bq2 = ad.parameter(np.zeros(1))

    def params(self, prefix):
        names = ["W1", "b1", "W2", "b2", "W3", "b3",
                 "Wq1", "bq1", "Wq2", "bq2"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def weight_matrices(self):
        return [self.W1, self.W2, self.W3, self.Wq1, self.Wq2]

    def forward_batch(self, x, dropout=None, rng=None):
        """Encode a (p, input_dim) batch to ((p, D) features, (p,) scores)."""
        if x.value.ndim != 2 or x.value.shape[1] != self.input_dim:
            raise FusionError(
                f"encoder expects (p, {self.input_dim}), got {x.value.shape}")
        p = x.value.shape[0]
        dmask = dropout.fc_mask if dropout is not None else lambda *_: None
        h1 = ad.relu(_affine(x, self.W1, self.b1))
        h1 = _maybe_drop(h1, dmask(rng, h1.value.shape) if dropout else None)
        h2 = ad.relu(_affine(h1, self.W2, self.b2))
        h2 = _maybe_drop(h2, dmask(rng, h2.value.shape) if dropout else None)
        y = _affine(h2, self.W3, self.b3)
        hq = ad.relu(_affine(h2, self.Wq1, self.bq1))
        hq = _maybe_drop(hq, dmask(rng, hq.value.shape) if dropout else None)
        q = ad.sigmoid(ad.reshape(_affine(hq, self.Wq2, self.bq2), (p,)))
        return y, q


def qnet_a_forward(net, sample):
    """Encode one raw sample vector to (feature D-vector, scalar score)."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 1 or sample.shape[0] != net.input_dim:
        raise FusionError(
            f"sample must be a {net.input_dim}-vector, got {sample.shape}")
    y, q = net.forward_batch(ad.constant(sample[None, :]))
    return ad.reshape(y, (net.feature_dim,)), ad.reshape(q, ())


class QNetB:
    """Modality transform block: embedding + quality vector.

    Main branch: two affine layers D -> D -> D with ReLU after each (so the
    embedding lives in the nonnegative orthant). The quality branch taps the
    first hidden layer and emits a v-dimensional quality vector.
    """

    def __init__(self, feature_dim, quality_hidden, quality_dim, rng):
        d = feature_dim
        self.feature_dim = d
        self.quality_dim = quality_dim
        self.W1 = ad.parameter(_kaiming(rng, d, d))
        self.b1 = ad.parameter(_bias(rng, d, d))
        self.W2 = ad.parameter(_kaiming(rng, d, d))
        self.b2 = ad.parameter(_bias(rng, d, d))
        self.Wq1 = ad.parameter(_kaiming(rng, d, quality_hidden))
        self.bq1 = ad.parameter(_bias(rng, d, quality_hidden))
        self.Wq2 = ad.parameter(_kaiming(rng, quality_hidden, quality_dim))
        self.bq2 = ad.parameter(_bias(rng, quality_hidden, quality_dim))

    def params(self, prefix):
        names = ["W1", "b1", "W2", "b2", "Wq1", "bq1", "Wq2", "bq2"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def weight_matrices(self):
        return [self.W1, self.W2, self.Wq1, self.Wq2]

    def forward(self, y, dropout=None, rng=None):
        if y.value.shape != (self.feature_dim,):
            raise FusionError(
                f"qnet_b expects a {self.feature_dim}-vector, got {y.value.shape}")
        dmask = dropout.fc_mask if dropout is not None else lambda *_: None
        h1 = ad.relu(_affine(y, self.W1, self.b1))
        h1 = _maybe_drop(h1, dmask(rng, h1.value.shape) if dropout else None)
        z = ad.relu(_affine(h1, self.W2, self.b2))
        hq = ad.relu(_affine(h1, self.Wq1, self.bq1))
        hq = _maybe_drop(hq, dmask(rng, hq.value.shape) if dropout else None)
        qv = ad.relu(_affine(hq, self.Wq2, self.bq2))
        return z, qv


def qnet_b_forward(net, y_k):
    return net.forward(y_k)


class FNetB:
    """Inter-modality quality scorer: (v*K,) -> 16 -> 16 -> (K,), sigmoid out."""

    def __init__(self, n_modalities, quality_dim, hidden, rng):
        h1, h2 = hidden
        self.n_modalities = n_modalities
        self.input_dim = quality_dim * n_modalities
        self.W1 = ad.parameter(_kaiming(rng, self.input_dim, h1))
        self.b1 = ad.parameter(_bias(rng, self.input_dim, h1))
        self.W2 = ad.parameter(_kaiming(rng, h1, h2))
        self.b2 = ad.parameter(_bias(rng, h1, h2))
        # near-neutral score head, as in the sample-score branch
        self.W3 = ad.parameter(0.01 * _kaiming(rng, h2, n_modalities))
        self.b3 = ad.parameter(np.zeros(n_modalities))

    def params(self, prefix):
        names = ["W1", "b1", "W2", "b2", "W3", "b3"]
        return {f"{prefix}.{n}": getattr(self, n) for n in names}

    def weight_matrices(self):
        return [self.W1, self.W2, self.W3]

    def forward(self, q_concat, dropout=None, rng=None):
        if q_concat.value.shape != (self.input_dim,):
            raise FusionError(
                f"fnet_b expects a {self.input_dim}-vector, got {q_concat.value.shape}")
        dmask = dropout.fc_mask if dropout is not None else lambda *_: None
        h1 = ad.relu(_affine(q_concat, self.W1, self.b1))
        h1 = _maybe_drop(h1, dmask(rng, h1.value.shape) if dropout else None)
        h2 = ad.relu(_affine(h1, self.W2, self.b2))
        h2 = _maybe_drop(h2, dmask(rng, h2.value.shape) if dropout else None)
        return ad.sigmoid(_affine(h2, self.W3, self.b3))


def _onehot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def masked_score_weights(scores, mask):
    """Softmax of score * mask-bit: exp(q_i d_i) / sum_j exp(q_j d_j)."""
    mask = np.asarray(mask, dtype=np.float64)
    if scores.value.shape != mask.shape:
        raise FusionError(
            f"mask shape {mask.shape} != scores shape {scores.value.shape}")
    return ad.softmax(ad.mul(scores, ad.constant(mask)))


def intra_fuse(outputs, d):
    """Weight per-sample features by normalized masked quality scores.

    outputs is a list of (feature D-vector node, scalar score node) pairs;
    d is the binary score-dropout mask. Returns (fused D-vector, weights).
    """
    if not outputs:
        raise FusionError("intra_fuse: empty sample list")
    scores = ad.concat([ad.reshape(q, (1,)) for _, q in outputs])
    w = masked_score_weights(scores, d)
    p = len(outputs)
    fused = None
    for i, (y, _) in enumerate(outputs):
        term = ad.mul(y, ad.dot(w, ad.constant(_onehot(i, p))))
        fused = term if fused is None else ad.add(fused, term)
    return fused, w


def _intra_fuse_batch(y_mat, scores, d):
    """Batched intra_fuse: (p, D) features + (p,) scores -> (D,), (p,)."""
    w = masked_score_weights(scores, d)
    return ad.matmul(w, y_mat), w


def inter_quality(net, quality_vectors, d):
    """Estimate normalized inter-modality quality scores.

    Concatenates the K modality quality vectors, runs them through the
    fully-connected scorer, and softmax-normalizes the masked sigmoid
    outputs. Returns (normalized K-vector, raw sigmoid K-vector).
    """
    if not quality_vectors:
        raise FusionError("inter_quality: no modalities")
    raw = net.forward(ad.concat(list(quality_vectors)))
    return masked_score_weights(raw, d), raw


def inter_fuse(z_list, weights):
    """Aggregate modality embeddings as a weight-vector convex sum."""
    k = len(z_list)
    if k == 0:
        raise FusionError("inter_fuse: no modalities")
    if weights.value.shape != (k,):
        raise FusionError(
            f"inter_fuse: {k} embeddings but weights shape {weights.value.shape}")
    if abs(weights.value.sum() - 1.0) > 1e-9:
        raise FusionError("inter_fuse: weights must sum to 1")
    dim = z_list[0].value.shape
    for z in z_list:
        if z.value.shape != dim:
            raise FusionError(
                f"inter_fuse: embedding shapes differ ({dim} vs {z.value.shape})")
    fused = None
    for i, z in enumerate(z_list):
        term = ad.mul(z, ad.dot(weights, ad.constant(_onehot(i, k))))
        fused = term if fused is None else ad.add(fused, term)
    return fused


@dataclass
class ModelConfig:
    """Shapes and seeds for a full fusion model."""

    input_dims: list
    n_classes: int
    feature_dim: int = 32
    encoder_hidden: tuple = (64, 64)
    encoder_quality_hidden: int = 16
    quality_dim: int = 16
    qnetb_quality_hidden: int = 16
    fnetb_hidden: tuple = (16, 16)
    projection_dim: int = 30
    alpha_c: float = 0.5
    learnable_projections: bool = True
    seed: int = 0

    @property
    def n_modalities(self):
        return len(self.input_dims)


@dataclass
class ForwardOutput:
    """Everything a forward pass exposes to the losses and the metrics."""

    z: ad.Tensor                 # fused multimodal embedding (D,)
    y: list                      # per-modality fused features, each (D,)
    z_k: list                    # per-modality embeddings, each (D,)
    intra_weights: list          # per-modality normalized weights, (p_k,)
    inter_weights: ad.Tensor     # normalized modality weights (K,)
    intra_raw: list              # per-modality raw sigmoid scores, (p_k,)
    inter_raw: ad.Tensor         # raw sigmoid modality scores (K,)
    label: int = None


class FusionModel:
    """All trainable state: encoders, fusion nets, heads, centers, P*."""

    def __init__(self, config):
        self.config = config
        self.n_modalities = config.n_modalities
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
        self.encoders = [
            QNetA(dim, config.encoder_hidden, config.feature_dim,
                  config.encoder_quality_hidden, rng)
            for dim in config.input_dims
        ]
        self.qnets_b = [
            QNetB(config.feature_dim, config.qnetb_quality_hidden,
                  config.quality_dim, rng)
            for _ in range(self.n_modalities)
        ]
        self.fnet_b = FNetB(self.n_modalities, config.quality_dim,
                            config.fnetb_hidden, rng)
        spaces = ["z"] + [f"y{k}" for k in range(self.n_modalities)]
        self.heads = {s: ClassifierHead(config.n_classes, config.feature_dim, rng)
                      for s in spaces}
        self.centers = CenterBank(config.n_classes, config.feature_dim,
                                  spaces, config.alpha_c, rng)
        widths = {w.value.shape[0] for w in self.hidden_weight_matrices()}
        self.projections = ProjectionBank(widths, config.projection_dim, rng,
                                          learnable=config.learnable_projections)

    def hidden_weight_matrices(self):
        mats = []
        for enc in self.encoders:
            mats.extend(enc.weight_matrices())
        for net in self.qnets_b:
            mats.extend(net.weight_matrices())
        mats.extend(self.fnet_b.weight_matrices())
        return mats

    def parameters(self):
        """Stable name -> tensor map over every trainable array."""
        params = {}
        for k, enc in enumerate(self.encoders):
            params.update(enc.params(f"enc{k}"))
        for k, net in enumerate(self.qnets_b):
            params.update(net.params(f"qnetb{k}"))
        params.update(self.fnet_b.params("fnetb"))
        for space, head in self.heads.items():
            params[f"head.{space}"] = head.weights
        for space, c in self.centers.centers.items():
            params[f"center.{space}"] = c
        for width, p in self.projections.by_width.items():
            if self.projections.learnable:
                params[f"proj.w{width}"] = p
        return params

    def renormalize_constrained(self):
        """Restore unit rows on classifier heads and projection matrices."""
        for head in self.heads.values():
            head.renormalize()
        self.projections.renormalize()

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None


def model_forward(model, sample_set, dropout=None, rng=None,
                  force_uniform=False):
    """Run both fusion blocks over one multimodal sample set.

    In evaluation mode (the default) every dropout mask is all-ones, so the
    output is permutation-invariant in the sample order of each modality.
    force_uniform bypasses the learned quality scores and fuses with equal
    weights everywhere (the feature-averaging baseline).
    """
    if dropout is None:
        dropout = eval_dropout()
    if sample_set.n_modalities != model.n_modalities:
        raise FusionError(
            f"model has {model.n_modalities} modalities, sample set has "
            f"{sample_set.n_modalities}")
    if dropout.training and rng is None:
        rng = np.random.default_rng(dropout.seed)

    y_list, z_list, qv_list = [], [], []
    intra_w, intra_raw = [], []
    for k in range(model.n_modalities):
        x = ad.constant(sample_set.samples[k])
        y_mat, scores = model.encoders[k].forward_batch(x, dropout, rng)
        p = scores.value.shape[0]
        if force_uniform:
            w = ad.constant(np.full(p, 1.0 / p))
            y_k = ad.matmul(w, y_mat)
        else:
            mask = dropout.score_mask(rng, p, modality=k)
            y_k, w = _intra_fuse_batch(y_mat, scores, mask)
        z_k, qv = model.qnets_b[k].forward(y_k, dropout, rng)
        y_list.append(y_k)
        z_list.append(z_k)
        qv_list.append(qv)
        intra_w.append(w)
        intra_raw.append(scores)

    raw = model.fnet_b.forward(ad.concat(qv_list), dropout, rng)
    if force_uniform:
        k = model.n_modalities
        q_b = ad.constant(np.full(k, 1.0 / k))
    else:
        inter_mask = dropout.score_mask(rng, model.n_modalities)
        q_b = masked_score_weights(raw, inter_mask)
    z = inter_fuse(z_list, q_b)
    return ForwardOutput(z=z, y=y_list, z_k=z_list, intra_weights=intra_w,
                         inter_weights=q_b, intra_raw=intra_raw,
                         inter_raw=raw, label=sample_set.label)
