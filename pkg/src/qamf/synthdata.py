"""Synthetic multimodal identity data with controllable per-sample quality.

Each class gets a latent identity vector; each modality observes it through
a fixed orthonormalized random linear map followed by tanh. A per-sample
corruption level gamma in [0, 1] scales additive Gaussian noise on top of a
modality-level base noise, and is stored as ground-truth quality metadata
that the model never sees. Generation is deterministic given (config, seed)
with independent per-class RNG streams.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .fusion import MultimodalSampleSet

QADS_MAGIC = b"QADS"
QADS_VERSION = 1


class DataError(Exception):
    pass


class FormatError(Exception):
    pass


@dataclass
class ModalitySpec:
    """Observation space of one synthetic modality."""

    dim: int = 64
    base_noise: float = 0.05   # modality-level noise floor, sets its ranking
    noise_scale: float = 0.8   # extra noise at gamma = 1


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_classes: int = 20
    class_start: int = 0       # label offset, for held-out class ranges
    identity_dim: int = 16
    sets_per_class: int = 10
    p_min: int = 1
    p_max: int = 4
    gamma_min: float = 0.0
    gamma_max: float = 1.0
    modalities: list = field(default_factory=lambda: [ModalitySpec()])

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m)
                           for m in self.modalities]
        if self.n_classes < 1 or not self.modalities:
            raise DataError("need at least one class and one modality")
        if self.p_min < 1 or self.p_max < self.p_min:
            raise DataError("require 1 <= p_min <= p_max")
        if not (0.0 <= self.gamma_min <= self.gamma_max <= 1.0):
            raise DataError("gamma range must satisfy 0 <= min <= max <= 1")
        if not (1 <= self.sets_per_class <= 25):
            raise DataError("sets_per_class must be in [1, 25]")
        for m in self.modalities:
            if m.dim < self.identity_dim:
                raise DataError(
                    f"modality dim {m.dim} below identity_dim {self.identity_dim}")

    @property
    def n_modalities(self):
        return len(self.modalities)


@dataclass
class Dataset:
    sets: list
    config_text: str = ""

    def __len__(self):
        return len(self.sets)

    def labels(self):
        return sorted({s.label for s in self.sets})

    def by_class(self):
        out = {}
        for s in self.sets:
            out.setdefault(s.label, []).append(s)
        return out


def modality_maps(config):
    """The fixed orthonormalized linear maps, keyed off (seed, modality)."""
    maps = []
    for k, spec in enumerate(config.modalities):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, k]))
        a = rng.normal(size=(spec.dim, config.identity_dim))
        q, _ = np.linalg.qr(a)
        maps.append(q)
    return maps


def identity_latent(config, label):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, label]))
    return rng.normal(size=config.identity_dim)


def clean_signal(config, label, modality, maps=None):
    """Noise-free observation of a class in one modality."""
    maps = maps if maps is not None else modality_maps(config)
    return np.tanh(maps[modality] @ identity_latent(config, label))


def generate(config):
    """Draw the full dataset: deterministic, per-class RNG streams."""
    maps = modality_maps(config)
    sets = []
    for j in range(config.n_classes):
        label = config.class_start + j
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, 3, label]))
        signal = [np.tanh(maps[k] @ identity_latent(config, label))
                  for k in range(config.n_modalities)]
        for _ in range(config.sets_per_class):
            samples, gammas = [], []
            for k, spec in enumerate(config.modalities):
                p = int(rng.integers(config.p_min, config.p_max + 1))
                g = rng.uniform(config.gamma_min, config.gamma_max, p)
                noise = rng.normal(size=(p, spec.dim))
                std = (spec.base_noise + g * spec.noise_scale)[:, None]
                samples.append(signal[k][None, :] + std * noise)
                gammas.append(g)
            sets.append(MultimodalSampleSet(samples=samples, label=label,
                                            gammas=gammas))
    return Dataset(sets=sets)


# --- chimeric virtual subjects ------------------------------------------------

def unimodal_pool(dataset, modality):
    """Extract one modality as {class: [(samples, gammas), ...]}."""
    pool = {}
    for s in dataset.sets:
        pool.setdefault(s.label, []).append(
            (s.samples[modality], s.gammas[modality]))
    return pool


def chimeric_pair(pools, n_subjects, seed, max_sets=25):
    """Build virtual subjects by injectively assigning one class per pool.

    pools is a list of K unimodal pools as produced by unimodal_pool. Each
    virtual subject receives min(available) aligned sample sets, capped.
    Resampling with different seeds yields different assignments for the
    repeated-pairing protocol.
    """
    if n_subjects < 1:
        raise DataError("need at least one virtual subject")
    for k, pool in enumerate(pools):
        if len(pool) < n_subjects:
            raise DataError(
                f"pool {k} has {len(pool)} classes, need {n_subjects}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    assignment = []
    for pool in pools:
        classes = sorted(pool.keys())
        chosen = rng.permutation(len(classes))[:n_subjects]
        assignment.append([classes[i] for i in chosen])
    sets = []
    for s in range(n_subjects):
        per_mod = [pools[k][assignment[k][s]] for k in range(len(pools))]
        count = min(min(len(u) for u in per_mod), max_sets)
        for i in range(count):
            sets.append(MultimodalSampleSet(
                samples=[u[i][0] for u in per_mod],
                label=s,
                gammas=[u[i][1] for u in per_mod]))
    return Dataset(sets=sets), assignment


# --- splits --------------------------------------------------------------------


@dataclass
class IdentificationSplit:
    gallery: list
    probes: list


@dataclass
class VerificationSplit:
    pairs: list  # (set_a, set_b, genuine flag)


def split_identification(dataset, gallery_per_class=4, seed=0):
    """Per class: g random sample sets enroll the gallery, the rest probe."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    gallery, probes = [], []
    for label, sets in sorted(dataset.by_class().items()):
        if len(sets) <= gallery_per_class:
            raise DataError(
                f"class {label} has {len(sets)} sets, need more than "
                f"{gallery_per_class} for the identification split")
        order = rng.permutation(len(sets))
        gallery.extend(sets[i] for i in order[:gallery_per_class])
        probes.extend(sets[i] for i in order[gallery_per_class:])
    return IdentificationSplit(gallery=gallery, probes=probes)


def split_verification(dataset, pairs=200, positive_fraction=0.5, seed=0):
    """Sample genuine (same class) and impostor (cross class) set pairs."""
    if not (0.0 <= positive_fraction <= 1.0):
        raise DataError("positive_fraction must be in [0, 1]")
    by_class = dataset.by_class()
    labels = sorted(by_class.keys())
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    n_pos = int(round(pairs * positive_fraction))
    n_neg = pairs - n_pos
    rich = [l for l in labels if len(by_class[l]) >= 2]
    if n_pos > 0 and not rich:
        raise DataError("no class has two sample sets for genuine pairs")
    if n_neg > 0 and len(labels) < 2:
        raise DataError("need two classes for impostor pairs")
    out = []
    for _ in range(n_pos):
        label = rich[rng.integers(len(rich))]
        i, j = rng.choice(len(by_class[label]), size=2, replace=False)
        out.append((by_class[label][i], by_class[label][j], True))
    for _ in range(n_neg):
        la, lb = rng.choice(len(labels), size=2, replace=False)
        sa = by_class[labels[la]]
        sb = by_class[labels[lb]]
        out.append((sa[rng.integers(len(sa))], sb[rng.integers(len(sb))], False))
    return VerificationSplit(pairs=out)


# --- QADS file format -----------------------------------------------------------

def _pack_set(buf, sset):
    # class u32, K u8, then per modality: p u16, per sample: gamma f64,
    # dim u32, dim float64 values; everything little-endian
    buf.write(struct.pack("<IB", sset.label, len(sset.samples)))
    for samples, gammas in zip(sset.samples, sset.gammas):
        p, dim = samples.shape
        buf.write(struct.pack("<H", p))
        for i in range(p):
            buf.write(struct.pack("<d", float(gammas[i])))
            buf.write(struct.pack("<I", dim))
            buf.write(samples[i].astype("<f8").tobytes())


def write_dataset_bytes(dataset):
    """Serialize: magic, version u32, length-prefixed config text, sets."""
    buf = io.BytesIO()
    buf.write(QADS_MAGIC)
    buf.write(struct.pack("<I", QADS_VERSION))
    text = dataset.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for sset in dataset.sets:
        _pack_set(buf, sset)
    return buf.getvalue()


def write_dataset(path, dataset):
    with open(path, "wb") as f:
        f.write(write_dataset_bytes(dataset))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("dataset file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self):
        return self.pos == len(self.data)


def read_dataset_bytes(data):
    r = _Reader(data)
    if r.take(4) != QADS_MAGIC:
        raise FormatError("not a QADS dataset file (bad magic)")
    (version,) = r.unpack("<I")
    if version != QADS_VERSION:
        raise FormatError(f"unsupported QADS version {version}")
    (text_len,) = r.unpack("<I")
    config_text = r.take(text_len).decode("utf-8")
    sets = []
    while not r.exhausted:
        label, k = r.unpack("<IB")
        samples, gammas = [], []
        for _ in range(k):
            (p,) = r.unpack("<H")
            rows, g = [], []
            dim = None
            for _ in range(p):
                (gamma,) = r.unpack("<d")
                (dim,) = r.unpack("<I")
                rows.append(np.frombuffer(r.take(8 * dim), dtype="<f8"))
                g.append(gamma)
            samples.append(np.array(rows))
            gammas.append(np.array(g))
        sets.append(MultimodalSampleSet(samples=samples, label=int(label),
                                        gammas=gammas))
    return Dataset(sets=sets, config_text=config_text)


def read_dataset(path):
    with open(path, "rb") as f:
        return read_dataset_bytes(f.read())
