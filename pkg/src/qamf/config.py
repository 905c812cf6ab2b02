"""Experiment configuration: one YAML document drives gen/train/eval.

Every field has a documented default; unknown keys are rejected. The
resolved form (defaults fully expanded) serializes to canonical YAML text
that is embedded verbatim in dataset and checkpoint files, so artifacts are
self-describing and byte-reproducible.
"""

import copy

import yaml

from .fusion import DropoutSpec, ModelConfig
from .losses import HyperParams
from .synthdata import GeneratorConfig, ModalitySpec
from .training import OptimizerState, Schedule


class ConfigError(Exception):
    pass


MODALITY_DEFAULTS = {"dim": 64, "base_noise": 0.05, "noise_scale": 0.8}

DEFAULTS = {
    "generator": {
        "seed": 0,
        "n_classes": 20,
        "class_start": 0,
        "identity_dim": 16,
        "sets_per_class": 10,
        "p_min": 1,
        "p_max": 4,
        "gamma_min": 0.0,
        "gamma_max": 1.0,
        "modalities": [dict(MODALITY_DEFAULTS)],
    },
    "model": {
        "feature_dim": 32,
        "encoder_hidden": [64, 64],
        "encoder_quality_hidden": 16,
        "quality_dim": 16,
        "qnetb_quality_hidden": 16,
        "fnetb_hidden": [16, 16],
        "learnable_projections": True,
        "seed": 0,
    },
    "hyperparams": {
        "m1": 1.1, "m2": 0.4, "m3": 0.2,
        "m1_k": 1.2, "m2_k": 0.4, "m3_k": 0.2,
        "lambda_u": 1.0, "lambda_r": 0.2, "lambda_c": 0.2,
        "lambda_ak": 0.3, "lambda_uk": 0.3,
        "lambda_h": 2.5, "lambda_h0": 1.0,
        "projection_dim": 30,
        "alpha_c": 0.5,
        "half_space": True,
        "verification_mode": False,
        "fixed_scale": None,
    },
    "dropout": {
        "mu": 0.2,
        "mu_k": None,        # null means 0.1 for every modality
        "fc_dropout": 0.5,
    },
    "trainer": {
        "epochs": 30,
        "batch_size": 16,
        "seed": 0,
        "checkpoint_every": 0,
        "momentum": 0.9,
        "weight_decay": 5.0e-4,
    },
    "schedule": {
        "lr0": 0.1,
        "decay": 0.1,
        "s0": 100000,
        "s1": 50000,
        "lr_min": 1.0e-6,
    },
    "eval": {
        "protocol": "verification",
        "pairs": 400,
        "positive_fraction": 0.5,
        "gallery_per_class": 4,
        "gallery_rep": "mean",
        "max_rank": 0,       # 0 means the full gallery size
        "seed": 0,
    },
}

FIELD_DOCS = {
    "generator.seed": "generator RNG seed (maps, latents, noise)",
    "generator.n_classes": "number of identity classes to synthesize",
    "generator.class_start": "label offset, for held-out class ranges",
    "generator.identity_dim": "dimension of the shared latent identity",
    "generator.sets_per_class": "sample sets per class (capped at 25)",
    "generator.p_min": "minimum samples per modality per set",
    "generator.p_max": "maximum samples per modality per set",
    "generator.gamma_min": "lower bound of per-sample corruption gamma",
    "generator.gamma_max": "upper bound of per-sample corruption gamma",
    "generator.modalities": "list of {dim, base_noise, noise_scale}",
    "model.feature_dim": "embedding dimension D of both fusion blocks",
    "model.encoder_hidden": "two hidden widths of each sample encoder",
    "model.encoder_quality_hidden": "hidden width of the encoder score branch",
    "model.quality_dim": "dimension v of each modality quality vector",
    "model.qnetb_quality_hidden": "hidden width of the modality score branch",
    "model.fnetb_hidden": "two hidden widths of the inter-modality scorer",
    "model.learnable_projections": "train the energy projections (else fixed random)",
    "model.seed": "parameter initialization seed",
    "hyperparams.m1": "multiplicative angular margin (multimodal head)",
    "hyperparams.m2": "additive angle margin (multimodal head)",
    "hyperparams.m3": "additive cosine margin (multimodal head)",
    "hyperparams.m1_k": "multiplicative angular margin (unimodal heads)",
    "hyperparams.m2_k": "additive angle margin (unimodal heads)",
    "hyperparams.m3_k": "additive cosine margin (unimodal heads)",
    "hyperparams.lambda_u": "weight of the center-uniformity loss",
    "hyperparams.lambda_r": "weight of the modality-norm balance loss",
    "hyperparams.lambda_c": "weight of the center-alignment loss",
    "hyperparams.lambda_ak": "weight of each unimodal angular loss",
    "hyperparams.lambda_uk": "weight of each unimodal uniformity loss",
    "hyperparams.lambda_h": "weight of the hidden-layer energy term",
    "hyperparams.lambda_h0": "weight of the classifier energy term",
    "hyperparams.projection_dim": "projected dimension for the energy terms",
    "hyperparams.alpha_c": "EMA rate pulling centers toward batch means",
    "hyperparams.half_space": "include negated copies in the energy sum",
    "hyperparams.verification_mode": "force lambda_c to zero",
    "hyperparams.fixed_scale": "replace the live feature norm (ablation only)",
    "dropout.mu": "inter-modality score dropout probability",
    "dropout.mu_k": "per-modality score dropout probabilities (null -> 0.1 each)",
    "dropout.fc_dropout": "inverted dropout rate on hidden FC activations",
    "trainer.epochs": "full passes over the training sets",
    "trainer.batch_size": "sample sets per step (sets are never split)",
    "trainer.seed": "training RNG seed (batch order, dropout)",
    "trainer.checkpoint_every": "steps between checkpoints (0 = end only)",
    "trainer.momentum": "heavy-ball momentum coefficient",
    "trainer.weight_decay": "L2 weight decay folded into the gradient",
    "schedule.lr0": "initial learning rate",
    "schedule.decay": "multiplicative decay factor per stage",
    "schedule.s0": "step of the first decay",
    "schedule.s1": "steps between subsequent decays",
    "schedule.lr_min": "learning-rate floor",
    "eval.protocol": "verification | identification",
    "eval.pairs": "number of verification pairs",
    "eval.positive_fraction": "fraction of genuine pairs",
    "eval.gallery_per_class": "gallery sample sets per class",
    "eval.gallery_rep": "gallery class representation: mean | best",
    "eval.max_rank": "CMC curve length (0 = gallery size)",
    "eval.seed": "split/pairing seed",
}


def _merge(defaults, override, path):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {path}{key}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, f"{path}{key}.")
        elif key == "modalities":
            out[key] = [_merge(MODALITY_DEFAULTS, m, f"{path}{key}[{i}].")
                        for i, m in enumerate(value)]
        else:
            out[key] = value
    return out


def resolve(overrides=None):
    """Merge user overrides over the defaults, rejecting unknown keys."""
    return _merge(DEFAULTS, overrides or {}, "")


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    return resolve(raw)


def loads_config(text):
    return resolve(yaml.safe_load(text) or {})


def canonical_text(resolved):
    """Deterministic YAML serialization of a resolved config."""
    return yaml.safe_dump(resolved, sort_keys=True, default_flow_style=False)


def defaults_text():
    return canonical_text(resolve())


# --- builders --------------------------------------------------------------------

def build_generator(resolved, seed=None, class_start=None, n_classes=None):
    g = resolved["generator"]
    return GeneratorConfig(
        seed=g["seed"] if seed is None else seed,
        n_classes=g["n_classes"] if n_classes is None else n_classes,
        class_start=g["class_start"] if class_start is None else class_start,
        identity_dim=g["identity_dim"],
        sets_per_class=g["sets_per_class"],
        p_min=g["p_min"], p_max=g["p_max"],
        gamma_min=g["gamma_min"], gamma_max=g["gamma_max"],
        modalities=[ModalitySpec(**m) for m in g["modalities"]])


def build_model_config(resolved):
    g = resolved["generator"]
    m = resolved["model"]
    return ModelConfig(
        input_dims=[mod["dim"] for mod in g["modalities"]],
        n_classes=g["n_classes"],
        feature_dim=m["feature_dim"],
        encoder_hidden=tuple(m["encoder_hidden"]),
        encoder_quality_hidden=m["encoder_quality_hidden"],
        quality_dim=m["quality_dim"],
        qnetb_quality_hidden=m["qnetb_quality_hidden"],
        fnetb_hidden=tuple(m["fnetb_hidden"]),
        projection_dim=resolved["hyperparams"]["projection_dim"],
        alpha_c=resolved["hyperparams"]["alpha_c"],
        learnable_projections=m["learnable_projections"],
        seed=m["seed"])


def build_hyperparams(resolved):
    return HyperParams(**resolved["hyperparams"])


def build_dropout(resolved):
    d = resolved["dropout"]
    k = len(resolved["generator"]["modalities"])
    mu_k = d["mu_k"] if d["mu_k"] is not None else [0.1] * k
    if len(mu_k) != k:
        raise ConfigError(
            f"dropout.mu_k has {len(mu_k)} entries for {k} modalities")
    return DropoutSpec(mu_k=list(mu_k), mu=d["mu"], fc_dropout=d["fc_dropout"],
                       training=False, seed=resolved["trainer"]["seed"])


def build_schedule(resolved):
    return Schedule(**resolved["schedule"])


def build_optimizer(resolved):
    t = resolved["trainer"]
    return OptimizerState(momentum=t["momentum"],
                          weight_decay=t["weight_decay"])
