import numpy as np
import pytest

from qamf import synthdata as sd
from qamf.metrics import quality_correlation


def small_config(**kw):
    base = dict(
        seed=0, n_classes=6, identity_dim=8, sets_per_class=6,
        p_min=1, p_max=3,
        modalities=[sd.ModalitySpec(dim=16, base_noise=0.05, noise_scale=0.8),
                    sd.ModalitySpec(dim=12, base_noise=0.2, noise_scale=0.8)])
    base.update(kw)
    return sd.GeneratorConfig(**base)


def test_noiseless_samples_identical():
    cfg = small_config(gamma_min=0.0, gamma_max=0.0, p_min=2, p_max=2,
                       modalities=[sd.ModalitySpec(dim=16, base_noise=0.0)])
    ds = sd.generate(cfg)
    for s in ds.sets:
        assert np.array_equal(s.samples[0][0], s.samples[0][1])


def test_generation_deterministic():
    cfg = small_config()
    a = sd.write_dataset_bytes(sd.generate(cfg))
    b = sd.write_dataset_bytes(sd.generate(small_config()))
    assert a == b


def test_distance_grows_with_gamma_bucket():
    means = []
    for gamma in (0.0, 0.5, 1.0):
        cfg = small_config(gamma_min=gamma, gamma_max=gamma, p_min=2, p_max=2,
                           sets_per_class=10, n_classes=10,
                           modalities=[sd.ModalitySpec(dim=16, base_noise=0.0)])
        ds = sd.generate(cfg)
        dists = [np.linalg.norm(s.samples[0][0] - s.samples[0][1])
                 for s in ds.sets]
        means.append(np.mean(dists))
    assert means[0] < means[1] < means[2]


def test_quality_metadata_tracks_noise_energy():
    cfg = small_config(n_classes=25, sets_per_class=10, p_min=4, p_max=4,
                       modalities=[sd.ModalitySpec(dim=16, base_noise=0.02,
                                                   noise_scale=0.8)])
    ds = sd.generate(cfg)
    maps = sd.modality_maps(cfg)
    quality, energy = [], []
    for s in ds.sets:
        clean = sd.clean_signal(cfg, s.label, 0, maps)
        for x, g in zip(s.samples[0], s.gammas[0]):
            quality.append(1.0 - g)
            energy.append(float(np.sum((x - clean) ** 2)))
    assert len(quality) >= 1000
    rho = quality_correlation(quality, energy)
    assert rho <= -0.9


def test_invalid_configs_rejected():
    with pytest.raises(sd.DataError):
        small_config(sets_per_class=26)
    with pytest.raises(sd.DataError):
        small_config(p_min=0)
    with pytest.raises(sd.DataError):
        small_config(gamma_min=0.7, gamma_max=0.3)
    with pytest.raises(sd.DataError):
        small_config(modalities=[sd.ModalitySpec(dim=4)])  # below identity_dim


def test_heldout_class_range_shares_maps():
    cfg = small_config()
    held = small_config(class_start=100)
    assert np.array_equal(sd.modality_maps(cfg)[0], sd.modality_maps(held)[0])
    labels = sd.generate(held).labels()
    assert min(labels) == 100


# --- chimeric pairing -------------------------------------------------------

def test_chimeric_single_pool_is_identity_sized():
    cfg = small_config(modalities=[sd.ModalitySpec(dim=16)])
    ds = sd.generate(cfg)
    pool = sd.unimodal_pool(ds, 0)
    chim, assignment = sd.chimeric_pair([pool], n_subjects=6, seed=0)
    assert sorted(assignment[0]) == sorted(pool.keys())
    assert len(chim.labels()) == 6


def test_chimeric_assignment_injective_and_seed_dependent():
    cfg = small_config()
    ds = sd.generate(cfg)
    pools = [sd.unimodal_pool(ds, 0), sd.unimodal_pool(ds, 1)]
    seen = set()
    for seed in range(5):
        chim, assignment = sd.chimeric_pair(pools, n_subjects=5, seed=seed)
        for per_pool in assignment:
            assert len(per_pool) == len(set(per_pool))
        seen.add(tuple(tuple(a) for a in assignment))
        for s in chim.sets:
            assert s.n_modalities == 2
    assert len(seen) >= 4  # different seeds give different assignments


def test_chimeric_pool_too_small():
    cfg = small_config()
    pool = sd.unimodal_pool(sd.generate(cfg), 0)
    with pytest.raises(sd.DataError):
        sd.chimeric_pair([pool], n_subjects=7, seed=0)


# --- splits -------------------------------------------------------------------

def test_identification_split_one_probe_per_class():
    cfg = small_config(sets_per_class=5)
    ds = sd.generate(cfg)
    split = sd.split_identification(ds, gallery_per_class=4, seed=1)
    per_class = {}
    for p in split.probes:
        per_class[p.label] = per_class.get(p.label, 0) + 1
    assert all(v == 1 for v in per_class.values())
    assert len(split.gallery) == 4 * cfg.n_classes
    gallery_classes = {g.label for g in split.gallery}
    assert all(p.label in gallery_classes for p in split.probes)


def test_identification_split_insufficient_names_class():
    cfg = small_config(sets_per_class=3)
    ds = sd.generate(cfg)
    with pytest.raises(sd.DataError) as ei:
        sd.split_identification(ds, gallery_per_class=3, seed=0)
    assert "class" in str(ei.value)


def test_verification_split_counts_and_labels():
    cfg = small_config(sets_per_class=6)
    ds = sd.generate(cfg)
    split = sd.split_verification(ds, pairs=100, positive_fraction=0.5, seed=2)
    genuine = [p for p in split.pairs if p[2]]
    impostor = [p for p in split.pairs if not p[2]]
    assert len(genuine) == 50 and len(impostor) == 50
    assert all(a.label == b.label for a, b, _ in genuine)
    assert all(a.label != b.label for a, b, _ in impostor)


def test_verification_split_deterministic():
    cfg = small_config()
    ds = sd.generate(cfg)
    s1 = sd.split_verification(ds, pairs=40, seed=3)
    s2 = sd.split_verification(ds, pairs=40, seed=3)
    ids1 = [(id(a), id(b), g) for a, b, g in s1.pairs]
    ids2 = [(id(a), id(b), g) for a, b, g in s2.pairs]
    assert ids1 == ids2


# --- QADS format -----------------------------------------------------------------

def test_qads_roundtrip_bit_exact():
    cfg = small_config()
    ds = sd.generate(cfg)
    ds.config_text = "seed: 0\nnote: provenance text\n"
    raw = sd.write_dataset_bytes(ds)
    back = sd.read_dataset_bytes(raw)
    assert back.config_text == ds.config_text
    assert len(back.sets) == len(ds.sets)
    for a, b in zip(ds.sets, back.sets):
        assert a.label == b.label
        for sa, sb, ga, gb in zip(a.samples, b.samples, a.gammas, b.gammas):
            assert np.array_equal(sa, sb)
            assert np.array_equal(ga, gb)
    assert sd.write_dataset_bytes(back) == raw


def test_qads_rejects_corruption(tmp_path):
    cfg = small_config(n_classes=2, sets_per_class=2)
    ds = sd.generate(cfg)
    raw = bytearray(sd.write_dataset_bytes(ds))
    with pytest.raises(sd.FormatError):
        sd.read_dataset_bytes(bytes(b"XXXX") + bytes(raw[4:]))
    bad_version = bytearray(raw)
    bad_version[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(sd.FormatError):
        sd.read_dataset_bytes(bytes(bad_version))
    with pytest.raises(sd.FormatError):
        sd.read_dataset_bytes(bytes(raw[:-3]))


def test_qads_file_io(tmp_path):
    cfg = small_config(n_classes=3, sets_per_class=2)
    ds = sd.generate(cfg)
    path = tmp_path / "data.qads"
    sd.write_dataset(path, ds)
    back = sd.read_dataset(path)
    assert sd.write_dataset_bytes(back) == sd.write_dataset_bytes(ds)
