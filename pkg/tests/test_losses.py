import math

import numpy as np
import pytest

from qamf import autodiff as ad
from qamf import fusion as fu
from qamf import losses as ls


def head_from_rows(rows):
    head = ls.ClassifierHead(len(rows), len(rows[0]),
                             np.random.default_rng(0))
    head.weights.value[:] = np.asarray(rows, dtype=np.float64)
    return head


# --- angular loss -------------------------------------------------------------

def test_angular_loss_orthogonal_other_class():
    # m=(1,0,0), unit feature aligned with its class vector, other at 90 deg
    head = head_from_rows([[1.0, 0.0], [0.0, 1.0]])
    x = ad.constant([1.0, 0.0])
    loss = ls.angular_loss([(x, 0)], head, 1.0, 0.0, 0.0)
    expected = -math.log(math.e / (math.e + 1.0))
    # cos(theta_y) sits exactly on the arccos clamp boundary, which
    # perturbs the target logit by 1e-7
    assert abs(loss.item() - expected) < 1e-6
    assert abs(loss.item() - 0.31326) < 1e-5


def test_angular_loss_equiangular_is_log_m():
    # all class vectors at the same angle from x -> uniform softmax
    head = head_from_rows([
        [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    x = ad.constant([1.0, 1.0, 1.0])
    loss = ls.angular_loss([(x, 1)], head, 1.0, 0.0, 0.0)
    assert abs(loss.item() - math.log(3)) < 1e-12


def test_angular_loss_m3_increases_loss():
    head = head_from_rows([[1.0, 0.0], [0.0, 1.0]])
    x = ad.constant([1.0, 0.0])
    base = ls.angular_loss([(x, 0)], head, 1.0, 0.0, 0.0).item()
    with_m3 = ls.angular_loss([(x, 0)], head, 1.0, 0.0, 0.2).item()
    assert with_m3 > base


def test_angular_loss_plain_margins_equal_softmax_ce():
    rng = np.random.default_rng(42)
    for _ in range(20):
        m, d, n = 4, 5, 3
        rows = rng.normal(size=(m, d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        head = head_from_rows(rows)
        feats = [(ad.constant(rng.normal(size=d) * rng.uniform(0.5, 3)),
                  int(rng.integers(m))) for _ in range(n)]
        loss = ls.angular_loss(feats, head, 1.0, 0.0, 0.0).item()
        # brute-force softmax cross-entropy on ||x|| cos(theta) logits
        ref = 0.0
        for x, y in feats:
            logits = np.linalg.norm(x.value) * (
                rows @ x.value / np.linalg.norm(x.value))
            p = np.exp(logits - logits.max())
            p /= p.sum()
            ref -= math.log(p[y])
        ref /= n
        assert abs(loss - ref) < 1e-10


def test_angular_loss_zero_feature_errors():
    head = head_from_rows([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ls.LossError):
        ls.angular_loss([(ad.constant([0.0, 0.0]), 0)], head, 1.0, 0.0, 0.0)


def test_angular_loss_needs_two_classes():
    head = head_from_rows([[1.0, 0.0]])
    with pytest.raises(ls.LossError):
        ls.angular_loss([(ad.constant([1.0, 0.0]), 0)], head, 1.0, 0.0, 0.0)


def test_renormalization_preserves_loss():
    rng = np.random.default_rng(7)
    rows = rng.normal(size=(3, 4))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    head = head_from_rows(rows)
    feats = [(ad.constant(rng.normal(size=4)), 1)]
    before = ls.angular_loss(feats, head, 1.1, 0.4, 0.2).item()
    head.weights.value *= rng.uniform(0.5, 2.0, size=(3, 1))
    head.renormalize()
    after = ls.angular_loss(feats, head, 1.1, 0.4, 0.2).item()
    assert abs(before - after) < 1e-12


def test_angular_loss_gradient():
    rng = np.random.default_rng(8)
    rows = rng.normal(size=(3, 4))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    head = head_from_rows(rows)
    x = ad.parameter(rng.normal(size=4))
    params = {"V": head.weights, "x": x}
    report = ad.grad_check_params(
        lambda: ls.angular_loss([(x, 2)], head, 1.1, 0.4, 0.2),
        params, tol=1e-4)
    assert report.passed, report


# --- uniform loss ---------------------------------------------------------------

def test_uniform_loss_closed_forms():
    c = ad.constant([[0.0, 0.0], [1.0, 0.0]])
    assert abs(ls.uniform_loss(c).item() - 0.5) < 1e-12
    c = ad.constant([[1.0, 2.0], [1.0, 2.0]])
    assert abs(ls.uniform_loss(c).item() - 1.0) < 1e-12
    c = ad.constant([[0.0, 0.0], [999.0, 0.0]])
    assert abs(ls.uniform_loss(c).item() - 0.001) < 1e-12


def test_uniform_loss_monotone_in_distance():
    base = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    l0 = ls.uniform_loss(ad.constant(base)).item()
    moved = base.copy()
    moved[1] = [4.0, 0.0]  # increase one pairwise distance, shrink none
    # moving center 1 outward increases d(0,1) and d(1,2)
    assert np.linalg.norm(moved[1] - moved[2]) > np.linalg.norm(base[1] - base[2])
    l1 = ls.uniform_loss(ad.constant(moved)).item()
    assert l1 < l0


def test_uniform_loss_gradient():
    rng = np.random.default_rng(9)
    c = ad.parameter(rng.normal(size=(4, 3)))
    report = ad.grad_check_params(lambda: ls.uniform_loss(c), {"c": c},
                                  tol=1e-4)
    assert report.passed, report


# --- representation loss --------------------------------------------------------

def test_representation_loss_equal_norms_is_zero():
    z = [[ad.constant([3.0, 0.0]), ad.constant([0.0, 3.0])]]
    assert abs(ls.representation_loss(z).item()) < 1e-15


def test_representation_loss_closed_form():
    z = [[ad.constant([3.0, 0.0]), ad.constant([1.0, 0.0])]]
    assert abs(ls.representation_loss(z).item() - 1.0) < 1e-12
    z = [[ad.constant([6.0, 0.0]), ad.constant([2.0, 0.0])]]
    assert abs(ls.representation_loss(z).item() - 2.0) < 1e-12


def test_representation_loss_single_modality_is_zero():
    z = [[ad.constant([3.0, 0.0])]]
    assert ls.representation_loss(z).item() == 0.0


def test_representation_loss_all_zero_errors():
    z = [[ad.constant([0.0, 0.0]), ad.constant([0.0, 0.0])]]
    with pytest.raises(ls.LossError):
        ls.representation_loss(z)


def test_representation_loss_gradient():
    rng = np.random.default_rng(10)
    a = ad.parameter(rng.normal(size=4) + 2.0)
    b = ad.parameter(rng.normal(size=4))
    c = ad.parameter(rng.normal(size=4) - 1.0)
    report = ad.grad_check_params(
        lambda: ls.representation_loss([[a, b, c]]),
        {"a": a, "b": b, "c": c}, tol=1e-4)
    assert report.passed, report


# --- center alignment loss -------------------------------------------------------

def bank_with(cz, ck_list, alpha=0.5):
    m, d = np.atleast_2d(cz).shape
    spaces = ["z"] + [f"y{k}" for k in range(len(ck_list))]
    bank = ls.CenterBank(m, d, spaces, alpha, np.random.default_rng(0))
    bank.centers["z"].value[:] = np.atleast_2d(cz)
    for k, ck in enumerate(ck_list):
        bank.centers[f"y{k}"].value[:] = np.atleast_2d(ck)
    return bank


def test_center_alignment_parallel_is_zero():
    bank = bank_with([[2.0, 0.0]], [[[5.0, 0.0]]])
    assert abs(ls.center_alignment_loss(bank).item()) < 1e-15


def test_center_alignment_antiparallel_is_four():
    bank = bank_with([[2.0, 0.0]], [[[-3.0, 0.0]]])
    assert abs(ls.center_alignment_loss(bank).item() - 4.0) < 1e-12


def test_center_alignment_orthogonal_is_two():
    bank = bank_with([[2.0, 0.0]], [[[0.0, 5.0]]])
    assert abs(ls.center_alignment_loss(bank).item() - 2.0) < 1e-12


def test_center_alignment_zero_center_errors():
    bank = bank_with([[0.0, 0.0]], [[[1.0, 0.0]]])
    with pytest.raises(ls.LossError):
        ls.center_alignment_loss(bank)


# --- hyperspherical energy --------------------------------------------------------

def test_energy_two_orthogonal_unit_vectors():
    w = ad.constant([[1.0, 0.0], [0.0, 1.0]])
    assert abs(ls.hyperspherical_energy(w).item() - 1.0) < 1e-12


def test_energy_antipodal_full_vs_half_space():
    w = ad.constant([[1.0, 0.0], [-1.0, 0.0]])
    assert abs(ls.hyperspherical_energy(w).item() - 0.5) < 1e-12
    half = ls.hyperspherical_energy(w, half_space=True).item()
    assert half > 1e11  # duplicate virtual vectors hit the distance floor


def test_energy_invariant_to_row_rescaling():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(4, 3))
    e1 = ls.hyperspherical_energy(ad.constant(w)).item()
    scales = rng.uniform(0.1, 10.0, size=(4, 1))
    e2 = ls.hyperspherical_energy(ad.constant(w * scales)).item()
    assert abs(e1 - e2) < 1e-9 * max(1.0, abs(e1))


def test_energy_with_projection_gradient():
    rng = np.random.default_rng(12)
    w = ad.parameter(rng.normal(size=(4, 6)))
    p = ad.parameter(rng.normal(size=(3, 6)))
    report = ad.grad_check_params(
        lambda: ls.hyperspherical_energy(w, projection=p, half_space=True),
        {"w": w, "p": p}, tol=1e-4)
    assert report.passed, report


def test_energy_rejects_degenerate_inputs():
    with pytest.raises(ls.LossError):
        ls.hyperspherical_energy(ad.constant([[1.0, 0.0]]))
    with pytest.raises(ls.LossError):
        ls.hyperspherical_energy(ad.constant([[1.0, 0.0], [0.0, 0.0]]))


# --- compactness loss ----------------------------------------------------------------

class _StubModel:
    def __init__(self, weights, projections, head):
        self._weights = weights
        self.projections = projections
        self.heads = {"z": head}

    def hidden_weight_matrices(self):
        return self._weights


def test_compactness_zero_weights():
    hp = ls.HyperParams(lambda_h=0.0, lambda_h0=0.0)
    model = _StubModel([], ls.ProjectionBank([], 30, np.random.default_rng(0)),
                       head_from_rows([[1.0, 0.0], [0.0, 1.0]]))
    loss, breakdown = ls.compactness_loss(model, hp)
    assert loss.item() == 0.0
    assert breakdown["compact_hidden"] == 0.0
    assert breakdown["compact_out"] == 0.0


def test_compactness_single_layer_closed_form():
    # one hidden layer whose 2 neurons are orthogonal unit vectors;
    # full space, width below the projection cap -> identity projection
    w = ad.parameter(np.array([[1.0, 0.0], [0.0, 1.0]]))  # (fan_in, neurons)
    model = _StubModel([w], ls.ProjectionBank([2], 30, np.random.default_rng(0)),
                       head_from_rows([[1.0, 0.0], [0.0, 1.0]]))
    hp = ls.HyperParams(lambda_h=2.5, lambda_h0=0.0, half_space=False)
    loss, _ = ls.compactness_loss(model, hp)
    assert abs(loss.item() - 2.5 * 0.5 * 1.0) < 1e-12


def test_compactness_gradient_with_projection():
    rng = np.random.default_rng(13)
    w1 = ad.parameter(rng.normal(size=(5, 3)))   # width 5 > cap 4 -> projected
    w2 = ad.parameter(rng.normal(size=(3, 4)))
    bank = ls.ProjectionBank([5, 3], 4, rng)
    head = head_from_rows(rng.normal(size=(3, 4)))
    head.renormalize()
    model = _StubModel([w1, w2], bank, head)
    hp = ls.HyperParams(lambda_h=1.0, lambda_h0=1.0)
    params = {"w1": w1, "w2": w2, "head": head.weights}
    params.update({f"p{k}": v for k, v in bank.by_width.items()})
    report = ad.grad_check_params(
        lambda: ls.compactness_loss(model, hp)[0], params, tol=1e-4)
    assert report.passed, report


# --- separability and total loss --------------------------------------------------------

def build_model_and_batch(k=2, n_classes=3, seed=0, n_sets=3):
    cfg = fu.ModelConfig(
        input_dims=[6] * k, n_classes=n_classes, feature_dim=4,
        encoder_hidden=(5, 5), encoder_quality_hidden=3, quality_dim=3,
        qnetb_quality_hidden=3, fnetb_hidden=(4, 4), seed=seed)
    model = fu.FusionModel(cfg)
    rng = np.random.default_rng(seed + 100)
    sets = [fu.MultimodalSampleSet(
        samples=[rng.normal(size=(int(rng.integers(1, 4)), 6))
                 for _ in range(k)],
        label=int(rng.integers(n_classes))) for _ in range(n_sets)]
    outputs = [fu.model_forward(model, s) for s in sets]
    return model, outputs


def test_separability_all_lambdas_zero_reduces_to_angular():
    model, outputs = build_model_and_batch()
    hp = ls.HyperParams(lambda_u=0.0, lambda_r=0.0, lambda_c=0.0,
                        lambda_ak=0.0, lambda_uk=0.0)
    loss, breakdown = ls.separability_loss(outputs, model, hp)
    la = ls.angular_loss([(fo.z, fo.label) for fo in outputs],
                         model.heads["z"], hp.m1, hp.m2, hp.m3)
    assert abs(loss.item() - la.item()) < 1e-12
    assert breakdown["uniform"] == 0.0


def test_verification_mode_forces_lambda_c_zero():
    model, outputs = build_model_and_batch(seed=1)
    hp = ls.HyperParams(lambda_c=0.7, verification_mode=True)
    assert hp.effective_lambda_c == 0.0
    _, breakdown = ls.separability_loss(outputs, model, hp)
    assert breakdown["center_align"] == 0.0


def test_breakdown_sums_to_total():
    model, outputs = build_model_and_batch(seed=4)
    hp = ls.HyperParams()
    loss, breakdown = ls.total_loss(outputs, model, hp)
    parts = sum(v for k, v in breakdown.items() if k != "total")
    assert abs(parts - breakdown["total"]) < 1e-12
    assert abs(loss.item() - breakdown["total"]) < 1e-15


def test_all_losses_nonnegative():
    model, outputs = build_model_and_batch(seed=3)
    hp = ls.HyperParams()
    _, breakdown = ls.total_loss(outputs, model, hp)
    for name, v in breakdown.items():
        assert v >= 0.0, (name, v)


# --- center updates ------------------------------------------------------------------------

def test_update_centers_rules():
    bank = bank_with([[0.0, 0.0]], [[[1.0, 1.0]]], alpha=1.0)
    ls.update_centers(bank, {"z": {0: [np.array([2.0, 0.0])]}})
    assert np.allclose(bank.centers["z"].value[0], [2.0, 0.0])

    bank = bank_with([[0.5, 0.5]], [[[1.0, 1.0]]], alpha=0.0)
    ls.update_centers(bank, {"z": {0: [np.array([2.0, 0.0])]}})
    assert np.allclose(bank.centers["z"].value[0], [0.5, 0.5])

    bank = bank_with([[0.0, 0.0]], [[[1.0, 1.0]]], alpha=0.5)
    ls.update_centers(bank, {"z": {0: [np.array([2.0, 0.0])]}})
    assert np.allclose(bank.centers["z"].value[0], [1.0, 0.0])


def test_update_centers_absent_class_unchanged():
    bank = bank_with([[1.0, 2.0], [3.0, 4.0]], [], alpha=0.5)
    ls.update_centers(bank, {"z": {0: [np.array([5.0, 6.0])]}})
    assert np.allclose(bank.centers["z"].value[1], [3.0, 4.0])
