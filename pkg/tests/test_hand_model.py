import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoflow.geometry import RigidPose, axis_angle_to_matrix, decode_translation
from hoflow.hand_model import (FINGERTIPS, HAND_FIXED_ROWS, NUM_KEYPOINTS, NUM_PCA, NUM_SHAPE,
                               HandParams, InvalidRegressorError, SkinnedModel, adapt_skeleton,
                               articulate, box_mesh, check_regressor, fit_skeleton, hand_forward,
                               load_model, regress_joints, save_model, toy_chain_model,
                               toy_hand_model)
from hoflow.losses import joint_loss


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@pytest.fixture(scope="module")
def hand():
    return toy_hand_model(0)


def test_chain_rest_pose_is_template():
    m = toy_chain_model()
    v, piv = articulate(m, torch.zeros(NUM_PCA), torch.zeros(NUM_SHAPE))
    np.testing.assert_allclose(v.numpy(), m.template_vertices, atol=1e-15)
    np.testing.assert_allclose(piv.numpy(), [[0, 0, 0], [1, 0, 0], [2, 0, 0]], atol=1e-15)


@pytest.mark.parametrize("a", [0.3, -1.1, np.pi / 2])
def test_chain_bend_matches_closed_form(a):
    """Rotating joint 1 about z by a swings the second bone rigidly about (1, 0, 0)."""
    m = toy_chain_model()
    pca = torch.zeros(NUM_PCA, dtype=torch.float64)
    pca[0] = a
    v, piv = articulate(m, pca, torch.zeros(NUM_SHAPE))
    T = m.template_vertices
    expected = T.copy()
    second = m.skinning_weights[:, 1] == 1
    expected[second] = (T[second] - [1, 0, 0]) @ rot_z(a).T + [1, 0, 0]
    np.testing.assert_allclose(v.numpy(), expected, atol=1e-14)
    np.testing.assert_allclose(piv.numpy()[2], [1 + np.cos(a), np.sin(a), 0], atol=1e-14)


def test_chain_two_joint_rotations_compose():
    m = toy_chain_model()
    pca = torch.zeros(NUM_PCA, dtype=torch.float64)
    pca[0], pca[3] = 0.4, 0.7  # joint 1 and joint 2 about z
    _, piv = articulate(m, pca, torch.zeros(NUM_SHAPE))
    np.testing.assert_allclose(piv.numpy()[2], [1 + np.cos(0.4), np.sin(0.4), 0], atol=1e-14)
    # joint 2 carries no vertices in the chain, so its local rotation moves nothing
    pca2 = pca.clone()
    pca2[3] = 0.0
    v1, _ = articulate(m, pca, torch.zeros(NUM_SHAPE))
    v2, _ = articulate(m, pca2, torch.zeros(NUM_SHAPE))
    np.testing.assert_allclose(v1.numpy(), v2.numpy(), atol=1e-15)


def test_shape_blendshape_is_linear_at_rest():
    m = toy_chain_model()
    beta = torch.zeros(NUM_SHAPE, dtype=torch.float64)
    beta[0] = 0.5
    v, _ = articulate(m, torch.zeros(NUM_PCA), beta)
    np.testing.assert_allclose(v.numpy(), 1.5 * m.template_vertices, atol=1e-14)


def test_hand_dimensions(hand):
    assert hand.num_joints == 16
    assert hand.joint_regressor.shape == (NUM_KEYPOINTS, hand.num_vertices)
    assert hand.fixed_rows == HAND_FIXED_ROWS
    assert hand.pose_basis.shape == (NUM_PCA, 45)
    assert hand.shape_basis.shape[0] == NUM_SHAPE


def test_hand_rest_pose_and_wrist(hand):
    v, piv = articulate(hand, torch.zeros(NUM_PCA), torch.zeros(NUM_SHAPE))
    np.testing.assert_allclose(v.numpy(), hand.template_vertices, atol=1e-15)
    np.testing.assert_allclose(piv.numpy()[0], 0.0, atol=1e-15)


def test_hand_forward_applies_global_pose(hand, cam, rng):
    params = HandParams(rng.normal(0, 0.5, NUM_PCA), rng.normal(0, 0.5, NUM_SHAPE),
                        RigidPose(rng.normal(0, 0.5, 3), 0.001, 4.0, -3.0))
    mesh, joints = hand_forward(hand, params, cam)
    v, _ = articulate(hand, params.pca_pose, params.shape)
    R = axis_angle_to_matrix(params.global_pose.rotation).numpy()
    t = decode_translation(params.global_pose, cam).numpy()
    np.testing.assert_allclose(mesh.vertices.numpy(), v.numpy() @ R.T + t, atol=1e-14)
    np.testing.assert_allclose(joints.numpy(), (hand.joint_regressor @ v.numpy()) @ R.T + t, atol=1e-14)


def test_bones_keep_length_under_pose(hand, rng):
    """LBS with rigid bone segments: pivot distances are pose invariant."""
    _, rest = articulate(hand, torch.zeros(NUM_PCA), torch.zeros(NUM_SHAPE))
    _, posed = articulate(hand, rng.normal(0, 1, NUM_PCA), torch.zeros(NUM_SHAPE))
    for j in range(1, 16):
        p = hand.parents[j]
        assert np.linalg.norm(posed[j] - posed[p]) == pytest.approx(float(np.linalg.norm(rest[j] - rest[p])), abs=1e-14)


def test_fingertip_rows_pick_tip_vertices(hand):
    for r in FINGERTIPS:
        row = hand.joint_regressor[r]
        assert np.count_nonzero(row) == 1 and row.max() == 1.0


def test_regressor_rows_validated(hand):
    with pytest.raises(InvalidRegressorError, match="row 3"):
        bad = hand.joint_regressor.copy()
        bad[3, 0] += 0.01
        regress_joints(bad, hand.template_vertices)
    check_regressor(hand.joint_regressor)


def test_model_validation():
    m = toy_chain_model()
    with pytest.raises(ValueError):
        SkinnedModel(m.template_vertices, m.faces, m.shape_basis, m.pose_basis, np.array([-1, 2, 1]),
                     m.skinning_weights, m.pivot_regressor, m.joint_regressor)
    with pytest.raises(ValueError):
        SkinnedModel(m.template_vertices, m.faces, m.shape_basis, m.pose_basis, m.parents,
                     m.skinning_weights * 2, m.pivot_regressor, m.joint_regressor)


def test_articulate_rejects_wrong_coefficient_count(hand):
    with pytest.raises(ValueError):
        articulate(hand, torch.zeros(3), torch.zeros(NUM_SHAPE))


def test_adapt_zero_update_is_identity(hand):
    new = adapt_skeleton(hand, np.zeros_like(hand.joint_regressor))
    np.testing.assert_allclose(new.joint_regressor, hand.joint_regressor, atol=1e-15)


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_adapt_keeps_fixed_rows_and_row_sums(seed):
    m = toy_chain_model()
    rng = np.random.default_rng(seed)
    new = adapt_skeleton(m, rng.normal(0, 0.1, m.joint_regressor.shape))
    for r in m.fixed_rows:
        assert np.array_equal(new.joint_regressor[r], m.joint_regressor[r])
    np.testing.assert_allclose(new.joint_regressor.sum(1), 1.0, atol=1e-12)


def test_adapt_rejects_shape_mismatch(hand):
    with pytest.raises(ValueError):
        adapt_skeleton(hand, np.zeros((3, 3)))


def test_fit_skeleton_recovers_displaced_chain_joint():
    m = toy_chain_model()
    rng = np.random.default_rng(0)
    poses = [articulate(m, rng.normal(0, 0.6, NUM_PCA), torch.zeros(NUM_SHAPE))[0] for _ in range(8)]
    V = torch.stack(poses)
    target = torch.einsum("kn,bnc->bkc", torch.from_numpy(m.joint_regressor), V)
    # start from a regressor whose middle joint sits on the wrong ring
    wrong = m.joint_regressor.copy()
    wrong[1] = 0.0
    wrong[1, 12:16] = 0.25
    start = adapt_skeleton(m, wrong - m.joint_regressor)
    before = float(joint_loss(torch.einsum("kn,bnc->bkc", torch.from_numpy(start.joint_regressor), V), target))
    fitted = fit_skeleton(start, V, target, steps=300, step_size=1e-2)
    after = float(joint_loss(torch.einsum("kn,bnc->bkc", torch.from_numpy(fitted.joint_regressor), V), target))
    assert after < 0.1 * before
    for r in m.fixed_rows:
        assert np.array_equal(fitted.joint_regressor[r], start.joint_regressor[r])


def test_box_mesh_is_closed_and_deduplicated():
    v, f = box_mesh((1, 2, 3), (2, 3, 4))
    assert len(np.unique(v.round(12), axis=0)) == len(v)
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), 1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)  # watertight
    # Euler characteristic of a sphere
    assert len(v) - len(np.unique(edges, axis=0)) + len(f) == 2


def test_model_round_trip(tmp_path, hand):
    save_model(tmp_path / "h.skin.json", hand)
    back = load_model(tmp_path / "h.skin.json")
    assert back.fixed_rows == hand.fixed_rows
    np.testing.assert_array_equal(back.faces, hand.faces)
    np.testing.assert_array_equal(back.parents, hand.parents)
    np.testing.assert_allclose(back.template_vertices, hand.template_vertices, atol=1e-7)
    np.testing.assert_allclose(back.joint_regressor.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(back.skinning_weights.sum(1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        save_model(tmp_path / "h.json", hand)
