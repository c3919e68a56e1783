import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from scenemotion import autodiff as ad
from scenemotion import body
from scenemotion.body import IDENTITY_6D, N_BETAS, N_JOINTS, N_PARAMS


def random_frames(n, seed, spread=0.4):
    rng = np.random.default_rng(seed)
    p = np.zeros((n, N_PARAMS))
    p[:, :3] = rng.normal(size=(n, 3))
    p[:, 3:9] = body.matrix_to_rot6d(Rotation.random(n, random_state=seed).as_matrix())
    p[:, 9:] = rng.normal(scale=spread, size=(n, 3 * N_JOINTS))
    return p


def test_rot6d_examples():
    assert np.allclose(body.rot6d_to_matrix(IDENTITY_6D).data, np.eye(3))
    m = body.rot6d_to_matrix(np.array([0.0, 1, 0, -1, 0, 0])).data
    assert np.allclose(m[:, 0], [0, 1, 0]) and np.allclose(m[:, 1], [-1, 0, 0]) and np.allclose(m[:, 2], [0, 0, 1])
    assert np.allclose(body.rot6d_to_matrix(np.array([2.0, 0, 0, 1, 1, 0])).data, np.eye(3))


def test_rot6d_roundtrip():
    r = Rotation.random(5, random_state=1).as_matrix()
    assert np.allclose(body.rot6d_to_matrix(body.matrix_to_rot6d(r)).data, r)


def test_axis_angle_matches_scipy():
    aa = np.random.default_rng(2).normal(size=(6, 3))
    assert np.allclose(body.axis_angle_to_matrix(aa).data, Rotation.from_rotvec(aa).as_matrix())
    assert np.allclose(body.axis_angle_to_matrix(np.zeros(3)).data, np.eye(3))


def test_fk_rest_pose_and_translation():
    tpl = body.default_template()
    t = np.array([0.3, -1.0, 0.9])
    joints = body.forward_kinematics(body.rest_frame(translation=t)).data
    rest = np.zeros((N_JOINTS + 1, 3))
    for j in range(N_JOINTS):
        rest[j + 1] = rest[tpl.parents[j]] + tpl.offsets[j]
    assert np.allclose(joints, rest + t)
    p = random_frames(1, 3)[0]
    shifted = p.copy()
    shifted[:3] += [1.0, 2.0, -0.5]
    assert np.allclose(body.forward_kinematics(shifted).data - body.forward_kinematics(p).data, [1.0, 2.0, -0.5])


def test_fk_knee_flexion_two_link_oracle():
    tpl = body.default_template()
    names = list(tpl.names)
    knee, ankle, foot, hip = (names.index(n) for n in ("left_knee", "left_ankle", "left_foot", "left_hip"))
    p = body.rest_frame()
    p[9 + 3 * knee: 12 + 3 * knee] = [0.0, np.pi / 2, 0.0]
    got = body.forward_kinematics(p).data[foot + 1]
    ry = np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    knee_pos = tpl.offsets[hip] + tpl.offsets[knee]
    want = knee_pos + ry @ tpl.offsets[ankle] + ry @ tpl.offsets[foot]
    assert np.allclose(got, want, atol=1e-12)


def test_skin_rest_and_translation():
    v0 = body.skin_mesh(body.rest_frame()).data
    assert v0.shape == (body.default_template().num_vertices, 3)
    v1 = body.skin_mesh(body.rest_frame(translation=(1.0, 0.0, 2.0))).data
    assert np.allclose(v1 - v0, [1.0, 0.0, 2.0])


def test_within_bone_distances_pose_invariant():
    bone, _, _ = body.default_template().surface_directions()
    rest = body.skin_mesh(body.rest_frame()).data
    for p in random_frames(10, 4, spread=0.8):
        v = body.skin_mesh(p).data
        for j in range(N_JOINTS):
            idx = np.flatnonzero(bone == j)
            d0 = np.linalg.norm(rest[idx, None] - rest[None, idx], axis=-1)
            d1 = np.linalg.norm(v[idx, None] - v[None, idx], axis=-1)
            assert np.allclose(d0, d1, atol=1e-10)


def test_canonical_mesh_contract():
    p = random_frames(1, 5)[0]
    canon = body.canonical_mesh(p).data
    q = p.copy()
    q[:3] = 0.0
    q[3:9] = IDENTITY_6D
    assert np.allclose(canon, body.skin_mesh(q).data)
    q2 = p.copy()
    q2[3:9] = body.matrix_to_rot6d(Rotation.random(random_state=9).as_matrix())
    assert np.allclose(body.canonical_mesh(q2).data, canon)
    # undo the global rigid transform of the posed mesh
    rot = body.rot6d_to_matrix(p[3:9]).data
    back = (body.skin_mesh(p).data - p[:3]) @ rot
    assert np.allclose(back, canon, atol=1e-10)


def test_markers():
    tpl_joints = body.forward_kinematics(body.rest_frame()).data
    assert np.allclose(body.marker_positions(body.rest_frame()).data, tpl_joints[1:])
    p = random_frames(3, 6)
    m = body.marker_positions(p).data
    assert m.shape == (3, N_JOINTS, 3)
    p2 = p.copy()
    p2[:, :3] += 0.7
    assert np.allclose(body.marker_positions(p2).data - m, 0.7)


def test_capsule_point_segment_example():
    start = ad.Tensor(np.zeros((1, N_JOINTS, 3)))
    end = np.zeros((1, N_JOINTS, 3))
    end[0, :, 2] = 1.0
    radii = np.full((1, N_JOINTS), 0.1)
    d = body.capsule_distance(np.array([[0.5, 0.0, 0.5]]), start, ad.Tensor(end), ad.Tensor(radii)).data
    assert np.allclose(d, 0.4)


def test_body_sdf_zero_inside_and_positive_outside():
    p = body.rest_frame(translation=(0.0, 0.0, 1.0))
    assert body.body_sdf(p, None, np.array([[0.0, 0.0, 1.0]])).data == 0.0
    d = float(body.body_sdf(p, None, np.array([[3.0, 0.0, 1.0]])).data)
    assert 2.5 < d < 3.0


def test_body_sdf_rejects_empty_query():
    with pytest.raises(ValueError):
        body.body_sdf(body.rest_frame(), None, np.zeros((0, 3)))


def test_beta_changes_size_and_broadcasts():
    beta = np.zeros((2, N_BETAS))
    beta[1, 0] = 1.0
    frames = np.broadcast_to(body.rest_frame(), (2, 4, N_PARAMS))
    v = body.skin_mesh(frames, beta).data
    assert v.shape[:2] == (2, 4)
    assert not np.allclose(v[0], v[1])
    with pytest.raises(ad.ShapeError):
        body.skin_mesh(frames, np.zeros((3, N_BETAS)))


def test_standing_height_puts_body_on_floor():
    h = body.standing_height()
    v = body.skin_mesh(body.rest_frame(translation=(0, 0, h))).data
    assert v[:, 2].min() >= -1e-9


def test_template_dump_parse_roundtrip():
    tpl = body.default_template()
    again = body.SkeletonTemplate.parse(tpl.dumps())
    assert again.names == tpl.names and np.allclose(again.offsets, tpl.offsets)
