import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcp.config import PipelineConfig
from drcp.detect import Detection
from drcp.geometry import Pose2D
from drcp.mdma import MdmaParams
from drcp.sim.channel import ChannelConfig, FeatureCompressor, apply_channel, noisy_pose, payload_bytes
from drcp.sim.metrics import average_precision, match_frame
from drcp.sim.pipeline import (FrameAborted, PipelineParams, encode_scene, frame_features, fuse_messages,
                               run_frame, run_pipeline, transmit)
from drcp.sim.scene import SceneConfig, build_scene, generate_scene, visibility
from drcp.sim.sweep import Suite, point_channel, sweep
from drcp.tensor import RngStream
from drcp.validation import ContractViolation

CFG = PipelineConfig()
SPEC = CFG.grid
QUIET = SceneConfig(noise=0.0)
OCCLUDER = (20.0, 0.0, 8.0, 8.0, 0.0)
HIDDEN = Detection(40.0, 0.0, -0.8, 1.5, 1.8, 4.2, 0.3)


def cell_of(b, spec=SPEC):
    c, r = spec.metric_to_cell(b.x, b.y)
    return int(round(float(r))), int(round(float(c)))


# --- scenes -------------------------------------------------------------------------------

def test_scene_is_deterministic():
    a = generate_scene(SPEC, 3, RngStream(7))
    b = generate_scene(SPEC, 3, RngStream(7))
    assert [x.as_array().tolist() for x in a.boxes] == [x.as_array().tolist() for x in b.boxes]
    for ua, ub in zip(a.agents, b.agents):
        assert ua.lidar.tobytes() == ub.lidar.tobytes()
        assert all(fa.tobytes() == fb.tobytes() for fa, fb in zip(ua.camera_feats, ub.camera_feats))
    assert a.agents[0].pose == Pose2D()
    c = generate_scene(SPEC, 3, RngStream(8))
    assert c.agents[0].lidar.tobytes() != a.agents[0].lidar.tobytes()


def test_scene_agent_count_checked():
    for n in (0, 6):
        with pytest.raises(ContractViolation):
            generate_scene(SPEC, n, 0)


def test_ground_truth_inside_detection_range():
    sc = generate_scene(PipelineConfig(grid_height=128, grid_width=256).grid, 4, 3)
    for b in sc.ground_truth():
        assert -102.4 <= b.x < 102.4 and -51.2 <= b.y < 51.2


def test_occlusion_shadow():
    open_scene = build_scene(SPEC, [Pose2D()], [HIDDEN], [], QUIET, 1)
    shadowed = build_scene(SPEC, [Pose2D()], [HIDDEN], [OCCLUDER], QUIET, 1)
    r, c = cell_of(HIDDEN)
    assert open_scene.agents[0].visible[0] and not shadowed.agents[0].visible[0]
    assert open_scene.agents[0].lidar[0, r, c] > 0.5
    assert not shadowed.agents[0].lidar[:12].any()


def test_visibility_range_and_corner_rule():
    near = Detection(10.0, 0.0, -0.8, 1.5, 1.8, 4.2, 0.0)
    far = Detection(80.0, 0.0, -0.8, 1.5, 1.8, 4.2, 0.0)
    assert visibility((0.0, 0.0), [near, far], [], 60.0).tolist() == [True, False]
    # a thin pole hides the centre but not the corners
    assert visibility((0.0, 0.0), [near], [(5.0, 0.0, 0.2, 0.2, 0.0)], 60.0)[0]


def test_box_seen_only_by_second_agent_reaches_fused_map():
    params = PipelineParams.seeded(CFG)
    poses = [Pose2D(), Pose2D(60.0, 10.0, 2.5)]

    def fused(boxes, n):
        scene = build_scene(SPEC, poses, boxes, [OCCLUDER], QUIET, 3)
        return fuse_messages(encode_scene(scene, params)[:n], SPEC), scene

    with_box, scene = fused([HIDDEN], 2)
    assert scene.visible_to([0]).size == 0 and scene.visible_to([1]).tolist() == [0]
    r, c = cell_of(HIDDEN)
    solo_delta = fused([HIDDEN], 1)[0] - fused([], 1)[0]
    pair_delta = with_box - fused([], 2)[0]
    assert not solo_delta.any()
    assert pair_delta[0, r, c] > 0.2
    assert scene.ground_truth([0]) == [] and scene.ground_truth([0, 1]) == [HIDDEN]


# --- channel ------------------------------------------------------------------------------

def _message(rng, channels=(16, 16, 16), hw=(8, 16)):
    feats = [rng.standard_normal((c, hw[0] >> s, hw[1] >> s)).astype(np.float32) for s, c in enumerate(channels)]
    occs = [rng.uniform(size=f.shape[1:]).astype(np.float32) for f in feats]
    return feats, occs


def test_identity_channel(rng):
    feats, occs = _message(rng)
    pose = Pose2D(3.0, 1.0, 0.2)
    cfg = ChannelConfig()
    assert cfg.is_identity
    f2, o2, p2, payload = apply_channel(feats, occs, pose, cfg, RngStream(0))
    assert p2 == pose
    for a, b in zip(f2, feats):
        np.testing.assert_array_equal(a, b)
    assert payload == [f.size * 4 for f in feats]


def test_four_mib_map_at_ratio_32():
    four_mb = (256, 64, 64)
    assert payload_bytes(four_mb) == 4 * 2**20
    assert payload_bytes(four_mb, 32) / 2**20 == 0.125


def test_retained_subspace_recovered_exactly(rng):
    for ratio in (2, 4, 8, 16, 32):
        comp = FeatureCompressor(ratio, "random", 3).fit(np.zeros((1, 32, 2, 2)))
        assert comp.n_components_ == math.ceil(32 / ratio)
        coef = rng.standard_normal((comp.n_components_, 6, 5))
        signal = np.einsum("kc,khw->chw", comp.components_, coef).astype(np.float32)
        np.testing.assert_allclose(comp.roundtrip(signal), signal, atol=1e-5)
        np.testing.assert_allclose(comp.components_ @ comp.components_.T, np.eye(comp.n_components_), atol=1e-10)


def test_pca_basis_keeps_dominant_directions(rng):
    basis = np.linalg.qr(rng.standard_normal((16, 16)))[0][:, :4]
    X = np.einsum("ck,nkhw->nchw", basis, rng.standard_normal((5, 4, 6, 6))).astype(np.float32)
    comp = FeatureCompressor(4, "pca").fit(X)
    np.testing.assert_allclose(comp.inverse_transform(comp.transform(X)), X, atol=1e-4)


def test_compression_through_channel_and_cache(rng):
    feats, occs = _message(rng)
    cache = {}
    f2, o2, _, payload = apply_channel(feats, occs, Pose2D(), ChannelConfig(compression_ratio=4), RngStream(0),
                                       cache)
    assert sorted(cache) == [0, 1, 2]
    assert payload == [f.size * 4 / 4 for f in feats]
    for a, b in zip(f2, feats):
        assert a.shape == b.shape and not np.allclose(a, b)
    for a, b in zip(o2, occs):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractViolation):
        apply_channel(feats, occs, Pose2D(), ChannelConfig(compression_ratio=4, basis="pca"), RngStream(0))
    with pytest.raises(ContractViolation):
        ChannelConfig(compression_ratio=3)


def test_pose_noise_uses_common_random_numbers():
    pose = Pose2D(1.0, 2.0, 0.5)
    assert noisy_pose(pose, ChannelConfig(), RngStream(4)) == pose
    a = noisy_pose(pose, ChannelConfig(0.2, 0.01), RngStream(4))
    b = noisy_pose(pose, ChannelConfig(0.4, 0.02), RngStream(4))
    assert (b.x - pose.x) == pytest.approx(2 * (a.x - pose.x))
    assert (b.yaw - pose.yaw) == pytest.approx(2 * (a.yaw - pose.yaw))


@settings(max_examples=30)
@given(sxy=st.floats(0, 2), syaw=st.floats(0, 0.2), seed=st.integers(0, 2**31))
def test_noisy_pose_stays_finite(sxy, syaw, seed):
    p = noisy_pose(Pose2D(5.0, -3.0, 3.1), ChannelConfig(sxy, syaw), RngStream(seed))
    assert -math.pi < p.yaw <= math.pi and math.isfinite(p.x)


# --- pipeline -----------------------------------------------------------------------------

def test_colocated_identical_agents_match_single_agent(small_cfg, small_detector):
    params = small_detector.params_
    scene = generate_scene(small_cfg.grid, 1, RngStream(0, (9,)))
    msg = encode_scene(scene, params)[0]
    for use_mdma in (False, True):
        one = frame_features(scene, params, small_cfg, use_mdma=use_mdma, messages=[msg])[0]
        two = frame_features(scene, params, small_cfg, use_mdma=use_mdma, agent_ids=[0, 1], messages=[msg, msg])[0]
        np.testing.assert_allclose(two, one, atol=1e-5)


def test_mdma_identity_configuration_matches_ppxx_only(small_cfg, small_detector, small_suite):
    base = small_detector.params_
    c = base.fused_channels
    ident = PipelineParams(base.rg_cfg, base.rg, base.pyramid, base.occ_heads, base.adaptive,
                           MdmaParams.zeros(c, small_cfg.mdma_steps, keep_bias=20.0), base.heads, base.anchors)
    n_dets = 0
    for scene, fid, msgs in zip(small_suite.scenes, small_suite.frame_ids, small_suite.messages):
        a = run_frame(scene, ident, small_cfg, use_mdma=False, frame_id=fid, messages=msgs).detections
        b = run_frame(scene, ident, small_cfg, use_mdma=True, frame_id=fid, messages=msgs).detections
        assert [d.as_array().tolist() + [d.score] for d in a] == [d.as_array().tolist() + [d.score] for d in b]
        n_dets += len(a)
    assert n_dets > 0


def test_payload_accounting(small_cfg, small_suite):
    scene, msgs = small_suite.scenes[0], small_suite.messages[0]
    channel = ChannelConfig(compression_ratio=8)
    fr = run_frame(scene, small_suite.detector.params_, small_cfg, channel, use_mdma=False, messages=msgs)
    expect = sum(lv.size * 4 / 8 for m in msgs[1:] for lv in m.levels)
    assert fr.payload_bytes == expect
    assert set(fr.timings) == {"encode", "channel", "fuse", "adaptive", "mdma", "heads", "nms"}


def test_frame_aborted_carries_stage(small_cfg, small_suite):
    scene = small_suite.scenes[0]
    with pytest.raises(FrameAborted, match="frame 5, stage channel"):
        run_frame(scene, small_suite.detector.params_, small_cfg, ChannelConfig(compression_ratio=2, basis="pca"),
                  frame_id=5, messages=small_suite.messages[0])
    with pytest.raises(ContractViolation):
        run_frame(scene, small_suite.detector.params_, small_cfg, agent_ids=[1])


def test_transmit_keeps_ego_local(small_suite, rng):
    msgs = small_suite.messages[0]
    out = transmit(msgs, ChannelConfig(0.5, 0.05, 4), frame_id=3)
    assert out[0] is msgs[0]
    assert out[1].pose != msgs[1].pose
    again = transmit(msgs, ChannelConfig(0.5, 0.05, 4), frame_id=3)
    assert again[1].pose == out[1].pose
    assert transmit(msgs, ChannelConfig(0.5, 0.05, 4), frame_id=4)[1].pose != out[1].pose


def test_single_sweep_point_equals_run_pipeline(small_cfg, small_suite):
    rows, timing = sweep("pose", [0.2], small_cfg, small_suite)
    channel, _ = point_channel("pose", 0.2, small_cfg)
    res = run_pipeline(small_suite.scenes, small_suite.detector.params_, small_cfg, channel,
                       frame_ids=small_suite.frame_ids)
    assert (rows[0]["AP30"], rows[0]["AP50"], rows[0]["AP70"]) == (res.ap[0.3], res.ap[0.5], res.ap[0.7])
    assert rows[0]["n_frames"] == len(res.frames)
    assert timing[0]["ms_per_frame"] > 0
    assert channel.pose_noise_sigma_yaw == pytest.approx(math.radians(0.2))


def test_sweep_errors(small_cfg, small_suite):
    with pytest.raises(ContractViolation):
        sweep("pose", [], small_cfg, small_suite)
    with pytest.raises(ContractViolation):
        sweep("weather", [1], small_cfg, small_suite)
    with pytest.raises(ContractViolation):
        small_suite.evaluate(n_agents=3)


def test_params_bundle_round_trip(tmp_path, small_cfg, small_suite):
    params = small_suite.detector.params_
    params.save(tmp_path / "p.drcb")
    back = PipelineParams.load(tmp_path / "p.drcb", small_cfg)
    scene, msgs = small_suite.scenes[0], small_suite.messages[0]
    a = run_frame(scene, params, small_cfg, frame_id=1, messages=msgs).detections
    b = run_frame(scene, back, small_cfg, frame_id=1).detections
    assert [d.as_array().tolist() for d in a] == [d.as_array().tolist() for d in b]


# --- metrics ------------------------------------------------------------------------------

def _box(x, score=1.0):
    return Detection(x, 0.0, 0.0, 1.5, 2.0, 4.0, 0.0, score=score)


def test_ap_cases():
    gts = [_box(0.0), _box(10.0)]
    assert average_precision([(gts, gts)], 0.5) == pytest.approx(1.0)
    assert average_precision([([], gts)], 0.5) == 0.0
    assert average_precision([([_box(0.0)], [])], 0.5) == 0.0
    # one hit at recall 0.5 with precision 1
    assert average_precision([([_box(0.0)], gts)], 0.5) == pytest.approx(6 / 11)
    # a false positive ranked first halves the precision of the hit
    dets = [_box(50.0, 0.9), _box(0.0, 0.8), _box(10.0, 0.7)]
    assert average_precision([(dets, gts)], 0.5) == pytest.approx(2 / 3)


def test_match_frame_no_double_counting():
    gt = [_box(0.0)]
    out = match_frame([_box(0.0, 0.9), _box(0.1, 0.8)], gt, 0.3)
    assert out == [(0.9, True), (0.8, False)]


# --- config -------------------------------------------------------------------------------

def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\n\ngrid_height = 32\ngrid_width=64  # trailing\nuse_mdma = off\n"
                 "pyramid_channels = 8, 8, 16\nscore_thresh = 0.3\ncompression_basis = pca\n")
    cfg = PipelineConfig.from_file(p)
    assert (cfg.grid_height, cfg.grid_width, cfg.use_mdma) == (32, 64, False)
    assert cfg.pyramid_channels == (8, 8, 16) and cfg.score_thresh == 0.3 and cfg.compression_basis == "pca"
    assert cfg.grid.cell_size == pytest.approx(3.2)
    (tmp_path / "round.cfg").write_text(cfg.to_text())
    assert PipelineConfig.from_file(tmp_path / "round.cfg") == cfg


@pytest.mark.parametrize("text", ["nonsense = 1\n", "grid_height\n", "grid_height = abc\n", "use_mdma = maybe\n",
                                  "compression_ratio = 3\n", "n_agents = 9\n", "ground_truth = oracle\n"])
def test_config_rejects_bad_input(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ContractViolation):
        PipelineConfig.from_file(p)
