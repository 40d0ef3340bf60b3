"""End-to-end wiring: per-agent encoding, V2X link, ego-side fusion and detection.

Per agent: multi-camera attention -> pyramid -> occupancy heads. On the ego:
warp every received scale into the ego frame, occupancy-weighted fusion per
scale, upsample and concatenate, adaptive convolution, optional diffusion
refinement, detection heads, decoding and NMS.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..adaptive import AdaptiveConvParams, adaptive_conv
from ..attention import RgAttnConfig, RgAttnParams, multi_camera_fuse
from ..detect import AnchorConfig, HeadConfig, HeadParams, decode_and_nms, make_anchors, run_heads
from ..geometry import Pose2D, warp_bev
from ..io import load_bundle, save_bundle
from ..mdma import MdmaParams, make_schedule, mdma_refine
from ..pyramid import N_SCALES, PyramidParams, build_pyramid, fuse_agents_at_scale, occupancy_head, pyramid_concat
from ..tensor import Kernel2D, RngStream
from ..validation import ContractViolation
from .channel import ChannelConfig, apply_channel
from .metrics import ap_table
from .scene import SceneConfig

STAGES = ("encode", "channel", "fuse", "adaptive", "mdma", "heads", "nms")


class FrameAborted(RuntimeError):
    """A module contract failed while processing one frame."""


def scene_config(cfg):
    return SceneConfig(lidar_channels=cfg.lidar_channels, camera_channels=cfg.camera_channels,
                       camera_height=cfg.camera_height, camera_width=cfg.camera_width, occlusion=cfg.occlusion)


def channel_config(cfg):
    return ChannelConfig(cfg.pose_noise_xy, cfg.pose_noise_yaw, cfg.compression_ratio,
                         cfg.compression_basis, cfg.channel_seed)


@dataclass
class PipelineParams:
    rg_cfg: RgAttnConfig
    rg: RgAttnParams
    pyramid: PyramidParams
    occ_heads: list
    adaptive: AdaptiveConvParams
    mdma: MdmaParams
    heads: HeadParams
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    @property
    def fused_channels(self):
        return sum(self.pyramid.channels)

    @classmethod
    def seeded(cls, cfg):
        """Desk initialisation: pass-through fusion stages, empty detection heads."""
        rng = RngStream(cfg.param_seed)
        rg_cfg = RgAttnConfig(cfg.lidar_channels, cfg.camera_channels, cfg.attn_heads,
                              cfg.grid_height, cfg.camera_height, cfg.camera_width)
        rg = RgAttnParams.seeded(rg_cfg, rng.spawn(0), out_gain=cfg.attn_out_gain)
        pyr = PyramidParams.seeded(cfg.lidar_channels, cfg.pyramid_channels, rng.spawn(1), cfg.desk_noise)
        occ = [Kernel2D.zeros(1, c, 1) for c in pyr.channels]
        fused = sum(pyr.channels)
        adap = AdaptiveConvParams.seeded(fused, rng.spawn(2), cfg.desk_noise)
        mdma = MdmaParams.seeded(fused, rng.spawn(3), cfg.mdma_steps, cfg.mdma_keep_bias)
        heads = HeadParams.zeros(HeadConfig(fused, cfg.n_anchor))
        return cls(rg_cfg, rg, pyr, occ, adap, mdma, heads, AnchorConfig(n_anchor=cfg.n_anchor))

    def to_tensors(self):
        t = dict(self.rg.to_tensors("rg_attn"))
        if self.pyramid.level1 is not None:
            t.update(self.pyramid.level1.to_tensors("pyramid.level1"))
        for i, k in enumerate(self.pyramid.down):
            t.update(k.to_tensors(f"pyramid.down{i}"))
        for i, k in enumerate(self.occ_heads):
            t.update(k.to_tensors(f"pyramid.occ{i}"))
        for name, k in zip(("conv3", "conv5", "conv7", "weight_gen"),
                           (*self.adaptive.branches, self.adaptive.weight_gen)):
            t.update(k.to_tensors(f"adaptive.{name}"))
        t.update(self.mdma.to_tensors("mdma"))
        for name, k in self.heads.items():
            t.update(k.to_tensors(f"heads.{name}"))
        return t

    @classmethod
    def from_tensors(cls, tensors, cfg):
        """Rebuild from a tensor dict; shape metadata comes from ``cfg``."""
        base = cls.seeded(cfg)
        level1 = Kernel2D.from_tensors(tensors, "pyramid.level1") if "pyramid.level1.weight" in tensors else None
        pyr = PyramidParams(level1, [Kernel2D.from_tensors(tensors, f"pyramid.down{i}") for i in range(2)])
        occ = [Kernel2D.from_tensors(tensors, f"pyramid.occ{i}") for i in range(N_SCALES)]
        adap = AdaptiveConvParams(*(Kernel2D.from_tensors(tensors, f"adaptive.{n}")
                                    for n in ("conv3", "conv5", "conv7", "weight_gen")))
        heads = HeadParams(*(Kernel2D.from_tensors(tensors, f"heads.{n}") for n in ("cls", "reg", "dir", "occ")))
        return cls(base.rg_cfg, RgAttnParams.from_tensors(tensors, "rg_attn"), pyr, occ, adap,
                   MdmaParams.from_tensors(tensors, "mdma"), heads, base.anchors)

    def save(self, path):
        save_bundle(path, self.to_tensors())

    @classmethod
    def load(cls, path, cfg):
        return cls.from_tensors(load_bundle(path), cfg)


@dataclass
class AgentMessage:
    """What one agent shares: per-scale features and occupancy, in its own frame."""

    levels: list
    occs: list
    pose: Pose2D
    payload: list = field(default_factory=list)


@dataclass
class FrameResult:
    frame_id: int
    detections: list
    ground_truth: list
    timings: dict
    payload_bytes: float
    intermediates: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: dict
    frames: list
    ap: dict
    stage_ms: dict

    @property
    def detections(self):
        return [f.detections for f in self.frames]


def encode_agent(agent, params, spec):
    bev = multi_camera_fuse(agent.lidar, agent.camera_pairs, params.rg, params.rg_cfg, spec)
    levels = build_pyramid(bev, params.pyramid)
    occs = [occupancy_head(lv, head) for lv, head in zip(levels, params.occ_heads)]
    return AgentMessage(levels, occs, agent.pose)


def encode_scene(scene, params, agent_ids=None):
    ids = range(len(scene.agents)) if agent_ids is None else agent_ids
    return [encode_agent(scene.agents[k], params, scene.spec) for k in ids]


def transmit(messages, channel, frame_id=0, compressors=None):
    """Pass every non-ego message through the link; the ego's own message is local."""
    out = [messages[0]]
    cache = {} if compressors is None else dict(compressors)
    for k, msg in enumerate(messages[1:], start=1):
        rng = RngStream(channel.seed, (frame_id, k))
        feats, occs, pose, payload = apply_channel(msg.levels, msg.occs, msg.pose, channel, rng, cache)
        out.append(AgentMessage(feats, occs, pose, payload))
    return out


def fuse_messages(messages, spec):
    """Warp to the ego frame, fuse each scale and concatenate at full resolution."""
    ego = messages[0].pose
    per_scale = []
    for s in range(N_SCALES):
        sspec = spec.downscaled(2 ** s) if s else spec
        feats, occs = [], []
        for msg in messages:
            feats.append(warp_bev(msg.levels[s], msg.pose, ego, sspec))
            occs.append(warp_bev(msg.occs[s][None], msg.pose, ego, sspec)[0])
        per_scale.append(fuse_agents_at_scale(feats, occs))
    return pyramid_concat(per_scale, spec.shape)


def frame_features(scene, params, cfg, channel=None, use_mdma=None, agent_ids=None, frame_id=0,
                   messages=None, keep_intermediates=False, compressors=None):
    """Ego-frame BEV after fusion, adaptive convolution and optional refinement.

    Returns (final, timings, payload_bytes, intermediates).
    """
    channel = channel_config(cfg) if channel is None else channel
    use_mdma = cfg.use_mdma if use_mdma is None else use_mdma
    ids = list(range(len(scene.agents)) if agent_ids is None else agent_ids)
    if not ids or ids[0] != 0:
        raise ContractViolation("agent 0 (the ego) must participate")
    timings = {}
    inter = {}
    stage = "encode"
    try:
        t0 = time.perf_counter()
        if messages is None:
            messages = encode_scene(scene, params, ids)
        timings["encode"] = time.perf_counter() - t0

        stage = "channel"
        t0 = time.perf_counter()
        received = transmit(messages, channel, frame_id, compressors)
        payload = float(sum(sum(m.payload) for m in received[1:]))
        timings["channel"] = time.perf_counter() - t0

        stage = "fuse"
        t0 = time.perf_counter()
        fused = fuse_messages(received, scene.spec)
        timings["fuse"] = time.perf_counter() - t0

        stage = "adaptive"
        t0 = time.perf_counter()
        ppxx = adaptive_conv(fused, params.adaptive)
        timings["adaptive"] = time.perf_counter() - t0

        stage = "mdma"
        t0 = time.perf_counter()
        final = ppxx
        if use_mdma:
            schedule = make_schedule(cfg.mdma_steps, cfg.beta_start, cfg.beta_end)
            rng = RngStream(cfg.mdma_seed, (frame_id,))
            out = mdma_refine(ppxx, params.mdma, schedule, rng, cfg.mdma_t, cfg.mdma_candidates)
            final = out.final
            if keep_intermediates:
                inter.update({"mdma_seed": out.seed, "mdma_perturbed": out.perturbed,
                              "mdma_denoised": out.denoised, "mdma_w1": out.w1, "mdma_w2": out.w2})
        timings["mdma"] = time.perf_counter() - t0
    except ContractViolation as exc:
        raise FrameAborted(f"frame {frame_id}, stage {stage}: {exc}") from exc
    if keep_intermediates:
        inter.update({"fused": fused, "ppxx": ppxx, "final": final})
        for s, m in enumerate(messages):
            inter[f"agent{ids[s]}_level0"] = m.levels[0]
            inter[f"agent{ids[s]}_occ0"] = m.occs[0][None]
    return final, timings, payload, inter


def run_frame(scene, params, cfg, channel=None, use_mdma=None, agent_ids=None, frame_id=0,
              messages=None, ground_truth=None, keep_intermediates=False, compressors=None):
    """Detect objects in one scene as seen by the ego (agent 0).

    ``messages`` may carry a cached :func:`encode_scene` result for the same
    agents. Ground truth defaults to boxes visible to the participating agents.
    """
    final, timings, payload, inter = frame_features(scene, params, cfg, channel, use_mdma, agent_ids,
                                                    frame_id, messages, keep_intermediates, compressors)
    stage = "heads"
    try:
        t0 = time.perf_counter()
        outputs = run_heads(final, params.heads)
        timings["heads"] = time.perf_counter() - t0

        stage = "nms"
        t0 = time.perf_counter()
        anchors = make_anchors(scene.spec, params.anchors)
        dets = decode_and_nms(outputs, anchors, cfg.score_thresh, cfg.iou_thresh)
        timings["nms"] = time.perf_counter() - t0
    except ContractViolation as exc:
        raise FrameAborted(f"frame {frame_id}, stage {stage}: {exc}") from exc
    if keep_intermediates:
        inter["cls"] = outputs["cls"]
    ids = list(range(len(scene.agents)) if agent_ids is None else agent_ids)
    gt = scene.ground_truth(ids) if ground_truth is None else ground_truth
    return FrameResult(frame_id, dets, gt, timings, payload, inter)


def evaluate(frames, config=None):
    """Aggregate frame results into AP at IoU 0.3/0.5/0.7 and mean stage times."""
    ap = ap_table([(f.detections, f.ground_truth) for f in frames])
    stage_ms = {s: 1000.0 * float(np.mean([f.timings.get(s, 0.0) for f in frames])) if frames else 0.0
                for s in STAGES}
    return ExperimentResult(dict(config or {}), frames, ap, stage_ms)


def run_pipeline(scenes, params, cfg, channel=None, use_mdma=None, agent_ids=None, frame_ids=None):
    """Run :func:`run_frame` over scenes and return an :class:`ExperimentResult`."""
    scenes = [scenes] if not isinstance(scenes, (list, tuple)) else scenes
    frame_ids = range(len(scenes)) if frame_ids is None else frame_ids
    frames = [run_frame(sc, params, cfg, channel, use_mdma, agent_ids, fid)
              for sc, fid in zip(scenes, frame_ids)]
    echo = {"use_mdma": cfg.use_mdma if use_mdma is None else use_mdma}
    return evaluate(frames, echo)
