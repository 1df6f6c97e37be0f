"""Two-stage virtual-lane training.

Each step renders one target frame from a window of per-pixel splats and
applies the photometric and depth-smoothness terms. On a fixed cadence the
virtual-lane cycle runs: render a contiguous block of frames from their
laterally shifted poses, rebuild a second scene treating those renders as
inputs (colors become features, expected depth becomes depth, accumulated
alpha becomes confidence), render back at the original poses, and penalize
deviation from the captured images. Gradients flow through both renders and
both builds, so the stage-one splats learn to survive the lane switch. The
multi-lane denoiser term renders left / middle / right poses and pulls them
toward their refined counterparts (targets detached).

Everything is gradient descent with momentum over five parameter groups:
per-pixel features, per-pixel confidence, per-pixel depth residuals, decode
heads and fusion weights. A fixed seed makes the whole run bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decode import sigmoid
from .geometry import lane_offset_schedule, make_virtual_pose
from .losses import (
    LossWeights,
    depth_smoothness_grad,
    depth_smoothness_loss,
    diffusion_loss_with_grad,
    recon_loss,
    recon_loss_grad,
    total_loss,
)
from .pipeline import backward_frame, concat_sets, forward_frame
from .priors import DenoiserPrior, make_prior
from .raster import GaussianGrads, rasterize, rasterize_backward
from .refine import project_pointcloud_to_depth
from .scene import ImageBuffer, SceneBundle
from .state import SceneState, init_state

__all__ = ["TrainConfig", "Trainer", "stage_one", "optimize", "gradient_check"]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    seed: int = 0
    switch_every: int = 5
    diffusion_every: int = 10
    context: int = 2
    cycle_frames: int = 3
    momentum: float = 0.9
    lr_features: float = 1e-2
    lr_heads: float = 1e-3
    lr_depth: float = 1e-3
    lr_fusion: float = 1e-3
    lr_confidence: float = 1e-2
    enable_switch: bool = True
    enable_diffusion: bool = True
    t_min: float = 0.1
    t_max: float = 0.6
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.switch_every < 1 or self.diffusion_every < 1:
            raise ValueError("term intervals must be at least 1")
        for name in ("lr_features", "lr_heads", "lr_depth", "lr_fusion", "lr_confidence"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @staticmethod
    def from_config(cfg: dict, weights: LossWeights | None = None) -> "TrainConfig":
        from .config import loss_weights_from

        return TrainConfig(
            steps=cfg["train.steps"], seed=cfg["train.seed"],
            switch_every=cfg["train.switch_every"], diffusion_every=cfg["train.diffusion_every"],
            context=cfg["train.context"], cycle_frames=cfg["train.cycle_frames"],
            momentum=cfg["train.momentum"],
            lr_features=cfg["train.lr_features"], lr_heads=cfg["train.lr_heads"],
            lr_depth=cfg["train.lr_depth"], lr_fusion=cfg["train.lr_fusion"],
            lr_confidence=cfg["train.lr_confidence"],
            enable_switch=cfg["train.enable_switch"],
            enable_diffusion=cfg["train.enable_diffusion"],
            t_min=cfg["train.t_min"], t_max=cfg["train.t_max"],
            weights=weights if weights is not None else loss_weights_from(cfg),
        )


def _lr_for(key: str, cfg: TrainConfig) -> float:
    if key.startswith("heads."):
        return cfg.lr_heads
    if key.startswith("fusion."):
        return cfg.lr_fusion
    return {"features": cfg.lr_features, "conf_raw": cfg.lr_confidence,
            "depth_residual": cfg.lr_depth}[key]


class _GradSlice:
    """A per-frame view into concatenated GaussianGrads arrays."""

    __slots__ = ("centers", "scales", "rotations", "opacities", "colors")

    def __init__(self, g: GaussianGrads, start: int, count: int):
        self.centers = g.centers[start:start + count]
        self.scales = g.scales[start:start + count]
        self.rotations = g.rotations[start:start + count]
        self.opacities = g.opacities[start:start + count]
        self.colors = g.colors[start:start + count]


class Trainer:
    def __init__(self, state: SceneState, bundle: SceneBundle, cfg: TrainConfig,
                 prior: DenoiserPrior | None = None):
        if len(bundle) != state.frame_count:
            raise ValueError("bundle and state frame counts differ")
        self.state = state
        self.cfg = cfg
        self.truth = [fr.image for fr in bundle.frames]
        self.prior = prior if prior is not None else make_prior(
            state.config.get("denoiser.kind", "reference"),
            url=state.config.get("denoiser.url", ""),
            timeout_ms=state.config.get("denoiser.timeout_ms", 10000),
            text=state.config.get("denoiser.text", ""),
            sigma_scale=state.config.get("denoiser.sigma_scale", 2.0),
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.velocity = {k: np.zeros_like(v) for k, v in state.params().items()}
        self._offsets = lane_offset_schedule(state.lane_cfg)
        self._virtual_mvs: dict[tuple[int, float], object] = {}
        self._cycle_counter = 0

    # -- helpers ------------------------------------------------------------

    def _zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.state.params().items()}

    def _build_frames(self, indices: list[int]):
        sets, ctxs = {}, {}
        for i in indices:
            g, c = self.state.build_frame(i)
            sets[i], ctxs[i] = g, c
        return sets, ctxs

    def _backprop_frames(self, indices: list[int], ctxs: dict, ggrads: GaussianGrads,
                         accum: dict[str, np.ndarray]):
        state = self.state
        start = 0
        for i in indices:
            ctx = ctxs[i]
            fg = backward_frame(ctx, state.heads, state.fusion, _GradSlice(ggrads, start, ctx.count))
            start += ctx.count
            accum["depth_residual"][i] += fg.depth
            accum["features"][i] += fg.features
            neigh = state.neighborhood_indices(i)
            share = fg.neighborhood_mean / len(neigh)
            for j in neigh:
                accum["features"][j] += share
            conf = state.confidence(i)
            accum["conf_raw"][i] += fg.conf * conf * (1.0 - conf)
            for k, v in fg.heads.items():
                accum[f"heads.{k}"] += v
            for k, v in fg.fusion.items():
                accum[f"fusion.{k}"] += v

    def _virtual_mvs_depth(self, i: int, offset: float):
        key = (i, round(float(offset), 9))
        if key not in self._virtual_mvs:
            pose = make_virtual_pose(self.state.cameras[i], offset)
            self._virtual_mvs[key] = project_pointcloud_to_depth(self.state.cloud, pose)
        return self._virtual_mvs[key]

    def _depth_norm_chain(self, out, g_norm: np.ndarray):
        """Gradient of a loss on the normalized depth map back to the raw
        weighted depth sum and the alpha map."""
        valid = out.depth.valid
        eps = self.state.raster_settings.depth_valid_alpha
        alpha = np.maximum(out.alpha, eps)
        g_raw = np.where(valid, g_norm / alpha, 0.0)
        g_alpha = np.where(valid, -g_norm * out.depth_raw / alpha**2, 0.0)
        return g_raw, g_alpha

    # -- loss terms -----------------------------------------------------------

    def _recon_term(self, f: int, accum: dict[str, np.ndarray]):
        """Photometric + depth smoothness at the target frame; returns the two
        loss values and the window build for reuse."""
        w = self.cfg.weights
        window = self.state.window(f, self.cfg.context)
        sets, ctxs = self._build_frames(window)
        gaussians = concat_sets([sets[i] for i in window])
        cam = self.state.cameras[f]
        out, cache = rasterize(gaussians, cam, self.state.raster_settings, return_cache=True)

        l_rec = recon_loss(self.truth[f], out.color)
        g_color = w.recon * recon_loss_grad(self.truth[f], out.color)
        try:
            l_dep = depth_smoothness_loss(out.depth, w.lambda_smooth)
            g_norm = w.depth * depth_smoothness_grad(out.depth, w.lambda_smooth)
            g_raw, g_alpha = self._depth_norm_chain(out, g_norm)
        except ValueError:
            l_dep, g_raw, g_alpha = 0.0, None, None

        ggrads = rasterize_backward(gaussians, cam, g_color, g_alpha, g_raw,
                                    self.state.raster_settings, cache=cache)
        self._backprop_frames(window, ctxs, ggrads, accum)
        return l_rec, l_dep, (window, sets, ctxs, gaussians)

    def _cycle_subset(self) -> list[int]:
        n = self.state.frame_count
        c = min(self.cfg.cycle_frames, n)
        start = self._cycle_counter % max(1, n - c + 1)
        self._cycle_counter += 1
        return list(range(start, start + c))

    def _switch_term(self, subset: list[int], accum: dict[str, np.ndarray] | None):
        """The virtual-lane cycle over a contiguous frame block. Returns the
        mean squared error of the cycled renders against the captured images;
        with ``accum`` given, also backpropagates it."""
        state = self.state
        w = self.cfg.weights
        k = state.refine_cfg.neighborhood_k

        # stage one: render each frame from its scheduled virtual pose
        union: list[int] = sorted({j for i in subset for j in state.window(i, self.cfg.context)})
        sets, ctxs = self._build_frames(union)
        stage1 = {}
        for i in subset:
            window = state.window(i, self.cfg.context)
            g1 = concat_sets([sets[j] for j in window])
            vpose = make_virtual_pose(state.cameras[i], self._offsets[i])
            out1, cache1 = rasterize(g1, vpose, state.raster_settings, return_cache=True)
            stage1[i] = (window, g1, vpose, out1, cache1)

        # stage two: rebuild from the virtual renders only, render back
        feats2 = {}
        for i in subset:
            out1 = stage1[i][3]
            f2 = np.zeros((*out1.alpha.shape, state.feature_dim))
            f2[:, :, :3] = out1.color.pixels
            feats2[i] = f2
        sets2, ctxs2 = {}, {}
        for pos, i in enumerate(subset):
            neigh = [feats2[j] for j in subset[max(0, pos - k): pos + k + 1]]
            vpose, out1 = stage1[i][2], stage1[i][3]
            g2, c2 = forward_frame(
                vpose, out1.depth.depth, out1.depth.valid, feats2[i],
                np.clip(out1.alpha, 0.0, 1.0), neigh,
                self._virtual_mvs_depth(i, self._offsets[i]),
                state.heads, state.fusion, state.refine_cfg,
            )
            sets2[i], ctxs2[i] = g2, c2
        scene2 = concat_sets([sets2[i] for i in subset])

        loss = 0.0
        ggrads2 = GaussianGrads.zeros(len(scene2))
        for i in subset:
            out2, cache2 = rasterize(scene2, state.cameras[i], state.raster_settings,
                                     return_cache=True)
            loss += recon_loss(self.truth[i], out2.color)
            if accum is not None:
                g_color = (w.switch / len(subset)) * recon_loss_grad(self.truth[i], out2.color)
                ggrads2.add_(rasterize_backward(scene2, state.cameras[i], g_color,
                                                settings=state.raster_settings, cache=cache2))
        loss /= len(subset)
        if accum is None:
            return loss

        # back through the second build to the virtual renders
        g_rgb: dict[int, np.ndarray] = {i: np.zeros((*stage1[i][3].alpha.shape, 3)) for i in subset}
        g_alpha1 = {i: np.zeros(stage1[i][3].alpha.shape) for i in subset}
        g_raw1 = {i: np.zeros(stage1[i][3].alpha.shape) for i in subset}
        g_feat2 = {i: np.zeros_like(feats2[i]) for i in subset}
        start = 0
        for pos, i in enumerate(subset):
            ctx2 = ctxs2[i]
            fg = backward_frame(ctx2, state.heads, state.fusion,
                                _GradSlice(ggrads2, start, ctx2.count))
            start += ctx2.count
            g_feat2[i] += fg.features
            members = subset[max(0, pos - k): pos + k + 1]
            share = fg.neighborhood_mean / len(members)
            for j in members:
                g_feat2[j] += share
            for key, v in fg.heads.items():
                accum[f"heads.{key}"] += v
            for key, v in fg.fusion.items():
                accum[f"fusion.{key}"] += v
            out1 = stage1[i][3]
            g_alpha1[i] += fg.conf * ((out1.alpha > 0.0) & (out1.alpha < 1.0))
            g_raw, g_a = self._depth_norm_chain(out1, fg.depth)
            g_raw1[i] += g_raw
            g_alpha1[i] += g_a

        for i in subset:
            g_rgb[i] += g_feat2[i][:, :, :3]

        # back through the stage-one virtual renders to the real parameters
        for i in subset:
            window, g1, vpose, _, cache1 = stage1[i]
            gg1 = rasterize_backward(g1, vpose, g_rgb[i], g_alpha1[i], g_raw1[i],
                                     state.raster_settings, cache=cache1)
            self._backprop_frames(window, ctxs, gg1, accum)
        return loss

    def _diffusion_term(self, f: int, build, accum: dict[str, np.ndarray]):
        """Three-lane renders at the target frame pulled toward their refined
        counterparts; one or more sampled noise levels."""
        state = self.state
        w = self.cfg.weights
        window, sets, ctxs, gaussians = build
        gamma = min(abs(state.lane_cfg.gamma), state.lane_cfg.max_offset)
        poses = {
            "left": make_virtual_pose(state.cameras[f], +gamma),
            "middle": state.cameras[f],
            "right": make_virtual_pose(state.cameras[f], -gamma),
        }
        renders = {}
        caches = {}
        for tag, pose in poses.items():
            renders[tag], caches[tag] = rasterize(gaussians, pose, state.raster_settings,
                                                  return_cache=True)
        images = {tag: out.color for tag, out in renders.items()}

        loss = 0.0
        g_tags = {tag: np.zeros((*renders[tag].alpha.shape, 3)) for tag in poses}
        for _ in range(w.t_steps):
            t = float(self.rng.uniform(self.cfg.t_min, self.cfg.t_max))
            value, grads = diffusion_loss_with_grad(images, self.prior, w, t)
            loss += value / w.t_steps
            for tag in poses:
                g_tags[tag] += (w.diffusion / w.t_steps) * grads[tag]

        total = GaussianGrads.zeros(len(gaussians))
        for tag, pose in poses.items():
            total.add_(rasterize_backward(gaussians, pose, g_tags[tag],
                                          settings=state.raster_settings, cache=caches[tag]))
        self._backprop_frames(window, ctxs, total, accum)
        return loss

    # -- public operations -----------------------------------------------------

    def stage_one(self):
        """Build the full scene and render every captured pose."""
        gaussians, _ = self.state.build_scene()
        return [self.state.render(cam, gaussians=gaussians) for cam in self.state.cameras]

    def stage_two_cycle(self) -> float:
        """Full-sequence cycle loss (no gradients): virtual renders, rebuild,
        render back, mean squared error against the captured images."""
        return float(self._switch_term(list(range(self.state.frame_count)), None))

    def optimize(self, log_path=None) -> list[str]:
        """Run the configured number of steps; returns (and optionally writes)
        the per-step loss log ``step,recon,depth,switch,diffusion,total``."""
        cfg = self.cfg
        n = self.state.frame_count
        rows = ["step,recon,depth,switch,diffusion,total"]
        for s in range(cfg.steps):
            f = s % n
            accum = self._zero_grads()
            l_rec, l_dep, build = self._recon_term(f, accum)
            l_switch = 0.0
            l_diff = 0.0
            if cfg.enable_switch and s % cfg.switch_every == 0:
                l_switch = self._switch_term(self._cycle_subset(), accum)
            if cfg.enable_diffusion and s % cfg.diffusion_every == 0:
                l_diff = self._diffusion_term(f, build, accum)
            terms = {"recon": l_rec, "depth": l_dep, "switch": l_switch, "diffusion": l_diff}
            try:
                total = total_loss(terms, cfg.weights)
            except ValueError as exc:
                raise RuntimeError(f"aborting at step {s}: {exc}") from exc
            rows.append(f"{s},{l_rec:.9g},{l_dep:.9g},{l_switch:.9g},{l_diff:.9g},{total:.9g}")

            params = self.state.params()
            for key, grad in accum.items():
                v = self.velocity[key]
                v *= cfg.momentum
                v += grad
                params[key] -= _lr_for(key, cfg) * v
                if not np.all(np.isfinite(params[key])):
                    raise RuntimeError(f"aborting at step {s}: parameter group {key!r} became non-finite")
        if log_path is not None:
            Path(log_path).write_text("\n".join(rows) + "\n", encoding="utf-8")
        return rows


def stage_one(bundle: SceneBundle, config: dict | None = None):
    """Seed a state from the bundle and render every captured pose."""
    state = init_state(bundle, config)
    trainer = Trainer(state, bundle, TrainConfig.from_config(state.config))
    return trainer.stage_one(), state


def optimize(bundle: SceneBundle, config: dict | None = None,
             prior: DenoiserPrior | None = None, log_path=None) -> SceneState:
    """End-to-end fit: initialize a state from the bundle and optimize it."""
    state = init_state(bundle, config)
    trainer = Trainer(state, bundle, TrainConfig.from_config(state.config), prior)
    trainer.optimize(log_path)
    return state


def gradient_check(state: SceneState, bundle: SceneBundle, frame: int = 0,
                   loss: str = "recon", probes_per_group: int = 4,
                   h: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Compare end-to-end analytic gradients against central finite
    differences on a few entries of every parameter group; returns the max
    relative error per group. Intended for small scenes (tens of splats)."""
    import dataclasses

    base = TrainConfig.from_config(state.config)
    w0 = base.weights
    if loss == "recon":
        weights = dataclasses.replace(w0, depth=0.0)
    elif loss == "depth":
        weights = dataclasses.replace(w0, recon=0.0)
    elif loss == "switch":
        weights = w0
    else:
        raise ValueError(f"unknown loss selector {loss!r}")
    cfg = dataclasses.replace(base, weights=weights)
    trainer = Trainer(state, bundle, cfg)
    rng = np.random.default_rng(seed)

    def loss_value() -> float:
        if loss == "switch":
            return weights.switch * trainer._switch_term(list(range(state.frame_count)), None)
        window = state.window(frame, cfg.context)
        gaussians, _ = state.build_scene(window)
        out = rasterize(gaussians, state.cameras[frame], state.raster_settings)
        value = weights.recon * recon_loss(trainer.truth[frame], out.color)
        if weights.depth > 0:
            value += weights.depth * depth_smoothness_loss(out.depth, weights.lambda_smooth)
        return float(value)

    accum = trainer._zero_grads()
    if loss == "switch":
        trainer._cycle_counter = 0
        trainer._switch_term(list(range(state.frame_count)), accum)
    else:
        trainer._recon_term(frame, accum)

    errors: dict[str, float] = {}
    for key, arr in state.params().items():
        flat = arr.reshape(-1)
        n_probe = min(probes_per_group, flat.size)
        # probe where the analytic gradient has signal, plus random extras
        mag = np.abs(accum[key].reshape(-1))
        top = np.argsort(-mag, kind="stable")[: max(1, n_probe // 2)]
        extra = rng.choice(flat.size, size=n_probe, replace=False)
        picks = list(dict.fromkeys([*top.tolist(), *extra.tolist()]))[:n_probe]
        worst = 0.0
        for p in picks:
            orig = flat[p]
            flat[p] = orig + h
            lp = loss_value()
            flat[p] = orig - h
            lm = loss_value()
            flat[p] = orig
            numeric = (lp - lm) / (2.0 * h)
            analytic = accum[key].reshape(-1)[p]
            denom = max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, abs(numeric - analytic) / denom)
        errors[key] = worst
    return errors
