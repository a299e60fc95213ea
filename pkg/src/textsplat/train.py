"""Score-distillation style training against a pluggable guidance model.

The guidance model supplies an image-space gradient g = w(t) * (eps_hat -
eps); the loop backpropagates the surrogate scalar <stopgrad(g), x>, whose
parameter gradient equals g contracted with dx/dtheta. MockGuidance
realizes eps_hat := eps + (x - target) for a deterministic per-prompt
target image, standing in for a diffusion prior at desk scale.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore, Tensor, adam_step, backward
from .splat import Camera, camera_azimuth_deg, render, sample_camera
from .textenc import PromptSet, augment_direction, tokenize


class GuidanceModel(Protocol):
    def grad_image(self, pixels: np.ndarray, prompt_dir: str, t: float,
                   rng: np.random.Generator) -> np.ndarray:
        """Noise residual eps_hat - eps for a rendered image, shape (H,W,3)."""

    def weight(self, t: float) -> float:
        """Timestep weighting w(t)."""


_COLOR_WORDS = {
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "cyan",
    "magenta", "white", "black", "gray", "grey", "brown", "violet", "teal",
    "gold", "silver", "crimson", "azure",
}


def _hash_bytes(parts: list, n: int) -> bytes:
    return hashlib.blake2b("|".join(parts).encode(), digest_size=n).digest()


def make_procedural_targets(prompt: str, size, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Deterministic target image for a prompt: a token-hashed flat color
    over a token-hashed centered disk or box silhouette on the background."""
    w, h = size
    tokens = tokenize(prompt)
    color_tokens = [t for t in tokens if t in _COLOR_WORDS]
    shape_tokens = [t for t in tokens if t not in _COLOR_WORDS]

    cb = _hash_bytes(["color"] + color_tokens, 3)
    color = 0.2 + 0.8 * (np.frombuffer(cb, dtype=np.uint8) / 255.0)
    color = color / color.max()  # keep fills vivid against the background

    sb = _hash_bytes(["shape"] + shape_tokens, 4)
    use_disk = sb[0] % 2 == 0
    radius = (0.20 + 0.18 * sb[1] / 255.0) * min(w, h)
    off_x = (sb[2] / 255.0 - 0.5) * 0.2 * w
    off_y = (sb[3] / 255.0 - 0.5) * 0.2 * h

    target = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    cx, cy = (w - 1) / 2.0 + off_x, (h - 1) / 2.0 + off_y
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if use_disk:
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    else:
        mask = (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
    target[mask] = color
    return np.clip(target, 0.0, 1.0)


_VIEW_SUFFIXES = (", front view", ", side view", ", back view")


class MockGuidance:
    """Deterministic guidance oracle: eps_hat := eps + (x - target(prompt)).

    Direction-augmented prompts share the base prompt's target, so every
    view pulls toward one consistent image; the direction suffix still
    travels the guidance interface for real denoisers to consume.
    """

    def __init__(self, size, background=(0.0, 0.0, 0.0), weight: float = 1.0):
        self.size = tuple(size)
        self.background = tuple(background)
        self._weight = float(weight)
        self._targets: dict[str, np.ndarray] = {}

    def target(self, prompt: str) -> np.ndarray:
        for suffix in _VIEW_SUFFIXES:
            if prompt.endswith(suffix):
                prompt = prompt[: -len(suffix)]
                break
        if prompt not in self._targets:
            self._targets[prompt] = make_procedural_targets(prompt, self.size, self.background)
        return self._targets[prompt]

    def grad_image(self, pixels: np.ndarray, prompt_dir: str, t: float,
                   rng: np.random.Generator) -> np.ndarray:
        return pixels - self.target(prompt_dir)

    def weight(self, t: float) -> float:
        return self._weight


def sds_grad_shape(image, guidance: GuidanceModel, prompt_dir: str, t: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Image-space gradient g = w(t) * (eps_hat - eps); aborts on non-finite."""
    pixels = image.pixels.data if isinstance(image.pixels, Tensor) else np.asarray(image.pixels)
    g = guidance.weight(t) * guidance.grad_image(np.asarray(pixels, dtype=np.float64), prompt_dir, t, rng)
    if not np.isfinite(g).all():
        raise RuntimeError(f"guidance produced a non-finite gradient for prompt {prompt_dir!r} at t={t}")
    return g


@dataclass
class TrainConfig:
    b_prompts: int = 2
    c_cameras: int = 2
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    max_iter: int = 200
    seed: int = 0
    t_min: float = 0.02
    t_max: float = 0.98
    width: int = 64
    height: int = 64
    fov_y: float = 49.1
    radius_min: float = 1.8
    radius_max: float = 2.4
    near: float = 0.1
    far: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)
    log_every: int = 1

    def __post_init__(self):
        if self.b_prompts < 1 or self.c_cameras < 1:
            raise ValueError("prompt and camera batch sizes must be >= 1")


def train_step(generator, store: ParameterStore, prompts: PromptSet,
               guidance: GuidanceModel, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One iteration: sample prompts, render C views each, accumulate the
    surrogate loss over B*C images, backprop once, Adam once."""
    t0 = time.perf_counter()
    n = min(cfg.b_prompts, len(prompts))
    chosen = rng.choice(len(prompts), size=n, replace=False)

    loss_total = None
    mses = []
    for pid in chosen:
        prompt = prompts[int(pid)]
        gaussians = generator.gaussians_for(prompt)
        for _ in range(cfg.c_cameras):
            cam = sample_camera(rng, (cfg.radius_min, cfg.radius_max), cfg.fov_y,
                                (cfg.width, cfg.height), near=cfg.near, far=cfg.far)
            az = camera_azimuth_deg(cam)
            image = render(gaussians, cam, cfg.background)
            prompt_dir = augment_direction(prompt, az)
            t = rng.uniform(cfg.t_min, cfg.t_max)
            g_img = sds_grad_shape(image, guidance, prompt_dir, t, rng)
            term = dc.sum_(dc.mul(Tensor(g_img.astype(image.pixels.dtype)), image.pixels))
            if not np.isfinite(term.data):
                raise RuntimeError(f"non-finite loss for prompt {prompt!r}, camera azimuth {az:.1f} deg")
            loss_total = term if loss_total is None else dc.add(loss_total, term)
            if hasattr(guidance, "target"):
                diff = image.pixels.data - guidance.target(prompt_dir)
                mses.append(float(np.mean(diff * diff)))

    backward(loss_total)
    sq = 0.0
    for _, p in store.trainable():
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    return {
        "loss": float(loss_total.data),
        "mse": float(np.mean(mses)) if mses else float("nan"),
        "gradnorm": float(np.sqrt(sq)),
        "seconds": time.perf_counter() - t0,
    }


def train(generator, store: ParameterStore, prompts: PromptSet, guidance: GuidanceModel,
          cfg: TrainConfig, log_path=None, echo: bool = True) -> list:
    """Full loop; one tab-separated metrics line per iteration."""
    rng = np.random.default_rng(cfg.seed)
    history = []
    log_f = open(log_path, "w") if log_path else None
    try:
        for it in range(1, cfg.max_iter + 1):
            m = train_step(generator, store, prompts, guidance, cfg, rng)
            history.append(m)
            line = f"{it}\t{m['loss']:.6g}\t{m['mse']:.6g}\t{m['gradnorm']:.6g}\t{m['seconds']:.3f}"
            if echo and (it % cfg.log_every == 0 or it == cfg.max_iter):
                print(line)
            if log_f:
                log_f.write(line + "\n")
    finally:
        if log_f:
            log_f.close()
    return history
