"""End-to-end assembly: configuration, inference, export, turntable.

generate() runs exactly the inference sequence: embed -> deform ->
triplane -> feature sampling -> decode, exposing every intermediate for
tests. PLY export writes the standard splat-viewer vertex layout
(pre-activation opacity logits and log-domain scales), so exported files
load directly in third-party viewers and round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import textenc
from .decoder import GaussianDecoder, GaussianSet, decode, sample_triplane
from .diffcore import ParameterStore, Tensor
from .splat import Camera, render, write_imgf, write_ppm
from .textenc import PromptSet, TextEmbedding
from .train import TrainConfig
from .tsd import AnchorGrid, TsdNetwork, deform, make_anchor_grid
from .ttg import (PlaneGenerator, PlaneGeneratorConfig, Triplane,
                  generate_triplane, single_generator_mode)

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class RunConfig:
    """Every tunable across modules; flat key=value file with overrides."""

    seed: int = 0
    dtype: str = "f32"
    # anchor grid / deformation
    grid_n: int = 8
    grid_extent: float = 1.0
    tsd_width: int = 32
    tsd_blocks: int = 2
    tsd_heads: int = 4
    tsd_ffn_mult: int = 4
    tsd_freqs: int = 6
    tsd_beta: float = 0.2
    # triplane generator
    ttg_width: int = 32
    ttg_channels: int = 16
    ttg_base_res: int = 8
    ttg_ups: int = 2
    ttg_heads: int = 4
    ttg_ffn_mult: int = 4
    ttg_low_blocks: int = 3
    ttg_mode: str = "separate"  # or "single" (ablation)
    # decoder
    dec_hidden: int = 32
    dec_use_coords: bool = True
    scale_min: float = -9.0
    scale_max: float = -3.0
    # text embeddings
    text_len: int = 16
    text_dim: int = 256
    # rendering / cameras
    render_width: int = 64
    render_height: int = 64
    fov_y: float = 49.1
    radius_min: float = 1.8
    radius_max: float = 2.4
    near: float = 0.1
    far: float = 100.0
    bg_r: float = 0.0
    bg_g: float = 0.0
    bg_b: float = 0.0
    # training
    batch_prompts: int = 2
    batch_cameras: int = 2
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    max_iter: int = 200
    guidance_weight: float = 1.0
    t_min: float = 0.02
    t_max: float = 0.98
    log_every: int = 1
    # turntable
    turntable_elevation: float = 20.0
    turntable_radius: float = 2.0

    @property
    def np_dtype(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        return _DTYPES[self.dtype]

    @property
    def background(self):
        return (self.bg_r, self.bg_g, self.bg_b)

    @property
    def plane_extent(self) -> float:
        # deformed centers stay inside [-(extent+beta), extent+beta]^3
        return self.grid_extent + self.tsd_beta

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            b_prompts=self.batch_prompts, c_cameras=self.batch_cameras, lr=self.lr,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            max_iter=self.max_iter, seed=self.seed, t_min=self.t_min, t_max=self.t_max,
            width=self.render_width, height=self.render_height, fov_y=self.fov_y,
            radius_min=self.radius_min, radius_max=self.radius_max, near=self.near,
            far=self.far, background=self.background, log_every=self.log_every,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _cast(name: str, raw: str):
    f = _FIELDS[name]
    if f.type == "bool" or isinstance(f.default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name!r} expects a boolean, got {raw!r}")
    return type(f.default)(raw)


def parse_config(text: str, overrides=()) -> RunConfig:
    """Parse flat key=value lines ('#' comments); unknown keys rejected."""
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln} is not key=value: {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _cast(key, raw)
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override is not key=value: {ov!r}")
        key, raw = (s.strip() for s in ov.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _cast(key, raw)
    return RunConfig(**values)


def load_config(path, overrides=()) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


# -- built-in prompts ------------------------------------------------------------

_SPECIES = ["wolf", "dog", "panda", "fox", "cat", "rabbit", "koala", "teddy bear"]
_ITEMS = ["in a bathtub", "on a stone", "on books", "on the lawn"]
_GADGETS = ["a red tie", "a blue cape", "a green scarf", "yellow sunglasses"]

BUILTIN_PROMPTS = PromptSet([
    f"a {s} sitting {_ITEMS[i % 4]} and wearing {_GADGETS[(i // 8) % 4]}"
    for i, s in enumerate(_SPECIES * 4)
])


@dataclass
class GenerationResult:
    """All inference intermediates, in sequence order."""

    embedding: TextEmbedding
    centers: Tensor
    triplane: Triplane
    features: Tensor
    gaussians: GaussianSet
    latency_ms: float = 0.0


class Generator:
    """The full text -> GaussianSet network stack over one ParameterStore."""

    def __init__(self, cfg: RunConfig, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store or ParameterStore(cfg.seed, dtype=cfg.np_dtype)
        self.grid = make_anchor_grid(cfg.grid_n, cfg.grid_extent, dtype=cfg.np_dtype)
        self.tsd = TsdNetwork(
            self.store, "tsd", d_model=cfg.tsd_width, context_dim=cfg.text_dim,
            n_blocks=cfg.tsd_blocks, num_heads=cfg.tsd_heads, ffn_mult=cfg.tsd_ffn_mult,
            n_freq=cfg.tsd_freqs, beta=cfg.tsd_beta,
        )
        plane_cfg = PlaneGeneratorConfig(
            width=cfg.ttg_width, channels=cfg.ttg_channels, base_res=cfg.ttg_base_res,
            n_up=cfg.ttg_ups, num_heads=cfg.ttg_heads, ffn_mult=cfg.ttg_ffn_mult,
            context_dim=cfg.text_dim, n_low=cfg.ttg_low_blocks,
        )
        if cfg.ttg_mode == "separate":
            self.ttg_xy = PlaneGenerator(self.store, "ttg.xy", plane_cfg)
            self.ttg_xz = PlaneGenerator(self.store, "ttg.xz", plane_cfg)
            self.ttg_yz = PlaneGenerator(self.store, "ttg.yz", plane_cfg)
            self.ttg_single = None
        elif cfg.ttg_mode == "single":
            self.ttg_single = PlaneGenerator(self.store, "ttg.single", plane_cfg,
                                             out_channels=3 * cfg.ttg_channels)
            self.ttg_xy = self.ttg_xz = self.ttg_yz = None
        else:
            raise ValueError(f"ttg_mode must be 'separate' or 'single', got {cfg.ttg_mode!r}")
        self.decoder = GaussianDecoder(
            self.store, "dec", feature_dim=cfg.ttg_channels, hidden=cfg.dec_hidden,
            scale_bounds=(cfg.scale_min, cfg.scale_max), use_coords=cfg.dec_use_coords,
        )
        self.imported_embeddings: dict[str, TextEmbedding] = {}

    # -- embeddings -------------------------------------------------------

    def embed_prompt(self, prompt: str) -> TextEmbedding:
        if prompt in self.imported_embeddings:
            return self.imported_embeddings[prompt]
        return textenc.embed(prompt, self.cfg.text_len, self.cfg.text_dim,
                             self.cfg.seed, dtype=self.cfg.np_dtype)

    def use_imported_embeddings(self, path, prompts: PromptSet) -> None:
        """Prefer embeddings from a TEMB container, keyed by prompt-set ids."""
        table = textenc.read_embeddings(path, self.cfg.text_len, self.cfg.text_dim)
        for pid, emb in table.items():
            if pid >= len(prompts):
                raise ValueError(f"embedding id {pid} outside the prompt set (size {len(prompts)})")
            self.imported_embeddings[prompts[pid]] = emb

    # -- inference ---------------------------------------------------------

    def triplane_from(self, context) -> Triplane:
        if self.ttg_single is not None:
            return single_generator_mode(self.ttg_single, context, self.cfg.plane_extent)
        return generate_triplane(self.ttg_xy, self.ttg_xz, self.ttg_yz, context,
                                 self.cfg.plane_extent)

    def forward_from_embedding(self, embedding: TextEmbedding) -> GenerationResult:
        context = Tensor(embedding.matrix.astype(self.cfg.np_dtype, copy=False))
        centers = deform(self.tsd, self.grid, context)
        triplane = self.triplane_from(context)
        features = sample_triplane(triplane, centers)
        gaussians = decode(self.decoder, features, centers)
        return GenerationResult(embedding=embedding, centers=centers, triplane=triplane,
                                features=features, gaussians=gaussians)

    def generate(self, prompt: str) -> GenerationResult:
        t0 = time.perf_counter()
        result = self.forward_from_embedding(self.embed_prompt(prompt))
        result.latency_ms = (time.perf_counter() - t0) * 1e3
        return result

    def gaussians_for(self, prompt: str) -> GaussianSet:
        return self.forward_from_embedding(self.embed_prompt(prompt)).gaussians

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        self.store.save(path)

    def load(self, path) -> None:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        self.store.load(path)


def generate(prompt: str, checkpoint, cfg: RunConfig) -> GenerationResult:
    """Load a checkpoint and run the inference sequence for one prompt."""
    gen = Generator(cfg)
    gen.load(checkpoint)
    return gen.generate(prompt)


# -- splat-viewer PLY ---------------------------------------------------------------

_PLY_PROPS = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
              "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def export_ply(g: GaussianSet, path) -> None:
    """Binary little-endian PLY in the standard splat-viewer field layout.

    Opacity is stored as its pre-sigmoid logit and scales stay in the log
    domain, so import_ply(export_ply(g)) reproduces g bit-exactly.
    """
    m = g.count
    header = "ply\nformat binary_little_endian 1.0\n" + f"element vertex {m}\n"
    header += "".join(f"property float {p}\n" for p in _PLY_PROPS) + "end_header\n"
    rows = np.zeros((m, len(_PLY_PROPS)), dtype="<f4")
    rows[:, 0:3] = g.centers.data
    rows[:, 6:9] = g.sh_dc.data
    rows[:, 9] = g.opacity_logit.data[:, 0]
    rows[:, 10:13] = g.scaling_raw.data
    rows[:, 13:17] = g.rotation.data
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(rows.tobytes())


def import_ply(path) -> GaussianSet:
    """Read a splat PLY back into a (graph-free) GaussianSet."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = blob[:end].decode()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("unsupported PLY format (need binary_little_endian 1.0)")
    count = None
    props = []
    for line in header.splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if count is None or props != _PLY_PROPS:
        raise ValueError("PLY vertex layout does not match the splat-viewer convention")
    rows = np.frombuffer(blob[end + len(b"end_header\n"):], dtype="<f4").reshape(count, len(_PLY_PROPS))
    rows = rows.astype(np.float32)
    opacity_logit = Tensor(rows[:, 9:10].copy())
    return GaussianSet(
        centers=Tensor(rows[:, 0:3].copy()),
        scaling_raw=Tensor(rows[:, 10:13].copy()),
        rotation=Tensor(rows[:, 13:17].copy()),
        opacity=dc.sigmoid(opacity_logit),
        sh_dc=Tensor(rows[:, 6:9].copy()),
        opacity_logit=opacity_logit,
    )


# -- presentation -------------------------------------------------------------------


def turntable_cameras(frames: int, cfg: RunConfig) -> list:
    if frames < 1:
        raise ValueError("turntable needs frames >= 1")
    radius = cfg.turntable_radius
    el = np.deg2rad(cfg.turntable_elevation)
    cams = []
    for k in range(frames):
        az = np.deg2rad(360.0 * k / frames)
        pos = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(position=pos, fov_y=cfg.fov_y, width=cfg.render_width,
                           height=cfg.render_height, near=cfg.near, far=cfg.far))
    return cams


def render_turntable(g: GaussianSet, frames: int, cfg: RunConfig, out_dir=None):
    """Equally spaced azimuths at fixed elevation; returns (frames, fps)."""
    cams = turntable_cameras(frames, cfg)
    images = []
    t0 = time.perf_counter()
    for cam in cams:
        images.append(render(g.detached(), cam, cfg.background).pixels.data)
    elapsed = time.perf_counter() - t0
    fps = frames / elapsed if elapsed > 0 else float("inf")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            write_ppm(out / f"frame_{i:03d}.ppm", img)
            write_imgf(out / f"frame_{i:03d}.imgf", img)
    return images, fps


def interpolate_prompts(gen: Generator, prompt_a: str, prompt_b: str, steps: int) -> list:
    """Generation results along the embedding line between two prompts."""
    if steps < 2:
        raise ValueError("interpolation needs steps >= 2")
    emb_a = gen.embed_prompt(prompt_a)
    emb_b = gen.embed_prompt(prompt_b)
    results = []
    for k in range(steps):
        t = k / (steps - 1)
        results.append(gen.forward_from_embedding(textenc.interpolate(emb_a, emb_b, t)))
    return results
