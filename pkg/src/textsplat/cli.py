"""Command-line interface.

Subcommands: train, generate, render, interpolate, export, check.
Exit codes: 0 success, 1 runtime failure, 2 argument errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline, textenc
from .pipeline import BUILTIN_PROMPTS, Generator, RunConfig
from .splat import render, sample_camera, render_naive
from .textenc import PromptSet
from .train import MockGuidance, train


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textsplat",
                                description="text-conditioned 3D Gaussian splat generator")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train", help="run the training loop with mock guidance")
    add_common(sp)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--out", default="model.aspt", help="checkpoint output path")
    sp.add_argument("--log", help="metrics log file")
    sp.add_argument("--prompts", help="text file with one training prompt per line")
    sp.add_argument("--embeddings", help="TEMB container to use instead of built-in embeddings")

    sp = sub.add_parser("generate", help="generate a splat PLY from a prompt")
    add_common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output .ply path")
    sp.add_argument("--embeddings", help="TEMB container to prefer over built-in embeddings")

    sp = sub.add_parser("render", help="render a turntable from a splat PLY")
    add_common(sp)
    sp.add_argument("--ply", required=True)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--out", required=True, help="output directory for frames")

    sp = sub.add_parser("interpolate", help="generate splats along an embedding interpolation")
    add_common(sp)
    sp.add_argument("--a", required=True, dest="prompt_a")
    sp.add_argument("--b", required=True, dest="prompt_b")
    sp.add_argument("--steps", type=int, default=5)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output directory for step PLYs")
    sp.add_argument("--embeddings", help="TEMB container to prefer over built-in embeddings")

    sp = sub.add_parser("export", help="export deterministic prompt embeddings as a TEMB container")
    add_common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--prompts", help="text file with one prompt per line (default: built-in set)")

    sp = sub.add_parser("check", help="run the invariant suite on a fresh seed")
    add_common(sp)
    return p


def _load_cfg(args) -> RunConfig:
    if args.config:
        return pipeline.load_config(args.config, args.overrides)
    return pipeline.parse_config("", args.overrides)


def _load_prompts(path) -> PromptSet:
    if path is None:
        return BUILTIN_PROMPTS
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return PromptSet(lines)


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    prompts = _load_prompts(args.prompts)
    gen = Generator(cfg)
    if args.embeddings:
        gen.use_imported_embeddings(args.embeddings, prompts)
    if args.resume:
        gen.load(args.resume)
    guidance = MockGuidance((cfg.render_width, cfg.render_height), cfg.background,
                            cfg.guidance_weight)
    train(gen, gen.store, prompts, guidance, cfg.train_config(), log_path=args.log)
    gen.save(args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    gen = Generator(cfg)
    if args.embeddings:
        gen.use_imported_embeddings(args.embeddings, BUILTIN_PROMPTS)
    gen.load(args.checkpoint)
    result = gen.generate(args.prompt)
    pipeline.export_ply(result.gaussians.detached(), args.out)
    print(f"generated {result.gaussians.count} gaussians in {result.latency_ms:.1f} ms -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    cfg = _load_cfg(args)
    g = pipeline.import_ply(args.ply)
    frames, fps = pipeline.render_turntable(g, args.frames, cfg, out_dir=args.out)
    print(f"rendered {len(frames)} frames at {fps:.1f} FPS -> {args.out}")
    return 0


def _cmd_interpolate(args) -> int:
    cfg = _load_cfg(args)
    gen = Generator(cfg)
    if args.embeddings:
        gen.use_imported_embeddings(args.embeddings, BUILTIN_PROMPTS)
    gen.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = pipeline.interpolate_prompts(gen, args.prompt_a, args.prompt_b, args.steps)
    for k, res in enumerate(results):
        pipeline.export_ply(res.gaussians.detached(), out / f"step_{k:03d}.ply")
    print(f"wrote {len(results)} interpolation steps to {out}")
    return 0


def _cmd_export(args) -> int:
    cfg = _load_cfg(args)
    prompts = _load_prompts(args.prompts)
    table = {i: textenc.embed(prompts[i], cfg.text_len, cfg.text_dim, cfg.seed)
             for i in range(len(prompts))}
    textenc.write_embeddings(args.out, table)
    print(f"wrote {len(table)} embeddings (L={cfg.text_len}, D={cfg.text_dim}) to {args.out}")
    return 0


def run_check(cfg: RunConfig) -> list:
    """Fast invariant battery on a freshly seeded generator."""
    results = []

    def check(name, fn):
        try:
            fn()
            results.append((name, True, ""))
        except Exception as e:  # single-line diagnostic per failed check
            results.append((name, False, f"{type(e).__name__}: {e}"))

    gen = Generator(cfg)
    prompt = BUILTIN_PROMPTS[0]

    def offset_bound():
        res = gen.generate(prompt)
        delta = res.centers.data - gen.grid.points
        assert np.max(np.abs(delta)) < cfg.tsd_beta

    def attribute_ranges():
        g = gen.gaussians_for(prompt)
        assert 0 < g.opacity.data.min() and g.opacity.data.max() < 1
        assert cfg.scale_min < g.scaling_raw.data.min() and g.scaling_raw.data.max() < cfg.scale_max
        assert np.abs(np.linalg.norm(g.rotation.data, axis=1) - 1).max() < 1e-6

    def determinism():
        a = gen.generate(prompt).gaussians
        b = gen.generate(prompt).gaussians
        assert np.array_equal(a.centers.data, b.centers.data)
        assert np.array_equal(a.sh_dc.data, b.sh_dc.data)

    def plane_disjoint():
        if cfg.ttg_mode != "separate":
            return
        names = gen.store.names()
        for a, b in (("ttg.xy.", "ttg.xz."), ("ttg.xy.", "ttg.yz."), ("ttg.xz.", "ttg.yz.")):
            xs = {n for n in names if n.startswith(a)}
            ys = {n for n in names if n.startswith(b)}
            assert not (xs & ys)

    def renderer_checks():
        g = gen.gaussians_for(prompt).detached()
        rng = np.random.default_rng(cfg.seed)
        cam = sample_camera(rng, (cfg.radius_min, cfg.radius_max), cfg.fov_y,
                            (cfg.render_width, cfg.render_height), near=cfg.near, far=cfg.far)
        img = render(g, cam, cfg.background)
        naive = render_naive(g, cam, cfg.background)
        assert np.abs(img.pixels.data.astype(np.float64) - naive["pixels"]).max() < 1e-5
        assert np.abs(naive["weight_sum"] + naive["transmittance"] - 1.0).max() < 1e-6
        assert np.isfinite(img.pixels.data).all()

    def config_roundtrip():
        assert pipeline.parse_config(pipeline.serialize_config(cfg)) == cfg

    check("offset-bound", offset_bound)
    check("attribute-ranges", attribute_ranges)
    check("determinism", determinism)
    check("plane-parameter-disjointness", plane_disjoint)
    check("renderer-oracle+conservation", renderer_checks)
    check("config-roundtrip", config_roundtrip)
    return results


def _cmd_check(args) -> int:
    cfg = _load_cfg(args)
    results = run_check(cfg)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        ok = ok and passed
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "train": _cmd_train,
        "generate": _cmd_generate,
        "render": _cmd_render,
        "interpolate": _cmd_interpolate,
        "export": _cmd_export,
        "check": _cmd_check,
    }
    try:
        return handlers[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
