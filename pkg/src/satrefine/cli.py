"""Command-line pipeline: toy-data generation, sprite compositing,
adversarial training, dataset refinement, and the MMD / t-SNE evaluations.

Exit codes: 0 success, 1 usage error, 2 input error, 3 numeric failure.
Every command draws all randomness from one generator seeded by --seed, so
repeat runs are byte-identical. SAT_REFINE_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import features as feats
from . import imageops, metrics, nets, trainer, tsne
from .errors import (
    ContractError,
    FeatFileError,
    CheckpointError,
    LossError,
    PlacementError,
    SatRefineError,
    TrainingDivergenceError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

LABEL_SYNTHETIC = "X"
LABEL_REFINED = "Xhat"
LABEL_REAL = "Ytil"


class InputError(Exception):
    """Bad paths or malformed input files; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- toy domain ------------------------------------------------------------------


def _draw_ellipse_params(rng, size):
    return {
        "cx": rng.uniform(0.30, 0.70) * size,
        "cy": rng.uniform(0.30, 0.70) * size,
        "a": rng.uniform(0.12, 0.22) * size,
        "b": rng.uniform(0.12, 0.22) * size,
        "phi": rng.uniform(0.0, math.pi),
        "level": rng.uniform(0.62, 0.88),
    }


# Target backgrounds all ramp along one fixed diagonal. A deterministic
# refiner can only synthesize what its input determines, so a per-image
# random ramp direction would make the domain gap unclosable by construction.
GRADIENT_DIRECTION = math.radians(45.0)


def _render_toy_patch(rng, size, textured):
    """One gray-ellipse-on-background patch.

    Source patches sit on a flat background; target patches add a linear
    brightness gradient along the fixed diagonal plus Gaussian texture.
    """
    base = rng.uniform(0.25, 0.45)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if textured:
        amplitude = rng.uniform(0.30, 0.50)
        half = (size - 1) / 2.0
        ramp = (
            (xx - half) * math.cos(GRADIENT_DIRECTION)
            + (yy - half) * math.sin(GRADIENT_DIRECTION)
        ) / size
        background = base + amplitude * ramp
        background = background + rng.normal(0.0, 0.05, size=(size, size))
    else:
        background = np.full((size, size), base)

    e = _draw_ellipse_params(rng, size)
    dx, dy = xx - e["cx"], yy - e["cy"]
    u = (dx * math.cos(e["phi"]) + dy * math.sin(e["phi"])) / e["a"]
    v = (-dx * math.sin(e["phi"]) + dy * math.cos(e["phi"])) / e["b"]
    radial = np.sqrt(u * u + v * v)
    # ~1.5 px soft edge so the object boundary is not aliased
    edge = min(e["a"], e["b"])
    cover = np.clip((1.0 - radial) * edge / 1.5, 0.0, 1.0)

    patch = background * (1.0 - cover) + e["level"] * cover
    return np.clip(patch, 0.0, 1.0).astype(np.float32)


def generate_toy_domains(count: int, size: int, seed: int):
    """(source, target) image stacks, each (count, 1, size, size) in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    source = np.stack([_render_toy_patch(rng, size, textured=False) for _ in range(count)])
    target = np.stack([_render_toy_patch(rng, size, textured=True) for _ in range(count)])
    return source[:, None, :, :], target[:, None, :, :]


def cmd_gen_toy(args) -> int:
    out = Path(args.out)
    source, target = generate_toy_domains(args.count, args.size, args.seed)
    for sub, stack in (("source", source), ("target", target)):
        directory = out / sub
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(stack.shape[0]):
            patch = imageops.ImagePatch(pixels=stack[i].transpose(1, 2, 0))
            imageops.save_image(directory / f"img_{i:05d}.png", patch)
    print(f"wrote {args.count} source and {args.count} target patches under {out}")
    return EXIT_OK


# -- compositing -----------------------------------------------------------------


def _list_pngs(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise InputError(f"no PNG files in {directory}")
    return paths


def cmd_compose(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    if args.count > 0:
        bg_paths = _list_pngs(args.bg)
        sprite_paths = _list_pngs(args.sprites)
        backgrounds = [imageops.load_image(p) for p in bg_paths]
        sprites = [imageops.load_sprite(p) for p in sprite_paths]
        for i in range(args.count):
            placed = _place_one(rng, backgrounds, bg_paths, sprites, sprite_paths)
            if placed is None:
                print("error: no valid placement for any sprite/background pair",
                      file=sys.stderr)
                return EXIT_INPUT
            bg_idx, sprite_idx, spec, image = placed
            name = f"composite_{i:05d}.png"
            imageops.save_image(out / name, image)
            manifest.append({
                "file": name,
                "background": bg_paths[bg_idx].name,
                "sprite": sprite_paths[sprite_idx].name,
                "x": spec.x,
                "y": spec.y,
                "angle": spec.angle,
            })
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(manifest)} composites to {out}")
    return EXIT_OK


def _place_one(rng, backgrounds, bg_paths, sprites, sprite_paths, attempts=100):
    for _ in range(attempts):
        bg_idx = int(rng.integers(0, len(backgrounds)))
        sprite_idx = int(rng.integers(0, len(sprites)))
        angle = float(rng.uniform(0.0, 360.0))
        background = backgrounds[bg_idx]
        rotated = imageops.rotate_sprite(sprites[sprite_idx], angle)
        max_x = background.width - rotated.width
        max_y = background.height - rotated.height
        if max_x < 0 or max_y < 0:
            continue
        spec = imageops.PlacementSpec(
            x=int(rng.integers(0, max_x + 1)),
            y=int(rng.integers(0, max_y + 1)),
            angle=angle,
        )
        image = imageops.composite(background, rotated, imageops.PlacementSpec(spec.x, spec.y, 0.0))
        return bg_idx, sprite_idx, spec, image
    return None


# -- training and refinement ------------------------------------------------------


def _load_sample_set(directory, role) -> trainer.SampleSet:
    patches = [imageops.load_image(p) for p in _list_pngs(directory)]
    shapes = {p.pixels.shape for p in patches}
    if len(shapes) != 1:
        raise InputError(f"{directory} mixes patch shapes: {sorted(shapes)}")
    return trainer.SampleSet.from_patches(role, patches)


def cmd_train(args) -> int:
    x_set = _load_sample_set(args.source, trainer.ROLE_SYNTHETIC)
    y_set = _load_sample_set(args.real, trainer.ROLE_REAL)
    cfg = trainer.TrainConfig(
        lam=args.lam,
        batch_size=args.batch_size,
        max_steps=args.steps,
        optimizer=args.optimizer,
        lr_refiner=args.lr_refiner,
        lr_disc=args.lr_disc,
        seed=args.seed,
        history_buffer_size=args.history_buffer,
        log_every=args.log_every,
        l1_sum=args.l1_sum,
        disc_updates=args.disc_updates,
        base_channels=args.base_channels,
        res_blocks=args.res_blocks,
        disc_layers=args.disc_layers,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.ndjson"
    with open(log_path, "w") as fh:
        result = trainer.train(
            x_set, y_set, cfg,
            on_log=lambda rec: fh.write(json.dumps(rec) + "\n"),
        )
    ckpt = out / "checkpoint.srck"
    nets.save_checkpoint(ckpt, result.refiner, result.disc)
    print(f"trained {cfg.max_steps} steps; checkpoint {ckpt}, log {log_path}")
    return EXIT_OK


def cmd_refine(args) -> int:
    refiner, _, _ = nets.load_checkpoint(args.checkpoint)
    paths = _list_pngs(args.input)
    x_set = _load_sample_set(args.input, trainer.ROLE_SYNTHETIC)
    refined = trainer.refine_dataset(refiner, x_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, image in zip(paths, refined.images):
        patch = imageops.ImagePatch(pixels=image.transpose(1, 2, 0))
        imageops.save_image(out / path.name, patch)
    print(f"refined {len(paths)} patches into {out}")
    return EXIT_OK


# -- evaluations -------------------------------------------------------------------


def _load_features(path_or_dir, role) -> feats.FeatureSet:
    path = Path(path_or_dir)
    if path.is_dir():
        images = _load_sample_set(path, role)
        return feats.fallback_extract(images, role=role)
    if not path.exists():
        raise InputError(f"no such file or directory: {path}")
    return feats.read_feat(path, role=role)


def _three_sets(args):
    x = _load_features(args.synthetic, LABEL_SYNTHETIC)
    xhat = _load_features(args.refined, LABEL_REFINED)
    ytil = _load_features(args.real, LABEL_REAL)
    dims = {x.d, xhat.d, ytil.d}
    if len(dims) != 1:
        raise InputError(f"feature sets disagree on dimension: {sorted(dims)}")
    return x, xhat, ytil


def cmd_eval_mmd(args) -> int:
    x, xhat, ytil = _three_sets(args)
    if args.subsample is not None:
        rng = np.random.default_rng(args.subsample_seed)
        if args.subsample < 1 or args.subsample > ytil.n:
            raise InputError(f"--subsample must lie in 1..{ytil.n}")
        idx = rng.choice(ytil.n, size=args.subsample, replace=False)
        ytil = feats.FeatureSet(role=ytil.role, matrix=ytil.matrix[idx], source=ytil.source)
    mats = {
        LABEL_SYNTHETIC: x.matrix.astype(np.float64),
        LABEL_REFINED: xhat.matrix.astype(np.float64),
        LABEL_REAL: ytil.matrix.astype(np.float64),
    }
    if args.shuffle_seed is not None:
        rng = np.random.default_rng(args.shuffle_seed)
        mats = {k: m[rng.permutation(m.shape[0])] for k, m in mats.items()}

    spec = metrics.default_kernel_spec()
    estimators = {
        "linear": metrics.mmd2_linear,
        "quadratic": metrics.mmd2_quadratic_unbiased,
    }
    chosen = list(estimators) if args.estimator == "both" else [args.estimator]
    pairs = [
        (f"{LABEL_SYNTHETIC}_vs_{LABEL_REFINED}", LABEL_SYNTHETIC, LABEL_REFINED),
        (f"{LABEL_SYNTHETIC}_vs_{LABEL_REAL}", LABEL_SYNTHETIC, LABEL_REAL),
        (f"{LABEL_REFINED}_vs_{LABEL_REAL}", LABEL_REFINED, LABEL_REAL),
    ]
    report = {"pairs": []}
    for kind in chosen:
        for pair_name, a, b in pairs:
            est = estimators[kind](mats[a], mats[b], spec)
            report["pairs"].append(est.report(pair_name))
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for entry in report["pairs"]:
        print(f"{entry['pair']:>14s} [{entry['estimator']}] "
              f"mmd2={entry['mmd2']:.6f} mmd={entry['mmd']:.6f} "
              f"stderr={entry['stderr']:.6f}")
    return EXIT_OK


def cmd_eval_tsne(args) -> int:
    x, xhat, ytil = _three_sets(args)
    sets = [x, xhat, ytil]
    if args.max_per_set is not None:
        rng = np.random.default_rng(args.seed)
        trimmed = []
        for fs in sets:
            if fs.n > args.max_per_set:
                idx = np.sort(rng.choice(fs.n, size=args.max_per_set, replace=False))
                fs = feats.FeatureSet(role=fs.role, matrix=fs.matrix[idx], source=fs.source)
            trimmed.append(fs)
        sets = trimmed
    stacked = np.concatenate([fs.matrix for fs in sets], axis=0)
    labels = [fs.role for fs in sets for _ in range(fs.n)]
    if args.pca is not None:
        stacked = tsne.pca_reduce(stacked, args.pca)
    cfg = tsne.TsneConfig(perplexity=args.perplexity, iterations=args.iterations,
                          seed=args.seed)
    embedding = tsne.tsne_run(stacked, cfg, labels=labels)
    means = tsne.set_means(
        embedding, required=(LABEL_SYNTHETIC, LABEL_REFINED, LABEL_REAL)
    )

    with open(args.out_csv, "w") as fh:
        fh.write("index,label,y1,y2\n")
        for i, (label, point) in enumerate(zip(labels, embedding.points)):
            fh.write(f"{i},{label},{point[0]:.10g},{point[1]:.10g}\n")
    summary = {
        "kl_final": embedding.kl_history[-1],
        "iterations": cfg.iterations,
        "set_means": {k: [float(v[0]), float(v[1])] for k, v in means.items()},
    }
    with open(args.out_json, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"embedded {stacked.shape[0]} points; kl_final={summary['kl_final']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="satrefine", description=__doc__)
    parser.add_argument("--config", default=None,
                        help="flat key=value config file; flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the two toy image domains")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("compose", help="overlay sprites onto backgrounds")
    p.add_argument("--bg", required=True)
    p.add_argument("--sprites", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("train", help="adversarially train the refiner")
    p.add_argument("--source", required=True, help="directory of synthetic patches")
    p.add_argument("--real", required=True, help="directory of real patches")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lambda", dest="lam", type=float, default=40.0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr-refiner", type=float, default=2e-4)
    p.add_argument("--lr-disc", type=float, default=2e-4)
    p.add_argument("--history-buffer", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--l1-sum", action="store_true",
                   help="use the raw L1 sum identity term instead of the per-pixel mean")
    p.add_argument("--disc-updates", type=int, default=1)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--res-blocks", type=int, default=2)
    p.add_argument("--disc-layers", type=int, default=3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="run every patch through a trained refiner")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval-mmd", help="three-pair MMD report")
    p.add_argument("--synthetic", required=True, help=".srft file or PNG directory")
    p.add_argument("--refined", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--estimator", choices=("linear", "quadratic", "both"),
                   default="linear")
    p.add_argument("--subsample", type=int, default=None,
                   help="draw this many real rows without replacement")
    p.add_argument("--subsample-seed", type=int, default=0)
    p.add_argument("--shuffle-seed", type=int, default=None,
                   help="seeded row shuffle before the linear estimator's pairing")
    p.set_defaults(func=cmd_eval_mmd)

    p = sub.add_parser("eval-tsne", help="joint t-SNE embedding and set means")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--refined", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-per-set", type=int, default=None)
    p.add_argument("--pca", type=int, default=None,
                   help="PCA-reduce features to this many dims first")
    p.set_defaults(func=cmd_eval_tsne)

    return parser


def _apply_config_file(parser, argv):
    """Pre-scan for --config and install its key=value pairs as defaults."""
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
    if path is None:
        return argv
    if not Path(path).is_file():
        raise InputError(f"config file not found: {path}")
    overrides = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"malformed config line (want key=value): {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            overrides[key.replace("-", "_")] = value
    subparsers = [
        sub for group in parser._subparsers._group_actions
        for sub in group.choices.values()
    ]
    for target in [parser] + subparsers:
        for action in target._actions:
            if action.dest not in overrides:
                continue
            raw = overrides[action.dest]
            if action.type is not None:
                raw = action.type(raw)
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                raw = raw.lower() in ("1", "true", "yes", "on")
            target.set_defaults(**{action.dest: raw})
    return argv


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FeatFileError, CheckpointError, PlacementError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDivergenceError, LossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SatRefineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
