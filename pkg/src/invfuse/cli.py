"""Command-line surface: dataset generation, training, fusion, inversion,
evaluation, the ablation grid, and numeric self-checks.

Exit codes: 0 success; 2 usage, config, or input-file problems; 3 numeric
failure (divergence during training, or a round-trip error above the
gate).  When training diverges mid-run the checkpoint written after the
last completed epoch is left in place.

A single ``--seed N`` overrides every seed field of the run config
(model, training, latent, data) so one flag yields an independent rerun.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (checkpoint_of, load_checkpoint, restore_model,
                         save_checkpoint)
from .config import RunConfig, load_run_config
from .data import dataset_split, load_grayscale, save_grayscale, synth_pair
from .data import ImagePair
from .errors import ConfigError, ImageIOError, InvfuseError, NumericError
from .flow import (LATENT_KINDS, FlowModel, LatentSpec, ModelConfig,
                   decompose_pair, fuse_pair, randomize_parameters,
                   sample_latent)
from .losses import SsimConfig
from .metrics import evaluate_pair, report_table
from .training import (TrainConfig, Trainer, gradient_check_model,
                       validation_latents)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = reseed(cfg, seed)
    return cfg


def reseed(cfg: RunConfig, seed: int) -> RunConfig:
    """One seed for everything: model init, shuffling, latent, data."""
    return RunConfig(
        model=dataclasses.replace(cfg.model, seed=seed),
        train=dataclasses.replace(
            cfg.train, seed=seed,
            latent=dataclasses.replace(cfg.train.latent, seed=seed)),
        synth=dataclasses.replace(cfg.synth, seed=seed),
        n_pairs=cfg.n_pairs, train_fraction=cfg.train_fraction)


def _dataset(cfg: RunConfig):
    pairs = [synth_pair(cfg.synth, i) for i in range(cfg.n_pairs)]
    return dataset_split(pairs, cfg.train_fraction, seed=cfg.synth.seed)


def _restore(args):
    ck = load_checkpoint(args.checkpoint)
    return restore_model(ck), ck


def _write_image(path, arr, what):
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        print(f"warning: {what} spans [{lo:.4g}, {hi:.4g}]; clipping to "
              f"[0, 1] for {path}", file=sys.stderr)
    save_grayscale(np.clip(arr, 0.0, 1.0), path)


def _read_latent_file(path, shape):
    h, w = shape
    want = h * w * 8
    data = Path(path).read_bytes()
    if len(data) != want:
        raise ImageIOError(
            f"{path}: expected a {h}x{w} float64 latent ({want} bytes), "
            f"got {len(data)} bytes")
    z = np.frombuffer(data, dtype="<f8").reshape(h, w)
    if not np.all(np.isfinite(z)):
        raise ImageIOError(f"{path}: latent contains non-finite values")
    return z


def model_reports(model, pairs, latent_spec, ssim_config=SsimConfig()):
    """Fuse + decompose every pair and compute its metric report.

    Decomposition latents use the same per-image keyed draws as the
    trainer's validation pass, so evaluating a checkpoint reproduces the
    numbers its training log reported."""
    if not pairs:
        raise ConfigError("evaluation dataset is empty")
    x1 = np.stack([p.x1 for p in pairs])[:, None]
    x2 = np.stack([p.x2 for p in pairs])[:, None]
    y, z = fuse_pair(model, x1, x2)
    z_new = validation_latents(latent_spec, [p.id for p in pairs], z.shape[1:])
    rec1, rec2 = decompose_pair(model, y, z_new)
    return [
        evaluate_pair(p.x1, p.x2, y[i, 0], rec1[i, 0], rec2[i, 0],
                      pair_id=p.id, ssim_config=ssim_config)
        for i, p in enumerate(pairs)
    ]


def _mean(reports, field):
    return float(np.mean([getattr(r, field) for r in reports]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_pairs):
        pair = synth_pair(cfg.synth, i)
        save_grayscale(pair.x1, out / f"{pair.id}-x1.pgm")
        save_grayscale(pair.x2, out / f"{pair.id}-x2.pgm")
    print(f"wrote {cfg.n_pairs} pairs to {out}")
    return 0


def load_pair_dir(path):
    """Pairs from a directory of ``<id>-x1.pgm`` / ``<id>-x2.pgm`` files."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"{root}: not a directory")
    firsts = sorted(root.glob("*-x1.pgm"))
    if not firsts:
        raise ConfigError(f"{root}: no *-x1.pgm images found")
    pairs = []
    for f1 in firsts:
        stem = f1.name[: -len("-x1.pgm")]
        f2 = root / f"{stem}-x2.pgm"
        if not f2.exists():
            raise ConfigError(f"{root}: {f1.name} has no matching {f2.name}")
        pairs.append(ImagePair(id=stem, x1=load_grayscale(f1),
                               x2=load_grayscale(f2)))
    return pairs


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_pairs, val_pairs = _dataset(cfg)
    model = FlowModel(cfg.model)
    trainer = Trainer(model, cfg.train)
    out = Path(args.out)
    log_path = Path(str(out) + ".log")

    # The checkpoint on disk always reflects the last completed epoch, so
    # a divergence (exit 3) still leaves the last stable state behind.
    save_checkpoint(out, checkpoint_of(model, cfg.train, trainer.opt))
    with open(log_path, "w") as log_file:
        def log_line(line):
            log_file.write(line + "\n")
            log_file.flush()

        def snapshot(stats):
            save_checkpoint(out, checkpoint_of(model, cfg.train, trainer.opt))

        trainer.run(train_pairs, val_pairs, log=log_line, on_epoch=snapshot)
    print(f"wrote {out} and {log_path}")
    return 0


def cmd_fuse(args) -> int:
    model, _ = _restore(args)
    x1 = load_grayscale(args.x1)
    x2 = load_grayscale(args.x2)
    if x1.shape != x2.shape:
        raise ConfigError(f"{args.x1} is {x1.shape[0]}x{x1.shape[1]} but "
                          f"{args.x2} is {x2.shape[0]}x{x2.shape[1]}")
    y, z = fuse_pair(model, x1, x2)
    _write_image(args.out, y, "fused image")
    Path(args.z_file).write_bytes(np.ascontiguousarray(z, dtype="<f8").tobytes())
    print(f"wrote {args.out} and {args.z_file}")
    return 0


def cmd_decompose(args) -> int:
    model, ck = _restore(args)
    y = load_grayscale(args.y)
    if args.z_file is not None:
        z = _read_latent_file(args.z_file, y.shape)
    else:
        trained = ck.train_config.latent
        spec = LatentSpec(kind=args.latent or trained.kind,
                          seed=args.seed if args.seed is not None else trained.seed)
        z = sample_latent(spec, (1, 1) + y.shape, draw_index=0)[0, 0]
    x1, x2 = decompose_pair(model, y, z)
    _write_image(args.out_x1, x1, "reconstruction of the first source")
    _write_image(args.out_x2, x2, "reconstruction of the second source")
    print(f"wrote {args.out_x1} and {args.out_x2}")
    return 0


ROUNDTRIP_GATE = 1e-5


def roundtrip_error(model, trials, size, seed) -> float:
    """Max |inverse(forward(x)) - x| over random pairs in [0.01, 0.99]."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    worst = 0.0
    batch = 20
    for start in range(0, trials, batch):
        n = min(batch, trials - start)
        x1 = rng.uniform(0.01, 0.99, size=(n, 1, size, size))
        x2 = rng.uniform(0.01, 0.99, size=(n, 1, size, size))
        y, z = fuse_pair(model, x1, x2)
        r1, r2 = decompose_pair(model, y, z)
        worst = max(worst, float(np.max(np.abs(r1 - x1))),
                    float(np.max(np.abs(r2 - x2))))
    return worst


def cmd_roundtrip(args) -> int:
    if args.checkpoint:
        model, _ = _restore(args)
        size = 32
    else:
        cfg = _run_config(args)
        model = FlowModel(cfg.model)
        size = cfg.synth.size
    err = roundtrip_error(model, args.trials, size,
                          args.seed if args.seed is not None else 0)
    print(f"max round-trip error over {args.trials} trials at "
          f"{size}x{size}: {err:.6e}")
    if err >= ROUNDTRIP_GATE:
        print(f"error: round-trip error {err:.6e} exceeds the "
              f"{ROUNDTRIP_GATE:g} gate", file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    model, ck = _restore(args)
    if args.data is not None:
        pairs = load_pair_dir(args.data)
    else:
        _, pairs = _dataset(_run_config(args))
    reports = model_reports(model, pairs, ck.train_config.latent)
    table = report_table(reports)
    if args.out:
        Path(args.out).write_text(table)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(table)
    return 0


ABLATE_COLUMNS = ("cell", "k", "ssim_weight", "fusion_weight", "latent_kind",
                  "seed", "fusion_ssim_x1", "fusion_ssim_x2",
                  "dec_ssim_x1", "dec_ssim_x2", "status")


def _parse_grid(text, kind, flag):
    if text is None:
        return None
    try:
        return tuple(kind(part.strip()) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{flag}: expected a comma-separated list, "
                          f"got {text!r}") from None


def ablate_cells(base: RunConfig, ks, lams, alphas, latents):
    """Grid in (k, λ, α, latent) order with per-cell derived seeds: cell i
    shifts every seed of the base config by i+1, so cells are mutually
    distinct and distinct from the base run, while the dataset (data seed
    kept from base) is shared for comparability."""
    ks = ks or (base.model.k,)
    lams = lams or (base.train.loss_weights.ssim_weight,)
    alphas = alphas or (base.train.loss_weights.fusion_weight,)
    latents = latents or (base.train.latent.kind,)
    cells = []
    for index, (k, lam, alpha, kind) in enumerate(
            itertools.product(ks, lams, alphas, latents)):
        seed = base.train.seed + index + 1
        cfg = RunConfig(
            model=dataclasses.replace(base.model, k=k, seed=seed),
            train=dataclasses.replace(
                base.train, seed=seed,
                loss_weights=dataclasses.replace(
                    base.train.loss_weights, ssim_weight=lam,
                    fusion_weight=alpha),
                latent=dataclasses.replace(base.train.latent, kind=kind)),
            synth=base.synth, n_pairs=base.n_pairs,
            train_fraction=base.train_fraction)
        cells.append((k, lam, alpha, kind, seed, cfg))
    return cells


def cmd_ablate(args) -> int:
    base = _run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = ablate_cells(base,
                         _parse_grid(args.k, int, "--k"),
                         _parse_grid(args.lam, float, "--lambda"),
                         _parse_grid(args.alpha, float, "--alpha"),
                         _parse_grid(args.latent, str, "--latent"))
    rows = ["\t".join(ABLATE_COLUMNS)]
    for index, (k, lam, alpha, kind, seed, cfg) in enumerate(cells):
        ck_path = out_dir / f"cell-{index:03d}.finn1"
        prefix = [str(index), str(k), f"{lam:.10g}", f"{alpha:.10g}",
                  kind, str(seed)]
        try:
            train_pairs, val_pairs = _dataset(cfg)
            model = FlowModel(cfg.model)
            trainer = Trainer(model, cfg.train)
            with open(Path(str(ck_path) + ".log"), "w") as log_file:
                trainer.run(train_pairs, val_pairs,
                            log=lambda line: log_file.write(line + "\n"))
            save_checkpoint(ck_path, checkpoint_of(model, cfg.train, trainer.opt))
            reports = model_reports(model, val_pairs, cfg.train.latent)
            row = prefix + [
                f"{_mean(reports, f):.10g}"
                for f in ("q_ssim_x1", "q_ssim_x2", "dec_ssim_1", "dec_ssim_2")
            ] + ["ok"]
        except (InvfuseError, FloatingPointError) as err:
            row = prefix + ["nan"] * 4 + [f"failed: {err}"]
        rows.append("\t".join(row))
        print(rows[-1], flush=True)
    summary = out_dir / "summary.tsv"
    summary.write_text("\n".join(rows) + "\n")
    print(f"wrote {summary}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.config:
        cfg = _run_config(args)
        model_config, train_config = cfg.model, cfg.train
    else:
        # cheap demo topology; the full-size check is a test-suite job
        model_config = ModelConfig(k=2, hidden_channels=4, seed=seed)
        train_config = TrainConfig()
    size = 8
    model = FlowModel(model_config)
    randomize_parameters(model, seed=seed, scale=0.1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    # batch of two so the pairwise latent term participates
    x1 = rng.uniform(0.05, 0.95, size=(2, 1, size, size))
    x2 = rng.uniform(0.05, 0.95, size=(2, 1, size, size))
    report = gradient_check_model(model, x1, x2, train_config)
    print(report.summary())
    if not report.ok:
        print("error: analytic gradients disagree with central differences",
              file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invfuse",
        description="Invertible two-image fusion: train, fuse, decompose, "
                    "evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("generate-data", cmd_generate_data,
            "write a synthetic PGM dataset to a directory")
    p.add_argument("--config", help="run config file (synth section is used)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override every config seed")

    p = add("train", cmd_train, "train a model and write a FINN1 checkpoint")
    p.add_argument("--config", help="run config file")
    p.add_argument("--out", required=True, help="checkpoint path; the epoch "
                   "log goes to <out>.log")
    p.add_argument("--seed", type=int, help="override every config seed")

    p = add("fuse", cmd_fuse, "fuse two PGM images into y (PGM) + z (raw "
            "float64)")
    p.add_argument("x1")
    p.add_argument("x2")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="fused image (PGM)")
    p.add_argument("--z-file", required=True,
                   help="forward latent output (raw little-endian float64)")

    p = add("decompose", cmd_decompose,
            "invert a fused image back into two source estimates")
    p.add_argument("y", help="fused image (PGM)")
    p.add_argument("out_x1", help="first reconstruction (PGM)")
    p.add_argument("out_x2", help="second reconstruction (PGM)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latent", choices=LATENT_KINDS,
                   help="latent prior to sample (default: the trained one)")
    p.add_argument("--z-file", help="use this stored latent instead of "
                   "sampling")
    p.add_argument("--seed", type=int, help="seed for the sampled latent")

    p = add("roundtrip", cmd_roundtrip,
            "measure max |inverse(forward(x)) - x| over random inputs")
    p.add_argument("--checkpoint", help="model to check (default: fresh "
                   "identity-initialized model from --config)")
    p.add_argument("--config", help="run config for the fresh model")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)

    p = add("eval", cmd_eval, "metric table for a dataset under a model")
    p.add_argument("data", nargs="?", help="directory of <id>-x1.pgm/"
                   "<id>-x2.pgm pairs (default: the config's validation "
                   "split)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run config for the synthetic dataset")
    p.add_argument("--seed", type=int, help="override every config seed")
    p.add_argument("--out", help="write the table here instead of stdout")

    p = add("ablate", cmd_ablate, "train/evaluate a grid of configs")
    p.add_argument("--config", help="base run config")
    p.add_argument("--out", required=True, help="output directory (summary"
                   ".tsv, per-cell checkpoints and logs)")
    p.add_argument("--seed", type=int, help="override every base config seed")
    p.add_argument("--k", help="comma list of coupling-block counts")
    p.add_argument("--lambda", dest="lam", help="comma list of SSIM/L2 "
                   "trade-offs")
    p.add_argument("--alpha", help="comma list of fusion/decomposition "
                   "trade-offs")
    p.add_argument("--latent", help="comma list of latent kinds")

    p = add("gradcheck", cmd_gradcheck,
            "verify analytic gradients against central differences")
    p.add_argument("--config", help="run config (model+train sections)")
    p.add_argument("--seed", type=int)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except InvfuseError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
