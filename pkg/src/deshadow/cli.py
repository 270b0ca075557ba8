"""Command-line interface.

Subcommands: synth, colorshift, train, infer, eval, gradcheck, bench.
Exit codes: 0 success, 1 contract/config violation, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checks import end_to_end_check, unit_checks
from .colorshift import build_negative_set, color_ratio
from .data import synth_dataset, synth_shadow_sample
from .errors import ConfigError, ContractViolation, NoShadowRegion, TrainingError
from .images import load_mask, load_rgb, save_mask, save_rgb
from .metrics import region_metrics
from .model import (
    ABLATION_VARIANTS,
    ModelConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from .ssm import init_continuous_params, scan_matrix_oracle, selective_scan


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad usage, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="deshadow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit synthetic shadow samples")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("colorshift", help="build color-shifted negatives for one pair")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="two-stage training from a JSON config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--ablate", choices=ABLATION_VARIANTS, default=None)
    p.add_argument("--lambda", dest="lambda_cs", type=float, default=None)
    p.add_argument(
        "--init-ckpt", type=Path, default=None,
        help="checkpoint to resume from (required for --stage 2)",
    )
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("infer", help="run a checkpoint on an image + mask")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="prediction vs ground truth metrics as JSON")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-e2e", action="store_true")

    p = sub.add_parser("bench", help="scan throughput sweep, CSV out")
    p.add_argument("--lengths", type=int, nargs="+", default=[64, 128, 256, 512])
    p.add_argument("--state-dim", type=int, default=4)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_synth(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(args.n):
        sample = synth_shadow_sample(args.seed + 1000 * i, args.size, args.size)
        stem = f"sample_{i:04d}"
        save_rgb(args.out / f"{stem}_in.png", sample.image_in)
        save_rgb(args.out / f"{stem}_gt.png", sample.image_gt)
        save_mask(args.out / f"{stem}_mask.pgm", sample.mask)
        manifest.append(
            {"stem": stem, "seed": sample.seed, "coverage": float(sample.mask.mean())}
        )
    (args.out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_colorshift(args) -> int:
    image = load_rgb(args.image)
    mask = load_mask(args.mask)
    try:
        negatives = build_negative_set(image, mask, k=args.k, seed=args.seed)
    except NoShadowRegion as exc:
        print(f"skip: {exc}", file=sys.stderr)
        return 1
    args.out.mkdir(parents=True, exist_ok=True)
    for rank, neg in enumerate(negatives.negatives):
        save_rgb(args.out / f"negative_{rank:02d}.png", neg)
    manifest = {
        "source_image": str(args.image),
        "mask": str(args.mask),
        "k": args.k,
        "seed": args.seed,
        "shadow_color": list(negatives.shadow_color.as_array()),
        "candidate_colors": [list(c.as_array()) for c in negatives.candidate_colors],
        "ratios": [
            list(color_ratio(c, negatives.shadow_color))
            for c in negatives.candidate_colors
        ],
        "candidate_difficulties": list(negatives.candidate_difficulties),
        "difficulty_mean": negatives.r_mu,
        "difficulty_std": negatives.r_sigma,
        "kept_indices": negatives.kept_indices,
        "kept_difficulties": list(negatives.difficulties),
        "weights": list(negatives.weights),
        "fallback": negatives.fallback,
    }
    (args.out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    print(f"wrote {len(negatives.negatives)} negatives to {args.out}")
    return 0


def _load_train_config(path: Path) -> dict:
    try:
        raw = json.loads(path.read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def _cmd_train(args) -> int:
    raw = _load_train_config(args.config)
    data_cfg = raw.get("data", {})
    model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    if args.seed is not None:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": args.seed})
    if args.lambda_cs is not None:
        model_cfg = ModelConfig.from_dict(
            {**model_cfg.to_dict(), "lambda_cs": args.lambda_cs}
        )
    if args.ablate is not None:
        model_cfg = model_cfg.with_ablation(args.ablate)

    dataset = synth_dataset(
        n=int(data_cfg.get("n", 8)),
        seed=int(data_cfg.get("seed", model_cfg.seed)),
        size=int(data_cfg.get("size", 32)),
    )
    holdout = synth_shadow_sample(
        int(data_cfg.get("holdout_seed", 999_983)),
        int(data_cfg.get("size", 32)),
        int(data_cfg.get("size", 32)),
    )

    summary: dict = {"config": model_cfg.to_dict(), "ablation": args.ablate}
    if args.stage == "2":
        if args.init_ckpt is None:
            raise ConfigError("--stage 2 needs --init-ckpt with the stage-1 model")
        state = TrainState(model=load_checkpoint(args.init_ckpt), stage=1)
    else:
        state = train_stage1(dataset, model_cfg)
        summary["stage1"] = {
            "steps": model_cfg.stage1_steps,
            "eval": state.stage1_eval,
            "first_loss": state.stage1_losses[0] if state.stage1_losses else None,
            "last_loss": state.stage1_losses[-1] if state.stage1_losses else None,
        }
    if args.stage in ("2", "both"):
        state = train_stage2(dataset, state, model_cfg)
        summary["stage2"] = {
            "steps": model_cfg.stage2_steps,
            "eval": state.stage2_eval,
            "first_loss": state.stage2_losses[0] if state.stage2_losses else None,
            "last_loss": state.stage2_losses[-1] if state.stage2_losses else None,
        }

    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "checkpoint.bin", state.model)
    pred = state.model.forward(Tensor(holdout.image_in), holdout.mask)
    report = region_metrics(pred.data, holdout.image_gt, holdout.mask)
    summary["holdout_metrics"] = report.to_dict()
    (args.out / "metrics.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    print(f"training complete; artifacts in {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = load_rgb(args.image)
    mask = load_mask(args.mask)
    pred = model.forward(Tensor(image), mask)
    save_rgb(args.out, pred.data)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    report = region_metrics(
        load_rgb(args.pred), load_rgb(args.gt), load_mask(args.mask)
    )
    text = report.to_json() + "\n"
    if args.out is not None:
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    results = unit_checks(seed=args.seed)
    if not args.skip_e2e:
        results.append(end_to_end_check(seed=args.seed))
    failed = False
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.name:<24} max_rel_err={res.max_rel_error:.3e} "
              f"tol={res.tolerance:.0e} {status}")
        failed |= not res.passed
    return 1 if failed else 0


def _cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = []
    for length in args.lengths:
        params = init_continuous_params(args.channels, args.state_dim, rng)
        x = rng.normal(size=(length, args.channels))
        for mode, fn in (
            ("recursion", lambda: selective_scan(x, params)),
            ("matrix", lambda: scan_matrix_oracle(x, params)),
        ):
            fn()  # warm up
            reps = 5
            t0 = time.perf_counter()
            for _ in range(reps):
                fn()
            elapsed = (time.perf_counter() - t0) / reps
            rows.append(
                {
                    "L": length,
                    "Z": args.state_dim,
                    "mode": mode,
                    "ns_per_step": elapsed / length * 1e9,
                }
            )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["L", "Z", "mode", "ns_per_step"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "colorshift": _cmd_colorshift,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ContractViolation, ConfigError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
