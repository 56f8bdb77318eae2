"""Command-line entry point exposing the library as reproducible commands.

Exit codes: 0 success, 1 assertion/suite failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .attention import AnatomyMasks
from .config import (ConfigError, echo_config, load_config, model_config,
                     parse_int_list, synthetic_spec)
from .harness import (CLASS_NAMES, MetricsTable, ablation_sweep,
                      gen_seg_batches, gen_synthetic, robustness_experiment,
                      train_condition)
from .model import (ToyModel, gradcam, load_checkpoint, save_checkpoint,
                    write_history, predict, train)
from .seg import CycleNets, train_cyclegan_toy, write_curves
from .serialize import write_pgm
from .suite import run_gradcheck_suite
from .tensor import Tensor


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gradcheck(args, cfg) -> int:
    reports = run_gradcheck_suite(tol=args.tol, eps=args.eps,
                                  inject_fault=args.inject_fault,
                                  include_models=not args.skip_models)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:28s} max_rel_err={r.max_rel_err:.3e} "
              f"(tol {r.tol:g})")
    if failed:
        print(f"gradcheck: {len(failed)} target(s) failed: "
              + ", ".join(r.name for r in failed))
        return 1
    print(f"gradcheck: all {len(reports)} targets passed")
    return 0


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    echo_config(cfg, out)
    mcfg = model_config(cfg)
    spec = synthetic_spec(cfg)
    data = gen_synthetic(dc_replace(spec, image_size=mcfg.image_size))
    model = ToyModel(mcfg, seed=args.seed)
    model, history = train(model, data, cfg["train"]["epochs"],
                           cfg["train"]["lr"], cfg["train"]["batch"],
                           args.seed)
    write_history(out / "history.csv", history)
    save_checkpoint(model, out / "checkpoint")
    for i in range(min(2, len(data["test_images"]))):
        img = data["test_images"][i, 0]
        lo, hi = img.min(), img.max()
        write_pgm(out / f"sample_image_{i}.pgm",
                  (img - lo) / (hi - lo) if hi > lo else img * 0)
        write_pgm(out / f"sample_lung_{i}.pgm", data["test_lung"][i, 0])
        write_pgm(out / f"sample_heart_{i}.pgm", data["test_heart"][i, 0])
    print(f"train: best val AUC "
          f"{max(h[2] for h in history):.3f}, artifacts in {out}")
    return 0


def cmd_ablate(args, cfg) -> int:
    out = _out_dir(args)
    echo_config(cfg, out)
    seeds = parse_int_list(args.seeds)
    table = ablation_sweep(args.axis, model_config(cfg),
                           synthetic_spec(cfg), seeds,
                           train_kwargs=cfg["train"])
    path = out / f"ablation_{args.axis}.csv"
    table.write_csv(path)
    print(f"ablate: wrote {path}")
    return 0


def cmd_robustness(args, cfg) -> int:
    out = _out_dir(args)
    echo_config(cfg, out)
    seeds = parse_int_list(args.seeds)
    windows = parse_int_list(args.windows if args.windows is not None
                             else cfg["robustness"]["windows"])
    table = robustness_experiment(synthetic_spec(cfg), seeds, windows,
                                  trials=cfg["robustness"]["trials"],
                                  base_config=model_config(cfg),
                                  train_kwargs=cfg["train"])
    path = out / "robustness.csv"
    table.write_csv(path)
    print(f"robustness: wrote {path}")
    return 0


def cmd_seg_toy(args, cfg) -> int:
    out = _out_dir(args)
    echo_config(cfg, out)
    s = cfg["seg"]
    batches = gen_seg_batches(size=s["size"], n_annotated=s["n_annotated"],
                              n_unannotated=s["n_unannotated"],
                              seed=s["data_seed"] + args.seed)
    nets = CycleNets.init(width=s["width"], seed=args.seed)
    _, curves = train_cyclegan_toy(batches, nets, s["steps"], s["lr"])
    path = out / "seg_curves.csv"
    write_curves(path, curves)
    print(f"seg-toy: wrote {path}; final L_gen_M={curves[-1][1]:.4f}")
    return 0


def cmd_gradcam(args, cfg) -> int:
    out = _out_dir(args)
    echo_config(cfg, out)
    model = load_checkpoint(args.checkpoint)
    spec = synthetic_spec(cfg)
    data = gen_synthetic(dc_replace(spec,
                                    image_size=model.config.image_size))
    n = min(args.num_images, len(data["test_images"]))
    for i in range(n):
        image = Tensor(data["test_images"][i:i + 1])
        masks = None
        if model.config.uses_masks:
            masks = AnatomyMasks(Tensor(data["test_lung"][i:i + 1]),
                                 Tensor(data["test_heart"][i:i + 1]))
        heat = gradcam(model, image, masks, args.class_index,
                       stage=args.stage)
        write_pgm(out / f"gradcam_class{args.class_index}_img{i}.pgm",
                  heat.data[0, 0])
    print(f"gradcam: wrote {n} heatmap(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anatomy-attn",
        description="Anatomy-gated attention models with probabilistic "
                    "pooling: gradient verification, toy training, "
                    "ablations, and mask-corruption robustness sweeps.")
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="SECTION.KEY=VALUE",
                        help="config override (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)  # test hook
    p.add_argument("--skip-models", action="store_true",
                   help="check only ops and losses, not end-to-end models")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one model on synthetic data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--axis", required=True,
                   choices=("attention_level", "pooling", "mask_size",
                            "image_size"))
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="cutout robustness sweep")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--windows", default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("seg-toy", help="alternating cycle-consistency "
                                       "training on toy data")
    p.set_defaults(func=cmd_seg_toy)

    p = sub.add_parser("gradcam", help="write class activation heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-index", type=int, default=0)
    p.add_argument("--stage", default="last")
    p.add_argument("--num-images", type=int, default=4)
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
