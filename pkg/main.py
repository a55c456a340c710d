#!/usr/bin/env python3
import argparse
import os
import sys

import numpy as np
import torch
from PIL import Image

from config import MAX_WORKERS, load_run_config
from console import log
from errors import DeconverError, GradcheckError

PRECISIONS = {"single": torch.float32, "double": torch.float64}
IO_EXIT_CODE = 3


# --- SUBCOMMANDS ---

def cmd_solve(args):
    from ndc_solver import NdcProblem, solve
    from tensor import FilterTensor, read_dct1, write_dct1

    x = read_dct1(args.x)
    v = FilterTensor(read_dct1(args.filter).to(x.dtype))
    if args.init:
        s0 = read_dct1(args.init).to(x.dtype)
    else:
        s0 = torch.ones((v.in_channels, *x.shape[1:]), dtype=x.dtype)
        log("INFO", f"No --init given, starting from all-ones S0 of shape {tuple(s0.shape)}")
    problem = NdcProblem(x, v, s0)

    trace = solve(problem, args.iters, epsilon=args.epsilon)
    if args.out:
        write_dct1(args.out, trace.final)
    if args.trace:
        trace.to_csv(args.trace)
    print(f"initial_error: {trace.errors[0]!r}")
    print(f"final_error: {trace.errors[-1]!r}")
    print(f"iterations: {trace.iterations}")
    print(f"monotone: {str(trace.is_monotone()).lower()}")
    return 0


def cmd_gradcheck(args):
    from grad import SUITES, format_reports, run_suite

    scopes = sorted(SUITES) if args.scope == "all" else [args.scope]
    reports = []
    for scope in scopes:
        reports.extend(run_suite(scope, tolerance=args.tolerance, seed=args.seed,
                                 max_coordinates=args.coords, quiet=args.quiet))
    print(format_reports(reports))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise GradcheckError(f"{len(failed)} of {len(reports)} gradient checks failed: {', '.join(failed)}")
    return 0


def cmd_train(args):
    from deconver_net import build_network
    from train_eval import evaluate_network, synth_dataset, train

    cfg = load_run_config(args.config)
    net_cfg, train_cfg = cfg.network_config(), cfg.train_config()
    out_dir = args.out_dir or cfg.io.out_dir
    os.makedirs(out_dir, exist_ok=True)
    log("INFO", f"Training {net_cfg.depth}-stage rank-{net_cfg.spatial_rank} Deconver, writing to {out_dir}")

    dataset = synth_dataset(cfg.data.samples, cfg.data.spatial, cfg.data.seed,
                            max_workers=args.workers, quiet=args.quiet)
    network = build_network(net_cfg, seed=args.seed, dtype=torch.get_default_dtype())
    result = train(network, dataset, train_cfg, out_dir=out_dir, quiet=args.quiet)

    report = evaluate_network(network, dataset, train_cfg.patch, cfg.data.spacing, quiet=args.quiet)
    report.to_csv(os.path.join(out_dir, "metrics.csv"))
    print(f"steps: {train_cfg.steps}")
    print(f"best_loss: {result.best_loss!r}")
    print(f"final_dice_loss: {result.final_dice_loss!r}")
    print(f"train_dsc: {report.mean_dsc!r}")
    return 0


def _write_png(path, probs):
    levels = np.rint(probs.detach().cpu().double().numpy() * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(levels).save(path)


def cmd_predict(args):
    from checkpoint import load_checkpoint
    from tensor import read_dct1, write_dct1
    from train_eval import binarize, sliding_window_predict

    network, _ = load_checkpoint(args.checkpoint, dtype=torch.get_default_dtype())
    image = read_dct1(args.image)
    probs = sliding_window_predict(network, image, tuple(args.patch) if args.patch else network.cfg.patch)
    mask = binarize(probs)
    write_dct1(f"{args.out}_prob.dct1", probs)
    write_dct1(f"{args.out}_mask.dct1", mask)
    if network.cfg.spatial_rank == 2:
        for c in range(probs.shape[0]):
            suffix = "" if probs.shape[0] == 1 else f"_c{c}"
            _write_png(f"{args.out}_prob{suffix}.png", probs[c])
    print(f"foreground_fraction: {float(mask.mean())!r}")
    return 0


def cmd_eval(args):
    from tensor import read_dct1
    from train_eval import evaluate

    pred, gt = read_dct1(args.pred), read_dct1(args.gt)
    report = evaluate([pred], [gt], spacing=args.spacing, max_workers=args.workers, quiet=args.quiet)
    if args.out:
        report.to_csv(args.out)
    hd = report.mean_hd95
    print(f"dsc: {report.mean_dsc!r}")
    print(f"hd95: {'NA' if hd is None else repr(hd)}")
    return 0


def cmd_params(args):
    from deconver_net import count_params, estimate_flops_per_voxel

    net_cfg = load_run_config(args.config).network_config()
    params = count_params(net_cfg)
    flops = estimate_flops_per_voxel(net_cfg)
    print(f"params: {params}")
    print(f"params_m: {params / 1e6:.2f}M")
    print(f"flops_per_voxel: {flops!r}")
    print(f"flops_per_voxel_k: {flops / 1e3:.1f}K")
    return 0


# --- ARGUMENT PARSING ---

def build_parser():
    parser = argparse.ArgumentParser(description="Deconver: nonnegative deconvolution solver and segmentation network")
    parser.add_argument("--seed", type=int, default=0, help="Seed for torch (network init, gradcheck coordinates)")
    parser.add_argument("--precision", choices=sorted(PRECISIONS), default="double",
                        help="Default floating precision")
    parser.add_argument("--threads", type=int, help="Torch intra-op threads; also bounds worker pools")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="Run the multiplicative NDC solver on DCT1 inputs")
    p.add_argument("--x", required=True, help="Observation X, DCT1 (C, *spatial)")
    p.add_argument("--filter", required=True, help="Filter V, DCT1 (C, E, *kernel)")
    p.add_argument("--init", help="Initial source S0, DCT1 (E, *spatial); default all ones")
    p.add_argument("--iters", type=int, default=50, help="Number of multiplicative steps")
    p.add_argument("--epsilon", type=float, default=0.0, help="Stabilizer added to numerator and denominator")
    p.add_argument("--out", help="Write the final source here (DCT1)")
    p.add_argument("--trace", help="Write the iter,error trace here (CSV)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gradcheck", help="Finite-difference check of the backward rules")
    p.add_argument("--scope", choices=["primitives", "mixer", "block", "network", "all"], default="primitives")
    p.add_argument("--tolerance", type=float, help="Max relative error (default 1e-6 primitives, 1e-5 modules)")
    p.add_argument("--coords", type=int, default=50, help="Coordinates checked per input tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="Train on synthetic data from a TOML config or preset")
    p.add_argument("--config", required=True, help="TOML run config or preset name")
    p.add_argument("--out-dir", help="Override io.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Sliding-window inference with a DCVW checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="DCT1 image (C_in, *spatial)")
    p.add_argument("--out", required=True, help="Output prefix for _prob/_mask files")
    p.add_argument("--patch", type=int, nargs="+", help="Window extents (default: the checkpoint's patch)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="DSC and HD95 of a binary prediction against ground truth")
    p.add_argument("--pred", required=True, help="DCT1 binary mask (C, *spatial)")
    p.add_argument("--gt", required=True, help="DCT1 binary mask (C, *spatial)")
    p.add_argument("--spacing", type=float, nargs="+", help="Voxel spacing per spatial axis")
    p.add_argument("--out", help="Write sample,class,dsc,hd95 here (CSV)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="Parameter count and FLOPs per voxel of a config or preset")
    p.add_argument("--config", required=True, help="TOML run config or preset name")
    p.set_defaults(func=cmd_params)
    return parser


# --- MAIN ---

def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "solve" and args.iters < 1:
        parser.error(f"--iters must be >= 1, got {args.iters}")
    if args.command == "solve" and args.epsilon < 0:
        parser.error(f"--epsilon must be >= 0, got {args.epsilon}")
    if args.threads is not None and args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")

    previous_dtype = torch.get_default_dtype()
    torch.set_default_dtype(PRECISIONS[args.precision])
    torch.manual_seed(args.seed)
    np.random.seed(args.seed)
    args.workers = MAX_WORKERS
    if args.threads is not None:
        torch.set_num_threads(args.threads)
        args.workers = args.threads

    try:
        return args.func(args)
    except DeconverError as e:
        log("ERROR", str(e))
        return e.exit_code
    except OSError as e:
        log("ERROR", str(e))
        return IO_EXIT_CODE
    finally:
        torch.set_default_dtype(previous_dtype)


if __name__ == "__main__":
    sys.exit(main())
