"""Command-line entry point (``timevq``).

Exit codes: 0 success, 1 runtime failure, 2 configuration or compatibility
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .autoencoder import ConfigurationError, TrainingError
from .checkpoint import CheckpointError
from .config import load_config
from .dataset import DatasetError
from .sampler import CheckpointMismatch

CONFIG_ERRORS = (ConfigurationError, CheckpointError, CheckpointMismatch, DatasetError,
                 FileNotFoundError)


def _global_flags(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d(None), help="root seed (overrides config)")
    parser.add_argument("--data-dir", default=d(None), help="directory of <Name>/<Name>_TRAIN.tsv files")
    parser.add_argument("--out-dir", default=d("runs"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timevq", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train-fcn", parents=[common], help="pretrain the evaluation FCN")

    s1 = sub.add_parser("train-stage1", parents=[common], help="train the VQ autoencoders")
    s1.add_argument("--resume", action="store_true", help="continue from out-dir/stage1.ckpt")
    s1.add_argument("--epochs", type=int, help="run only this many epochs of the schedule")
    s1.add_argument("--fcn", help="FCN checkpoint for the perceptual loss")

    s2 = sub.add_parser("train-stage2", parents=[common], help="train the token priors")
    s2.add_argument("--stage1", required=True)
    s2.add_argument("--resume", action="store_true")
    s2.add_argument("--epochs", type=int)

    g = sub.add_parser("generate", parents=[common], help="sample synthetic series")
    g.add_argument("--stage1", required=True)
    g.add_argument("--stage2", required=True)
    g.add_argument("-n", "--n-samples", type=int, default=16)
    g.add_argument("--class", dest="class_index", type=int)
    g.add_argument("--guidance", type=float, default=1.0, help="guidance scale")
    g.add_argument("--T", type=int, default=10, help="decoding iterations")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--greedy", action="store_true")
    g.add_argument("--denormalize", action="store_true")
    g.add_argument("--out", help="output file (default out-dir/generated.tsv)")
    g.add_argument("--npy", help="also dump the sample matrix as .npy")

    e = sub.add_parser("evaluate", parents=[common], help="FID / IS / CAS")
    e.add_argument("--stage1")
    e.add_argument("--stage2")
    e.add_argument("--fcn", help="FCN checkpoint (default out-dir/fcn.ckpt)")
    e.add_argument("--train-fcn", action="store_true", help="train the FCN if missing")
    e.add_argument("--metrics", default="fid,is,cas")
    e.add_argument("--replay", action="store_true", help="use the real-data replay generator")
    e.add_argument("--out", help="results table (default out-dir/results.csv)")
    e.add_argument("--append", action="store_true")

    pl = sub.add_parser("plot", parents=[common], help="PCA / t-SNE plots")
    pl.add_argument("--real", required=True)
    pl.add_argument("--gen", required=True)
    pl.add_argument("--fcn")

    a = sub.add_parser("ablate", parents=[common], help="run the ablation matrix")
    a.add_argument("--variants", default="timevq,naive_vqvae",
                   help=f"comma-separated subset of {','.join(pipeline.ABLATION_VARIANTS)}")
    a.add_argument("--metrics", default="fid,is")
    return p


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data_dir is not None:
        overrides["data_dir"] = args.data_dir
    return load_config(args.config, overrides)


def run(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "plot":
        from .plots import plot_embeddings

        xr, lr = pipeline.read_series(args.real)
        xg, lg = pipeline.read_series(args.gen)
        fr = fg = None
        if args.fcn:
            from .fcnmetrics import features

            fcn = pipeline.load_fcn(args.fcn)
            fr, fg = features(fcn, xr), features(fcn, xg)
        seed = 0 if args.seed is None else args.seed
        res = plot_embeddings(xr, xg, out, fr, fg, lr, lg, seed=seed)
        print("\n".join(str(out / f"{k}.png") for k in res))
        return 0
    if cmd == "generate":
        seed = 0 if args.seed is None else args.seed
        path = pipeline.run_generate(args.stage1, args.stage2, args.n_samples,
                                     args.out or out / "generated.tsv", args.class_index,
                                     args.guidance, seed, args.T, args.temperature,
                                     args.greedy, args.denormalize, args.npy)
        print(path)
        return 0
    cfg = _config(args)
    if cmd == "train-fcn":
        print(pipeline.run_train_fcn(cfg, out))
    elif cmd == "train-stage1":
        print(pipeline.run_train_stage1(cfg, out, resume=args.resume, epochs=args.epochs,
                                        fcn_path=args.fcn))
    elif cmd == "train-stage2":
        print(pipeline.run_train_stage2(cfg, out, args.stage1, resume=args.resume, epochs=args.epochs))
    elif cmd == "evaluate":
        rep = pipeline.run_evaluate(cfg, args.out or out / "results.csv", args.stage1, args.stage2,
                                    args.fcn or out / "fcn.ckpt", args.train_fcn,
                                    args.metrics.split(","), args.replay, append=args.append)
        print(rep)
    elif cmd == "ablate":
        for rep in pipeline.run_ablate(cfg, out, args.variants.split(","),
                                       metrics=args.metrics.split(",")):
            print(rep)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
