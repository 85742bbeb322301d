"""Command-line surface: gradcheck, paramcount, train, eval, ablate, bench.

Exit codes: 0 success, 1 usage error, 2 numeric failure.
"""

import argparse
import os
import sys
import tempfile
import time

import numpy as np

from .checks import run_micro_net_check, run_standard_suite
from .config import (blob_spec_from_config, config_to_text, load_config,
                     netspec_from_config, trainconfig_from_config)
from .checkpoint import load_checkpoint, load_network, save_checkpoint
from .data import gen_blobs, load_idx_dataset
from .errors import ConfigError, NumericError, ShapeError
from .networks import (DEFAULT_K_4STAGE, build_resnet, param_count, parse_norm,
                       resnet_spec, toy_spec)
from .normalize import BatchNorm2d, GroupNorm2d
from .attention import SqueezeExcite
from .attentive import AttentiveNorm2d
from .ops import Conv2d
from .training import evaluate, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser():
    parser = _Parser(prog="attnorm", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--max-coords", type=int, default=None,
                   help="subsample each array to this many coordinates")

    p = sub.add_parser("paramcount", help="parameter counts by architecture")
    p.add_argument("--arch", required=True,
                   choices=["resnet34", "resnet50", "resnet101"])
    p.add_argument("--norm", required=True,
                   choices=["bn", "gn", "se-bn2", "se-bn3", "se-all",
                            "an-bn2", "an-bn3", "an-all"])
    p.add_argument("--k", default=None,
                   help="per-stage mixture sizes, e.g. 10,10,20,20")
    p.add_argument("--r", type=int, default=16, help="SE reduction rate")

    p = sub.add_parser("train", help="train per a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="'blobs' (regenerate from the config echo) or a "
                        "directory holding images.idx and labels.idx")

    p = sub.add_parser("ablate", help="sweep attention design choices")
    p.add_argument("--config", required=True)

    p = sub.add_parser("bench", help="time forward/backward per layer")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=5)
    return parser


def _atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_gradcheck(args):
    failures = []
    worst_overall = ("", 0.0)

    def report(name, res, tol):
        nonlocal worst_overall
        status = "ok" if res.max_rel_error <= tol else "FAIL"
        print(f"{name:40s} max_rel_err {res.max_rel_error:10.3e} "
              f"(tol {tol:.0e})  {status}")
        if res.max_rel_error > worst_overall[1]:
            worst_overall = (name, res.max_rel_error)
        if res.max_rel_error > tol:
            failures.append((name, res))

    run_standard_suite(max_coords=args.max_coords, report=report)
    micro = run_micro_net_check()
    status = "ok" if micro.max_rel_error <= 1e-3 else "FAIL"
    print(f"{'micro_net end-to-end':40s} max_rel_err "
          f"{micro.max_rel_error:10.3e} (tol 1e-03)  {status}")
    if micro.max_rel_error > 1e-3:
        failures.append(("micro_net end-to-end", micro))
    if micro.max_rel_error > worst_overall[1]:
        worst_overall = ("micro_net end-to-end", micro.max_rel_error)

    print(f"worst: {worst_overall[0]} at {worst_overall[1]:.3e}")
    if failures:
        for name, res in failures:
            print(f"offender {name}:")
            for label, ana, num, rel in res.worst:
                print(f"  {label}: analytic {ana:.6e} vs numeric {num:.6e} "
                      f"(rel {rel:.3e})")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_paramcount(args):
    k = None
    if args.k:
        k = tuple(int(t) for t in args.k.split(","))
    norm = parse_norm(args.norm, r=args.r)
    spec = resnet_spec(args.arch, norm=norm,
                       k_per_stage=k or DEFAULT_K_4STAGE)
    net = build_resnet(spec, seed=0)
    exact = param_count(net)
    print(f"{args.arch} {args.norm}: {exact} ({exact / 1e6:.2f}M)")
    return EXIT_OK


def _dataset_from_config(cfg):
    if cfg["data.kind"] == "idx":
        x, y = load_idx_dataset(cfg["data.images"], cfg["data.labels"],
                                channels=cfg["data.channels"])
        n_val = max(1, x.shape[0] // 5)
        return x[:-n_val], y[:-n_val], x[-n_val:], y[-n_val:]
    return gen_blobs(blob_spec_from_config(cfg))


def _run_training(cfg, out_dir, quiet=False):
    train_x, train_y, val_x, val_y = _dataset_from_config(cfg)
    spec = netspec_from_config(cfg)
    net = build_resnet(spec, seed=cfg["train.seed"])
    if cfg["train.init_checkpoint"]:
        load_checkpoint(cfg["train.init_checkpoint"], net)
    elif cfg["train.finetune"]:
        raise ConfigError("train.finetune=true requires train.init_checkpoint "
                          "(the frozen statistics must come from a trained net)")
    tcfg = trainconfig_from_config(cfg)
    lines = ["epoch,lr,train_loss,train_top1,val_loss,val_top1"]

    def on_epoch(row):
        lines.append(
            f"{row['epoch']},{row['lr']:.8f},{row['train_loss']:.6f},"
            f"{row['train_top1']:.6f},{row['val_loss']:.6f},"
            f"{row['val_top1']:.6f}")
        if not quiet:
            print(f"epoch {row['epoch']:3d}  lr {row['lr']:.4f}  "
                  f"train {row['train_loss']:.4f}/{row['train_top1']:.3f}  "
                  f"val {row['val_loss']:.4f}/{row['val_top1']:.3f}")

    history = train_loop(tcfg, net, train_x, train_y, val_x, val_y,
                         on_epoch=on_epoch)
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write_text(os.path.join(out_dir, "metrics.csv"),
                       "\n".join(lines) + "\n")
    rng_state = np.random.default_rng(tcfg.seed).bit_generator.state
    save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), net,
                    config_text=config_to_text(cfg), rng_state=rng_state)
    return history, net


def cmd_train(args):
    cfg = load_config(args.config)
    history, _ = _run_training(cfg, args.out)
    final = history[-1]
    print(f"final val top-1: {final['val_top1']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    net, cfg = load_network(args.checkpoint)
    if args.data == "blobs":
        _, _, val_x, val_y = gen_blobs(blob_spec_from_config(cfg))
    else:
        images = os.path.join(args.data, "images.idx")
        labels = os.path.join(args.data, "labels.idx")
        val_x, val_y = load_idx_dataset(images, labels,
                                        channels=cfg["data.channels"])
    loss, top1 = evaluate(net, val_x, val_y)
    print(f"top-1: {top1:.4f} (loss {loss:.4f})")
    return EXIT_OK


# One-factor-at-a-time rows around the default design: every summarizer,
# both subnet choices, all four activations, three mixture-size presets,
# plus the everywhere-placement variant.
_ABLATE_ROWS = [
    ("mean", {"an.summarizer": "mean"}),
    ("meanstd", {"an.summarizer": "meanstd"}),
    ("choice1", {"an.choice": 1}),
    ("softmax", {"an.activation": "softmax"}),
    ("relu", {"an.activation": "relu"}),
    ("sigmoid", {"an.activation": "sigmoid"}),
    ("k-half", {"an.k": "HALF"}),
    ("k-double", {"an.k": "DOUBLE"}),
    ("base", {}),
    ("all-norms", {"net.norm": "an-all"}),
]


def cmd_ablate(args):
    cfg = load_config(args.config)
    if cfg["net.norm"].split("-")[0] != "an":
        cfg = dict(cfg, **{"net.norm": "an-bn2"})
    base_k = cfg["an.k"] or (10, 20, 20)
    results = []
    for label, overrides in _ABLATE_ROWS:
        row_cfg = dict(cfg)
        for key, value in overrides.items():
            if value == "HALF":
                value = tuple(max(1, k // 2) for k in base_k)
            elif value == "DOUBLE":
                value = tuple(2 * k for k in base_k)
            row_cfg[key] = value
        with tempfile.TemporaryDirectory() as tmp:
            history, _ = _run_training(row_cfg, tmp, quiet=True)
        top1 = history[-1]["val_top1"]
        results.append((label, row_cfg, top1))
        print(f"done {label:10s} val top-1 {top1:.4f}")
    results.sort(key=lambda r: r[2], reverse=True)
    print()
    print(f"{'rank':4s} {'variant':10s} {'summarizer':10s} {'choice':6s} "
          f"{'act':8s} {'k':12s} {'norm':8s} {'val_top1':8s}")
    for rank, (label, row_cfg, top1) in enumerate(results, start=1):
        kstr = ",".join(str(v) for v in (row_cfg["an.k"] or base_k))
        print(f"{rank:<4d} {label:10s} {row_cfg['an.summarizer']:10s} "
              f"{row_cfg['an.choice']:<6d} {row_cfg['an.activation']:8s} "
              f"{kstr:12s} {row_cfg['net.norm']:8s} {top1:.4f}")
    return EXIT_OK


def cmd_bench(args):
    rng = np.random.default_rng(0)
    n = args.batch
    cases = [
        ("conv 3x3 16ch 32x32", Conv2d(16, 16, 3, 1, 1, rng=rng), (n, 16, 32, 32)),
        ("conv 3x3 64ch 8x8", Conv2d(64, 64, 3, 1, 1, rng=rng), (n, 64, 8, 8)),
        ("batch_norm 64ch", BatchNorm2d(64), (n, 64, 8, 8)),
        ("group_norm 64ch", GroupNorm2d(64), (n, 64, 8, 8)),
        ("squeeze_excite 64ch", SqueezeExcite(64, r=16, rng=rng), (n, 64, 8, 8)),
        ("attentive_norm 64ch K=20", AttentiveNorm2d(64, 20, rng=rng), (n, 64, 8, 8)),
    ]
    print(f"{'layer':28s} {'forward ms':>12s} {'backward ms':>12s}")
    for name, layer, shape in cases:
        x = rng.standard_normal(shape).astype(np.float32)
        out = layer.forward(x, "train")
        g = np.ones_like(out)
        layer.backward(g)
        t0 = time.perf_counter()
        for _ in range(args.reps):
            out = layer.forward(x, "train")
        t1 = time.perf_counter()
        for _ in range(args.reps):
            layer.backward(g)
        t2 = time.perf_counter()
        print(f"{name:28s} {1e3 * (t1 - t0) / args.reps:12.3f} "
              f"{1e3 * (t2 - t1) / args.reps:12.3f}")
    return EXIT_OK


_COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "paramcount": cmd_paramcount,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help paths
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main():
    sys.exit(main())
