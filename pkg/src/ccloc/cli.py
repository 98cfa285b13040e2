"""Command line: ``ccloc {scene,dataset,train,eval,repro}``.

Exit codes: 0 success, 1 malformed configuration, 2 integrity failure
(dataset/checkpoint hash mismatch).
"""
import argparse
import logging
import os
import sys
import time

from . import pipeline
from .config import ConfigError, bundled, load_config

log = logging.getLogger("ccloc")

EXIT_CONFIG = 1
EXIT_INTEGRITY = 2


def _config(args):
    path = args.config or bundled("desk")
    return load_config(path, args.set)


def cmd_scene(args, cfg):
    out = pipeline.run_scene(cfg, args.out, args.bs_mode)
    log.info("wrote %s", out)
    return {"scene": out}


def cmd_dataset(args, cfg):
    out = pipeline.run_dataset(cfg, args.scene, args.out, jobs=args.jobs)
    log.info("wrote dataset to %s", out)
    return {"dataset": out}


def cmd_train(args, cfg):
    ckpt = pipeline.run_train(cfg, args.dataset, args.mode, args.seed, args.out)
    log.info("wrote %s", ckpt)
    return {"checkpoint": ckpt, "mode": args.mode, "seed": args.seed}


def cmd_eval(args, cfg):
    rep = pipeline.run_eval(cfg, args.checkpoint, args.dataset, args.out)
    k = str(pipeline.SUMMARY_K)
    log.info("CT(%s)=%.4f TW(%s)=%.4f median error %.2f m", k, rep["ct"].get(k, float("nan")), k,
             rep["tw"].get(k, float("nan")), rep["error_cdf"]["median"])
    return {"report": os.path.join(args.out, "report.json")}


def cmd_repro(args, cfg):
    table = pipeline.run_repro(cfg, args.out, jobs=args.jobs, log=log.info)
    for line in pipeline.write_comparison(table, args.out, pipeline.config_hash(cfg)):
        print(line)
    return {"rows": len(table)}


def build_parser():
    p = argparse.ArgumentParser(prog="ccloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (default: bundled desk config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. train.epochs=5")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads")

    sp = sub.add_parser("scene", help="build a scene description")
    common(sp)
    sp.add_argument("--bs-mode", choices=["los_dominant", "nlos_dominant"])
    sp.set_defaults(func=cmd_scene)

    sp = sub.add_parser("dataset", help="simulate, split and scale a dataset")
    common(sp)
    sp.add_argument("--scene", required=True, help="scene.json from the scene command")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--mode", choices=["semi", "unsup", "sup"], default="semi")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("repro", help="full experiment: both scenes, all modes, all seeds")
    common(sp)
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error at {exc.path or '<root>'}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("--jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        extra = args.func(args, cfg)
    except pipeline.IntegrityError as exc:
        print(f"integrity check failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    os.makedirs(args.out, exist_ok=True)
    pipeline.write_summary(args.out, cfg, args.command, started, extra)
    return 0


if __name__ == "__main__":
    sys.exit(main())
