"""``gtakit`` command line: gen-data, train, eval, check, inspect-reps.

Exit codes: 0 success, 1 usage or configuration error, 2 failed check,
3 I/O error. ``GTAKIT_THREADS`` caps BLAS worker threads.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("gtakit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 image from floats in [0, 1]."""
    a = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    H, W = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(a.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 image")
    W, H, _ = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(H, W, 3)


def _limit_threads():
    n = os.environ.get("GTAKIT_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"GTAKIT_THREADS must be an integer, got {n!r}") from None
    if k < 1:
        raise UsageError("GTAKIT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=k)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from . import scene

    if args.scenes < 0:
        raise UsageError("--scenes must be non-negative")
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    digest = scene.generate_dataset(out, args.seed, args.scenes, args.texture_seed)
    print(f"scenes={args.scenes} sha256={digest} path={out}")
    return EXIT_OK


def _resolve_config(args):
    from .config import load_config, parse_override

    overrides = [parse_override(s) for s in args.set or []]
    if args.variant:
        overrides.append(("model.variant", args.variant))
    if args.seed is not None:
        overrides.append(("run.seed", str(args.seed)))
    if args.train_data:
        overrides.append(("data.train", args.train_data))
    if args.test_data:
        overrides.append(("data.test", args.test_data))
    if args.steps is not None:
        overrides.append(("train.steps", str(args.steps)))
    if args.full_scale:
        overrides.insert(0, ("run.scale", "full"))
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from . import model, plotting

    cfg = _resolve_config(args)
    cfg.log_resolved(log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    for p in (cfg.train.train_data, cfg.train.test_data):
        if p and not Path(p).exists():
            raise FileNotFoundError(f"dataset not found: {p}")

    def progress(step, rows):
        last = {r["split"]: r for r in rows if r["step"] == step}
        log.info("step %d  %s", step, "  ".join(f"{s} psnr={r['psnr']:.3f}" for s, r in last.items()))

    res = model.train(cfg.train, cfg.model, metrics_path=out / "metrics.csv", progress=progress)
    model.save_checkpoint(out / "model.ckpt", res.checkpoint)
    plotting.training_curves(res.metrics, out / "training_curve.png",
                             title=f"{cfg.model.variant} d={cfg.model.token_dim}")
    final = res.final("test") or res.final("train")
    print(f"variant={cfg.model.variant} steps={cfg.train.steps} split={final['split']} "
          f"mse={final['mse']:.6g} psnr={final['psnr']:.4f} seconds={res.seconds:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import analysis, model, plotting, scene

    ckpt = model.load_checkpoint(args.ckpt)
    net = ckpt.build_model()
    data = scene.read_dataset(args.data)
    if args.limit is not None:
        data = data.subset(args.limit)
    m = model.evaluate(net, data)
    print(f"scenes={len(data)} mse={m['mse']:.9g} psnr={m['psnr']:.6f}")
    if args.render:
        rdir = Path(args.render)
        rdir.mkdir(parents=True, exist_ok=True)
        pred = net.predict(data.context_images, data.context_rotations, data.target_rotations)
        for i in range(len(data)):
            write_ppm(rdir / f"scene{i:05d}_pred.ppm", pred[i])
            write_ppm(rdir / f"scene{i:05d}_gt.ppm", data.target_images[i])
        print(f"rendered {2 * len(data)} images to {rdir}")
    if args.attention:
        adir = Path(args.attention)
        adir.mkdir(parents=True, exist_ok=True)
        n = min(len(data), 64)
        rec = net.record_attention(data.context_images[:n], data.context_rotations[:n],
                                   data.target_rotations[:n])
        n_views = data.context_images.shape[1]
        for (layer, head), M in analysis.view_to_view(rec, n_views, 1).items():
            stem = adir / f"view_to_view_layer{layer}_head{head}"
            with open(stem.with_suffix(".csv"), "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["query_view", "key_view", "weight"])
                for i in range(n_views):
                    for j in range(n_views):
                        wr.writerow([i, j, repr(float(M[i, j]))])
            plotting.view_heatmap(M, stem.with_suffix(".png"), f"layer {layer} head {head}")
        print(f"attention summaries written to {adir}")
    return EXIT_OK


def cmd_check(args) -> int:
    from . import checks

    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    results = checks.run_suites(names, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def _block_labels(spec) -> list:
    from . import reps

    labels = []
    if isinstance(spec, reps.KroneckerSpec):
        return [f"kron[{i // spec.right.total_dim}]" for i in range(spec.total_dim)]
    counters = {}
    for blk in spec.blocks:
        k = counters.get(blk.kind, 0)
        counters[blk.kind] = k + 1
        tag = blk.kind if blk.param is None else f"{blk.kind}({blk.param:g})"
        labels += [f"{tag}#{k}"] * blk.block_dim
    return labels


def cmd_inspect_reps(args) -> int:
    from . import groups, plotting, reps

    name = args.spec
    try:
        spec = reps.kronecker_spec(int(name.split("-", 1)[1])) if name.startswith("kron-") \
            else reps.preset_spec(name)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(args.seed)
    g = groups.ProductElement.identity() if args.identity else groups.sample_product(rng)
    if isinstance(spec, reps.KroneckerSpec):
        M = reps.build_rep_kronecker(spec, g).dense()
        bounds = list(range(0, spec.total_dim, spec.right.total_dim))
    else:
        M = reps.build_rep(spec, g).dense()
        bounds = spec.offsets
    labels = _block_labels(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "block"] + [f"c{j}" for j in range(M.shape[1])])
        for i in range(M.shape[0]):
            wr.writerow([i, labels[i]] + [repr(float(x)) for x in M[i]])
    png = out.with_suffix(".png")
    plotting.matrix_heatmap(M, png, title=name, boundaries=bounds[1:])
    print(f"spec={name} dim={M.shape[0]} csv={out} png={png}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gtakit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic rotation-only dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--texture-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one attention variant")
    t.add_argument("--config", help="sectioned key = value file")
    t.add_argument("--variant", choices=["ape", "rpe", "gta", "gta-euclid", "gta-kron", "vanilla"])
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--train-data")
    t.add_argument("--test-data")
    t.add_argument("--full-scale", action="store_true", help="d=510/512 widths")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--limit", type=int, help="use only the first N scenes")
    e.add_argument("--render", metavar="DIR", help="write predicted and true target PPMs")
    e.add_argument("--attention", metavar="DIR", help="write view-to-view attention CSV/PNG")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run property suites")
    c.add_argument("--suite", choices=["groups", "reps", "attn", "grads", "all"], default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("inspect-reps", help="dump a materialized representation matrix")
    r.add_argument("--spec", required=True,
                   help="msn-hard, msn-hard-no-so3, clevr-tr-no-so3, clevr-tr, mixed-24, "
                        "orthogonal-96, strategy-D, rotstack-D or kron-N")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--identity", action="store_true", help="use the identity element")
    r.set_defaults(func=cmd_inspect_reps)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .model import CheckpointError, TrainingDiverged
    from .reps import DimensionMismatchError
    from .scene import DatasetFormatError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError, CheckpointError, DimensionMismatchError) as exc:
        print(f"gtakit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"gtakit: training diverged: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetFormatError) as exc:
        print(f"gtakit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
