"""Command-line surface: data generation, ordering export, invariance suite,
desk-scale training and the preprocessing scaling benchmark.

All report subcommands write machine-readable CSV/JSON; ``--plot`` renders a
PNG figure next to each delimited output. Exit codes: 0 success, 2 usage
error, 1 runtime error (stderr carries the error taxonomy name).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import figures
from .errors import SpectraverseError
from .geometry import (
    SHAPE_KINDS,
    RigidTransform,
    apply_rigid,
    gen_shape,
    load_xyz,
    patchify,
    save_xyz,
)
from .pipeline import (
    TrainConfig,
    load_checkpoint,
    preprocess,
    pretrain_mae,
    save_checkpoint,
    train_classifier,
    write_metrics,
)
from .spectral import (
    GraphParams,
    build_graph,
    canonicalize,
    eigensolve,
    eigensolve_with_gap,
    random_walk_laplacian,
)
from .traversal import (
    axis_order,
    hlt_codes,
    hlt_orders,
    order_agreement,
    sast_orders,
)

ORDER_MODES = ("sast", "hlt", "axis")


def _add_graph_flags(p: argparse.ArgumentParser, n_centers_default=128, n_neighbors_default=32):
    p.add_argument("--s", type=int, default=4, help="number of non-constant eigenvectors")
    p.add_argument("--k", type=int, default=20, help="graph nearest neighbors")
    p.add_argument("--n-centers", type=int, default=n_centers_default)
    p.add_argument("--n-neighbors", type=int, default=n_neighbors_default)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--mask-ratio", type=float, default=0.6)
    p.add_argument("--ordering", choices=("sast", "hlt", "axis", "random"), default="sast")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-blocks", type=int, default=2)
    p.add_argument("--state-size", type=int, default=8)
    p.add_argument("--pos-mode", choices=("spectral", "xyz"), default="spectral")
    p.add_argument("--restore-mode", choices=("tar", "append"), default="tar")
    p.add_argument("--freeze-encoder", action="store_true",
                   help="linear evaluation: fit only the classifier head")
    _add_graph_flags(p, n_centers_default=64, n_neighbors_default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectraverse",
        description="Spectral serialization of point clouds: orderings, "
        "invariance reports, desk-scale training, scaling benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic shape datasets")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--kind", default="sphere",
                   help=f"shape kind or comma list, from: {', '.join(SHAPE_KINDS)}")
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("order", help="export traversal orders for one cloud")
    p.add_argument("input", type=Path)
    p.add_argument("--mode", choices=ORDER_MODES, default="sast")
    p.add_argument("--axis", choices=("x", "y", "z"), default="x")
    p.add_argument("--hlt-seed", type=int, default=None,
                   help="use seeded random within-segment order instead of v1 values")
    p.add_argument("--out", type=Path, required=True)
    _add_graph_flags(p)
    p.set_defaults(func=cmd_order)

    p = sub.add_parser("invariance", help="rigid-transform ordering stability report")
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--transforms", type=int, default=20)
    p.add_argument("--mode", default="sast",
                   help="comma list of modes to report: sast, hlt, axis")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    _add_graph_flags(p)
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("data_dir", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the shape classifier")
    p.add_argument("data_dir", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--init", type=Path, default=None, help="checkpoint to start from")
    p.add_argument("--plot", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="preprocessing scaling benchmark")
    p.add_argument("--tokens", default="128,256,512,1024,2048,4096",
                   help="ascending comma list of token counts")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s", type=int, default=4)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_bench)

    return parser


# -- subcommands -----------------------------------------------------------


def cmd_gen(args) -> int:
    kinds = [k.strip() for k in args.kind.split(",") if k.strip()]
    bad = [k for k in kinds if k not in SHAPE_KINDS]
    if bad or not kinds:
        print(
            f"error: unknown shape kind {', '.join(bad) or '(none)'}; "
            f"valid kinds: {', '.join(SHAPE_KINDS)}",
            file=sys.stderr,
        )
        return 2
    args.out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        kind = kinds[i % len(kinds)]
        cloud = gen_shape(kind, args.n_points, seed=args.seed + i, noise=args.noise)
        name = f"shape_{i}.xyz"
        save_xyz(cloud, args.out_dir / name)
        entries.append({"file": name, "kind": kind, "label": kinds.index(kind)})
    manifest = {
        "seed": args.seed,
        "n_points": args.n_points,
        "noise": args.noise,
        "kinds": kinds,
        "entries": entries,
    }
    (args.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {args.count} clouds + manifest.json to {args.out_dir}")
    return 0


def _cloud_orders(cloud, mode, args, hlt_seed=None):
    """(orders, codes, min_eigengap) for one cloud under one ordering mode."""
    patches = patchify(cloud, args.n_centers, args.n_neighbors)
    centers = patches.centers()
    if mode == "axis":
        return [axis_order(centers, getattr(args, "axis", "x"))], None, float("nan")
    lap = random_walk_laplacian(build_graph(centers, GraphParams(k_neighbors=args.k)))
    raw, gap = eigensolve_with_gap(lap, args.s)
    emb = canonicalize(raw)
    if mode == "sast":
        return sast_orders(emb, args.s), None, gap
    codes = hlt_codes(emb, args.s)
    if hlt_seed is None:
        pair = hlt_orders(codes, embedding=emb)
    else:
        pair = hlt_orders(codes, seed=hlt_seed)
    return list(pair), codes, gap


def cmd_order(args) -> int:
    cloud = load_xyz(args.input)
    orders, codes, gap = _cloud_orders(cloud, args.mode, args, hlt_seed=args.hlt_seed)
    blob = {"mode": args.mode, "n_tokens": len(orders[0]), "orders": []}
    if args.mode != "axis":
        blob["s"] = args.s
        blob["k"] = args.k
        blob["min_eigengap"] = gap
    for o in orders:
        entry = o.to_dict()
        if codes is not None:
            entry["codes"] = codes.codes.tolist()
        blob["orders"].append(entry)
    args.out.write_text(json.dumps(blob))
    print(f"wrote {len(orders)} orders ({args.mode}) to {args.out}")
    return 0


def cmd_invariance(args) -> int:
    modes = [m.strip() for m in args.mode.split(",") if m.strip()]
    for m in modes:
        if m not in ORDER_MODES:
            print(f"error: unknown mode {m!r}; valid: {', '.join(ORDER_MODES)}",
                  file=sys.stderr)
            return 2
    rows = []
    for path in args.inputs:
        cloud = load_xyz(path)
        base = {m: _cloud_orders(cloud, m, args) for m in modes}
        stats = {m: {"exact": 0, "agree": [], "gap": base[m][2]} for m in modes}
        for t in range(args.transforms):
            moved = apply_rigid(cloud, RigidTransform.random(args.seed * 100_003 + t))
            for m in modes:
                orders, _, gap = _cloud_orders(moved, m, args)
                ref = base[m][0]
                exact = all(
                    np.array_equal(a.permutation, b.permutation)
                    for a, b in zip(ref, orders)
                )
                stats[m]["exact"] += int(exact)
                stats[m]["agree"].append(
                    float(np.mean([order_agreement(a, b) for a, b in zip(ref, orders)]))
                )
                if not np.isnan(gap):
                    stats[m]["gap"] = min(stats[m]["gap"], gap)
        for m in modes:
            if args.transforms > 0:
                rows.append(
                    {
                        "cloud": path.name,
                        "mode": m,
                        "exact_rate": stats[m]["exact"] / args.transforms,
                        "mean_agreement": float(np.mean(stats[m]["agree"])),
                        "min_eigengap": stats[m]["gap"],
                    }
                )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("cloud,mode,exact_rate,mean_agreement,min_eigengap\n")
        for r in rows:
            fh.write(
                f"{r['cloud']},{r['mode']},{r['exact_rate']},"
                f"{r['mean_agreement']},{r['min_eigengap']}\n"
            )
    if args.plot and rows:
        figures.plot_invariance(rows, args.out.with_suffix(".png"))
    print(f"wrote invariance report ({len(rows)} rows) to {args.out}")
    return 0


def _config_from_args(args, n_classes: int) -> TrainConfig:
    return TrainConfig(
        seed=args.seed,
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        s=args.s,
        k_neighbors=args.k,
        mask_ratio=args.mask_ratio,
        ordering=args.ordering,
        n_centers=args.n_centers,
        n_neighbors=args.n_neighbors,
        d_model=args.d_model,
        n_blocks=args.n_blocks,
        state_size=args.state_size,
        n_classes=n_classes,
        pos_mode=args.pos_mode,
        restore_mode=args.restore_mode,
        freeze_encoder=getattr(args, "freeze_encoder", False),
    )


def load_dataset(data_dir: Path, config: TrainConfig):
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for i, entry in enumerate(manifest["entries"]):
        cloud = load_xyz(data_dir / entry["file"])
        samples.append(
            preprocess(cloud, config, label=entry.get("label"), order_seed=config.seed + i)
        )
    return manifest, samples


def cmd_pretrain(args) -> int:
    config = _config_from_args(args, n_classes=3)
    manifest, samples = load_dataset(args.data_dir, config)
    result = pretrain_mae(samples, config)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = args.out_dir / "checkpoint.json"
    save_checkpoint(ckpt, result.model, extra={"phase": "pretrain", "seed": args.seed})
    write_metrics(args.out_dir / "metrics.csv", result.metrics)
    if args.plot:
        figures.plot_metrics(result.metrics, args.out_dir / "metrics.png")
    print(
        f"pretrained {config.epochs} epochs on {len(samples)} clouds; "
        f"final epoch loss {result.metrics[-1][2]:.6f}; checkpoint at {ckpt}"
    )
    return 0


def cmd_train(args) -> int:
    manifest_probe = json.loads((args.data_dir / "manifest.json").read_text()) \
        if (args.data_dir / "manifest.json").exists() else None
    if manifest_probe is None:
        raise FileNotFoundError(f"missing manifest: {args.data_dir / 'manifest.json'}")
    n_classes = max(3, len(manifest_probe.get("kinds", [])))
    config = _config_from_args(args, n_classes=n_classes)
    _, samples = load_dataset(args.data_dir, config)
    init_state = load_checkpoint(args.init) if args.init else None
    result = train_classifier(samples, config, init_state=init_state)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        args.out_dir / "checkpoint.json", result.model,
        extra={"phase": "train", "seed": args.seed},
    )
    write_metrics(args.out_dir / "metrics.csv", result.metrics)
    if args.plot:
        figures.plot_metrics(result.metrics, args.out_dir / "metrics.png")
    print(
        f"trained {config.epochs} epochs on {len(samples)} clouds; "
        f"train acc {result.train_accuracy:.3f}, test acc {result.test_accuracy:.3f}"
    )
    return 0


def _bench_flops_estimate(n: int, k: int, s: int, n_edges: int) -> int:
    """Deterministic operation-count model for the preprocessing pipeline."""
    knn = 24 * n * max(1, int(np.ceil(np.log2(n))))  # tree build + queries
    kernel = 10 * n_edges
    lanczos_iters = 40 * (s + 2)
    eigen = lanczos_iters * 4 * n_edges + 60 * n
    ordering = 2 * s * n * max(1, int(np.ceil(np.log2(n))))
    return int(knn + kernel + eigen + ordering)


def cmd_bench(args) -> int:
    token_counts = [int(t) for t in args.tokens.split(",") if t.strip()]
    if token_counts != sorted(token_counts):
        print("error: token counts must be ascending", file=sys.stderr)
        return 2
    rows = []
    for n in token_counts:
        cloud = gen_shape("torus", n, seed=args.seed, noise=0.02)
        times = []
        peak = 0
        n_edges = 0
        for _ in range(max(1, args.repeat)):
            tracemalloc.start()
            t0 = time.perf_counter()
            graph = build_graph(cloud.points, GraphParams(k_neighbors=args.k))
            lap = random_walk_laplacian(graph)
            emb = canonicalize(eigensolve(lap, args.s, method="lanczos"))
            sast_orders(emb, args.s)
            times.append((time.perf_counter() - t0) * 1000.0)
            _, snapshot_peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            peak = max(peak, snapshot_peak)
            n_edges = graph.n_edges
        rows.append(
            {
                "tokens": n,
                "time_ms": float(np.median(times)),
                "mem_bytes": int(peak),
                "flops": _bench_flops_estimate(n, args.k, args.s, n_edges),
            }
        )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("tokens,time_ms,mem_bytes,flops\n")
        for r in rows:
            fh.write(f"{r['tokens']},{r['time_ms']},{r['mem_bytes']},{r['flops']}\n")
    if args.plot and rows:
        figures.plot_bench(rows, args.out.with_suffix(".png"))
    print(f"wrote {len(rows)} bench rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpectraverseError as exc:
        print(f"{exc.taxonomy} error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
