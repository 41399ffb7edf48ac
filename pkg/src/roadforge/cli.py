"""Command-line entry point.

Subcommands: dataset build, train, eval, generate, metric, stitch,
gradcheck, noise-bench. Every command echoes its configuration and seed to
a JSON-lines run log under the output directory; outputs are byte-identical
across reruns with the same config and seed. Exit codes: 0 success,
1 validation failure, 2 I/O error, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .dataset import (
    PipelineConfig,
    build_dataset,
    dataset_frontier,
    generate_synthetic_map,
    load_split,
    read_segment_csv,
)
from .evaluate import evaluate, render_comparison_svg, write_summary
from .graph import read_rgf, write_rgf
from .model import GGT, GGTConfig, MODEL_KINDS, build_model, load_model_weights, save_model
from .ordering import CanonicalSequence
from .raster import inject_noise, read_pgm
from .stitch import stitch
from .streetmover import sample_point_cloud, sinkhorn, streetmover
from .training import TrainConfig, sequence_loss, train

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _seed_default(value):
    if value is not None:
        return value
    env = os.environ.get("ROADFORGE_SEED")
    return int(env) if env else 0


class RunLog:
    def __init__(self, out_dir: Path, command: str, config: dict, seed: int):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / f"run_{command.replace(' ', '_')}.jsonl"
        self.t0 = time.time()
        self.outputs: list[str] = []
        self._write(
            {
                "event": "start",
                "command": command,
                "argv": sys.argv[1:],
                "config": config,
                "seed": seed,
                "version": __version__,
            }
        )

    def _write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self) -> None:
        self._write(
            {
                "event": "end",
                "wall_time_s": round(time.time() - self.t0, 3),
                "outputs": self.outputs,
            }
        )


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------------------
# dataset build


def _cmd_dataset_build(args, base: Path) -> int:
    cfg = PipelineConfig()
    if args.config:
        cfg = PipelineConfig.from_kv(_resolve(base, args.config).read_text(encoding="utf-8"))
    # precedence: explicit flag, then config file, then ROADFORGE_SEED
    if args.seed is not None:
        cfg.seed = args.seed
    elif args.config is None:
        cfg.seed = _seed_default(None)
    if args.size is not None:
        cfg.synth_size = args.size
    if args.tile_side is not None:
        cfg.tile_side = args.tile_side
    if args.augment is not None:
        cfg.augment = args.augment == "on"
    if args.split_cuts is not None:
        cfg.split_cuts = tuple(float(v) for v in args.split_cuts.split(","))
    out = _resolve(base, args.out)
    log = RunLog(out, "dataset_build", cfg.to_dict(), cfg.seed)
    if args.map_csv:
        source = read_segment_csv(_resolve(base, args.map_csv))
    else:
        source = generate_synthetic_map(cfg.seed, cfg.synth_size, cfg.tile_side)
    stats = build_dataset(source, cfg, out, workers=args.workers)
    log.add_output(str(out / "manifest.jsonl"))
    log.finish()
    print(
        f"dataset: {sum(stats.split_counts.values())} records "
        f"(train {stats.split_counts['train']}, valid {stats.split_counts['valid']}, "
        f"test {stats.split_counts['test']}), frontier M={stats.frontier}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _model_config_from_args(args, frontier: int) -> GGTConfig:
    return GGTConfig(
        frontier=frontier,
        blocks=args.blocks,
        width=args.width,
        heads=args.heads,
        mlp_inner=args.mlp_inner,
        head_hidden=args.head_hidden,
        ca_hidden=args.ca_hidden,
        exclude_self_attention=args.exclude_self_attention,
    )


def _cmd_train(args, base: Path) -> int:
    seed = _seed_default(args.seed)
    dataset_dir = _resolve(base, args.dataset)
    out = _resolve(base, args.out)
    frontier = dataset_frontier(dataset_dir)
    mcfg = _model_config_from_args(args, frontier)
    tcfg = TrainConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        lam=args.lam,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=seed,
        patience=args.patience,
        val_subsample=args.val_subsample,
        gen_max_steps=args.gen_max_steps,
    )
    log = RunLog(
        out,
        "train",
        {"model": args.model, "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict()},
        seed,
    )
    train_samples = load_split(dataset_dir, "train", limit=args.limit_train)
    val_samples = load_split(dataset_dir, "valid", limit=args.limit_val)
    model = build_model(args.model, mcfg, seed=seed)
    report_path = out / "report.jsonl"
    report_path.write_text("", encoding="utf-8")

    def log_epoch(stats):
        with open(report_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(stats.to_dict(), sort_keys=True) + "\n")
        print(
            f"epoch {stats.epoch}: loss {stats.train_loss:.5f} "
            f"val_loss {stats.val_loss:.5f} val_sm {stats.val_sm:.5f}"
            + (" *" if stats.is_best else "")
        )

    report = train(model, train_samples, val_samples, tcfg, checkpoint_dir=out, log=log_epoch)
    with open(out / "model.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "kind": args.model,
                "model_config": mcfg.to_dict(),
                "train_config": tcfg.to_dict(),
                "dataset": str(dataset_dir),
                "best_epoch": report.best_epoch,
                "best_val_sm": report.best_val_sm,
            },
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    for name in ("best.ckpt", "last.ckpt", "model.json", "report.jsonl"):
        if (out / name).exists():
            log.add_output(str(out / name))
    log.finish()
    print(f"best epoch {report.best_epoch}: val_sm {report.best_val_sm:.5f}")
    return 0


def load_run(run_dir: Path, prefer: str = "best"):
    """Rebuild the model recorded in run_dir/model.json and load its weights."""
    with open(run_dir / "model.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    mcfg = GGTConfig.from_dict(meta["model_config"])
    model = build_model(meta["kind"], mcfg, seed=meta["train_config"]["seed"])
    ckpt = run_dir / f"{prefer}.ckpt"
    if not ckpt.exists():
        ckpt = run_dir / "last.ckpt"
    load_model_weights(model, ckpt)
    return model, meta


# ---------------------------------------------------------------------------
# eval / generate / noise-bench


def _cmd_eval(args, base: Path) -> int:
    run_dir = _resolve(base, args.run)
    dataset_dir = _resolve(base, args.dataset)
    out = _resolve(base, args.out)
    model, meta = load_run(run_dir, prefer=args.checkpoint)
    tcfg = TrainConfig(seed=_seed_default(args.seed), gen_max_steps=args.gen_max_steps)
    log = RunLog(out, "eval", {"run": str(run_dir), "split": args.split, "model": meta["kind"]}, tcfg.seed)
    records = load_split(dataset_dir, args.split, limit=args.limit)
    svg_dir = None
    if args.svg:
        svg_dir = out / "svg"
        svg_dir.mkdir(parents=True, exist_ok=True)
    summary = evaluate(model, records, tcfg, svg_dir=svg_dir, workers=args.workers)
    write_summary(summary, out, name=args.split)
    log.add_output(str(out / f"{args.split}_summary.json"))
    log.finish()
    print(
        f"{meta['kind']} on {args.split}: SM {summary.sm_mean:.5f} +/- {summary.sm_std:.5f}, "
        f"loss {summary.val_loss_mean:.5f}, dV {summary.delta_nodes_mean:.2f}, "
        f"dE {summary.delta_edges_mean:.2f}, flagged {summary.flagged}/{summary.n}"
    )
    return 0


def _cmd_generate(args, base: Path) -> int:
    run_dir = _resolve(base, args.run)
    out_path = _resolve(base, args.out)
    model, meta = load_run(run_dir)
    log = RunLog(out_path.parent, "generate", {"run": str(run_dir), "image": args.image}, 0)
    image = read_pgm(_resolve(base, args.image))
    graph = model.generate(image, max_steps=args.max_steps)
    write_rgf(graph, out_path)
    log.add_output(str(out_path))
    if args.svg:
        svg_path = _resolve(base, args.svg)
        render_comparison_svg(graph, graph, svg_path)
        log.add_output(str(svg_path))
    log.finish()
    print(f"generated {graph.n_nodes} nodes, {graph.n_edges} edges -> {out_path}")
    return 0


def _cmd_noise_bench(args, base: Path) -> int:
    run_dir = _resolve(base, args.run)
    dataset_dir = _resolve(base, args.dataset)
    out = _resolve(base, args.out)
    seed = _seed_default(args.seed)
    levels = args.levels.split(",")
    model, meta = load_run(run_dir)
    log = RunLog(out, "noise_bench", {"levels": levels, "run": str(run_dir)}, seed)
    records = load_split(dataset_dir, args.split, limit=args.limit)
    tcfg = TrainConfig(seed=seed, gen_max_steps=args.gen_max_steps)
    means = {}
    for level in levels:
        noisy = []
        for i, rec in enumerate(records):
            img = inject_noise(rec.image, level, seed + i)
            noisy.append(type(rec)(rec.id, rec.split, rec.graph, img, rec.seq))
        summary = evaluate(model, noisy, tcfg, workers=args.workers)
        write_summary(summary, out, name=f"noise_{level}")
        means[level] = summary.sm_mean
        log.add_output(str(out / f"noise_{level}_summary.json"))
        print(f"noise {level}: SM {summary.sm_mean:.5f} (flagged {summary.flagged}/{summary.n})")
    ordered = [means[lv] for lv in levels]
    if ordered == sorted(ordered):
        print("degradation is monotone over the requested levels")
    else:
        print("note: degradation not monotone over the requested levels")
    log.finish()
    return 0


# ---------------------------------------------------------------------------
# metric / stitch


def _cmd_metric(args, base: Path) -> int:
    g1 = read_rgf(_resolve(base, args.graph_a))
    g2 = read_rgf(_resolve(base, args.graph_b))
    p = sample_point_cloud(g1, args.points)
    q = sample_point_cloud(g2, args.points)
    result = sinkhorn(p, q, eps=args.eps)
    print(f"{result.cost:.6f}")
    if args.dump_coupling:
        path = _resolve(base, args.dump_coupling)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in result.coupling:
                fh.write(",".join(f"{v:.9e}" for v in row) + "\n")
    if args.svg:
        _coupling_svg(p.points, q.points, result.coupling, _resolve(base, args.svg))
    return 0


def _coupling_svg(p: np.ndarray, q: np.ndarray, coupling: np.ndarray, path, top_k: int = 200):
    def sx(x):
        return 10.0 + (x + 1.0) * 100.0

    def sy(y):
        return 10.0 + (y + 1.0) * 100.0

    flat = coupling.ravel()
    top = np.argsort(flat)[::-1][: min(top_k, flat.size)]
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="220" height="220" viewBox="0 0 220 220">',
        '<rect width="220" height="220" fill="white"/>',
    ]
    m = coupling.shape[1]
    for idx in top:
        i, j = divmod(int(idx), m)
        parts.append(
            f'<line x1="{sx(p[i, 0]):.2f}" y1="{sy(p[i, 1]):.2f}" '
            f'x2="{sx(q[j, 0]):.2f}" y2="{sy(q[j, 1]):.2f}" stroke="#888" stroke-width="0.5"/>'
        )
    for x, y in p:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1.5" fill="blue"/>')
    for x, y in q:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1.5" fill="red"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def _cmd_stitch(args, base: Path) -> int:
    if args.manifest:
        paths = [
            line.strip()
            for line in _resolve(base, args.manifest).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    else:
        paths = args.tiles
    if len(paths) != args.rows * args.cols:
        print(
            f"error: expected {args.rows * args.cols} tile paths, got {len(paths)}",
            file=sys.stderr,
        )
        return 1
    grid = []
    k = 0
    for _ in range(args.rows):
        row = []
        for _ in range(args.cols):
            row.append(read_rgf(_resolve(base, paths[k])))
            k += 1
        grid.append(row)
    merged = stitch(grid, boundary_tol=args.boundary_tol)
    out_path = _resolve(base, args.out)
    write_rgf(merged, out_path)
    if args.svg:
        render_comparison_svg(merged, merged, _resolve(base, args.svg))
    print(f"stitched {args.rows}x{args.cols} -> {merged.n_nodes} nodes, {merged.n_edges} edges")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _tiny_sequence(rng, frontier: int, n_nodes: int = 4) -> CanonicalSequence:
    adjacency = np.zeros((n_nodes + 1, frontier))
    coords = np.zeros((n_nodes + 1, 2))
    stop = np.zeros(n_nodes + 1)
    stop[-1] = 1.0
    coords[:n_nodes] = rng.uniform(-0.9, 0.9, size=(n_nodes, 2))
    for t in range(1, n_nodes):
        j = int(rng.integers(0, min(t, frontier)))
        adjacency[t, j] = 1.0
    return CanonicalSequence(adjacency, coords, stop, frontier)


def gradcheck_models(tol: float = 1e-4, max_coords: int = 25, seed: int = 0):
    """Finite-difference checks of the full training loss for all model kinds."""
    from .training import sample_loss as _sample_loss
    from .dataset import LoadedRecord

    rng = np.random.default_rng(seed)
    image = (rng.random((64, 64)) < 0.2).astype(np.float64)
    cfg = GGTConfig(
        frontier=3, blocks=2, width=16, heads=2, mlp_inner=32, head_hidden=16, ca_hidden=48
    )
    seq = _tiny_sequence(rng, cfg.frontier)
    rec = LoadedRecord("gc", "train", None, image, seq)
    reports = {}
    for kind in ("ggt", "mlp", "rnn"):
        model = build_model(kind, cfg, seed=seed)

        def fn():
            loss, _, _ = _sample_loss(model, rec, lam=0.5, training=True)
            return loss

        reports[kind] = ad.grad_check(
            fn, model.named_params(), tol=tol, max_coords_per_param=max_coords, seed=seed
        )
    return reports


def _cmd_gradcheck(args, base: Path) -> int:
    out = _resolve(base, args.out) if args.out else base
    log = RunLog(out, "gradcheck", {"tol": args.tol, "max_coords": args.max_coords}, args.seed)
    reports = gradcheck_models(tol=args.tol, max_coords=args.max_coords, seed=args.seed)
    ok = True
    for kind, rep in reports.items():
        print(f"{kind}: {rep}")
        ok = ok and rep.passed
    log.finish()
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def make_parser() -> _Parser:
    parser = _Parser(prog="roadforge", description=__doc__)
    parser.add_argument("--out-dir", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ds = sub.add_parser("dataset", help="dataset operations")
    ds_sub = p_ds.add_subparsers(dest="dataset_command", required=True)
    p_build = ds_sub.add_parser("build", help="build a dataset from a map")
    p_build.add_argument("--out", required=True)
    p_build.add_argument("--config", help="flat key-value config file")
    p_build.add_argument("--map-csv", help="segment csv; omitted = synthetic map")
    p_build.add_argument("--seed", type=int)
    p_build.add_argument("--size", type=int, help="synthetic map tiles per axis")
    p_build.add_argument("--tile-side", type=float)
    p_build.add_argument("--augment", choices=("on", "off"))
    p_build.add_argument("--split-cuts", help="two fractions, e.g. 0.72,0.82")
    p_build.add_argument("--workers", type=int, default=1)

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--model", choices=MODEL_KINDS, default="ggt")
    p_train.add_argument("--epochs", type=int, default=50)
    p_train.add_argument("--lr", type=float, default=4e-4)
    p_train.add_argument("--weight-decay", type=float, default=2e-5)
    p_train.add_argument("--lam", type=float, default=0.5)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--patience", type=int, default=10)
    p_train.add_argument("--val-subsample", type=int, default=64)
    p_train.add_argument("--gen-max-steps", type=int, default=16)
    p_train.add_argument("--blocks", type=int, default=12)
    p_train.add_argument("--width", type=int, default=256)
    p_train.add_argument("--heads", type=int, default=8)
    p_train.add_argument("--mlp-inner", type=int, default=2048)
    p_train.add_argument("--head-hidden", type=int, default=128)
    p_train.add_argument("--ca-hidden", type=int, default=1800)
    p_train.add_argument("--exclude-self-attention", action="store_true")
    p_train.add_argument("--limit-train", type=int)
    p_train.add_argument("--limit-val", type=int)

    p_eval = sub.add_parser("eval", help="evaluate a trained run on a split")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--run", required=True, help="training output directory")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_eval.add_argument("--checkpoint", default="best", choices=("best", "last"))
    p_eval.add_argument("--limit", type=int)
    p_eval.add_argument("--svg", action="store_true")
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--gen-max-steps", type=int, default=16)
    p_eval.add_argument("--workers", type=int, default=1)

    p_gen = sub.add_parser("generate", help="generate a graph from one raster")
    p_gen.add_argument("--run", required=True)
    p_gen.add_argument("--image", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--svg")
    p_gen.add_argument("--max-steps", type=int, default=16)

    p_metric = sub.add_parser("metric", help="transport distance between two graphs")
    p_metric.add_argument("graph_a")
    p_metric.add_argument("graph_b")
    p_metric.add_argument("--points", type=int, default=100)
    p_metric.add_argument("--eps", type=float, default=1e-3)
    p_metric.add_argument("--dump-coupling")
    p_metric.add_argument("--svg")

    p_stitch = sub.add_parser("stitch", help="merge a tile grid into one graph")
    p_stitch.add_argument("--rows", type=int, required=True)
    p_stitch.add_argument("--cols", type=int, required=True)
    p_stitch.add_argument("--out", required=True)
    p_stitch.add_argument("--manifest", help="file with one .rgf path per line, row-major")
    p_stitch.add_argument("--boundary-tol", type=float, default=0.1)
    p_stitch.add_argument("--svg")
    p_stitch.add_argument("tiles", nargs="*")

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    p_gc.add_argument("--tol", type=float, default=1e-4)
    p_gc.add_argument("--max-coords", type=int, default=25)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--out")

    p_nb = sub.add_parser("noise-bench", help="robustness to corrupted rasters")
    p_nb.add_argument("--dataset", required=True)
    p_nb.add_argument("--run", required=True)
    p_nb.add_argument("--out", required=True)
    p_nb.add_argument("--levels", default="none,low,medium")
    p_nb.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_nb.add_argument("--limit", type=int)
    p_nb.add_argument("--seed", type=int)
    p_nb.add_argument("--gen-max-steps", type=int, default=16)
    p_nb.add_argument("--workers", type=int, default=1)

    return parser


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "generate": _cmd_generate,
    "metric": _cmd_metric,
    "stitch": _cmd_stitch,
    "gradcheck": _cmd_gradcheck,
    "noise-bench": _cmd_noise_bench,
}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    base = Path(args.out_dir)
    try:
        if args.command == "dataset":
            return _cmd_dataset_build(args, base)
        return _HANDLERS[args.command](args, base)
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
