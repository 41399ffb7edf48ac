"""Held-out evaluation of graph generators and SVG visual comparisons.

Per record the model generates a graph from the raster alone; the summary
aggregates the transport distance to the ground truth, the teacher-forced
validation loss, and the absolute node/edge count errors, plus a histogram
of the per-sample distances (bin width 0.005). Edgeless predictions are
scored against a center-point proxy cloud and flagged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import RoadGraph
from .streetmover import streetmover_or_proxy
from .training import TrainConfig, sample_loss
from . import autodiff as ad

HIST_BIN_WIDTH = 0.005


@dataclass
class EvalSummary:
    n: int = 0
    sm_mean: float = 0.0
    sm_std: float = 0.0
    val_loss_mean: float = 0.0
    delta_nodes_mean: float = 0.0
    delta_edges_mean: float = 0.0
    flagged: int = 0
    histogram: list[int] = field(default_factory=list)  # counts per 0.005-wide bin
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "sm_mean": self.sm_mean,
            "sm_std": self.sm_std,
            "val_loss_mean": self.val_loss_mean,
            "delta_nodes_mean": self.delta_nodes_mean,
            "delta_edges_mean": self.delta_edges_mean,
            "flagged": self.flagged,
            "hist_bin_width": HIST_BIN_WIDTH,
            "histogram": self.histogram,
            "per_sample": self.per_sample,
        }


def sm_histogram(values, width: float = HIST_BIN_WIDTH) -> list[int]:
    """Counts per [i*width, (i+1)*width) bin, long enough to hold the max value."""
    if not len(values):
        return []
    idx = [int(v // width) for v in values]
    counts = [0] * (max(idx) + 1)
    for i in idx:
        counts[i] += 1
    return counts


_EVAL_STATE: dict = {}


def _init_eval_worker(model, cfg: TrainConfig) -> None:
    _EVAL_STATE["model"] = model
    _EVAL_STATE["cfg"] = cfg


def _eval_record(rec):
    model = _EVAL_STATE["model"]
    cfg: TrainConfig = _EVAL_STATE["cfg"]
    pred = model.generate(rec.image, max_steps=cfg.gen_max_steps)
    cost, flagged = streetmover_or_proxy(
        pred, rec.graph, n=cfg.sm_points, eps=cfg.sm_eps, max_iter=cfg.sm_max_iter
    )
    with ad.no_grad():
        loss, _, _ = sample_loss(model, rec, cfg.lam, training=False)
    return pred, cost, flagged, float(loss.data)


def evaluate(
    model, records, cfg: TrainConfig | None = None, svg_dir=None, workers: int = 1
) -> EvalSummary:
    """Generate per record, score all metrics, optionally dump comparison SVGs.

    workers > 1 fans the per-record work over a process pool; results are
    merged in record order and identical to a sequential run.
    """
    cfg = cfg or TrainConfig()
    _init_eval_worker(model, cfg)
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(
            workers, initializer=_init_eval_worker, initargs=(model, cfg)
        ) as pool:
            results = pool.map(_eval_record, records, chunksize=1)
    else:
        results = [_eval_record(rec) for rec in records]

    sms, losses, dvs, des = [], [], [], []
    summary = EvalSummary()
    for rec, (pred, cost, flagged, loss_val) in zip(records, results):
        dv = abs(pred.n_nodes - rec.graph.n_nodes)
        de = abs(pred.n_edges - rec.graph.n_edges)
        sms.append(cost)
        losses.append(loss_val)
        dvs.append(dv)
        des.append(de)
        summary.flagged += int(flagged)
        summary.per_sample.append(
            {
                "id": rec.id,
                "sm": cost,
                "loss": loss_val,
                "delta_nodes": dv,
                "delta_edges": de,
                "flagged": bool(flagged),
            }
        )
        if svg_dir is not None:
            render_comparison_svg(rec.graph, pred, Path(svg_dir) / f"{rec.id}.svg")
    summary.n = len(sms)
    if sms:
        summary.sm_mean = float(np.mean(sms))
        summary.sm_std = float(np.std(sms))
        summary.val_loss_mean = float(np.mean(losses))
        summary.delta_nodes_mean = float(np.mean(dvs))
        summary.delta_edges_mean = float(np.mean(des))
        summary.histogram = sm_histogram(sms)
    return summary


def write_summary(summary: EvalSummary, out_dir, name: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}_summary.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(out / f"{name}_histogram.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for i, count in enumerate(summary.histogram):
            fh.write(f"{i * HIST_BIN_WIDTH:.3f},{(i + 1) * HIST_BIN_WIDTH:.3f},{count}\n")


_PANEL = 200.0
_MARGIN = 10.0


def _panel_elements(g: RoadGraph, oy: float) -> list[str]:
    def sx(x: float) -> float:
        return _MARGIN + (x + 1.0) / 2.0 * _PANEL

    def sy(y: float) -> float:
        return oy + (y + 1.0) / 2.0 * _PANEL

    parts = []
    for i, j in g.edges:
        a, b = g.nodes[int(i)], g.nodes[int(j)]
        parts.append(
            f'<line x1="{sx(a[0]):.2f}" y1="{sy(a[1]):.2f}" '
            f'x2="{sx(b[0]):.2f}" y2="{sy(b[1]):.2f}" stroke="black" stroke-width="1.5"/>'
        )
    for x, y in g.nodes:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" fill="red"/>')
    return parts


def render_comparison_svg(gt: RoadGraph, pred: RoadGraph, path) -> None:
    """Ground truth panel above the generated panel; deterministic output."""
    height = 2 * _PANEL + 3 * _MARGIN
    width = _PANEL + 2 * _MARGIN
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
    ]
    parts.extend(_panel_elements(gt, _MARGIN))
    if pred.n_nodes:
        parts.extend(_panel_elements(pred, 2 * _MARGIN + _PANEL))
    else:
        parts.append(
            f'<text x="{_MARGIN + _PANEL / 2:.2f}" y="{2 * _MARGIN + 1.5 * _PANEL:.2f}" '
            f'text-anchor="middle" font-size="16">empty</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
