"""Dataset construction: tiling a segment map, preprocessing, splits, augmentation.

A map is a flat list of segments in degrees. Tiles of side 0.001 degrees
are clipped out, normalized to [-1, 1], cleaned (planarize, merge,
straighten), size-filtered, canonically ordered and emitted as .rgf graph
files, .pgm rasters and .seq step sequences plus a JSON-lines manifest.
Training tiles are augmented 16 translations x 8 dihedral images; the
validation and test splits stay unaugmented. A band of one tile width
around every split boundary is discarded, which is wider than the largest
translation offset (3/4 of a tile), so augmented content never leaks
across splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import dihedral_transform, filter_graph, merge_close_nodes, planarize, straighten
from .graph import RoadGraph, read_rgf, write_rgf
from .ordering import (
    CanonicalSequence,
    canonicalize,
    max_edge_span,
    read_seq,
    to_sequence,
    write_seq,
)
from .raster import rasterize, read_pgm, write_pgm

DEFAULT_TILE_SIDE = 0.001  # degrees
DEFAULT_MERGE_EPS_DEG = 0.00005
N_TRANSLATIONS = 16  # 4x4 grid of quarter-tile offsets
N_DIHEDRAL = 8
SPLITS = ("train", "valid", "test")


class EmptyTile(ValueError):
    """No segment intersects the tile window."""


class EmptyDataset(ValueError):
    """An operation that needs data was given none."""


@dataclass
class MapSource:
    segments: np.ndarray  # (S, 4): lon1, lat1, lon2, lat2
    bounds: tuple[float, float, float, float]  # lon_min, lat_min, lon_max, lat_max

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 4)
        lo_x, lo_y, hi_x, hi_y = self.bounds
        lons = self.segments[:, (0, 2)]
        lats = self.segments[:, (1, 3)]
        if len(self.segments) and (
            lons.min() < lo_x or lons.max() > hi_x or lats.min() < lo_y or lats.max() > hi_y
        ):
            raise ValueError("segments outside the declared bounds")


@dataclass(frozen=True)
class Tile:
    lon: float  # origin (south-west corner)
    lat: float
    side: float = DEFAULT_TILE_SIDE

    def __post_init__(self) -> None:
        if self.side <= 0:
            raise ValueError("tile side must be positive")


@dataclass
class PipelineConfig:
    tile_side: float = DEFAULT_TILE_SIDE
    eps_merge_deg: float = DEFAULT_MERGE_EPS_DEG
    straighten_max_deviation_deg: float = 15.0
    split_cuts: tuple[float, float] = (0.72, 0.82)  # train|valid and valid|test fractions
    seed: int = 0
    augment: bool = True
    raster_size: int = 64
    raster_half_width: float = 1.5
    frontier_percentile: float = 99.0
    synth_size: int = 20  # tiles per axis for the synthetic map

    def to_kv(self) -> str:
        lines = []
        for key, value in self.__dict__.items():
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "PipelineConfig":
        cfg = cls()
        known = set(cfg.__dict__)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            elif isinstance(current, tuple):
                setattr(cfg, key, tuple(float(v) for v in value.split(",")))
            else:
                setattr(cfg, key, value)
        return cfg

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["split_cuts"] = list(self.split_cuts)
        return d


@dataclass
class SplitLayout:
    """Axis-aligned longitude bands train | valid | test with discard margins."""

    lon_min: float
    lon_max: float
    cuts: tuple[float, float]  # absolute longitude positions
    band: float  # discard half-width around each cut

    @classmethod
    def from_map(
        cls, source: MapSource, tile_side: float, fractions: tuple[float, float] = (0.72, 0.82)
    ) -> "SplitLayout":
        lo, _, hi, _ = source.bounds
        if not 0.0 < fractions[0] < fractions[1] < 1.0:
            raise ValueError(f"split fractions must increase inside (0, 1): {fractions}")
        cuts = (lo + fractions[0] * (hi - lo), lo + fractions[1] * (hi - lo))
        return cls(lo, hi, cuts, band=tile_side)


def assign_split(tile: Tile, layout: SplitLayout) -> str:
    """train | valid | test | discard, decided by the tile center longitude."""
    center = tile.lon + tile.side / 2.0
    for cut in layout.cuts:
        if abs(center - cut) < layout.band:
            return "discard"
    if center < layout.cuts[0]:
        return "train"
    if center < layout.cuts[1]:
        return "valid"
    return "test"


def translation_offset(index: int, side: float) -> tuple[float, float]:
    """Quarter-tile offset grid: index k -> (k % 4, k // 4) quarter steps."""
    if not 0 <= index < N_TRANSLATIONS:
        raise ValueError(f"translation index {index} outside 0..{N_TRANSLATIONS - 1}")
    return (index % 4) * side / 4.0, (index // 4) * side / 4.0


def _clip_segment(seg, lo_x, lo_y, hi_x, hi_y):
    """Liang-Barsky clip; returns endpoints or None when outside / zero length."""
    x1, y1, x2, y2 = seg
    dx, dy = x2 - x1, y2 - y1
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x1 - lo_x),
        (dx, hi_x - x1),
        (-dy, y1 - lo_y),
        (dy, hi_y - y1),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    if t0 >= t1:
        return None
    return (x1 + t0 * dx, y1 + t0 * dy, x1 + t1 * dx, y1 + t1 * dy)


def extract_tile(
    source: MapSource,
    tile: Tile,
    translation: int = 0,
    eps_merge_deg: float = DEFAULT_MERGE_EPS_DEG,
    straighten_max_deviation_deg: float = 15.0,
) -> RoadGraph:
    """Clip, normalize to [-1, 1] (y grows southward-to-north flipped to image order),
    then run the cleanup chain."""
    ox, oy = translation_offset(translation, tile.side)
    lo_x, lo_y = tile.lon + ox, tile.lat + oy
    hi_x, hi_y = lo_x + tile.side, lo_y + tile.side
    if (
        lo_x < source.bounds[0]
        or lo_y < source.bounds[1]
        or hi_x > source.bounds[2]
        or hi_y > source.bounds[3]
    ):
        raise ValueError("shifted tile window exceeds the map bounds")
    node_ids: dict[tuple[float, float], int] = {}
    nodes: list[tuple[float, float]] = []
    edges: list[tuple[int, int]] = []

    def node_of(x: float, y: float) -> int:
        key = (x, y)
        if key not in node_ids:
            node_ids[key] = len(nodes)
            nodes.append(key)
        return node_ids[key]

    for seg in source.segments:
        clipped = _clip_segment(seg, lo_x, lo_y, hi_x, hi_y)
        if clipped is None:
            continue
        x1, y1, x2, y2 = clipped
        nx1 = 2.0 * (x1 - lo_x) / tile.side - 1.0
        ny1 = 1.0 - 2.0 * (y1 - lo_y) / tile.side
        nx2 = 2.0 * (x2 - lo_x) / tile.side - 1.0
        ny2 = 1.0 - 2.0 * (y2 - lo_y) / tile.side
        a, b = node_of(nx1, ny1), node_of(nx2, ny2)
        if a != b:
            edges.append((a, b))
    if not edges:
        raise EmptyTile(f"no segment crosses tile ({tile.lon}, {tile.lat})")
    g = RoadGraph(nodes, edges)
    g = planarize(g)
    g = merge_close_nodes(g, 2.0 * eps_merge_deg / tile.side)
    return straighten(g, straighten_max_deviation_deg)


def compute_frontier(spans, percentile: float = 99.0) -> int:
    """Nearest-rank percentile of max edge spans, floored at 1."""
    spans = sorted(int(s) for s in spans)
    if not spans:
        raise EmptyDataset("no spans to compute the frontier from")
    rank = max(1, int(np.ceil(percentile / 100.0 * len(spans))))
    return max(1, spans[min(rank, len(spans)) - 1])


def generate_synthetic_map(seed: int, size: int, tile_side: float = DEFAULT_TILE_SIDE) -> MapSource:
    """Deterministic road-like map: a jittered grid with dropouts and diagonals.

    size is the tile count per axis. The grid pitch (2/3 of a tile), edge
    keep rate and dropout are tuned so that a tile window typically holds a
    handful of junctions and most tiles survive the size filter.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    rng = np.random.default_rng(seed)
    extent = size * tile_side
    pitch = tile_side / 1.5
    n = int(round(1.5 * size)) + 1
    gx, gy = np.meshgrid(np.arange(n) * pitch, np.arange(n) * pitch)
    jitter = rng.uniform(-0.18, 0.18, size=(n, n, 2)) * pitch
    px = np.clip(gx + jitter[:, :, 0], 0.0, extent)
    py = np.clip(gy + jitter[:, :, 1], 0.0, extent)
    alive = rng.random((n, n)) > 0.10
    segments = []
    for r in range(n):
        for c in range(n):
            if not alive[r, c]:
                continue
            if c + 1 < n and alive[r, c + 1] and rng.random() < 0.70:
                segments.append((px[r, c], py[r, c], px[r, c + 1], py[r, c + 1]))
            if r + 1 < n and alive[r + 1, c] and rng.random() < 0.70:
                segments.append((px[r, c], py[r, c], px[r + 1, c], py[r + 1, c]))
            if r + 1 < n and c + 1 < n and alive[r + 1, c + 1] and rng.random() < 0.10:
                segments.append((px[r, c], py[r, c], px[r + 1, c + 1], py[r + 1, c + 1]))
    return MapSource(np.array(segments), (0.0, 0.0, extent, extent))


def read_segment_csv(path) -> MapSource:
    """Plain segment list: one 'lon1,lat1,lon2,lat2' line per road segment."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 comma-separated values")
            rows.append([float(v) for v in parts])
    if not rows:
        raise EmptyDataset(f"{path}: no segments")
    seg = np.array(rows)
    lo_x = min(seg[:, 0].min(), seg[:, 2].min())
    hi_x = max(seg[:, 0].max(), seg[:, 2].max())
    lo_y = min(seg[:, 1].min(), seg[:, 3].min())
    hi_y = max(seg[:, 1].max(), seg[:, 3].max())
    return MapSource(seg, (lo_x, lo_y, hi_x, hi_y))


def write_segment_csv(source: MapSource, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in source.segments:
            fh.write(",".join(f"{v:.9f}" for v in row) + "\n")


@dataclass
class DatasetStats:
    frontier: int = 0
    split_counts: dict = field(default_factory=lambda: {s: 0 for s in SPLITS})
    tiles_discarded: int = 0
    tiles_empty: int = 0
    rejected: dict = field(default_factory=dict)  # reason -> count
    node_hist: dict = field(default_factory=dict)
    edge_hist: dict = field(default_factory=dict)

    def count_rejection(self, reason: str) -> None:
        self.rejected[reason] = self.rejected.get(reason, 0) + 1

    def to_dict(self) -> dict:
        return {
            "frontier": self.frontier,
            "split_counts": self.split_counts,
            "tiles_discarded": self.tiles_discarded,
            "tiles_empty": self.tiles_empty,
            "rejected": dict(sorted(self.rejected.items())),
            "node_hist": {str(k): v for k, v in sorted(self.node_hist.items())},
            "edge_hist": {str(k): v for k, v in sorted(self.edge_hist.items())},
        }


def _quantized(g: RoadGraph) -> RoadGraph:
    """Round coordinates to the 9 decimals the .rgf format stores."""
    return RoadGraph(np.round(g.nodes, 9), g.edges)


_BUILD_STATE: dict = {}


def _init_build_worker(source: MapSource, cfg: PipelineConfig) -> None:
    _BUILD_STATE["source"] = source
    _BUILD_STATE["cfg"] = cfg


def _extract_task(task):
    row, col, tr = task
    source: MapSource = _BUILD_STATE["source"]
    cfg: PipelineConfig = _BUILD_STATE["cfg"]
    tile = Tile(
        source.bounds[0] + col * cfg.tile_side,
        source.bounds[1] + row * cfg.tile_side,
        cfg.tile_side,
    )
    try:
        return extract_tile(
            source, tile, tr, cfg.eps_merge_deg, cfg.straighten_max_deviation_deg
        )
    except EmptyTile:
        return None


def build_dataset(source: MapSource, cfg: PipelineConfig, out_dir, workers: int = 1) -> DatasetStats:
    """Materialize the dataset under out_dir; deterministic for a fixed config.

    Layout: manifest.jsonl, stats.json, config.kv, graphs/<id>.rgf,
    images/<id>.pgm, seqs/<id>.seq. Manifest rows carry
    {id, split, graph_path, image_path, n_nodes, n_edges, max_span}.
    Tile extraction may fan out over a worker pool; the output is merged in
    tile order and does not depend on the worker count.
    """
    out = Path(out_dir)
    for sub in ("graphs", "images", "seqs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    layout = SplitLayout.from_map(source, cfg.tile_side, cfg.split_cuts)
    assert layout.band >= 0.75 * cfg.tile_side, "discard band thinner than translation extent"
    lo_x, lo_y, hi_x, hi_y = source.bounds
    # leave room for the largest translation offset (3/4 tile) in every tile
    n_cols = int(np.floor((hi_x - lo_x) / cfg.tile_side - 0.75))
    n_rows = int(np.floor((hi_y - lo_y) / cfg.tile_side - 0.75))
    if n_cols < 1 or n_rows < 1:
        raise EmptyDataset("map too small for a single augmented tile")

    stats = DatasetStats()
    tasks = []  # (row, col, translation), with the tile's split alongside
    task_splits = []
    for row in range(n_rows):
        for col in range(n_cols):
            tile = Tile(lo_x + col * cfg.tile_side, lo_y + row * cfg.tile_side, cfg.tile_side)
            split = assign_split(tile, layout)
            if split == "discard":
                stats.tiles_discarded += 1
                continue
            augmented = cfg.augment and split == "train"
            for tr in range(N_TRANSLATIONS) if augmented else (0,):
                tasks.append((row, col, tr))
                task_splits.append(split)

    _init_build_worker(source, cfg)
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(
            workers, initializer=_init_build_worker, initargs=(source, cfg)
        ) as pool:
            extracted = pool.map(_extract_task, tasks, chunksize=8)
    else:
        extracted = [_extract_task(t) for t in tasks]

    records = []  # (id, split, canonical graph)
    for (row, col, tr), split, base in zip(tasks, task_splits, extracted):
        if base is None:
            stats.tiles_empty += 1
            continue
        augmented = cfg.augment and split == "train"
        for dh in range(N_DIHEDRAL) if augmented else (0,):
            g = dihedral_transform(base, k=dh % 4, flip=dh >= 4)
            g = _quantized(canonicalize(g))
            reason = filter_graph(g)
            if reason is None and g.n_edges == 0:
                reason = "edgeless"
            if reason is not None:
                stats.count_rejection(reason)
                continue
            rid = f"r{row:03d}c{col:03d}t{tr:02d}d{dh}"
            records.append((rid, split, g))

    if not records:
        raise EmptyDataset("no record passed the filter")
    train_spans = [max_edge_span(g) for _, split, g in records if split == "train"]
    if not train_spans:
        raise EmptyDataset("no training records to compute the frontier from")
    stats.frontier = compute_frontier(train_spans, cfg.frontier_percentile)

    manifest_rows = []
    for rid, split, g in records:
        span = max_edge_span(g)
        if span > stats.frontier:
            stats.count_rejection("frontier_overflow")
            continue
        seq = to_sequence(g, stats.frontier)
        img = rasterize(g, cfg.raster_size, cfg.raster_half_width)
        write_rgf(g, out / "graphs" / f"{rid}.rgf")
        write_pgm(img, out / "images" / f"{rid}.pgm")
        write_seq(seq, out / "seqs" / f"{rid}.seq")
        stats.split_counts[split] += 1
        stats.node_hist[g.n_nodes] = stats.node_hist.get(g.n_nodes, 0) + 1
        stats.edge_hist[g.n_edges] = stats.edge_hist.get(g.n_edges, 0) + 1
        manifest_rows.append(
            {
                "id": rid,
                "split": split,
                "graph_path": f"graphs/{rid}.rgf",
                "image_path": f"images/{rid}.pgm",
                "n_nodes": g.n_nodes,
                "n_edges": g.n_edges,
                "max_span": span,
            }
        )

    with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in sorted(manifest_rows, key=lambda r: r["id"]):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "stats.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stats.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(out / "config.kv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.to_kv())
    return stats


@dataclass
class LoadedRecord:
    id: str
    split: str
    graph: RoadGraph
    image: np.ndarray
    seq: CanonicalSequence


def read_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "manifest.jsonl"
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def dataset_frontier(dataset_dir) -> int:
    with open(Path(dataset_dir) / "stats.json", "r", encoding="utf-8") as fh:
        return int(json.load(fh)["frontier"])


def load_split(dataset_dir, split: str, limit: int | None = None) -> list[LoadedRecord]:
    base = Path(dataset_dir)
    rows = [r for r in read_manifest(base) if r["split"] == split]
    if limit is not None:
        rows = rows[:limit]
    out = []
    for r in rows:
        rid = r["id"]
        out.append(
            LoadedRecord(
                id=rid,
                split=split,
                graph=read_rgf(base / r["graph_path"]),
                image=read_pgm(base / r["image_path"]),
                seq=read_seq(base / "seqs" / f"{rid}.seq"),
            )
        )
    if not out:
        raise EmptyDataset(f"no records in split {split!r} under {dataset_dir}")
    return out
