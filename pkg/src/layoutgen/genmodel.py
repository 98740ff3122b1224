"""Toy query-based layout generator and its trainer.

The generator replaces a heavy image backbone with a pooled-feature
perceptron: the saliency grid is downsampled to the encoder grid, lifted
per cell, concatenated with the 4-channel attribute noise, mean-pooled, and
passed through a two-layer perceptron to produce a context vector. Each of
the Q learned queries receives an additive embedding of its partial-layout
row (zero when the row is unconstrained, which makes an absent partial
layout identical to an all-zero one). Two heads map [context, query] to
category logits and pre-sigmoid box coordinates.

Per-cell lifting commutes with the mean pool because the lift is linear,
so the implementation pools the saliency cells and the noise field first.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import losses, metrics, numerics as nd
from .constraints import (
    AttributeConstraint,
    PartialLayout,
    RandomMask,
    apply_mask,
    attribute_mean,
    sample_random_mask,
)
from .core import (
    CANVAS_H,
    CANVAS_W,
    Category,
    Element,
    Layout,
    PredictionBatch,
    Q_MAX,
    clamped_bbox,
)
from .errors import FormatError, ShapeError, ValidationError
from .losses import LossWeights
from .metrics import Grid, MetricReport
from .numerics import AdamState, Node, Tape, adam_step, backward
from .synthdata import Sample, coords_only_partial

DECODE_MIN_AREA = 1e-4


@dataclass(frozen=True)
class ModelConfig:
    grid_cells: int = 8
    feat_dim: int = 16
    query_dim: int = 32
    n_queries: int = Q_MAX
    enc_hidden: int = 64
    cls_hidden: int = 64
    box_hidden: int = 1024

    def __post_init__(self):
        if min(self.grid_cells, self.feat_dim, self.query_dim,
               self.n_queries, self.enc_hidden, self.cls_hidden,
               self.box_hidden) < 1:
            raise ValidationError("all model dimensions must be >= 1")


# Parameter name -> shape builder, in checkpoint declaration order.
def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    f, d, q = cfg.feat_dim, cfg.query_dim, cfg.n_queries
    return {
        "sal_w": (1, f),
        "sal_b": (1, f),
        "enc_w1": (f + 4, cfg.enc_hidden),
        "enc_b1": (1, cfg.enc_hidden),
        "enc_w2": (cfg.enc_hidden, d),
        "enc_b2": (1, d),
        "queries": (q, d),
        "pl_embed": (9, d),
        "cls_w1": (2 * d, cfg.cls_hidden),
        "cls_b1": (1, cfg.cls_hidden),
        "cls_w2": (cfg.cls_hidden, 5),
        "cls_b2": (1, 5),
        "box_w1": (2 * d, cfg.box_hidden),
        "box_b1": (1, cfg.box_hidden),
        "box_w2": (cfg.box_hidden, 4),
        "box_b2": (1, 4),
    }


@dataclass
class ModelParams:
    """Named parameter arrays; field order is the checkpoint order."""

    values: dict[str, np.ndarray]

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        values: dict[str, np.ndarray] = {}
        for name, shape in _param_shapes(cfg).items():
            if name == "queries":
                values[name] = rng.standard_normal(shape) * 0.1
            elif name.endswith("_b1") or name.endswith("_b2") or name == "sal_b":
                values[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                values[name] = rng.uniform(-bound, bound, size=shape)
        return cls(values)

    def arrays(self) -> list[np.ndarray]:
        return [self.values[name] for name in self.values]

    def names(self) -> list[str]:
        return list(self.values)

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: list[np.ndarray]) -> "ModelParams":
        shapes = _param_shapes(cfg)
        if len(arrays) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} parameter tensors, got {len(arrays)}")
        values = {}
        for (name, shape), arr in zip(shapes.items(), arrays):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} must have shape {shape}, got {arr.shape}")
            values[name] = arr
        return cls(values)


@lru_cache(maxsize=8)
def _const_mats(f: int, d: int, q: int):
    e_sal = np.zeros((f, f + 4))
    e_sal[:, :f] = np.eye(f)
    e_noise = np.zeros((4, f + 4))
    e_noise[:, f:] = np.eye(4)
    p_ctx = np.zeros((d, 2 * d))
    p_ctx[:, :d] = np.eye(d)
    p_query = np.zeros((d, 2 * d))
    p_query[:, d:] = np.eye(d)
    ones_q = np.ones((q, 1))
    return e_sal, e_noise, p_ctx, p_query, ones_q


def downsample(values: np.ndarray, g: int) -> np.ndarray:
    """Block-mean a raster down to g x g cells (integer block partition)."""
    h, w = values.shape
    if h < g or w < g:
        raise ShapeError(f"grid {h}x{w} is smaller than the {g}x{g} cell grid")
    rb = (np.arange(g + 1) * h) // g
    cb = (np.arange(g + 1) * w) // g
    out = np.empty((g, g))
    for i in range(g):
        for j in range(g):
            out[i, j] = values[rb[i]:rb[i + 1], cb[j]:cb[j + 1]].mean()
    return out


@dataclass
class Forward:
    """One generator evaluation, still attached to its tape."""

    tape: Tape
    logits: Node
    probs: Node
    boxes: Node
    query_inputs: Node

    def prediction(self) -> PredictionBatch:
        return PredictionBatch(
            self.probs.value.copy(), self.boxes.value.copy(), self.logits.value.copy()
        )


def _forward_nodes(
    pn: dict[str, Node],
    cfg: ModelConfig,
    sal_mean: float,
    noise_mean: np.ndarray,
    partial: PartialLayout | None,
) -> Forward:
    e_sal, e_noise, p_ctx, p_query, ones_q = _const_mats(
        cfg.feat_dim, cfg.query_dim, cfg.n_queries
    )
    tape = pn["sal_w"].tape
    noise_part = noise_mean.reshape(1, 4) @ e_noise

    lift = pn["sal_w"] * float(sal_mean) + pn["sal_b"]
    cell = lift @ e_sal + noise_part
    h1 = nd.relu(cell @ pn["enc_w1"] + pn["enc_b1"])
    ctx = h1 @ pn["enc_w2"] + pn["enc_b2"]
    ctx_rows = nd.matmul(tape.constant(ones_q), ctx)

    if partial is not None and partial.presence.any():
        if partial.entries.shape != (cfg.n_queries, 9):
            raise ShapeError(
                f"partial layout has {partial.entries.shape[0]} rows, "
                f"model expects {cfg.n_queries}"
            )
        inject = nd.matmul(tape.constant(partial.entries), pn["pl_embed"])
        query_inputs = pn["queries"] + inject
    else:
        query_inputs = pn["queries"]

    x = ctx_rows @ p_ctx + query_inputs @ p_query
    hc = nd.relu(x @ pn["cls_w1"] + pn["cls_b1"])
    logits = hc @ pn["cls_w2"] + pn["cls_b2"]
    probs = nd.softmax_over_last_axis(logits)
    hb = nd.relu(x @ pn["box_w1"] + pn["box_b1"])
    boxes = nd.sigmoid(hb @ pn["box_w2"] + pn["box_b2"])
    return Forward(tape, logits, probs, boxes, query_inputs)


def register_params(tape: Tape, params: ModelParams) -> dict[str, Node]:
    return {name: tape.leaf(arr) for name, arr in params.values.items()}


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    saliency: Grid,
    noise: np.ndarray,
    partial: PartialLayout | None = None,
) -> Forward:
    """Run the generator once on its own fresh tape."""
    noise = np.asarray(noise, dtype=np.float64)
    g = cfg.grid_cells
    if noise.shape != (4, g, g):
        raise ShapeError(f"noise field must be (4, {g}, {g}), got {noise.shape}")
    sal_mean = float(downsample(saliency.values, g).mean())
    noise_mean = noise.mean(axis=(1, 2))
    tape = Tape()
    pn = register_params(tape, params)
    return _forward_nodes(pn, cfg, sal_mean, noise_mean, partial)


def decode(
    pred: PredictionBatch,
    canvas_w: int = CANVAS_W,
    canvas_h: int = CANVAS_H,
    min_area: float = DECODE_MIN_AREA,
) -> Layout:
    """Turn per-query predictions into a layout.

    Argmax picks the category (lowest index on ties); "none" slots and boxes
    with area below min_area are dropped; overhanging edges are clamped.
    """
    elements = []
    for q in range(pred.n_queries):
        cat = Category(int(np.argmax(pred.probs[q])))
        if cat == Category.NONE:
            continue
        cx, cy, w, h = pred.boxes[q]
        if w * h < min_area:
            continue
        elements.append(Element(cat, clamped_bbox(float(cx), float(cy), float(w), float(h))))
    return Layout(tuple(elements), canvas_w, canvas_h)


def _noise_field(rng: np.random.Generator, g: int, mean: np.ndarray) -> np.ndarray:
    return rng.standard_normal((4, g, g)) + mean[:, None, None]


def train(
    cfg: ModelConfig,
    samples: list[Sample],
    weights: LossWeights = LossWeights(),
    epochs: int = 40,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-4,
    use_random_mask: bool = True,
) -> tuple[ModelParams, list[dict]]:
    """Train the generator; returns final parameters and per-epoch history.

    Each step takes one shuffled batch, redraws every sample's attribute
    noise and constraint mask, and applies one Adam update on the batch mean
    of the total loss. The learning rate drops by 10x once ceil(2/3 epochs)
    epochs have completed. Fully deterministic for a given seed.
    """
    if not samples:
        raise ValidationError("training needs a non-empty dataset")
    params = ModelParams.init(cfg, seed)
    names = params.names()
    shapes = [arr.shape for arr in params.arrays()]
    sizes = [int(np.prod(shape)) for shape in shapes]
    offsets = np.cumsum([0] + sizes)
    # One flat parameter vector: the Adam update is elementwise, so a single
    # fused pass is bitwise-identical to per-tensor updates and much cheaper.
    theta = np.concatenate([arr.ravel() for arr in params.arrays()])
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    g = cfg.grid_cells
    sal_means = [float(downsample(s.saliency.values, g).mean()) for s in samples]
    noise_means = [attribute_mean(s.attribute) for s in samples]
    decay_after = math.ceil(epochs * 2.0 / 3.0)
    history: list[dict] = []

    def tensor_views(vector):
        return [
            vector[offsets[i]:offsets[i + 1]].reshape(shapes[i])
            for i in range(len(shapes))
        ]

    for epoch in range(epochs):
        if epoch == decay_after and epoch > 0:
            state.lr = lr * 0.1
        order = rng.permutation(len(samples))
        sums = {"l_rec": 0.0, "l_ac": 0.0, "l_ad": 0.0, "l_plrm": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            tape = Tape()
            pn = {name: tape.leaf(arr) for name, arr in zip(names, tensor_views(theta))}
            batch_total = None
            for si in chunk:
                sample = samples[si]
                noise = _noise_field(rng, g, noise_means[si])
                if use_random_mask:
                    mask = sample_random_mask(sample.partial, int(rng.integers(2**31)))
                else:
                    mask = RandomMask.all_ones(sample.partial)
                shown = apply_mask(sample.partial, mask)
                fwd = _forward_nodes(pn, cfg, sal_means[si], noise.mean(axis=(1, 2)), shown)
                l_rec = losses.reconstruction_loss(fwd.probs, fwd.boxes, sample.layout)
                l_ac = l_ad = None
                if sample.attribute.is_specified:
                    l_ac = losses.attribute_consistent_loss(
                        fwd.logits, sample.attribute, weights.epsilon_sharpness
                    )
                    l_ad = losses.attribute_disentangled_loss(
                        fwd.logits, sample.attribute, weights.epsilon_sharpness
                    )
                pred_flat = losses.flatten_predictions(fwd.probs, fwd.boxes)
                l_plrm = losses.masked_partial_loss(pred_flat, sample.partial, mask)
                total = losses.total_loss(l_rec, l_ac, l_ad, l_plrm, weights)
                batch_total = total if batch_total is None else batch_total + total
                sums["l_rec"] += float(l_rec.value)
                sums["l_ac"] += float(l_ac.value) if l_ac is not None else 0.0
                sums["l_ad"] += float(l_ad.value) if l_ad is not None else 0.0
                sums["l_plrm"] += float(l_plrm.value)
                sums["total"] += float(total.value)
            batch_loss = batch_total * (1.0 / len(chunk))
            backward(batch_loss)
            grad = np.concatenate([pn[name].adjoint.ravel() for name in names])
            theta = adam_step(state, [theta], [grad])[0]
            steps += 1
        n_seen = len(order)
        history.append({k: v / n_seen for k, v in sums.items()})
    return ModelParams.from_arrays(cfg, [v.copy() for v in tensor_views(theta)]), history


def worker_count() -> int:
    """Worker cap for evaluation sharding; IUCL_THREADS overrides."""
    env = os.environ.get("IUCL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    samples: list[Sample],
    attr: AttributeConstraint | None = None,
    partial: bool = False,
    coords_only: bool = False,
    seed: int = 0,
) -> MetricReport:
    """Decode predictions for a dataset and compute the metric report.

    Attribute protocol (attr given): every sample is conditioned on that
    attribute, no partial layout is injected, and the report carries the
    attribute satisfaction ratio. Partial protocol (partial=True): each
    sample is conditioned on its own label with its partial layout (or a
    freshly drawn coordinates-only one) injected, and the report carries
    the constraint deviation.
    """
    if not samples:
        raise ValidationError("evaluation needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    g = cfg.grid_cells
    jobs = []
    for sample in samples:
        mean = attribute_mean(attr if attr is not None else sample.attribute)
        noise = _noise_field(rng, g, mean)
        pl = None
        if partial:
            if coords_only:
                pl = coords_only_partial(sample.layout, int(rng.integers(2**31)))
            else:
                pl = sample.partial
        jobs.append((sample, noise, pl))

    def run(job) -> PredictionBatch:
        sample, noise, pl = job
        return forward(params, cfg, sample.saliency, noise, pl).prediction()

    n_workers = min(worker_count(), len(jobs))
    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            preds = list(pool.map(run, jobs))
    else:
        preds = [run(job) for job in jobs]

    layouts = [decode(p) for p in preds]
    und_values = [v for v in (metrics.r_und(lay) for lay in layouts) if v is not None]
    report = MetricReport(
        r_ove=float(np.mean([metrics.r_ove(lay) for lay in layouts])),
        r_ali=float(np.mean([metrics.r_ali(lay) for lay in layouts])),
        r_com=float(np.mean(
            [metrics.r_com(lay, s.saliency) for lay, s in zip(layouts, samples)]
        )),
        r_shm=float(np.mean(
            [metrics.r_shm(lay, s.saliency) for lay, s in zip(layouts, samples)]
        )),
        r_sub=float(np.mean(
            [metrics.r_sub(lay, s.attention) for lay, s in zip(layouts, samples)]
        )),
        r_occ=metrics.r_occ(layouts),
        r_und=float(np.mean(und_values)) if und_values else None,
        r_lac=metrics.r_lac(layouts, attr) if attr is not None else None,
        r_plc=metrics.r_plc(
            [np.hstack([p.probs, p.boxes]) for p in preds],
            [job[2] for job in jobs],
        ) if partial else None,
    )
    return report


_MAGIC = b"IUCL"
_VERSION = 1


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: ModelParams) -> None:
    """Versioned binary checkpoint: magic, version, config, tensors in order."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    cfg_bytes = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes))
    buf += cfg_bytes
    arrays = params.arrays()
    buf += struct.pack("<I", len(arrays))
    for arr in arrays:
        buf += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    pos = 4

    def read_u32() -> int:
        nonlocal pos
        if pos + 4 > len(data):
            raise FormatError("truncated checkpoint")
        value = struct.unpack_from("<I", data, pos)[0]
        pos += 4
        return value

    version = read_u32()
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg_len = read_u32()
    if pos + cfg_len > len(data):
        raise FormatError("truncated checkpoint config block")
    try:
        cfg = ModelConfig(**json.loads(data[pos:pos + cfg_len].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad checkpoint config block: {exc}") from None
    pos += cfg_len
    n_tensors = read_u32()
    arrays = []
    for _ in range(n_tensors):
        ndim = read_u32()
        shape = tuple(read_u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(data):
            raise FormatError("truncated checkpoint tensor data")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        arrays.append(arr.astype(np.float64))
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return cfg, ModelParams.from_arrays(cfg, arrays)
