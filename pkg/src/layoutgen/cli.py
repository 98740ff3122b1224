"""Command-line surface: dataset synthesis, training, evaluation, loss
inspection, gradient checking, noise probes, generation, and SVG rendering.

Every command accepts --seed and --out. Exit codes: 0 success, 1 runtime
error (a JSON object describing it goes to stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import genmodel, losses, metrics, numerics as nd, synthdata
from .constraints import (
    AttributeConstraint,
    AttributeKind,
    NoiseSpec,
    PartialLayout,
    RandomMask,
    sample_noise,
)
from .core import (
    Category,
    Layout,
    PredictionBatch,
    Q_MAX,
    layout_from_json,
    layout_to_json,
)
from .errors import LayoutGenError, ParseError, ValidationError
from .genmodel import ModelConfig
from .losses import LossWeights

_COLORS = {
    Category.TEXT: "#1f77b4",        # blue
    Category.LOGO: "#d62728",        # red
    Category.UNDERLAY: "#2ca02c",    # green
    Category.EMBELLISHMENT: "#ff7f0e",  # orange
}

_ATTR_CHOICES = [k.value for k in AttributeKind]


def render_svg(layout: Layout) -> str:
    """Deterministic SVG document with one rect per element."""
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{layout.canvas_w}" height="{layout.canvas_h}" '
        f'viewBox="0 0 {layout.canvas_w} {layout.canvas_h}">'
    ]
    for el in layout.elements:
        x = el.box.x0 * layout.canvas_w
        y = el.box.y0 * layout.canvas_h
        w = el.box.w * layout.canvas_w
        h = el.box.h * layout.canvas_h
        color = _COLORS[el.category]
        parts.append(
            f'<rect x="{x:.3f}" y="{y:.3f}" width="{w:.3f}" height="{h:.3f}" '
            f'fill="{color}" fill-opacity="0.55" stroke="{color}"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        print(text)


def prediction_from_json(text: str) -> PredictionBatch:
    """Decode {"queries": [{"probs": [5 floats], "box": [4 floats]}, ...]}."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed prediction JSON: {exc}") from None
    if not isinstance(raw, dict) or "queries" not in raw:
        raise ValidationError("prediction JSON needs a 'queries' key")
    probs, boxes = [], []
    for entry in raw["queries"]:
        probs.append([float(v) for v in entry["probs"]])
        boxes.append([float(v) for v in entry["box"]])
    return PredictionBatch(np.array(probs), np.array(boxes))


def _cmd_synth(args) -> int:
    spec = synthdata.DatasetSpec(n_samples=args.n, seed=args.seed)
    samples = synthdata.generate(spec)
    synthdata.save_dataset(args.out, samples)
    return 0


def _ablated_options(ablate: str) -> tuple[LossWeights, bool]:
    if ablate == "lp":
        return LossWeights(eta=0.0), True
    if ablate == "attr":
        return LossWeights(beta=0.0, gamma=0.0), True
    if ablate == "mask":
        return LossWeights(), False
    return LossWeights(), True


def _cmd_train(args) -> int:
    samples = synthdata.load_dataset(args.data)
    cfg = ModelConfig()
    weights, use_mask = _ablated_options(args.ablate)
    params, history = genmodel.train(
        cfg,
        samples,
        weights=weights,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch_size,
        use_random_mask=use_mask,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    genmodel.save_checkpoint(out / "checkpoint.bin", cfg, params)
    (out / "history.json").write_text(json.dumps(history))
    return 0


def _cmd_eval(args) -> int:
    cfg, params = genmodel.load_checkpoint(args.ckpt)
    samples = synthdata.load_dataset(args.data)
    if args.partial:
        report = genmodel.evaluate(
            params, cfg, samples, partial=True,
            coords_only=args.coords_only, seed=args.seed,
        )
    else:
        attr = AttributeConstraint.from_name(args.attr)
        report = genmodel.evaluate(params, cfg, samples, attr=attr, seed=args.seed)
    _write_or_print(report.to_json(), args.out)
    return 0


def _cmd_loss(args) -> int:
    pred = prediction_from_json(Path(args.pred).read_text())
    gt = layout_from_json(Path(args.gt).read_text())
    tape = nd.Tape()
    probs = tape.leaf(pred.probs)
    boxes = tape.leaf(pred.boxes)
    l_rec = float(losses.reconstruction_loss(probs, boxes, gt).value)
    l_ac = l_ad = l_plrm = 0.0
    weights = LossWeights()
    if args.attr and args.attr != AttributeKind.UNSPECIFIED.value:
        attr = AttributeConstraint.from_name(args.attr)
        # Probabilities stand in for logits: the sharpness rescale keeps the
        # soft counts meaningful for distributions as well.
        logits = tape.leaf(pred.probs)
        l_ac = float(losses.attribute_consistent_loss(logits, attr, weights.epsilon_sharpness).value)
        l_ad = float(losses.attribute_disentangled_loss(logits, attr, weights.epsilon_sharpness).value)
    if args.pl:
        pl = PartialLayout.from_json(Path(args.pl).read_text(), q_total=pred.n_queries)
        flat = losses.flatten_predictions(probs, boxes)
        # Reported with an all-ones mask, i.e. the full partial-constraint loss.
        l_plrm = float(losses.masked_partial_loss(flat, pl, RandomMask.all_ones(pl)).value)
    report = losses.loss_report(l_rec, l_ac, l_ad, l_plrm, weights)
    _write_or_print(json.dumps(report), args.out)
    return 0


def _gradcheck_battery(seed: int, points: int) -> dict[str, float]:
    from .constraints import AttributeKind as AK
    from .core import BBox, Element
    from .synthdata import DatasetSpec, generate

    rng = np.random.default_rng(seed)
    eps = losses.EPSILON_SHARPNESS
    attr = AttributeConstraint(AK.LOGO_NO_EMB)
    sample = generate(DatasetSpec(n_samples=1, seed=seed))[0]
    q = Q_MAX
    worst: dict[str, float] = {}

    def random_logits():
        return rng.uniform(-0.03, 0.03, size=(q, 5))

    def random_flat_inputs():
        raw = rng.uniform(-2.0, 2.0, size=(q, 5))
        boxes = rng.uniform(0.1, 0.9, size=(q, 4))
        return raw, boxes

    for _ in range(points):
        z = random_logits()
        worst["soft_count"] = max(worst.get("soft_count", 0.0), nd.gradcheck(
            lambda L: losses.soft_count(L, Category.TEXT, eps), [z]))
        worst["l_ac"] = max(worst.get("l_ac", 0.0), nd.gradcheck(
            lambda L: losses.attribute_consistent_loss(L, attr, eps), [z]))
        worst["l_ad"] = max(worst.get("l_ad", 0.0), nd.gradcheck(
            lambda L: losses.attribute_disentangled_loss(L, attr, eps), [z]))
        raw, boxes = random_flat_inputs()
        pl = sample.partial

        def build_flat(raw_node, box_node):
            probs = nd.softmax_over_last_axis(raw_node)
            return losses.flatten_predictions(probs, nd.sigmoid(box_node))

        worst["l_p"] = max(worst.get("l_p", 0.0), nd.gradcheck(
            lambda R, B: losses.partial_loss(build_flat(R, B), pl), [raw, boxes]))
        mask = RandomMask.all_ones(pl)
        worst["l_plrm"] = max(worst.get("l_plrm", 0.0), nd.gradcheck(
            lambda R, B: losses.masked_partial_loss(build_flat(R, B), pl, mask),
            [raw, boxes]))
        worst["l_rec"] = max(worst.get("l_rec", 0.0), nd.gradcheck(
            lambda R, B: losses.reconstruction_loss(
                nd.softmax_over_last_axis(R), nd.sigmoid(B), sample.layout),
            [raw, boxes]))
    return worst


def _cmd_gradcheck(args) -> int:
    worst = _gradcheck_battery(args.seed, args.points)
    _write_or_print(json.dumps(worst), args.out)
    return 0 if max(worst.values()) < 1e-4 else 1


def _cmd_sample_noise(args) -> int:
    attr = AttributeConstraint.from_name(args.attr)
    spec = NoiseSpec.for_attribute(attr, grid_h=1, grid_w=args.n)
    field = sample_noise(spec, args.seed)
    report = {
        "attr": args.attr,
        "n": args.n,
        "empirical_means": [float(m) for m in field.mean(axis=(1, 2))],
        "expected_means": [float(m) for m in spec.mean],
    }
    _write_or_print(json.dumps(report), args.out)
    return 0


def _cmd_gen(args) -> int:
    cfg, params = genmodel.load_checkpoint(args.ckpt)
    saliency = synthdata.load_grid(args.saliency)
    attr = AttributeConstraint.from_name(args.attr)
    g = cfg.grid_cells
    spec = NoiseSpec.for_attribute(attr, grid_h=g, grid_w=g)
    noise = sample_noise(spec, args.seed)
    partial = None
    if args.pl:
        partial = PartialLayout.from_json(Path(args.pl).read_text(), q_total=cfg.n_queries)
    fwd = genmodel.forward(params, cfg, saliency, noise, partial)
    layout = genmodel.decode(fwd.prediction())
    _write_or_print(layout_to_json(layout), args.out)
    return 0


def _cmd_render(args) -> int:
    layout = layout_from_json(Path(args.layout).read_text())
    _write_or_print(render_svg(layout), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutgen",
        description="Constrained layout generation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required,
                       help="output path (stdout if omitted where applicable)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    common(p, out_required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the toy generator")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--ablate", choices=["none", "lp", "attr", "mask"], default="none")
    common(p, out_required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--attr", choices=_ATTR_CHOICES)
    mode.add_argument("--partial", action="store_true")
    p.add_argument("--coords-only", action="store_true",
                   help="with --partial: constrain box coordinates only")
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("loss", help="compute the loss report for files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pl")
    p.add_argument("--attr", choices=_ATTR_CHOICES)
    common(p)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--points", type=int, default=5)
    common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("sample-noise", help="empirical means of attribute noise")
    p.add_argument("--attr", choices=_ATTR_CHOICES, required=True)
    p.add_argument("--n", type=int, default=100000)
    common(p)
    p.set_defaults(func=_cmd_sample_noise)

    p = sub.add_parser("gen", help="generate a layout from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--saliency", required=True)
    p.add_argument("--attr", choices=_ATTR_CHOICES, required=True)
    p.add_argument("--pl")
    common(p, out_required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("render", help="render a layout file as SVG")
    p.add_argument("--layout", required=True)
    common(p, out_required=True)
    p.set_defaults(func=_cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LayoutGenError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
