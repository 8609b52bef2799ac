"""Command-line driver tying the whole pipeline together.

Subcommands::

    classify   top-k class scores for each image
    explain    full-network pixel relevance map (PNG)
    graph      channel relevance graph (DOT + JSON)
    paths      top-k relevance paths, highlighted in the DOT output
    heatmap    path-restricted relevance/activation maps at one graph layer
    deconv     pixel-space reconstruction of feature channels
    metrics    restricted-vs-full prediction error sweep over k (CSV)

Every subcommand loads the model from ``--arch`` (JSON) and ``--weights``
(LRPW container) and processes one or more ``--image`` inputs. Outputs land
in ``--out`` (default: ``$LRP_OUT_DIR``, else the working directory) and are
byte-identical on reruns with the same inputs and flags. Images are
processed concurrently up to ``--jobs`` workers; printed blocks stay in
input order regardless.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .deconv import build_deconv, reconstruct_feature
from .errors import CliError, RelpropError
from .graph import (
    build_relevance_graph,
    get_optimizer,
    to_dot,
    to_json,
    top_k_paths,
)
from .heatmap import COLORMAPS, activation_heatmap, relevance_heatmap, render
from .imageio import denormalize_to_rgb, load_image, write_image
from .lrp import default_rules, lrp_explain, parse_rules, rules_from_doc
from .metrics import format_table, k_sweep, to_csv
from .network import (
    forward_trace,
    load_arch,
    network_from_arch,
    top_scores,
)
from .weights import read_weights

# ---------------------------------------------------------------------------
# Argument plumbing


def _existing_path(text: str) -> str:
    if not os.path.exists(text):
        raise argparse.ArgumentTypeError(f"path does not exist: {text}")
    return text


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _model_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model and inputs")
    g.add_argument("--arch", required=True, type=_existing_path,
                   help="architecture JSON file")
    g.add_argument("--weights", required=True, type=_existing_path,
                   help="LRPW weight container")
    g.add_argument("--labels", type=_existing_path,
                   help="newline-delimited class label file")
    g.add_argument("--image", required=True, type=_existing_path,
                   action="append", metavar="PATH",
                   help="input image (repeat for several)")
    g.add_argument("--out", metavar="DIR",
                   help="output directory (default: $LRP_OUT_DIR or '.')")
    g.add_argument("--jobs", type=_positive_int, default=1,
                   help="concurrent image workers (default 1)")
    return p


def _analysis_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("attribution")
    g.add_argument("--class", dest="class_spec", metavar="INDEX|LABEL",
                   help="class to explain (default: the predicted class)")
    g.add_argument("--rules", metavar="SPEC",
                   help="rule assignment, e.g. '0=zb;1-16=gamma:0.25;17-36=epsilon'")
    return p


def _render_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("rendering")
    g.add_argument("--colormap", default="seismic", choices=sorted(COLORMAPS),
                   help="color table (default seismic)")
    g.add_argument("--overlay", action="store_true",
                   help="alpha-blend the map over the input photo")
    g.add_argument("--alpha", type=float, default=0.5,
                   help="overlay opacity (default 0.5)")
    g.add_argument("--upscale", type=_positive_int, metavar="N",
                   help="resample the map to N x N before coloring")
    g.add_argument("--mode", default="bilinear", choices=("bilinear", "nearest"),
                   help="resampling kernel (default bilinear)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relprop",
        description="Relevance-propagation analysis of convolutional classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    model = _model_parser()
    analysis = _analysis_parser()
    rendering = _render_parser()

    p = sub.add_parser("classify", parents=[model],
                       help="print the top classes per image")
    p.add_argument("--top", type=_positive_int, default=5,
                   help="how many classes to print (default 5)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("explain", parents=[model, analysis, rendering],
                       help="write the full pixel relevance map")
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("graph", parents=[model, analysis],
                       help="export the channel relevance graph")
    p.add_argument("--max-edges", type=_positive_int, metavar="N",
                   help="keep only the N heaviest edges per layer pair in DOT")
    p.set_defaults(func=_cmd_graph)

    p = sub.add_parser("paths", parents=[model, analysis],
                       help="list and highlight the strongest relevance paths")
    p.add_argument("--k", type=_positive_int, default=5,
                   help="number of paths (default 5)")
    p.add_argument("--aggregate", default="sum", choices=("sum", "min"),
                   help="path weight aggregation (default sum)")
    p.add_argument("--max-edges", type=_positive_int, metavar="N",
                   help="keep only the N heaviest edges per layer pair in DOT")
    p.set_defaults(func=_cmd_paths)

    p = sub.add_parser("heatmap", parents=[model, analysis, rendering],
                       help="render path-restricted maps at one graph layer")
    p.add_argument("--k", type=_positive_int, default=5,
                   help="number of paths to restrict to (default 5)")
    p.add_argument("--layer", type=int, default=0, metavar="G",
                   help="graph layer index, 0 = input boundary (default 0)")
    p.add_argument("--kind", default="both",
                   choices=("relevance", "activation", "both"),
                   help="which map(s) to write (default both)")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("deconv", parents=[model, analysis],
                       help="reconstruct feature channels in pixel space")
    p.add_argument("--layer", type=int, required=True, metavar="I",
                   help="network layer index of a conv layer")
    p.add_argument("--channel", type=int, metavar="C",
                   help="channel to reconstruct (default: auto-selected)")
    p.add_argument("--deconv-relu", dest="deconv_relu",
                   action=argparse.BooleanOptionalAction, default=True,
                   help="apply relu in the mirror (default on)")
    p.add_argument("--getopt-literal", action="store_true",
                   help="invert the auto-selection threshold")
    p.set_defaults(func=_cmd_deconv)

    p = sub.add_parser("metrics", parents=[model, analysis],
                       help="sweep k and compare restricted vs full predictions")
    p.add_argument("--k-max", type=_positive_int, required=True,
                   help="largest k to evaluate")
    p.add_argument("--k-rule", default="mean", choices=("mean", "elbow"),
                   help="how to choose k from the sweep (default mean)")
    p.set_defaults(func=_cmd_metrics)
    return parser


# ---------------------------------------------------------------------------
# Shared runtime helpers


def _read_labels(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _load_model(args):
    """Build the network and rule assignment the flags describe."""
    layers, meta = load_arch(args.arch)
    params = read_weights(args.weights)
    labels = _read_labels(args.labels) if args.labels else None
    net = network_from_arch(layers, meta, params, labels=labels)
    if getattr(args, "rules", None):
        rules = parse_rules(args.rules)
    elif meta.get("rules"):
        rules = rules_from_doc(meta["rules"])
    else:
        rules = default_rules(net)
    return net, rules


def _resolve_class(spec, net) -> int | None:
    """Turn ``--class`` into an index; ``None`` means use the argmax."""
    if spec is None:
        return None
    try:
        index = int(spec)
    except ValueError:
        labels = net.labels
        if not labels:
            raise CliError(
                f"class {spec!r} is not an index and no labels are available; "
                "pass --labels or use a numeric class"
            )
        matches = [i for i, name in enumerate(labels) if name == spec]
        if not matches:
            lowered = spec.lower()
            matches = [i for i, name in enumerate(labels) if name.lower() == lowered]
        if len(matches) != 1:
            raise CliError(f"class label {spec!r} matches {len(matches)} entries")
        return matches[0]
    n_classes = net.boundary_shapes[-1][0]
    if not 0 <= index < n_classes:
        raise CliError(f"class index {index} out of range for {n_classes} outputs")
    return index


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("LRP_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _for_each_image(args, work) -> int:
    """Run ``work(image_path)`` per image, concurrently when asked.

    ``work`` returns the text block to print; blocks are printed in input
    order so concurrent runs stay reproducible.
    """
    images = list(args.image)
    if args.jobs > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            blocks = list(pool.map(work, images))
    else:
        blocks = [work(path) for path in images]
    for block in blocks:
        if block:
            print(block)
    return 0


def _prepare(net, rules, args, image_path):
    """Load one image and run the forward/backward pair the flags select."""
    x = load_image(image_path, net.input_shape[1:], net.normalization)
    trace = forward_trace(net, x)
    class_index = _resolve_class(args.class_spec, net)
    if class_index is None:
        class_index = int(np.argmax(trace.scores))
    rmap = lrp_explain(trace, class_index, rules)
    return x, trace, class_index, rmap


def _class_name(net, index: int) -> str:
    if net.labels:
        return f"{index} ({net.labels[index]})"
    return str(index)


def _render_to(args, hm, out_path, overlay_source=None):
    overlay = None
    if args.overlay:
        if overlay_source is None:
            raise CliError("overlay requested but no source image is available")
        overlay = overlay_source
    rgb, scale = render(
        hm,
        colormap=args.colormap,
        upscale=args.upscale,
        mode=args.mode,
        overlay=overlay,
        alpha=args.alpha,
    )
    write_image(out_path, rgb)
    return scale


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_classify(args) -> int:
    net, _ = _load_model(args)

    def work(image_path):
        x = load_image(image_path, net.input_shape[1:], net.normalization)
        trace = forward_trace(net, x)
        rows = top_scores(trace.scores, net.labels, k=args.top)
        stem = Path(image_path).name
        if args.json:
            return json.dumps({
                "image": stem,
                "top": [
                    {"index": i, "label": label, "logit": score, "prob": prob}
                    for i, label, score, prob in rows
                ],
            })
        lines = [f"{stem}:"]
        for rank, (i, label, score, prob) in enumerate(rows, start=1):
            lines.append(f"  {rank}. {label} [{i}] logit {score:.4f} prob {prob:.4f}")
        return "\n".join(lines)

    return _for_each_image(args, work)


def _cmd_explain(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)

    def work(image_path):
        x, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        hm = relevance_heatmap(rmap, (), 0)
        stem = Path(image_path).stem
        out_path = out / f"{stem}_relevance.png"
        overlay = denormalize_to_rgb(x, net.normalization) if args.overlay else None
        scale = _render_to(args, hm, out_path, overlay_source=overlay)
        dropped = sum(rmap.dropped.values())
        score = float(trace.scores[class_index])
        return (
            f"{Path(image_path).name}: class {_class_name(net, class_index)} "
            f"score {score:.6g}, pixel relevance sum {float(hm.values.sum()):.6g}, "
            f"dropped {dropped}, scale {scale:.6g} -> {out_path}"
        )

    return _for_each_image(args, work)


def _cmd_graph(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)

    def work(image_path):
        _, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        graph = build_relevance_graph(trace, rmap)
        stem = Path(image_path).stem
        dot_path = out / f"{stem}_graph.dot"
        json_path = out / f"{stem}_graph.json"
        dot_path.write_text(to_dot(graph, max_edges_per_pair=args.max_edges))
        json_path.write_text(json.dumps(to_json(graph), indent=2) + "\n")
        return (
            f"{Path(image_path).name}: class {_class_name(net, class_index)}, "
            f"{graph.n_layers} graph layers, {graph.total_paths()} paths "
            f"-> {dot_path}, {json_path}"
        )

    return _for_each_image(args, work)


def _cmd_paths(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)

    def work(image_path):
        _, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        graph = build_relevance_graph(trace, rmap)
        paths = top_k_paths(graph, args.k, aggregate=args.aggregate)
        stem = Path(image_path).stem
        dot_path = out / f"{stem}_paths_k{args.k}.dot"
        dot_path.write_text(
            to_dot(graph, paths, max_edges_per_pair=args.max_edges)
        )
        lines = [
            f"{Path(image_path).name}: class {_class_name(net, class_index)}, "
            f"top {len(paths)} paths ({args.aggregate}) -> {dot_path}"
        ]
        for rank, p in enumerate(paths, start=1):
            chain = ">".join(str(c) for c in p.channels)
            lines.append(f"  {rank}. weight {p.weight:.6g} channels {chain}")
        return "\n".join(lines)

    return _for_each_image(args, work)


def _cmd_heatmap(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)
    kinds = ("relevance", "activation") if args.kind == "both" else (args.kind,)

    def work(image_path):
        x, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        graph = build_relevance_graph(trace, rmap)
        paths = top_k_paths(graph, args.k)
        stem = Path(image_path).stem
        overlay = denormalize_to_rgb(x, net.normalization) if args.overlay else None
        lines = [
            f"{Path(image_path).name}: class {_class_name(net, class_index)}, "
            f"layer {args.layer}, k={args.k}"
        ]
        for kind in kinds:
            if kind == "relevance":
                hm = relevance_heatmap(rmap, paths, args.layer)
            else:
                hm = activation_heatmap(trace, paths, args.layer)
            out_path = out / f"{stem}_{kind}_L{args.layer}_k{args.k}.png"
            scale = _render_to(args, hm, out_path, overlay_source=overlay)
            lines.append(f"  {kind}: scale {scale:.6g} -> {out_path}")
        return "\n".join(lines)

    return _for_each_image(args, work)


def _reconstruction_rgb(recon: np.ndarray) -> np.ndarray:
    """Min-max map a pixel-space reconstruction to displayable RGB."""
    r = np.asarray(recon, dtype=np.float64)
    if r.shape[0] == 1:
        r = np.repeat(r, 3, axis=0)
    elif r.shape[0] != 3:
        r = np.repeat(r.sum(axis=0, keepdims=True), 3, axis=0)
    span = float(r.max() - r.min())
    if span == 0.0:
        return np.full(r.shape[1:] + (3,), 128, dtype=np.uint8)
    scaled = np.round((r - r.min()) / span * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _auto_channels(net, rules, args, trace, rmap) -> list[int]:
    """Channels whose forward/backward deviation stands out at --layer."""
    graph = build_relevance_graph(trace, rmap)
    layer_ids = list(graph.layer_ids)
    if args.layer not in layer_ids:
        raise CliError(
            f"layer {args.layer} has no graph boundary; conv layers: "
            f"{[i for i in layer_ids if i >= 0]}"
        )
    g = layer_ids.index(args.layer)
    forward_sums = []
    for net_id in layer_ids:
        if net_id < 0:
            tensor = trace.inputs[0]
        else:
            act_index = net.relu_after(net_id)
            tensor = trace.outputs[net_id if act_index is None else act_index]
        forward_sums.append(tensor.reshape(tensor.shape[0], -1).sum(axis=1))
    kept = get_optimizer(
        forward_sums, list(graph.scores), g, literal=args.getopt_literal
    )
    return [int(c) for c in np.nonzero(kept)[0]]


def _cmd_deconv(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)
    dec = build_deconv(net)

    def work(image_path):
        x, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        if args.channel is not None:
            channels = [args.channel]
            how = "requested"
        else:
            channels = _auto_channels(net, rules, args, trace, rmap)
            how = "auto-selected"
            if not channels:
                return (
                    f"{Path(image_path).name}: no channel stands out at layer "
                    f"{args.layer}; pass --channel explicitly"
                )
        stem = Path(image_path).stem
        lines = [
            f"{Path(image_path).name}: class {_class_name(net, class_index)}, "
            f"layer {args.layer}, {how} channels {channels}"
        ]
        for channel in channels:
            try:
                recon = reconstruct_feature(
                    dec, x, args.layer, channel, apply_relu=args.deconv_relu
                )
            except IndexError as exc:
                raise CliError(str(exc)) from exc
            out_path = out / f"{stem}_deconv_L{args.layer}_C{channel}.png"
            write_image(out_path, _reconstruction_rgb(recon))
            lines.append(f"  channel {channel} -> {out_path}")
        return "\n".join(lines)

    return _for_each_image(args, work)


def _cmd_metrics(args) -> int:
    net, rules = _load_model(args)
    out = _out_dir(args)
    inner_jobs = args.jobs if len(args.image) == 1 else 1

    def work(image_path):
        x, trace, class_index, rmap = _prepare(net, rules, args, image_path)
        graph = build_relevance_graph(trace, rmap)
        report = k_sweep(net, x, graph, args.k_max, rule=args.k_rule,
                         jobs=inner_jobs)
        stem = Path(image_path).stem
        csv_path = out / f"{stem}_metrics.csv"
        csv_path.write_text(to_csv(report))
        lines = [
            f"{Path(image_path).name}: class {_class_name(net, class_index)} "
            f"-> {csv_path}",
            format_table(report),
        ]
        return "\n".join(lines)

    return _for_each_image(args, work)


def main(argv=None) -> int:
    """Entry point; returns a process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RelpropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
