"""Command-line entry point.

Subcommands: graph build, synth, preprocess, train, eval, infer, gradcheck,
bench. Every command is fully seeded, emits a JSON run manifest with sha256
hashes of its inputs and outputs, and supports ``--json`` for single-line
machine-readable output. Failures print one line of the form
``error: <category>: <detail>`` and exit 1; usage errors exit 2.

BLAS thread pools are clamped to one thread for the whole run so numeric
outputs are bit-identical regardless of the host's threading defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import cell, figures, graph as graph_mod, preprocess, tensorio, training
from .errors import FormatError, RestError, ValidationError

MASK_CHOICES = ("sample", "scaled", "off")


# ---------------------------------------------------------------------------
# shared helpers


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(
    path: Path,
    command: str,
    config: dict,
    seed: int | None,
    inputs: list[Path],
    outputs: list[Path],
) -> None:
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _emit(args, record: dict, text: str) -> None:
    if args.json:
        print(json.dumps(record, sort_keys=True, separators=(",", ":")))
    else:
        print(text)


def _parse_kv_text(text: str, origin: str) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"{origin} line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Plain key=value config file; # starts a comment line."""
    return _parse_kv_text(Path(path).read_text(), str(path))


def _apply_overrides(mapping: dict[str, str], sets: list[str]) -> dict[str, str]:
    for item in sets or []:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return mapping


def _write_layout_csv(path: Path, names, coords) -> None:
    lines = ["name,x,y,z"]
    for name, (x, y, z) in zip(names, coords):
        lines.append(f"{name},{float(x)!r},{float(y)!r},{float(z)!r}")
    path.write_text("\n".join(lines) + "\n")


def _int_list(raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {raw!r}")
    if not values:
        raise ValidationError("expected at least one integer")
    return values


def _history_csv(path: Path, history) -> None:
    lines = ["epoch,lr,train_loss,val_loss"]
    for h in history:
        lines.append(f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.val_loss!r}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def _cmd_graph_build(args) -> int:
    layout = Path(args.layout) if args.layout else tensorio.default_layout_path()
    names, coords = tensorio.load_layout(layout)
    graph = graph_mod.build_graph(names, coords, threshold=args.k)
    out = Path(args.out)
    tensorio.save_tensor(out, graph.adjacency)
    outputs = [out]
    if args.dot:
        Path(args.dot).write_text(graph_mod.to_dot(graph))
        outputs.append(Path(args.dot))
    edges = sum(len(row) for row in graph_mod.neighbor_lists(graph)) // 2
    config = {"layout": str(layout), "k": args.k, "out": str(out)}
    _write_manifest(
        Path(f"{out}.manifest.json"), "graph build", config, None, [layout], outputs
    )
    record = {
        "command": "graph",
        "nodes": graph.n_nodes,
        "edges": edges,
        "sigma": graph.sigma,
        "out": str(out),
    }
    _emit(args, record, f"nodes={graph.n_nodes} edges={edges} sigma={graph.sigma:.6f}")
    return 0


def _cmd_synth(args) -> int:
    mapping = parse_kv_file(args.config)
    config = preprocess.SynthConfig.from_mapping(mapping)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = preprocess.make_synth_dataset(config)
    out = Path(args.out)
    written = preprocess.save_dataset(out, dataset)
    names, coords = preprocess.circle_layout(config.nodes)
    layout_path = out / "layout.csv"
    _write_layout_csv(layout_path, names, coords)
    written.append(layout_path)
    _write_manifest(
        Path(f"{out}.manifest.json"), "synth", dataclasses.asdict(config),
        config.seed, [Path(args.config)], written,
    )
    record = {
        "command": "synth",
        "clips": len(dataset),
        "classes": config.classes,
        "seconds": config.seconds,
        "features": config.n_features,
        "nodes": config.nodes,
        "out": str(out),
    }
    _emit(
        args, record,
        f"clips={len(dataset)} classes={config.classes} out={out}",
    )
    return 0


def _cmd_preprocess(args) -> int:
    stream = tensorio.load_tensor(args.stream)
    if stream.ndim != 2:
        raise ValidationError(
            f"input stream must be rank 2 (samples, channels), got rank {stream.ndim}"
        )
    clips = preprocess.preprocess_stream(
        stream, args.rate, args.clip_seconds,
        stride_seconds=args.stride, n_features=args.features,
        keep_dc=args.keep_dc_drop_nyquist,
    )
    out = Path(args.out)
    tensorio.save_tensor(out, clips)
    config = {
        "in": str(args.stream), "rate": args.rate,
        "clip_seconds": args.clip_seconds, "stride": args.stride,
        "features": args.features, "keep_dc": args.keep_dc_drop_nyquist,
    }
    _write_manifest(
        Path(f"{out}.manifest.json"), "preprocess", config, None,
        [Path(args.stream)], [out],
    )
    record = {"command": "preprocess", "clips": clips.shape[0],
              "shape": list(clips.shape), "out": str(out)}
    _emit(args, record, f"clips={clips.shape[0]} shape={clips.shape} out={out}")
    return 0


def _cmd_train(args) -> int:
    mapping = _apply_overrides(parse_kv_file(args.config), args.set)
    config = training.TrainConfig.from_mapping(mapping)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if config.model != "rest":
        raise ValidationError(
            "only the graph-coupled model can be checkpointed; baselines are "
            "library-level experiments"
        )
    data_dir = Path(args.data)
    dataset = preprocess.load_dataset(data_dir)
    layout_path = data_dir / "layout.csv"
    names, coords = tensorio.load_layout(layout_path)
    graph = graph_mod.build_graph(names, coords, threshold=config.threshold)
    result = training.train(dataset, graph, config)
    ckpt = tensorio.Checkpoint(
        weights=result.weights,
        graph=graph,
        mask=config.mask,
        schedule=config.schedule,
        seed=config.seed,
        loss=config.loss,
        rule=config.rule,
        classes=result.classes,
    )
    out = Path(args.out)
    tensorio.save_checkpoint(out, ckpt)
    history_path = Path(f"{out}.history.csv")
    _history_csv(history_path, result.history)
    figure_path = Path(f"{out}.history.png")
    figures.save_history_figure(result.history, figure_path)
    inputs = [data_dir / "features.rten", data_dir / "labels.rten",
              layout_path, Path(args.config)]
    _write_manifest(
        Path(f"{out}.manifest.json"), "train", dataclasses.asdict(config),
        config.seed, inputs, [out, history_path, figure_path],
    )
    last = result.history[-1]
    record = {
        "command": "train",
        "epochs": config.epochs,
        "final_train_loss": last.train_loss,
        "final_val_loss": last.val_loss,
        "train_accuracy": result.train_accuracy,
        "out": str(out),
    }
    _emit(
        args, record,
        f"epochs={config.epochs} train_loss={last.train_loss:.6f} "
        f"val_loss={last.val_loss:.6f} train_accuracy={result.train_accuracy:.4f} "
        f"out={out}",
    )
    return 0


def _eval_mask(ckpt: tensorio.Checkpoint, mode: str | None) -> cell.MaskConfig:
    if mode is None:
        mode = ckpt.mask.mode
    return cell.MaskConfig(ckpt.mask.keep_prob, mode)


def _cmd_eval(args) -> int:
    ckpt = tensorio.load_checkpoint(args.ckpt)
    dataset = preprocess.load_dataset(Path(args.data))
    updates = args.updates if args.updates is not None else ckpt.infer_updates
    mask_cfg = _eval_mask(ckpt, args.mask)
    class_w = (
        training.compute_class_weights(dataset.labels, ckpt.classes)
        if ckpt.loss == "weighted_ce"
        else None
    )
    report = training.evaluate(
        dataset, ckpt.weights, ckpt.graph, mask_cfg, updates,
        rule=ckpt.rule, loss_kind=ckpt.loss,
        rng=np.random.default_rng(args.seed), class_weights=class_w,
    )
    _write_manifest(
        Path("eval.manifest.json"), "eval",
        {"ckpt": str(args.ckpt), "data": str(args.data),
         "updates": updates, "mask": mask_cfg.mode, "seed": args.seed},
        args.seed, [Path(args.ckpt)], [],
    )
    record = {
        "command": "eval",
        "auroc": report.auroc,
        "weighted_f1": report.weighted_f1,
        "accuracy": report.accuracy,
        "mean_loss": report.mean_loss,
        "confusion": report.confusion.tolist(),
        "n_clips": report.n_clips,
    }
    text = (
        f"auroc={report.auroc:.4f} weighted_f1={report.weighted_f1:.4f} "
        f"accuracy={report.accuracy:.4f} loss={report.mean_loss:.6f} "
        f"n={report.n_clips}\nconfusion={report.confusion.tolist()}"
    )
    _emit(args, record, text)
    return 0


def _cmd_infer(args) -> int:
    ckpt = tensorio.load_checkpoint(args.ckpt)
    clip = tensorio.load_tensor(args.clip)
    if clip.ndim == 4:
        if args.index is None:
            raise ValidationError(
                "clip file holds multiple clips; pick one with --index"
            )
        if not 0 <= args.index < clip.shape[0]:
            raise ValidationError(
                f"--index {args.index} outside [0, {clip.shape[0]})"
            )
        clip = clip[args.index]
    elif args.index is not None:
        raise ValidationError("--index only applies to rank-4 clip files")
    if clip.ndim != 3:
        raise ValidationError(f"clip must be rank 3 (T, M, N), got rank {clip.ndim}")
    updates = args.updates if args.updates is not None else ckpt.infer_updates
    mask_cfg = _eval_mask(ckpt, args.mask)
    logits = cell.rest_forward(
        clip, ckpt.weights, ckpt.graph,
        cell.UpdateSchedule.fixed(updates), mask_cfg,
        rng=np.random.default_rng(args.seed), rule=ckpt.rule,
    )
    probs = cell.predict_proba(ckpt.weights.head, logits)
    if ckpt.weights.head.kind == "detect":
        score = float(probs[0])
        label = int(score >= 0.5)
        prob_list = [1.0 - score, score]
        text = f"score={score!r} label={label}"
    else:
        prob_list = [float(v) for v in probs]
        label = int(np.argmax(probs))
        text = f"probs={prob_list!r} label={label}"
    _write_manifest(
        Path("infer.manifest.json"), "infer",
        {"ckpt": str(args.ckpt), "clip": str(args.clip), "index": args.index,
         "updates": updates, "mask": mask_cfg.mode, "seed": args.seed},
        args.seed, [Path(args.ckpt), Path(args.clip)], [],
    )
    record = {
        "command": "infer",
        "probabilities": prob_list,
        "label": label,
        "updates": updates,
        "mask": mask_cfg.mode,
    }
    _emit(args, record, text)
    return 0


def _cmd_gradcheck(args) -> int:
    result = training.gradient_check(
        q=args.q, n=args.n, m=args.m, t_steps=args.t,
        updates=args.updates, seeds=(args.seed,),
        step=args.step, tolerance=args.tol,
    )
    _write_manifest(
        Path("gradcheck.manifest.json"), "gradcheck",
        {"q": args.q, "n": args.n, "m": args.m, "t": args.t,
         "updates": args.updates, "seed": args.seed, "step": args.step,
         "tol": args.tol},
        args.seed, [], [],
    )
    entries = [
        {"loss": loss, "updates": upd, "seed": seed, "max_rel_err": err}
        for loss, upd, seed, err in result.entries
    ]
    record = {
        "command": "gradcheck",
        "entries": entries,
        "max_rel_err": result.max_error,
        "tolerance": result.tolerance,
        "passed": result.passed,
    }
    lines = [
        f"loss={e['loss']} updates={e['updates']} seed={e['seed']} "
        f"max_rel_err={e['max_rel_err']:.3e}"
        for e in entries
    ]
    lines.append(f"max_rel_err={result.max_error:.3e} tolerance={result.tolerance:.0e}")
    _emit(args, record, "\n".join(lines))
    return 0 if result.passed else 1


def _cmd_bench(args) -> int:
    ckpt = tensorio.load_checkpoint(args.ckpt)
    warning = bench_mod.load_warning()
    if warning:
        print(warning, file=sys.stderr)
    clip_seconds = _int_list(args.clip_seconds)
    updates = args.updates if args.updates is not None else ckpt.infer_updates
    mask_cfg = _eval_mask(ckpt, args.mask)
    reports = bench_mod.bench_rest(
        ckpt.weights, ckpt.graph, mask_cfg, updates, clip_seconds,
        reps=args.reps, warmup=args.warmup, seed=args.seed, rule=ckpt.rule,
    )
    if args.gru_q:
        gru_weights = cell.init_gru(
            args.gru_q, ckpt.weights.m, np.random.default_rng(args.seed),
            head_kind=ckpt.weights.head.kind, classes=max(ckpt.classes, 2),
        )
        reports.extend(
            bench_mod.bench_gru(
                gru_weights, ckpt.graph.n_nodes, clip_seconds,
                reps=args.reps, warmup=args.warmup, seed=args.seed,
            )
        )
    out = Path(args.out)
    bench_mod.write_report_csv(out, reports)
    figure_path = Path(args.figure) if args.figure else out.with_suffix(".png")
    figures.save_latency_figure(reports, figure_path)
    _write_manifest(
        Path(f"{out}.manifest.json"), "bench",
        {"ckpt": str(args.ckpt), "clip_seconds": clip_seconds,
         "reps": args.reps, "warmup": args.warmup, "updates": updates,
         "mask": mask_cfg.mode, "gru_q": args.gru_q, "seed": args.seed},
        args.seed, [Path(args.ckpt)], [out, figure_path],
    )
    record = {
        "command": "bench",
        "rows": [dataclasses.asdict(r) for r in reports],
        "out": str(out),
        "figure": str(figure_path),
    }
    text = "\n".join(
        f"model={r.model_id} clip_seconds={r.clip_seconds} "
        f"median_ms={r.median_ns / 1e6:.3f} p90_ms={r.p90_ns / 1e6:.3f}"
        for r in reports
    )
    _emit(args, record, text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reststream",
        description="streaming graph-recurrent classification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_graph = sub.add_parser("graph", help="coupling-graph utilities")
    graph_sub = p_graph.add_subparsers(dest="graph_command", required=True)
    p_build = graph_sub.add_parser("build", help="build adjacency from a layout")
    p_build.add_argument("--layout", help="layout csv (default: bundled 19-channel)")
    p_build.add_argument("--k", type=float, default=0.9, help="distance cutoff")
    p_build.add_argument("--out", required=True, help="adjacency tensor output")
    p_build.add_argument("--dot", help="also write a DOT rendering")
    p_build.add_argument("--json", action="store_true")
    p_build.set_defaults(func=_cmd_graph_build)

    p_synth = sub.add_parser("synth", help="generate the synthetic task")
    p_synth.add_argument("--config", required=True, help="key=value config file")
    p_synth.add_argument("--seed", type=int, help="override the config seed")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--json", action="store_true")
    p_synth.set_defaults(func=_cmd_synth)

    p_prep = sub.add_parser("preprocess", help="stream -> spectral feature clips")
    p_prep.add_argument("--in", dest="stream", required=True, help="rank-2 tensor file")
    p_prep.add_argument("--rate", type=int, required=True, help="samples per second")
    p_prep.add_argument("--clip-seconds", type=int, required=True)
    p_prep.add_argument("--stride", type=int, help="clip stride in seconds")
    p_prep.add_argument("--features", type=int, help="spectral bins per window")
    p_prep.add_argument(
        "--keep-dc-drop-nyquist", action="store_true",
        help="keep the offset bin and drop the top bin instead",
    )
    p_prep.add_argument("--out", required=True)
    p_prep.add_argument("--json", action="store_true")
    p_prep.set_defaults(func=_cmd_preprocess)

    p_train = sub.add_parser("train", help="train a model on a dataset directory")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--config", required=True)
    p_train.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config entry (repeatable)",
    )
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--json", action="store_true")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--updates", type=int, help="refinements per step")
    p_eval.add_argument("--mask", choices=MASK_CHOICES)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--json", action="store_true")
    p_eval.set_defaults(func=_cmd_eval)

    p_infer = sub.add_parser("infer", help="score one clip")
    p_infer.add_argument("--ckpt", required=True)
    p_infer.add_argument("--clip", required=True, help="rank-3 or rank-4 tensor file")
    p_infer.add_argument("--index", type=int, help="clip index for rank-4 files")
    p_infer.add_argument("--updates", type=int)
    p_infer.add_argument("--mask", choices=MASK_CHOICES)
    p_infer.add_argument("--seed", type=int, default=0)
    p_infer.add_argument("--json", action="store_true")
    p_infer.set_defaults(func=_cmd_infer)

    p_grad = sub.add_parser("gradcheck", help="backward vs finite differences")
    p_grad.add_argument("--q", type=int, default=4)
    p_grad.add_argument("--n", type=int, default=3)
    p_grad.add_argument("--m", type=int, default=5)
    p_grad.add_argument("--t", type=int, default=3)
    p_grad.add_argument("--updates", type=int, default=2)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--json", action="store_true")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_bench = sub.add_parser("bench", help="latency and op-count report")
    p_bench.add_argument("--ckpt", required=True)
    p_bench.add_argument(
        "--clip-seconds", default="4,6,8,10,12,14",
        help="comma-separated clip lengths",
    )
    p_bench.add_argument("--reps", type=int, default=1000)
    p_bench.add_argument("--warmup", type=int, default=100)
    p_bench.add_argument("--updates", type=int)
    p_bench.add_argument("--mask", choices=MASK_CHOICES)
    p_bench.add_argument("--gru-q", type=int, help="also time a gated baseline")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True, help="report csv path")
    p_bench.add_argument("--figure", help="figure path (default: csv with .png)")
    p_bench.add_argument("--json", action="store_true")
    p_bench.set_defaults(func=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except RestError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except IsADirectoryError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
