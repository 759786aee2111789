"""Command-line entry point.

One binary, six subcommands:

    circuitgcl ingest    netlist (+ optional SPF) -> labeled graph file
    circuitgcl synth     seeded synthetic circuit -> labeled graph file
    circuitgcl pretrain  graph file -> encoder checkpoint + report
    circuitgcl train     graph + encoder -> task model + report
    circuitgcl eval      held-out graph + encoder + model -> report
    circuitgcl gradcheck run the gradient and quadrature oracles

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error, 3 unreadable or invalid input file.

Every run that takes a config resolves flag overrides on top of the file
and writes the result next to its primary output as
`<output>.resolved.cfg`.  Reports are JSON with a deterministic `payload`
region whose sha256 is stored alongside; timestamps stay outside the
hashed region so reruns with the same seed hash identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict

import numpy as np

from . import config as cfgmod
from . import verify
from ._errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    GraphFormatError,
    NetlistParseError,
    NumericError,
    TrainingError,
    UnknownNameError,
)
from .graphs import homogenize
from .netlist import (
    CircuitGraph,
    bin_ground_caps,
    coupling_dataset,
    ground_cap_dataset,
    in_range_mask,
    normalize_labels,
    parse_netlist,
    parse_spf_labels,
)
from .scatter import (
    encode,
    export_embeddings,
    load_checkpoint,
    normalize_embeddings,
    pretrain,
    save_checkpoint,
)
from .synth import synth_generate
from .tasks import (
    EDGE_REGRESSION,
    classification_metrics,
    load_task_model,
    predict_edges,
    predict_node_classes,
    regression_metrics,
    save_task_model,
    train_task,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3


class _Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _say(*parts):
    print(" ".join(str(p) for p in parts))


# ---------------------------------------------------------------------------
# shared plumbing

def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None


def _read_text(path):
    try:
        with open(path, "r") as fh:
            return fh.read()
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None


def _write_bytes(path, blob):
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise _Failure(EXIT_IO,
                       f"cannot write {path}: {exc.strerror}") from None


def _write_text(path, text):
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise _Failure(EXIT_IO,
                       f"cannot write {path}: {exc.strerror}") from None


def _load_circuit(path):
    blob = _read_bytes(path)
    try:
        return CircuitGraph.from_bytes(blob)
    except GraphFormatError as exc:
        raise _Failure(EXIT_IO, f"{path}: {exc}") from None


def _load_encoder(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise _Failure(EXIT_IO, f"{path}: {exc}") from None


def _load_model(path):
    try:
        return load_task_model(path)
    except OSError as exc:
        raise _Failure(EXIT_IO, f"cannot read {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise _Failure(EXIT_IO, f"{path}: {exc}") from None


def canonical_payload_bytes(payload):
    """The hashed report region: canonical JSON, free of timestamps."""
    return json.dumps(payload, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def write_report(path, payload):
    digest = hashlib.sha256(canonical_payload_bytes(payload)).hexdigest()
    doc = {
        "payload": payload,
        "payload_sha256": digest,
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return digest


def _text_sibling(path):
    return (path[: -len(".json")] if path.endswith(".json") else path) + ".txt"


def _write_snapshot(run_cfg, primary_out):
    path = f"{primary_out}.resolved.cfg"
    _write_text(path, run_cfg.snapshot_text())
    return path


def _resolve(args, overrides):
    return cfgmod.resolve(config_path=getattr(args, "config", None),
                          overrides=overrides,
                          seed_flag=getattr(args, "seed", None))


def _need_path(run_cfg, flag_value, key, flag_name):
    value = flag_value if flag_value is not None else run_cfg.path(key)
    if value is None:
        raise ConfigError(f"{flag_name} is required (flag or [paths] {key})")
    return value


def _graph_summary(cg, hg):
    s = cg.summary()
    return {
        "n": hg.n,
        "nodes": s["nodes"],
        "struct_edges": s["struct_edges"],
        "candidate_edges": s["candidate_edges"],
        "labeled_candidates": s["labeled_candidates"],
        "ground_caps": s["ground_caps"],
    }


def _print_summary(cg):
    s = cg.summary()
    nodes = ", ".join(f"{k}={v}" for k, v in sorted(s["nodes"].items()))
    struct = ", ".join(f"{k}={v}" for k, v in sorted(s["struct_edges"].items()))
    cands = ", ".join(f"{k}={v}"
                      for k, v in sorted(s["candidate_edges"].items()))
    _say(f"nodes: {nodes}")
    _say(f"struct edges: {struct}")
    _say(f"candidates: {cands} (labeled {s['labeled_candidates']})")
    _say(f"ground caps: {s['ground_caps']}")


def _task_labels(cg, hg, task, spec):
    """Labeled training data for a task, filtered to the declared range."""
    if task == EDGE_REGRESSION:
        pairs, farads = coupling_dataset(cg)
        keep = in_range_mask(farads, spec)
        return pairs[keep], normalize_labels(farads[keep], spec)
    ids, farads = ground_cap_dataset(cg)
    keep = in_range_mask(farads, spec)
    return ids[keep], bin_ground_caps(normalize_labels(farads[keep], spec),
                                      spec.n_classes)


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args):
    overrides = {}
    run_cfg = _resolve(args, overrides)
    netlist_path = _need_path(run_cfg, args.netlist, "netlist", "--netlist")
    out_path = _need_path(run_cfg, args.out, "out", "-o")
    spf_path = args.spf if args.spf is not None else run_cfg.path("spf")

    text = _read_text(netlist_path)
    try:
        cg = parse_netlist(text)
    except (NetlistParseError, UnknownNameError) as exc:
        raise _Failure(EXIT_IO, f"{netlist_path}: {exc}") from None
    if spf_path:
        spf_text = _read_text(spf_path)
        try:
            parse_spf_labels(spf_text, cg)
        except (NetlistParseError, UnknownNameError) as exc:
            raise _Failure(EXIT_IO, f"{spf_path}: {exc}") from None
    hg = homogenize(cg)

    blob = cg.to_bytes()
    _write_bytes(out_path, blob)
    if args.homo:
        _write_bytes(args.homo, hg.to_bytes())
    _write_snapshot(run_cfg, out_path)
    _print_summary(cg)
    _say(f"wrote {out_path} ({len(blob)} bytes)")
    return EXIT_OK


def cmd_synth(args):
    overrides = {
        ("synth", "cells"): args.cells,
        ("synth", "coupling_density"): args.coupling_density,
        ("synth", "noise_sigma"): args.noise_sigma,
    }
    run_cfg = _resolve(args, overrides)
    out_path = _need_path(run_cfg, args.out, "out", "-o")
    cg = synth_generate(run_cfg.synth_config())
    blob = cg.to_bytes()
    _write_bytes(out_path, blob)
    _write_snapshot(run_cfg, out_path)
    _print_summary(cg)
    _say(f"wrote {out_path} ({len(blob)} bytes)")
    return EXIT_OK


def cmd_pretrain(args):
    overrides = {
        ("pretrain", "epochs"): args.epochs,
        ("pretrain", "learning_rate"): args.learning_rate,
        ("pretrain", "hidden_dim"): args.hidden_dim,
        ("pretrain", "n_layers"): args.n_layers,
        ("pretrain", "activation"): args.activation,
        ("pretrain", "dropout_rate"): args.dropout_rate,
        ("pretrain", "scatter_weight"): args.scatter_weight,
        ("pretrain", "ema_tau"): args.ema_tau,
        ("pretrain", "degree_feature"): args.degree_feature,
    }
    run_cfg = _resolve(args, overrides)
    graph_path = _need_path(run_cfg, args.graph, "graph", "--graph")
    out_path = _need_path(run_cfg, args.out, "out", "-o")
    report_path = (args.report if args.report is not None
                   else run_cfg.path("report")) or f"{out_path}.report.json"

    cg = _load_circuit(graph_path)
    hg = homogenize(cg)
    pre_cfg = run_cfg.pretrain_config()
    result = pretrain(hg, pre_cfg)
    save_checkpoint(out_path, result.theta, pre_cfg.seed)
    emb_path = (args.embeddings if args.embeddings is not None
                else run_cfg.path("embeddings"))
    if emb_path:
        export_embeddings(result.embeddings, emb_path)

    payload = {
        "version": 1,
        "command": "pretrain",
        "seed": run_cfg.seed,
        "graph": _graph_summary(cg, hg),
        "config": asdict(pre_cfg),
        "history": result.history,
        "final": result.history[-1] if result.history else None,
    }
    digest = write_report(report_path, payload)
    last = result.history[-1] if result.history else {}
    lines = ["epoch  alignment      scattering     total"]
    for row in result.history:
        lines.append(f"{row['epoch']:>5d}  {row['alignment']: .6e} "
                     f"{row['scattering']: .6e} {row['total']: .6e}")
    _write_text(_text_sibling(report_path), "\n".join(lines) + "\n")
    _write_snapshot(run_cfg, out_path)
    _say(f"pretrained {pre_cfg.epochs} epochs on {hg.n} nodes; "
         f"final total {last.get('total', float('nan')):.6f}")
    _say(f"wrote {out_path}, {report_path} (payload sha256 {digest[:16]}…)")
    return EXIT_OK


def cmd_train(args):
    overrides = {
        ("train", "task"): args.task,
        ("train", "loss"): args.loss,
        ("train", "epochs"): args.epochs,
        ("train", "learning_rate"): args.learning_rate,
        ("train", "batch_size"): args.batch_size,
        ("train", "hidden_dim"): args.hidden_dim,
        ("train", "n_layers"): args.n_layers,
        ("train", "sigma_noise"): args.sigma_noise,
        ("train", "gmm_components"): args.gmm_components,
        ("train", "focal_gamma"): args.focal_gamma,
        ("train", "n_classes"): args.n_classes,
        ("train", "fine_tune_embeddings"): args.fine_tune_embeddings,
    }
    run_cfg = _resolve(args, overrides)
    graph_path = _need_path(run_cfg, args.graph, "graph", "--graph")
    encoder_path = _need_path(run_cfg, args.encoder, "encoder", "--encoder")
    out_path = _need_path(run_cfg, args.out, "out", "-o")
    report_path = (args.report if args.report is not None
                   else run_cfg.path("report")) or f"{out_path}.report.json"

    cg = _load_circuit(graph_path)
    hg = homogenize(cg)
    theta, _ = _load_encoder(encoder_path)
    emb = normalize_embeddings(encode(theta, hg))
    task_cfg = run_cfg.task_config()
    spec = run_cfg.label_spec()
    if (task_cfg.task != EDGE_REGRESSION
            and task_cfg.n_classes != spec.n_classes):
        raise ConfigError(
            f"[train] n_classes ({task_cfg.n_classes}) and [labels] "
            f"n_classes ({spec.n_classes}) disagree")
    indices, values = _task_labels(cg, hg, task_cfg.task, spec)

    model = train_task(hg, emb, (indices, values), task_cfg)
    save_task_model(out_path, model)

    if task_cfg.task == EDGE_REGRESSION:
        preds = predict_edges(model, hg, emb, indices)
        metrics = regression_metrics(preds, values)
        label_stats = {"count": int(len(values)),
                       "bins": metrics.per_bin_count}
    else:
        preds, _ = predict_node_classes(model, hg, emb, indices)
        metrics = classification_metrics(
            preds, values, excluded=run_cfg.excluded_classes(),
            n_classes=task_cfg.n_classes)
        label_stats = {
            "count": int(len(values)),
            "bins": np.bincount(values,
                                minlength=task_cfg.n_classes).tolist(),
        }
    metrics.loss_kind = task_cfg.loss_kind

    payload = {
        "version": 1,
        "command": "train",
        "seed": run_cfg.seed,
        "task": task_cfg.task,
        "loss": task_cfg.loss_kind,
        "graph": _graph_summary(cg, hg),
        "labels": label_stats,
        "config": asdict(task_cfg),
        "history": model.history,
        "train_metrics": metrics.to_json_dict(),
    }
    if model.gmm_prior is not None:
        payload["gmm_prior"] = model.gmm_prior.to_json_dict()
    if model.class_prior is not None:
        payload["class_prior"] = list(model.class_prior)
    digest = write_report(report_path, payload)
    _write_text(_text_sibling(report_path), metrics.to_text() + "\n")
    _write_snapshot(run_cfg, out_path)
    _say(f"trained {task_cfg.loss_kind} on {len(values)} labels; "
         f"final loss {model.history[-1]['loss']:.6f}")
    _say(f"wrote {out_path}, {report_path} (payload sha256 {digest[:16]}…)")
    return EXIT_OK


def cmd_eval(args):
    overrides = {("eval", "excluded_classes"): args.excluded_classes}
    run_cfg = _resolve(args, overrides)
    graph_path = _need_path(run_cfg, args.graph, "graph", "--graph")
    encoder_path = _need_path(run_cfg, args.encoder, "encoder", "--encoder")
    model_path = _need_path(run_cfg, args.model, "model", "--model")
    report_path = _need_path(run_cfg, args.report, "report", "--report")

    cg = _load_circuit(graph_path)
    hg = homogenize(cg)
    theta, _ = _load_encoder(encoder_path)
    model = _load_model(model_path)
    emb = normalize_embeddings(encode(theta, hg))
    spec = run_cfg.label_spec()
    indices, values = _task_labels(cg, hg, model.task, spec)
    if len(indices) == 0:
        raise _Failure(EXIT_IO,
                       f"{graph_path}: no labels in range to evaluate")

    if model.task == EDGE_REGRESSION:
        preds = predict_edges(model, hg, emb, indices)
        metrics = regression_metrics(preds, values)
    else:
        preds, _ = predict_node_classes(model, hg, emb, indices)
        metrics = classification_metrics(
            preds, values, excluded=run_cfg.excluded_classes(),
            n_classes=model.n_classes)
    metrics.loss_kind = model.loss_kind

    payload = {
        "version": 1,
        "command": "eval",
        "seed": run_cfg.seed,
        "task": model.task,
        "loss": model.loss_kind,
        "graph": _graph_summary(cg, hg),
        "model": {"emb_dim": model.emb_dim, "n_classes": model.n_classes},
        "metrics": metrics.to_json_dict(),
    }
    digest = write_report(report_path, payload)
    _write_text(_text_sibling(report_path), metrics.to_text() + "\n")
    _write_snapshot(run_cfg, report_path)
    _say(metrics.to_text())
    _say(f"wrote {report_path} (payload sha256 {digest[:16]}…)")
    return EXIT_OK


def cmd_gradcheck(args):
    rows, grads_ok = verify.run_gradient_checks(
        tolerance=args.tolerance, points=args.points,
        inject_bug=args.inject_bug)
    _say(f"gradient checks: {args.points} points per case, "
         f"tolerance {args.tolerance:.1e}")
    for name, err in rows:
        status = "ok" if err < args.tolerance else "FAIL"
        _say(f"  {name:<24s} {err:.3e}  {status}")
    worst, quad_ok = verify.run_quadrature_checks(n_priors=args.priors)
    status = "ok" if quad_ok else "FAIL"
    _say(f"quadrature: worst {worst:.3e} over {args.priors} priors, "
         f"tolerance {verify.QUADRATURE_TOLERANCE:.1e}  {status}")
    if grads_ok and quad_ok:
        _say("PASS")
        return EXIT_OK
    _say("FAIL")
    return EXIT_VERIFY


# ---------------------------------------------------------------------------
# parser

def _bool_flag(raw):
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {raw!r}")


def _add_common(sub):
    sub.add_argument("--config", help="sectioned key=value config file")
    sub.add_argument("--seed", type=int,
                     help="run seed (falls back to [run] seed, then the "
                          f"{cfgmod.SEED_ENV_VAR} environment variable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="circuitgcl",
        description="Circuit graphs, scattering pretraining, and "
                    "label-rebalanced parasitic prediction.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest",
                        help="parse a netlist (and optional SPF) into a "
                             "labeled graph file")
    _add_common(p)
    p.add_argument("--netlist", help="SPICE-subset netlist path")
    p.add_argument("--spf", help="parasitic label file path")
    p.add_argument("-o", "--out", help="output graph file")
    p.add_argument("--homo", help="also write the homogenized adjacency")
    p.set_defaults(func=cmd_ingest)

    p = subs.add_parser("synth", help="generate a seeded synthetic circuit")
    _add_common(p)
    p.add_argument("--cells", type=int, help="number of standard cells")
    p.add_argument("--coupling-density", type=float,
                   help="fraction of candidate pairs labeled, in (0, 1]")
    p.add_argument("--noise-sigma", type=float,
                   help="log-domain label noise")
    p.add_argument("-o", "--out", help="output graph file")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("pretrain",
                        help="self-supervised embedding pretraining")
    _add_common(p)
    p.add_argument("--graph", help="input graph file")
    p.add_argument("-o", "--out", help="encoder checkpoint path")
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--embeddings", help="also export embeddings as CSV")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--activation", choices=("tanh", "prelu"))
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--scatter-weight", type=float)
    p.add_argument("--ema-tau", type=float)
    p.add_argument("--degree-feature", type=_bool_flag, metavar="BOOL")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("train", help="train a downstream task head")
    _add_common(p)
    p.add_argument("--graph", help="input graph file")
    p.add_argument("--encoder", help="encoder checkpoint from pretrain")
    p.add_argument("-o", "--out", help="task model output path")
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--task", choices=("coupling", "gcap"))
    p.add_argument("--loss",
                   choices=("mse", "gai", "bmc", "ce", "focal", "bsmce"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--sigma-noise", type=float)
    p.add_argument("--gmm-components", type=int)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--fine-tune-embeddings", type=_bool_flag, metavar="BOOL")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval",
                        help="evaluate a trained model on a held-out graph")
    _add_common(p)
    p.add_argument("--graph", help="held-out graph file")
    p.add_argument("--encoder", help="encoder checkpoint")
    p.add_argument("--model", help="task model file")
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--excluded-classes",
                   help="comma-separated target classes to drop from "
                        "classification metrics (default 2)")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="run the self-verification oracles")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max allowed relative gradient error")
    p.add_argument("--points", type=int, default=10,
                   help="random probe points per case")
    p.add_argument("--priors", type=int, default=100,
                   help="random mixtures for the quadrature oracle")
    p.add_argument("--inject-bug", action="store_true",
                   help="flip a sign in one gradient rule (negative "
                        "control, must exit 1)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except _Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, DimensionError) as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NetlistParseError, UnknownNameError, GraphFormatError,
            CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
