"""Command-line entry point: ``ato <train|compress|inspect|verify|harness|report>``."""
import argparse
from dataclasses import dataclass, field
import csv
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import config as cfgmod
from . import graph as G
from . import gradcheck
from . import harness as H
from . import pipeline as P
from . import zig
from .tensor import Rng, STREAM_VERIFY

log = logging.getLogger("ato")

COMMANDS = ("train", "compress", "inspect", "verify", "harness", "report")


@dataclass
class Command:
    name: str
    config: str = None
    overrides: list = field(default_factory=list)
    options: dict = field(default_factory=dict)


def _parser():
    ap = argparse.ArgumentParser(prog="ato", description="Joint training and structured pruning.")
    sub = ap.add_subparsers(dest="command", metavar="command")

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run configuration file")
        p.add_argument("overrides", nargs="*", metavar="key=value")

    p = sub.add_parser("train", help="train, prune, compress and evaluate")
    with_config(p)
    p.add_argument("--out", default="runs", help="parent directory of run directories")
    p.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
    p.add_argument("--baseline", action="store_true", help="also train the dense baseline")

    p = sub.add_parser("compress", help="compress a checkpoint and certify equivalence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="output path of the compressed checkpoint")
    p.add_argument("--inputs", type=int, default=100)

    p = sub.add_parser("inspect", help="print the group partition and MAC counts")
    with_config(p)

    p = sub.add_parser("verify", help="zero-invariance and gradient-check suites")
    with_config(p)
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("harness", help="lemma suites and the convergence-trend run")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="harness.csv")

    p = sub.add_parser("report", help="summarize a run's metrics")
    p.add_argument("--run", help="run directory")
    p.add_argument("--metrics", help="metrics CSV (default: <run>/metrics.csv)")
    p.add_argument("--baseline-metrics", help="dense baseline metrics CSV")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")
    return ap


def parse_cli(argv):
    ap = _parser()
    if not argv:
        ap.print_usage(sys.stderr)
        raise SystemExit(2)
    ns = ap.parse_args(argv)
    if ns.command is None:
        ap.print_usage(sys.stderr)
        raise SystemExit(2)
    opts = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "overrides")}
    return Command(ns.command, getattr(ns, "config", None), list(getattr(ns, "overrides", []) or []), opts)


# ---------------------------------------------------------------- commands


def _run_dir(parent, cfg, overwrite):
    path = os.path.join(parent, f"{cfg.digest()}-s{cfg.get('run', 'seed')}")
    if os.path.exists(path) and not overwrite:
        raise FileExistsError(f"{path} exists; pass --overwrite to replace it")
    os.makedirs(path, exist_ok=True)
    return path


def _certify(model, part, mask, comp, n_inputs, seed=0):
    x = Rng(seed, STREAM_VERIFY).normal((n_inputs,) + model.input_shape)
    full, _ = G.forward(model, x, "eval", mask=mask.hard, part=part)
    small, _ = G.forward(comp.graph, x, "eval")
    return P.max_relative_deviation(small, full)


def graph_to_spec(g):
    """Layer-list text reproducing ``g``'s architecture."""
    lines = []
    for i, node in enumerate(g.nodes):
        h = node.hyper
        if node.kind == "conv":
            body = f"conv out={h['out']} k={h['k']} stride={h['stride']} pad={h['pad']}"
            if h.get("bias"):
                body += " bias=true"
        elif node.kind == "linear":
            body = f"linear out={h['out']}"
        elif node.kind == "add":
            body = "add " + " ".join(g.nodes[j].name for j in node.inputs)
        else:
            body = node.kind
        lines.append(f"{node.name}: {body}")
    return "\n".join(lines)


def compressed_arrays(comp):
    g = comp.graph
    arrays = {"meta.layers": ckpt_io.encode_text(graph_to_spec(g)),
              "meta.input": np.array(g.input_shape, dtype=np.float64)}
    for k, v in g.params.items():
        arrays[f"param.{k}"] = v
    for k, v in g.buffers.items():
        arrays[f"buffer.{k}"] = v
    return arrays


def load_compressed(arrays):
    shape = tuple(int(v) for v in arrays["meta.input"])
    g = G.spec_parse(ckpt_io.decode_text(arrays["meta.layers"]), shape)
    state = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    state.update({k[len("buffer."):]: v for k, v in arrays.items() if k.startswith("buffer.")})
    g.load_state(state)
    return g


def cmd_train(cmd):
    cfg = cfgmod.load(cmd.config, cmd.overrides)
    out = _run_dir(cmd.options["out"], cfg, cmd.options["overwrite"])
    with open(os.path.join(out, "config.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    try:
        res = P.train(cfg, log_every=1)
    except P.TrainingDiverged as exc:
        ckpt_io.save(os.path.join(out, "diverged.atoc"), exc.arrays)
        raise
    ckpt_io.save(os.path.join(out, "checkpoint.atoc"), res.arrays)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(P.metrics_csv(res.metrics))
    comp = P.compress(res.model, res.part, res.mask)
    ckpt_io.save(os.path.join(out, "compressed.atoc"), compressed_arrays(comp))
    _, test = P.load_data(cfg)
    full_loss, full_acc = P.evaluate(res.model, test, res.mask.hard, res.part)
    comp_loss, comp_acc = P.evaluate(comp.graph, test)
    dev = _certify(res.model, res.part, res.mask, comp, 100)
    summary = [
        f"run: {out}",
        f"groups: {res.part.num_groups}, pruned: {int(np.sum(res.mask.hard == 0))}",
        f"flops ratio: {P.flops_ratio(res.model, res.part, res.mask.hard):.4f}",
        f"params: {res.model.num_params()} -> {comp.graph.num_params()}",
        f"masked accuracy: {full_acc:.4f}  loss {full_loss:.6f}",
        f"compressed accuracy: {comp_acc:.4f}  loss {comp_loss:.6f}",
        f"equivalence max relative deviation: {dev:.3e}",
    ]
    if cmd.options.get("baseline"):
        base = P.train(P.dense_baseline(cfg))
        with open(os.path.join(out, "baseline_metrics.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(P.metrics_csv(base.metrics))
        summary.append(f"dense baseline accuracy: {base.metrics[-1]['accuracy']:.4f}")
    text = "\n".join(summary) + "\n"
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0 if dev <= 1e-5 else 1


def cmd_compress(cmd):
    arrays = ckpt_io.load(cmd.options["checkpoint"])
    cfg, model, part, mask = P.restore(arrays)
    comp = P.compress(model, part, mask)
    out = cmd.options.get("out") or os.path.splitext(cmd.options["checkpoint"])[0] + ".compressed.atoc"
    ckpt_io.save(out, compressed_arrays(comp))
    dev = _certify(model, part, mask, comp, cmd.options["inputs"])
    print(f"compressed: {out}")
    print(f"params: {model.num_params()} -> {comp.graph.num_params()}")
    for gid, norm in sorted(comp.residual_norms.items()):
        print(f"hard-zeroed group {gid}: residual norm {norm:.3e}")
    ok = dev <= 1e-5
    print(f"equivalence max relative deviation: {dev:.3e} ({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def cmd_inspect(cmd):
    cfg = cfgmod.load(cmd.config, cmd.overrides)
    model, part = P.build_model(cfg)
    print(f"parameters: {model.num_params()}")
    print(part.summary())
    macs = G.layer_macs(model)
    for node in model.nodes:
        if node.name in macs:
            print(f"  {node.name}: {node.in_shape} -> {node.out_shape}, MACs {macs[node.name]}")
    print(f"total MACs: {G.flops(model):.0f}")
    return 0


def cmd_verify(cmd):
    cfg = cfgmod.load(cmd.config, cmd.overrides)
    model, part = P.build_model(cfg)
    bad = zig.verify_zero_invariance(model, part, Rng(cfg.get("run", "seed"), STREAM_VERIFY))
    print(f"zero-invariance: {part.num_groups - len(bad)}/{part.num_groups} groups pass")
    ok = not bad
    for name, err in gradcheck.run_all(cmd.options["instances"]).items():
        good = err <= 1e-4
        ok = ok and good
        print(f"gradient check {name}: max relative error {err:.2e} ({'pass' if good else 'FAIL'})")
    return 0 if ok else 1


def cmd_harness(cmd):
    trials, seed = cmd.options["trials"], cmd.options["seed"]
    a1 = H.check_lemma_a1(trials, seed)
    a3 = H.check_lemma_a3(trials, seed)
    prob = H.nonconvex_sine(seed=seed)
    records, _ = H.run_theorem1(prob, H.theory_schedule(prob.L_est), cmd.options["steps"],
                                seed=seed, record_every=10)
    with open(cmd.options["out"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "avg_grad_map", "eta"])
        for r in records:
            w.writerow([r.t, repr(r.avg_grad_map), repr(r.eta)])
    print(f"lemma A1 pass rate: {a1:.4f} ({'pass' if a1 == 1.0 else 'FAIL'})")
    print(f"lemma A3 pass rate: {a3:.4f} ({'pass' if a3 == 1.0 else 'FAIL'})")
    last = records[-1]
    print(f"average gradient mapping at T={last.t}: {last.avg_grad_map:.4e}")
    print(f"series written to {cmd.options['out']}")
    return 0 if a1 == 1.0 and a3 == 1.0 else 1


def _read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cmd):
    run = cmd.options.get("run")
    path = cmd.options.get("metrics") or (run and os.path.join(run, "metrics.csv"))
    if not path:
        raise cfgmod.ConfigError("report needs --run or --metrics")
    rows = [r for r in _read_metrics(path) if r["split"] == "test"]
    final = rows[-1]
    base_path = cmd.options.get("baseline_metrics") or (run and os.path.join(run, "baseline_metrics.csv"))
    base = None
    if base_path and os.path.exists(base_path):
        base = [r for r in _read_metrics(base_path) if r["split"] == "test"][-1]
    pruned = float(final["accuracy"]) * 100
    dense = float(base["accuracy"]) * 100 if base else float("nan")
    flops = float(final["flops_ratio"])
    header = ["baseline_acc", "pruned_acc", "delta_acc", "flops_ratio", "pruned_flops"]
    values = [dense, pruned, pruned - dense, flops, (1 - flops) * 100]
    if cmd.options.get("csv"):
        print(",".join(header))
        print(",".join(f"{v:.4f}" for v in values))
    else:
        print(f"{'Baseline Acc':>14}{'Pruned Acc':>14}{'Delta-Acc':>12}{'FLOPs ratio':>14}{'Pruned FLOPs':>14}")
        print(f"{dense:13.2f}%{pruned:13.2f}%{pruned - dense:+11.2f}%{flops:14.4f}{(1 - flops) * 100:13.1f}%")
    return 0


HANDLERS = {"train": cmd_train, "compress": cmd_compress, "inspect": cmd_inspect,
            "verify": cmd_verify, "harness": cmd_harness, "report": cmd_report}


def run_command(cmd):
    try:
        return HANDLERS[cmd.name](cmd)
    except (cfgmod.ConfigError, P.MaskNotFrozen, FileExistsError, ValueError,
            ckpt_io.CheckpointError, OSError) as exc:
        print(f"ato {cmd.name}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        cmd = parse_cli(argv)
    except SystemExit as exc:
        return exc.code
    return run_command(cmd)


if __name__ == "__main__":
    sys.exit(main())
