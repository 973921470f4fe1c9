"""Command-line entry point: ``critpoint <command> [--spec FILE] [flags]``.

Every command reads an optional strict JSON spec file (see docs/) and lets
flags override individual fields. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

import argparse
import copy
import csv
import json
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import am as am_mod
from .attack import (
    AttackConfig,
    read_results_jsonl,
    run_campaign,
    select_victims,
    summary_row,
    write_results_jsonl,
    write_summary_csv,
)
from .data import load_off_directory, synthetic_splits, write_ply, write_xyz
from .defense import DefenseConfig, calibrate_lambda, evaluate_defense, false_positive_rate
from .errors import CritpointError
from .explain import ExplainConfig, attribution_distribution, explain, write_attribution_csv
from .model import NetworkConfig, PoolingKind, accuracy, load_checkpoint, predict, save_checkpoint, train

ENV_OUT = "CRITPOINT_OUT"
COMMANDS = ("train", "attack", "sweep", "pooling-study", "am", "defend", "explain")


class UsageError(Exception):
    pass


def _names(cls):
    return {f.name for f in fields(cls)}


SECTIONS = {
    "dataset": {"source", "root", "classes", "train_per_class", "test_per_class", "num_points", "seed"},
    "train": {"pooling", "epochs", "lr", "batch_size", "point_widths", "head_widths"},
    "victims": {"per_class", "seed"},
    "explain": _names(ExplainConfig) | {"index", "target"},
    "attack": _names(AttackConfig),
    "am": {"target", "inits", "steps", "lr", "keep_every", "instance"},
    "defense": {"k", "lam", "max_false_positive", "results", "include_failures", "export_ply"},
    "sweep": {"beta_ratios", "noise_weights", "distance"},
    "pooling": {"kinds", "checkpoint_dir", "epochs"},
}
TOP_LEVEL = {"command", "seed", "output", "checkpoint", "workers", "method", "quiet"} | set(SECTIONS)

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "method": "opa",
    "quiet": False,
    "dataset": {"source": "synthetic", "classes": 8, "train_per_class": 200, "test_per_class": 50, "num_points": 512, "seed": 0},
    "train": {"pooling": "max", "epochs": 12, "lr": 1e-3, "batch_size": 32},
    "victims": {"per_class": 25},
    "explain": {},
    "attack": {},
    "am": {"inits": list(am_mod.INITS), "steps": 1000, "lr": 1e-3, "keep_every": 100},
    "defense": {"k": 8, "max_false_positive": 0.05, "include_failures": False, "export_ply": False},
    "sweep": {"beta_ratios": [0.0], "noise_weights": [0.1], "distance": "chamfer"},
    "pooling": {"kinds": [k.value for k in PoolingKind], "epochs": 12},
}


# --------------------------------------------------------------------------
# spec assembly
# --------------------------------------------------------------------------

def load_spec_file(path):
    try:
        with open(path) as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read spec file {path}: {exc}") from None
    check_spec(spec)
    return spec


def check_spec(spec):
    """Reject unknown keys and wrongly shaped sections."""
    if not isinstance(spec, dict):
        raise UsageError("spec must be a JSON object")
    unknown = set(spec) - TOP_LEVEL
    if unknown:
        raise UsageError(f"unknown spec keys: {sorted(unknown)}")
    if "command" in spec and spec["command"] not in COMMANDS:
        raise UsageError(f"unknown command {spec['command']!r}")
    for name, allowed in SECTIONS.items():
        if name not in spec:
            continue
        if not isinstance(spec[name], dict):
            raise UsageError(f"spec section {name!r} must be an object")
        bad = set(spec[name]) - allowed
        if bad:
            raise UsageError(f"unknown keys in {name!r}: {sorted(bad)}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _flags_to_spec(args):
    spec = {}
    for key, value in vars(args).items():
        if key in ("spec", "command_name"):
            continue
        if "." in key:
            section, name = key.split(".", 1)
            spec.setdefault(section, {})[name] = value
        else:
            spec[key] = value
    return spec


def build_spec(args):
    file_spec = load_spec_file(args.spec) if getattr(args, "spec", None) else {}
    if file_spec.get("command", args.command_name) != args.command_name:
        raise UsageError(f"spec file is for {file_spec['command']!r}, not {args.command_name!r}")
    flag_spec = _flags_to_spec(args)
    check_spec(flag_spec)
    spec = _merge(DEFAULTS, file_spec)
    # checkpoints and campaign directories remember their data; reuse it unless told otherwise
    if "dataset" not in file_spec and args.command_name != "train":
        remembered = _remembered_dataset(_merge(spec, flag_spec))
        if remembered:
            spec["dataset"] = _merge(spec["dataset"], remembered)
    spec = _merge(spec, flag_spec)
    spec["command"] = args.command_name
    return spec


def _remembered_dataset(spec):
    results = spec.get("defense", {}).get("results")
    if results:
        try:
            with open(Path(results) / "report.json") as fh:
                return json.load(fh).get("dataset")
        except (OSError, json.JSONDecodeError):
            return None
    ckpt = spec.get("checkpoint")
    if ckpt:
        try:
            return load_checkpoint(ckpt).meta.get("dataset")
        except (OSError, CritpointError):
            return None
    return None


def output_dir(spec):
    out = spec.get("output") or os.environ.get(ENV_OUT) or os.path.join("critpoint-out", spec["command"])
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def attack_config(spec):
    cfg = dict(spec["attack"])
    cfg.setdefault("seed", spec["seed"])
    return AttackConfig(**cfg)


def explain_config(spec):
    cfg = {k: v for k, v in spec["explain"].items() if k not in ("index", "target")}
    return ExplainConfig(**cfg)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def load_data(ds):
    if ds["source"] == "synthetic":
        return synthetic_splits(ds["classes"], ds["train_per_class"], ds["test_per_class"], ds["num_points"], ds["seed"])
    if ds["source"] == "off":
        if not ds.get("root"):
            raise UsageError("dataset source 'off' needs a root directory")
        n, seed = ds["num_points"], ds["seed"]
        return load_off_directory(ds["root"], n, "train", seed), load_off_directory(ds["root"], n, "test", seed + 1)
    raise UsageError(f"unknown dataset source {ds['source']!r}")


def load_net(spec):
    path = spec.get("checkpoint")
    if not path:
        raise UsageError("a --checkpoint is required")
    if not Path(path).exists():
        raise CritpointError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


class Progress:
    def __init__(self, quiet, label):
        self.quiet = quiet
        self.label = label

    def __call__(self, done, total, result=None):
        if self.quiet:
            return
        tail = ""
        if result is not None:
            tail = f" victim {result.victim} {'ok' if result.success else 'fail'}"
        print(f"[{self.label}] {done}/{total}{tail}", file=sys.stderr, flush=True)


def _attributions(net, dataset, victims, config, progress):
    out = {}
    for i, v in enumerate(victims):
        out[v] = explain(net, dataset.points[v], int(dataset.labels[v]), config)
        progress(i + 1, len(victims))
    return out


def _victims(net, test, spec):
    vs = spec["victims"]
    victims = select_victims(net, test, vs["per_class"], vs.get("seed", spec["seed"]))
    if not victims:
        raise CritpointError("no correctly classified victims")
    return victims


def write_campaign(out, report, results, dataset, extra=None):
    """Campaign artifacts: results.jsonl, summary.csv, clouds.npz, transitions.csv, report.json."""
    out.mkdir(parents=True, exist_ok=True)
    write_results_jsonl(out / "results.jsonl", results)
    write_summary_csv(out / "summary.csv", [summary_row(report)])
    victims = np.array([r.victim for r in results], dtype=np.int64)
    np.savez(
        out / "clouds.npz",
        victims=victims,
        original=dataset.points[victims],
        adversarial=np.stack([r.adversarial for r in results]),
        success=np.array([r.success for r in results]),
    )
    names = list(dataset.class_names)
    with open(out / "transitions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["original"] + names)
        for name, row in zip(names, report.transitions):
            w.writerow([name] + row)
    body = report.to_dict()
    body["class_names"] = names
    body.update(extra or {})
    write_json(out / "report.json", body)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(spec):
    t = spec["train"]
    out = output_dir(spec)
    tr, te = load_data(spec["dataset"])
    cfg_kw = {"num_classes": len(tr.class_names), "num_points": tr.num_points, "pooling": t["pooling"]}
    for k in ("point_widths", "head_widths"):
        if t.get(k):
            cfg_kw[k] = tuple(t[k])
    config = NetworkConfig(**cfg_kw)
    quiet = spec["quiet"]
    start = time.perf_counter()

    def log(epoch, loss):
        if not quiet:
            print(f"[train] epoch {epoch + 1}/{t['epochs']} loss {loss:.4f} {time.perf_counter() - start:.0f}s", file=sys.stderr, flush=True)

    net = train(config, tr, epochs=t["epochs"], seed=spec["seed"], lr=t["lr"], batch_size=t["batch_size"], eval_set=te, log=log)
    net.meta["dataset"] = spec["dataset"]
    save_checkpoint(net, out / "model.ckpt")
    report = {
        "accuracy": net.meta["eval_accuracy"],
        "train_accuracy": accuracy(net, tr),
        "config": config.to_dict(),
        "epochs": t["epochs"],
        "seed": spec["seed"],
        "dataset": spec["dataset"],
        "loss_history": net.meta["loss_history"],
    }
    write_json(out / "train_report.json", report)
    print(f"accuracy {report['accuracy']:.4f}")
    print(f"checkpoint {out / 'model.ckpt'}")


def _campaign_setup(spec):
    net = load_net(spec)
    _, te = load_data(spec["dataset"])
    return net, te, _victims(net, te, spec)


def cmd_attack(spec):
    acfg, ecfg = attack_config(spec), explain_config(spec)
    net, te, victims = _campaign_setup(spec)
    out = output_dir(spec)
    report, results = run_campaign(
        net, te, victims, spec["method"], ecfg, acfg, workers=spec["workers"], progress=Progress(spec["quiet"], spec["method"])
    )
    write_campaign(out, report, results, te, _campaign_extra(spec, acfg, ecfg))
    _print_row(summary_row(report))


def _campaign_extra(spec, acfg, ecfg):
    return {
        "attack_config": acfg.to_dict(),
        "explain_config": {"method": ecfg.method, "baseline": ecfg.baseline, "ig_steps": ecfg.ig_steps},
        "dataset": spec["dataset"],
        "checkpoint": spec.get("checkpoint"),
    }


def _print_row(row):
    print(" ".join(f"{k}={v if v != '' else '-'}" for k, v in row.items()))


SWEEP_COLUMNS = ("beta_ratio", "beta", "noise_weight", "method", "S", "D_c", "D_h", "N_p", "iterations")


def cmd_sweep(spec):
    sw = spec["sweep"]
    ratios, weights = list(sw["beta_ratios"]), list(sw["noise_weights"])
    if not ratios or not weights:
        raise UsageError("empty sweep grid")
    base, ecfg = attack_config(spec), explain_config(spec)
    cells = []
    for r in ratios:
        for w in weights:
            if r < 0 or w < 0:
                raise UsageError("sweep values must be >= 0")
            beta = r * base.alpha
            dist = (base.distance if base.distance != "none" else sw["distance"]) if r > 0 else base.distance
            cells.append((r, w, replace(base, beta=beta, distance=dist, noise_weight=w)))
    net, te, victims = _campaign_setup(spec)
    out = output_dir(spec)
    prog = Progress(spec["quiet"], "explain")
    attrs = _attributions(net, te, victims, ecfg, prog)
    rows = []
    for i, (r, w, cfg) in enumerate(cells):
        report, results = run_campaign(
            net, te, victims, spec["method"], ecfg, cfg, workers=spec["workers"], attributions=attrs,
            progress=Progress(spec["quiet"], f"cell {i + 1}/{len(cells)}"),
        )
        write_campaign(out / f"cell_{i:02d}", report, results, te, _campaign_extra(spec, cfg, ecfg))
        row = summary_row(report)
        row.update(beta_ratio=repr(float(r)), beta=repr(cfg.beta), noise_weight=repr(float(w)), iterations=repr(report.iterations))
        rows.append(row)
        _print_row(row)
    write_summary_csv(out / "sweep.csv", rows, SWEEP_COLUMNS)


POOLING_COLUMNS = (
    "pooling", "accuracy", "S", "D_c", "D_h", "N_p", "N_pos",
    "positive_fraction", "top20_fraction", "top40_fraction", "gini",
)


def pooling_study(nets, test, spec, progress_for=None):
    """OPA/CTA campaign plus attribution statistics for each pooling variant.

    Returns (table rows, transfer matrix dict, per-kind (report, results, attributions)).
    """
    acfg, ecfg = attack_config(spec), explain_config(spec)
    rows, transfer, detail = [], {}, {}
    for kind, net in nets.items():
        prog = progress_for(kind) if progress_for else (lambda *a: None)
        victims = _victims(net, test, spec)
        attrs = _attributions(net, test, victims, ecfg, prog)
        dist = attribution_distribution(attrs[v] for v in victims)
        report, results = run_campaign(
            net, test, victims, spec["method"], ecfg, acfg, transfer_nets=nets, workers=spec["workers"], attributions=attrs, progress=prog
        )
        row = summary_row(report, kind)
        row = {"pooling": kind, "accuracy": repr(accuracy(net, test)), **{k: row[k] for k in ("S", "D_c", "D_h", "N_p")}}
        row.update(
            N_pos=repr(dist["n_pos"]),
            positive_fraction=repr(dist["positive_fraction"]),
            top20_fraction=repr(dist["top20_fraction"]),
            top40_fraction=repr(dist["top40_fraction"]),
            gini=repr(dist["gini"]),
        )
        rows.append(row)
        transfer[kind] = report.transfer
        detail[kind] = (report, results, attrs)
    return rows, transfer, detail


def cmd_pooling_study(spec):
    p = spec["pooling"]
    kinds = [PoolingKind.parse(k).value for k in p["kinds"]]
    out = output_dir(spec)
    ckdir = Path(p.get("checkpoint_dir") or out / "nets")
    ckdir.mkdir(parents=True, exist_ok=True)
    tr, te = load_data(spec["dataset"])
    nets = {}
    for kind in kinds:
        path = ckdir / f"{kind}.ckpt"
        if path.exists():
            nets[kind] = load_checkpoint(path)
            continue
        cfg = NetworkConfig(num_classes=len(tr.class_names), num_points=tr.num_points, pooling=kind)
        t = spec["train"]
        log = None if spec["quiet"] else (lambda e, l, k=kind: print(f"[train {k}] epoch {e + 1} loss {l:.4f}", file=sys.stderr, flush=True))
        net = train(cfg, tr, epochs=p["epochs"], seed=spec["seed"], lr=t["lr"], batch_size=t["batch_size"], eval_set=te, log=log)
        net.meta["dataset"] = spec["dataset"]
        save_checkpoint(net, path)
        nets[kind] = net
    rows, transfer, detail = pooling_study(nets, te, spec, lambda k: Progress(spec["quiet"], k))
    write_summary_csv(out / "pooling_table.csv", rows, POOLING_COLUMNS)
    with open(out / "transfer.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + kinds)
        for src in kinds:
            w.writerow([src] + [repr(transfer[src][dst]) for dst in kinds])
    for kind, (report, results, _) in detail.items():
        write_campaign(out / kind, report, results, te, _campaign_extra(spec, attack_config(spec), explain_config(spec)))
    write_json(out / "report.json", {"table": rows, "transfer": transfer, "method": spec["method"], "dataset": spec["dataset"]})
    for row in rows:
        _print_row(row)


def cmd_am(spec):
    a = spec["am"]
    if a.get("target") is None:
        raise UsageError("am needs a --target class")
    configs = [
        am_mod.AmConfig(target=a["target"], init=init, steps=a["steps"], lr=a["lr"], seed=spec["seed"], keep_every=a["keep_every"])
        for init in a["inits"]
    ]
    net = load_net(spec)
    _, te = load_data(spec["dataset"])
    out = output_dir(spec)
    instance = te.points[a["instance"]] if a.get("instance") is not None else None
    summary = {}
    for cfg in configs:
        trace = am_mod.activation_maximize(net, cfg, dataset=te, instance=instance)
        am_mod.write_trace_csv(out / f"am_{cfg.init}.csv", trace)
        write_xyz(out / f"am_{cfg.init}.xyz", trace.final)
        write_ply(out / f"am_{cfg.init}.ply", trace.final, displacement=np.linalg.norm(trace.final - trace.initial, axis=1))
        summary[cfg.init] = {
            "gini_mark_step": trace.gini_mark_step,
            "initial_activation": trace.initial_activation,
            "final_activation": float(trace.activation[-1]),
            "final_gini": float(trace.gini[-1]),
            "steps": cfg.steps,
        }
        if not spec["quiet"]:
            print(f"[am] {cfg.init}: gini>=0.8 at step {trace.gini_mark_step}", file=sys.stderr, flush=True)
    write_json(out / "am_report.json", {"target": a["target"], "runs": summary})
    for init, s in summary.items():
        print(f"{init} gini_mark_step={s['gini_mark_step']} final_activation={s['final_activation']:.6g}")


def cmd_defend(spec):
    d = spec["defense"]
    src = d.get("results")
    if not src:
        raise UsageError("defend needs --results pointing at a campaign directory")
    src = Path(src)
    if not (src / "results.jsonl").exists() or not (src / "clouds.npz").exists():
        raise CritpointError(f"{src} is not a campaign directory (results.jsonl, clouds.npz)")
    rows = read_results_jsonl(src / "results.jsonl")
    clouds = np.load(src / "clouds.npz")
    items = [
        (adv, row["perturbed_indices"])
        for row, adv in zip(rows, clouds["adversarial"])
        if d["include_failures"] or row["success"]
    ]
    if not items:
        raise CritpointError("no adversarial clouds to evaluate")
    _, te = load_data(spec["dataset"])
    clean = list(te.points)
    lam = d.get("lam")
    if lam is None:
        lam = calibrate_lambda(clean, d["k"], d["max_false_positive"])
    config = DefenseConfig(k=d["k"], lam=lam)
    report = evaluate_defense(items, config)
    out = output_dir(spec)
    body = report.to_dict()
    body["false_positive_rate"] = false_positive_rate(clean, config)
    body["source"] = str(src)
    write_json(out / "defense_report.json", body)
    if d["export_ply"]:
        for i, ((adv, _), flagged) in enumerate(zip(items, report.flagged)):
            mask = np.zeros(len(adv), dtype=np.int64)
            mask[flagged] = 1
            write_ply(out / f"flagged_{i:04d}.ply", adv, flagged=mask)
    r_p = "-" if report.r_p is None else f"{report.r_p:.4f}"
    print(f"r_D={report.r_d:.4f} r_P={r_p} lambda={lam:.6g} false_positive_rate={body['false_positive_rate']:.4f}")


def cmd_explain(spec):
    e = spec["explain"]
    ecfg = explain_config(spec)
    net = load_net(spec)
    _, te = load_data(spec["dataset"])
    idx = e.get("index", 0)
    if not 0 <= idx < len(te):
        raise UsageError(f"index {idx} outside the test set of {len(te)}")
    pts = te.points[idx]
    target = e.get("target")
    target = predict(net, pts).label if target is None else target
    attr = explain(net, pts, target, ecfg)
    out = output_dir(spec)
    write_attribution_csv(out / "attribution.csv", pts, attr)
    stats = attribution_distribution([attr])
    stats.update(index=idx, target=target, method=attr.method, residual=attr.residual, label=int(te.labels[idx]))
    write_json(out / "explain_report.json", stats)
    print(" ".join(f"{k}={stats[k]}" for k in ("index", "target", "method", "n_pos", "gini", "residual")))


HANDLERS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "pooling-study": cmd_pooling_study,
    "am": cmd_am,
    "defend": cmd_defend,
    "explain": cmd_explain,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

S = argparse.SUPPRESS


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pooling(text):
    try:
        return PoolingKind.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common(p):
    p.add_argument("--spec", help="strict JSON experiment spec; flags override its fields")
    p.add_argument("--out", dest="output", default=S, help=f"output directory (default ${ENV_OUT} or ./critpoint-out/<command>)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--quiet", action="store_true", default=S, help="no progress lines on stderr")


def _data(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", dest="dataset.source", choices=("synthetic", "off"), default=S)
    g.add_argument("--data-root", dest="dataset.root", default=S, help="root/<class>/{train,test}/*.off")
    g.add_argument("--classes", dest="dataset.classes", type=int, default=S)
    g.add_argument("--train-per-class", dest="dataset.train_per_class", type=int, default=S)
    g.add_argument("--test-per-class", dest="dataset.test_per_class", type=int, default=S)
    g.add_argument("--num-points", dest="dataset.num_points", type=int, default=S)
    g.add_argument("--data-seed", dest="dataset.seed", type=int, default=S)


def _explain(p):
    g = p.add_argument_group("attribution")
    g.add_argument("--explainer", dest="explain.method", choices=("ig", "vg", "gb"), default=S)
    g.add_argument("--baseline", dest="explain.baseline", choices=("zeros", "centroid"), default=S)
    g.add_argument("--ig-steps", dest="explain.ig_steps", type=int, default=S)


def _attack(p):
    g = p.add_argument_group("attack")
    g.add_argument("--method", choices=("opa", "cta"), default=S)
    g.add_argument("--alpha", dest="attack.alpha", type=float, default=S)
    g.add_argument("--beta", dest="attack.beta", type=float, default=S)
    g.add_argument("--distance", dest="attack.distance", choices=("none", "chamfer", "hausdorff", "euclidean"), default=S)
    g.add_argument("--lr", dest="attack.lr", type=float, default=S, help="Adam step size (default per method)")
    g.add_argument("--noise-weight", dest="attack.noise_weight", type=float, default=S)
    g.add_argument("--period", dest="attack.period", type=int, default=S)
    g.add_argument("--max-iter-global", dest="attack.max_iter_global", type=int, default=S)
    g.add_argument("--max-iter-local", dest="attack.max_iter_local", type=int, default=S)
    g.add_argument("--mode", dest="attack.mode", choices=("untargeted", "targeted"), default=S)
    g.add_argument("--target-policy", dest="attack.target_policy", choices=("explicit", "second_largest", "random", "lowest"), default=S)
    g.add_argument("--target", dest="attack.target", type=int, default=S)
    g.add_argument("--variance-epsilon", dest="attack.variance_epsilon", type=float, default=S)
    g.add_argument("--noise-rule", dest="attack.noise_rule", choices=("period", "step"), default=S)
    g.add_argument("--per-class", dest="victims.per_class", type=int, default=S, help="victim cap per class (default 25)")
    g.add_argument("--victim-seed", dest="victims.seed", type=int, default=S)
    g.add_argument("--workers", type=_positive_int, default=S)


def make_parser():
    parser = argparse.ArgumentParser(prog="critpoint", description="Critical-point attacks on point-cloud classifiers.")
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("train", help="train a classifier and write a checkpoint")
    _common(p)
    _data(p)
    p.add_argument("--pooling", dest="train.pooling", type=_pooling, default=S, help="max, average, median or sum")
    p.add_argument("--epochs", dest="train.epochs", type=_positive_int, default=S)
    p.add_argument("--lr", dest="train.lr", type=float, default=S)
    p.add_argument("--batch-size", dest="train.batch_size", type=_positive_int, default=S)

    p = sub.add_parser("attack", help="run an OPA or CTA campaign")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint", default=S)
    _explain(p)
    _attack(p)

    p = sub.add_parser("sweep", help="grid over beta/alpha ratios and noise weights")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint", default=S)
    _explain(p)
    _attack(p)
    p.add_argument("--beta-ratios", dest="sweep.beta_ratios", type=_floats, default=S, help="comma-separated beta/alpha values")
    p.add_argument("--noise-weights", dest="sweep.noise_weights", type=_floats, default=S, help="comma-separated W_n values")
    p.add_argument("--sweep-distance", dest="sweep.distance", choices=("chamfer", "hausdorff", "euclidean"), default=S)

    p = sub.add_parser("pooling-study", help="train/load all pooling variants and compare them")
    _common(p)
    _data(p)
    _explain(p)
    _attack(p)
    p.add_argument("--kinds", dest="pooling.kinds", type=lambda t: [_pooling(k) for k in t.split(",")], default=S)
    p.add_argument("--checkpoint-dir", dest="pooling.checkpoint_dir", default=S, help="reuse <dir>/<kind>.ckpt, train missing ones")
    p.add_argument("--epochs", dest="pooling.epochs", type=_positive_int, default=S)

    p = sub.add_parser("am", help="activation maximization traces")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--target", dest="am.target", type=int, default=S)
    p.add_argument("--inits", dest="am.inits", type=lambda t: t.split(","), default=S)
    p.add_argument("--steps", dest="am.steps", type=int, default=S)
    p.add_argument("--lr", dest="am.lr", type=float, default=S)
    p.add_argument("--instance", dest="am.instance", type=int, default=S, help="test-set index for the instance init")

    p = sub.add_parser("defend", help="outlier-removal detection over a campaign directory")
    _common(p)
    _data(p)
    p.add_argument("--results", dest="defense.results", default=S)
    p.add_argument("--k", dest="defense.k", type=int, default=S)
    p.add_argument("--lam", dest="defense.lam", type=float, default=S, help="fixed lambda; calibrated on clean clouds if absent")
    p.add_argument("--max-false-positive", dest="defense.max_false_positive", type=float, default=S)
    p.add_argument("--include-failures", dest="defense.include_failures", action="store_true", default=S)
    p.add_argument("--export-ply", dest="defense.export_ply", action="store_true", default=S)

    p = sub.add_parser("explain", help="attribute one test instance")
    _common(p)
    _data(p)
    p.add_argument("--checkpoint", default=S)
    _explain(p)
    p.add_argument("--index", dest="explain.index", type=int, default=S)
    p.add_argument("--target", dest="explain.target", type=int, default=S)
    for sp in sub.choices.values():
        for action in sp._actions:
            if "." in action.dest and action.nargs != 0 and action.metavar is None:
                action.metavar = action.dest.split(".", 1)[1].upper()
    return parser


def _validate(spec):
    """Build every config the command will need so bad values fail as usage errors."""
    cmd = spec["command"]
    if cmd in ("attack", "sweep", "pooling-study"):
        attack_config(spec)
        if spec["method"] not in ("opa", "cta"):
            raise UsageError(f"unknown method {spec['method']!r}")
    if cmd in ("attack", "sweep", "pooling-study", "explain"):
        explain_config(spec)
    if cmd == "train":
        PoolingKind.parse(spec["train"]["pooling"])
    if cmd == "am":
        a = spec["am"]
        for init in a["inits"]:
            am_mod.AmConfig(target=a.get("target") or 0, init=init, steps=a["steps"], lr=a["lr"])
    if cmd == "defend":
        d = spec["defense"]
        DefenseConfig(k=d["k"], lam=d["lam"] if d.get("lam") is not None else 1.0)
    if spec["workers"] < 1:
        raise UsageError("workers must be >= 1")


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    try:
        spec = build_spec(args)
        _validate(spec)
    except (UsageError, ValueError, TypeError) as exc:
        print(f"critpoint {args.command_name}: usage error: {exc}", file=sys.stderr)
        return 2
    try:
        HANDLERS[spec["command"]](spec)
    except UsageError as exc:
        print(f"critpoint {args.command_name}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CritpointError, OSError, ValueError) as exc:
        print(f"critpoint {args.command_name}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
