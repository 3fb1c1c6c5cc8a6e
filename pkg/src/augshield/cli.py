"""``augshield`` command line: gen, craft, train, experiment, report."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import attack as atk
from . import config as cfg
from . import datagen, harness
from .trainer import save_checkpoint, train


def _load_config(args):
    conf = cfg.load(args.config) if args.config else cfg.RunConfig()
    sched = conf.schedule
    if args.seed is not None:
        sched = dataclasses.replace(sched, master_seed=args.seed)
    if getattr(args, "parallelism", None) is not None:
        sched = dataclasses.replace(sched, parallelism=args.parallelism)
    return dataclasses.replace(conf, schedule=sched)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args):
    conf = _load_config(args)
    out = _out(args)
    fp = conf.fingerprint()
    dc = conf.dataset
    if dc.source != "shapeset":
        raise cfg.ConfigError("gen only generates ShapeSet data")
    ds = datagen.gen_shapeset(dc.seed, dc.per_class, tuple(dc.geometry))
    datagen.save_dataset(ds, out / "dataset.npz", fingerprint=fp)
    sheet = datagen.contact_sheet(ds.images[: 10 * ds.n_classes], ncols=ds.n_classes)
    datagen.write_png(sheet, out / "contact_sheet.png", {"config_fingerprint": fp})
    print(f"wrote {len(ds)} images to {out / 'dataset.npz'} (fingerprint {fp})")
    return 0


def cmd_craft(args):
    conf = _load_config(args)
    out = _out(args)
    if conf.attack.kind == "none":
        raise cfg.ConfigError("craft needs attack.kind = backdoor or targeted")
    train_set, _ = harness.load_data(conf.dataset)
    plan = harness.poison_trial(conf, args.trial)
    audit = plan.delta.audit(train_set)
    if conf.attack.kind == "targeted":
        plan.delta.validate(train_set)
        print(f"final alignment loss {plan.delta.meta['final_alignment']:.6f}")
    extra = {"config_fingerprint": conf.fingerprint(), "trial": args.trial, "details": plan.details}
    path = out / "bundle.npz"
    header = atk.save_bundle(path, plan.delta, extra)
    print(json.dumps({"audit": audit, "bundle": str(path), "fingerprint": header["fingerprint"]}, default=float))
    return 0


def cmd_train(args):
    conf = _load_config(args)
    out = _out(args)
    fp = conf.fingerprint()
    train_set, val = harness.load_data(conf.dataset)
    bundle_fp = ""
    if args.bundle:
        delta, header = atk.load_bundle(args.bundle)
        if delta.threat.norm == "linf":
            delta.validate(train_set)
        train_set = delta.apply(train_set)
        bundle_fp = header["fingerprint"]
    rng = harness.trial_rng(conf.schedule.master_seed, args.trial, "victim")
    model = harness.model_factory(conf, train_set.n_classes, train_set.geometry)().init_params(rng)
    history = train(model, train_set, conf.train_config(), rng, val=val)
    history.to_csv(out / "history.csv", fp)
    meta = {
        "config_fingerprint": fp,
        "bundle": bundle_fp,
        "seed": [conf.schedule.master_seed, args.trial, harness.STREAMS["victim"]],
        "geometry": list(train_set.geometry),
        "val_accuracy": history.final_val_accuracy,
    }
    save_checkpoint(model, out / "checkpoint.npz", meta)
    print(f"final val accuracy {history.final_val_accuracy:.4f}")
    return 0


def cmd_experiment(args):
    conf = _load_config(args)
    out = _out(args)
    reports = harness.run_grid(conf)
    harness.emit_report(reports, out)
    for r in reports:
        flag = " PARTIAL" if r.partial else ""
        print(
            f"{r.defense:>20s} {r.attack:>18s}  success {r.mean_poison_success:.3f}"
            f"  val acc {r.mean_clean_val_acc:.4f}  ({r.n_trials} trials){flag}"
        )
    failed = [x for r in reports for x in r.results if not x.ok]
    for x in failed:
        print(f"trial {x.trial} failed: {x.error.splitlines()[0]}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args):
    reports = harness.load_report_json(args.input)
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    paths = harness.emit_report(reports, _out(args), formats)
    for p in paths.values():
        print(p)
    return 1 if any(r.partial for r in reports) else 0


def build_parser():
    p = argparse.ArgumentParser(prog="augshield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, parallel=False):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override schedule.master_seed")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        if parallel:
            sp.add_argument("--parallelism", type=int, help="worker processes for trials")

    common(sub.add_parser("gen", help="generate ShapeSet data and a contact sheet"))
    sp = sub.add_parser("craft", help="craft a poison bundle for one trial")
    common(sp)
    sp.add_argument("--trial", type=int, default=0)
    sp = sub.add_parser("train", help="train a victim, optionally on a poison bundle")
    common(sp)
    sp.add_argument("--bundle", help="poison bundle from `craft`")
    sp.add_argument("--trial", type=int, default=0)
    common(sub.add_parser("experiment", help="run the defense x attack grid"), parallel=True)
    sp = sub.add_parser("report", help="re-emit CSV/SVG/JSON from a report JSON")
    sp.add_argument("--input", required=True, help="report.json from `experiment`")
    sp.add_argument("--format", default="csv,svg", help="comma list of csv, json, svg")
    sp.add_argument("--out", default="out")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "craft": cmd_craft,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (cfg.ConfigError, atk.ThreatModelError, datagen.DataFormatError, OSError, ValueError) as exc:
        print(f"augshield {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
