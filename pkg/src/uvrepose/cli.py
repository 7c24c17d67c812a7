"""Command-line entry point: uvrepose [--config C] [--seed S] [--out DIR] <command> ..."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import idgraph
from .body import BodyConfig, Camera, PoseParams, build_body, pose_body
from .checkpoint import load_net, save_adapter
from .conditioning import View, condition_batch, tensor_image
from .config import ExperimentConfig, load_config
from .data import gen_dataset, load_dataset, stream, write_dataset
from .errors import UVReposeError
from .imaging import load_png, save_png
from .personalize import SubjectSet, finetune
from .pipeline import (
    LOG_COLUMNS,
    METRIC_COLUMNS,
    ablation_patch_vs_donor,
    build_net,
    eval_condition,
    evaluate,
    leakage_probe,
    prepare,
    probe_samples,
    run_experiment,
    train,
    write_csv,
)
from .flow import integrate

log = logging.getLogger("uvrepose")


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _data(cfg, out):
    data_dir = out / "data"
    if (data_dir / "paired.json").exists():
        return load_dataset(data_dir)
    ds = gen_dataset(cfg.data, cfg.seed, cfg.raster, cfg.donor)
    write_dataset(ds, data_dir)
    return ds


def _load_model(cfg, out, ckpt):
    net = build_net(cfg)
    load_net(ckpt or out / "ckpt" / "model.uvfm", net)
    return net.eval()


def read_subject(path):
    """Subject manifest: {"samples": [{"image", "pose", "camera"}, ...]} with paths relative to it."""
    path = Path(path)
    root = path.parent
    entries = json.loads(path.read_text())["samples"]
    rest = build_body(BodyConfig())
    views = []
    for e in entries:
        pose = PoseParams.from_json(json.loads((root / e["pose"]).read_text()))
        cam = Camera.from_json(json.loads((root / e["camera"]).read_text()))
        views.append(View(load_png(root / e["image"]), pose_body(rest, pose), cam, e.get("id", e["image"])))
    return views


def cmd_gen_data(args, cfg, out):
    ds = gen_dataset(cfg.data, cfg.seed, cfg.raster, cfg.donor)
    write_dataset(ds, out / "data")
    print(f"wrote {len(ds.samples)} samples to {out / 'data'}")


def cmd_train(args, cfg, out):
    ds = _data(cfg, out)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    _, rows = train(cfg, ds, ckpt_dir=out / "ckpt")
    write_csv(out / "reports" / "train_log.csv", LOG_COLUMNS, rows)
    print(f"trained {cfg.steps} steps; final loss {rows[-1]['loss']:.5f}" if rows else "no steps")


def cmd_sample(args, cfg, out):
    ds = _data(cfg, out)
    net = _load_model(cfg, out, args.ckpt)
    ids = sorted({i for pair in ds.eval for i in pair})
    cache = prepare(ds, cfg, ids)
    gen = torch.Generator().manual_seed(int(stream(cfg.seed, "eval").integers(2**31)))
    (out / "samples").mkdir(parents=True, exist_ok=True)
    r = cfg.resolution
    for ref, target in ds.eval:
        cond = condition_batch([eval_condition(ds, cache, ref, target, cfg)], r)
        noise = torch.randn((1, 3, r, r), generator=gen)
        img = tensor_image(integrate(net, noise, cond, cfg.sampler.steps, cfg.sampler.scheme)[0])
        save_png(out / "samples" / f"{target}.png", img)
    print(f"wrote {len(ds.eval)} samples to {out / 'samples'}")


def cmd_finetune(args, cfg, out):
    net = _load_model(cfg, out, args.ckpt)
    subject = SubjectSet(read_subject(args.subject), cfg.resolution, cfg.raster)
    adapter = finetune(net, subject, iters=args.iters, batch=cfg.batch, rank=args.rank, lr=cfg.lr, seed=cfg.seed)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    save_adapter(out / "ckpt" / "adapter.uvla", adapter)
    print(f"wrote adapter to {out / 'ckpt' / 'adapter.uvla'}")


def cmd_eval(args, cfg, out):
    ds = _data(cfg, out)
    net = _load_model(cfg, out, args.ckpt)
    report, rows = evaluate(net, ds, cfg)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    write_csv(out / "reports" / "metrics.csv", ("sample",) + METRIC_COLUMNS, rows)
    (out / "reports" / "metrics.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    print(json.dumps(report.summary(), indent=2, sort_keys=True))


def cmd_probe(args, cfg, out):
    if args.from_data:
        samples = _data(cfg, out)
    else:
        samples = probe_samples(args.per_bucket, cfg.seed, cfg.raster, cfg.donor, cfg.data)
    result = {
        "raw": leakage_probe(samples, False, cfg.seed).to_json(),
        "donor": leakage_probe(samples, True, cfg.seed).to_json(),
        "patch": leakage_probe(samples, True, cfg.seed, strategy="patch").to_json(),
        "shuffled": leakage_probe(samples, False, cfg.seed, shuffle_labels=True).to_json(),
    }
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "probe.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    for arm, res in result.items():
        print(f"{arm:9s} accuracy {res['accuracy']:.3f} (chance {res['chance']:.3f} +- {res['sigma']:.3f})")


def cmd_ablate(args, cfg, out):
    payload = ablation_patch_vs_donor(cfg, out)
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_run(args, cfg, out):
    print(json.dumps(run_experiment(cfg, out).summary(), indent=2, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="uvrepose", description="UV-space reposing experiments")
    p.add_argument("--config", help="experiment config JSON (strict schema)")
    p.add_argument("--seed", type=int, help="root seed; overrides the config")
    p.add_argument("--out", default="run", help="run directory (data/, ckpt/, reports/)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="synthesize identities, poses, images and manifests")
    sub.add_parser("train", help="train the velocity network per the configured data mix")
    s = sub.add_parser("sample", help="generate held-out poses from a checkpoint")
    s.add_argument("--ckpt")
    f = sub.add_parser("finetune", help="fit a low-rank adapter to a subject set")
    f.add_argument("--subject", required=True, help="subject manifest JSON")
    f.add_argument("--ckpt")
    f.add_argument("--iters", type=int, default=5000)
    f.add_argument("--rank", type=int, default=4)
    e = sub.add_parser("eval", help="score held-out generations")
    e.add_argument("--ckpt")
    pr = sub.add_parser("probe", help="pose-leakage probe on visibility masks")
    pr.add_argument("--per-bucket", type=int, default=30)
    pr.add_argument("--from-data", action="store_true", help="probe the run's dataset instead of fresh masks")
    sub.add_parser("ablate", help="random patch masking vs donor masking")
    sub.add_parser("run", help="gen-data, train and eval in one go")
    c = sub.add_parser("cluster", help="identity clustering (see `idgraph --help`)", add_help=False)
    c.add_argument("rest", nargs=argparse.REMAINDER)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "run": cmd_run,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "cluster":
        return idgraph.main(args.rest)
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except UVReposeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
