"""Command-line entry point: ``usvid {gen,train,eval,sweep-heads,sweep-samples,inspect}``.

Every command writes ``run.json`` into its output directory with the resolved
configuration, seed and SHA-256 digests of the inputs it read.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from .dataio import read_manifest, subsample_train_groups
from .encoder import EncoderConfig
from .experiments import MODEL_NAMES, Splits, head_for_task, model_config, run_cell
from .inspection import prototype_report, write_prototypes
from .metrics import EvalReport
from .model import ModelConfig, TemporalBaselineConfig, config_from_dict, config_to_dict, load_model
from .synthdata import TASKS, GenConfig, generate, split_clips, write_dataset
from .train import TrainConfig, fit, predict, write_history

log = logging.getLogger("usvid")

RUN_SECTIONS = ("model", "train", "data", "output_dir", "seed")
DATA_KEYS = ("manifest", "n_groups", "subsample_seed")


class ConfigError(ValueError):
    pass


# --- helpers ----------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_digest(manifest_path: str | Path) -> str:
    """Digest of a manifest plus every clip file it references."""
    m = read_manifest(manifest_path, validate=False)
    h = hashlib.sha256(Path(manifest_path).read_bytes())
    for r in m.rows:
        h.update(sha256_file(m.resolve(r)).encode())
    return h.hexdigest()


def write_run_json(out_dir: Path, command: str, config: dict, seed: int | None,
                   inputs: dict[str, str]) -> None:
    doc = {"command": command, "version": __version__, "seed": seed, "config": config,
           "inputs": inputs}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _unknown(section: str, got: dict, allowed: set[str]) -> list[str]:
    return [f"{section}.{k}" if section else k for k in sorted(set(got) - allowed)]


def resolve_run_config(raw: dict[str, Any]) -> dict[str, Any]:
    """Validate a RunConfig document and fill every default.

    A ``run.json`` written by ``train`` is accepted too. All unknown keys are
    collected and reported together in one ConfigError.
    """
    if raw.get("command") == "train" and "config" in raw:
        raw = raw["config"]
    bad = _unknown("", raw, set(RUN_SECTIONS))
    missing = [k for k in ("model", "data", "output_dir") if k not in raw]
    if missing:
        raise ConfigError(f"missing required section(s): {', '.join(missing)}")
    seed = int(raw.get("seed", 0))
    data = dict(raw["data"])
    bad += _unknown("data", data, set(DATA_KEYS))
    data.setdefault("n_groups", None)
    data.setdefault("subsample_seed", seed)

    model = dict(raw["model"])
    kind = model.pop("kind", "usvn")
    if kind == "temporal":
        bad += _unknown("model", model, _fields(TemporalBaselineConfig))
    elif kind == "usvn":
        bad += _unknown("model", model, _fields(ModelConfig))
        bad += _unknown("model.encoder", model.get("encoder", {}), _fields(EncoderConfig))
    else:
        raise ConfigError(f"model.kind must be 'usvn' or 'temporal', got {kind!r}")
    train = dict(raw.get("train", {}))
    bad += _unknown("train", train, _fields(TrainConfig))
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    if "manifest" not in data:
        raise ConfigError("data.manifest is required")

    mcfg = TemporalBaselineConfig(**model) if kind == "temporal" else ModelConfig(**model)
    train.setdefault("seed", seed)
    tcfg = TrainConfig(**train)
    return {
        "model": config_to_dict(mcfg),
        "train": dataclasses.asdict(tcfg),
        "data": data,
        "output_dir": str(raw["output_dir"]),
        "seed": seed,
    }


def load_run_config(path: str | Path) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        return resolve_run_config(raw)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None


def _configs(resolved: dict) -> tuple[Any, TrainConfig]:
    return config_from_dict(resolved["model"]), TrainConfig(**resolved["train"])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("USVID_THREADS", "1")))
    except ValueError:
        return 1


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _ensure_out(path: Path, force: bool = False) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit(f"error: output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    out = _ensure_out(Path(args.out), args.force)
    overrides = {k: v for k, v in {
        "image_size": args.image_size, "noise_std": args.noise_std, "n_groups": args.groups,
        "t_range": (args.t_min, args.t_max) if args.t_min is not None and args.t_max is not None else None,
    }.items() if v is not None}
    cfg = GenConfig(n_clips=args.clips, **overrides)
    clips = split_clips(generate(args.task, cfg, args.seed), args.seed)
    write_dataset(clips, out)
    conf = {"task": args.task, "gen": dataclasses.asdict(cfg)}
    write_run_json(out, "gen", conf, args.seed, {})
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def _train_from_resolved(resolved: dict, config_digest: str) -> Path:
    out = Path(resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    mcfg, tcfg = _configs(resolved)
    data = resolved["data"]
    manifest = read_manifest(data["manifest"])
    if data["n_groups"] is not None:
        manifest = subsample_train_groups(manifest, count=int(data["n_groups"]),
                                          seed=int(data["subsample_seed"]))
    splits = Splits.from_manifest(manifest)
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    write_run_json(out, "train", resolved, resolved["seed"],
                   {"manifest": manifest_digest(data["manifest"]), "config": config_digest})
    res = fit(mcfg, tcfg, splits.train, splits.val, out)
    if res.checkpoint is None:
        raise SystemExit("error: training produced no checkpoint")
    write_history(res.history, out / "history.csv")
    return out


def cmd_train(args) -> int:
    resolved = load_run_config(args.config)
    out = _train_from_resolved(resolved, sha256_file(args.config))
    print(f"checkpoint: {out / 'best.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise SystemExit(f"error: checkpoint not found: {ckpt}")
    model, extra = load_model(ckpt)
    manifest = read_manifest(args.manifest)
    clips = manifest.load_split(args.split)
    if not clips:
        raise SystemExit(f"error: split {args.split!r} is empty")
    res = predict(model, clips, keep_records=True)
    preds = []
    for i, cid in enumerate(res.clip_ids):
        row = {"clip_id": cid, "label": float(res.labels[i]), "prediction": float(res.values[i])}
        if res.esv is not None:
            row.update(esv=float(res.esv[i]), edv=float(res.edv[i]))
        preds.append(row)
    ent = res.head_entropy()
    report = EvalReport(task=clips[0].task, metric_name=res.metric_name, metric_value=res.metric,
                        split=args.split, predictions=preds, loss=res.loss,
                        head_entropy=None if ent is None else [float(e) for e in ent])
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json() + "\n")
    write_run_json(out, "eval", {"checkpoint": str(ckpt), "manifest": args.manifest,
                                 "split": args.split}, None,
                   {"checkpoint": sha256_file(ckpt), "manifest": manifest_digest(args.manifest)})
    print(f"{report.metric_name} on {args.split}: {report.metric_value:.4f} -> {path}")
    return 0


def _sweep_job(job: tuple) -> dict:
    name, cfg_dict, train_dict, manifest_path, n_groups, seed, out_dir = job
    torch.set_num_threads(1)
    splits = Splits.from_manifest(read_manifest(manifest_path))
    cell = run_cell(name, config_from_dict(cfg_dict), TrainConfig(**train_dict), splits,
                    n_groups, seed, out_dir)
    return {"model": name, "n_groups": cell.n_groups, "seed": seed,
            "val_metric": cell.val_metric, "test_metric": cell.test_metric}


def _run_jobs(jobs: list[tuple]) -> list[dict]:
    n = _threads()
    if n == 1 or len(jobs) == 1:
        return [_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_sweep_job, jobs))


def cmd_sweep_heads(args) -> int:
    resolved = load_run_config(args.config)
    mcfg, tcfg = _configs(resolved)
    if not isinstance(mcfg, ModelConfig):
        raise SystemExit("error: head sweep needs a usvn model config")
    heads = _int_list(args.heads)
    d = mcfg.encoder.embed_dim
    bad = [h for h in heads if h < 1 or d % h]
    if bad:
        raise SystemExit(f"error: head counts {bad} do not divide embed_dim {d}")
    seeds = _int_list(args.seeds)
    out = Path(resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = resolved["data"]["manifest"]
    write_run_json(out, "sweep-heads", {**resolved, "heads": heads, "seeds": seeds}, resolved["seed"],
                   {"manifest": manifest_digest(manifest_path)})
    jobs = []
    for h in heads:
        cfg = config_to_dict(dataclasses.replace(mcfg, n_heads=h))
        for s in seeds:
            jobs.append((f"usvn_h{h}", cfg, dataclasses.asdict(tcfg), manifest_path, None, s,
                         str(out / f"heads{h}_s{s}")))
    rows = _run_jobs(jobs)
    with open(out / "heads.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n_heads", "val_metric"])
        for h in heads:
            vals = [r["val_metric"] for r in rows if r["model"] == f"usvn_h{h}"]
            wr.writerow([h, repr(float(np.mean(vals)))])
    with open(out / "heads_by_seed.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n_heads", "seed", "val_metric"])
        for r in rows:
            wr.writerow([r["model"].split("_h")[1], r["seed"], repr(r["val_metric"])])
    print(f"wrote {out / 'heads.csv'}")
    return 0


def cmd_sweep_samples(args) -> int:
    resolved = load_run_config(args.config)
    mcfg, tcfg = _configs(resolved)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    unknown = [m for m in models if m not in MODEL_NAMES]
    if unknown:
        raise SystemExit(f"error: unknown model(s) {unknown}; choose from {', '.join(MODEL_NAMES)}")
    manifest_path = resolved["data"]["manifest"]
    manifest = read_manifest(manifest_path)
    n_avail = len(manifest.groups("train"))
    counts = _int_list(args.group_counts)
    bad = [c for c in counts if c < 1 or c > n_avail]
    if bad:
        raise SystemExit(f"error: group counts {bad} outside [1, {n_avail}]")
    seeds = _int_list(args.seeds)
    head = mcfg.head
    enc = mcfg.encoder if isinstance(mcfg, ModelConfig) else EncoderConfig(
        in_channels=mcfg.in_channels, image_size=mcfg.image_size)
    n_heads = mcfg.n_heads if isinstance(mcfg, ModelConfig) else 16
    out = Path(resolved["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_run_json(out, "sweep-samples", {**resolved, "models": models, "group_counts": counts,
                                          "seeds": seeds}, resolved["seed"],
                   {"manifest": manifest_digest(manifest_path)})
    jobs = []
    for name in models:
        cfg = config_to_dict(model_config(name, head, enc, n_heads, mcfg.dropout))
        for c in counts:
            for s in seeds:
                jobs.append((name, cfg, dataclasses.asdict(tcfg), manifest_path, c, s,
                             str(out / f"{name}_g{c}_s{s}")))
    rows = _run_jobs(jobs)
    with open(out / "samples.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["model", "n_groups", "test_metric", "seed"])
        for r in rows:
            wr.writerow([r["model"], r["n_groups"], repr(r["test_metric"]), r["seed"]])
    print(f"wrote {out / 'samples.csv'}")
    return 0


def cmd_inspect(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise SystemExit(f"error: checkpoint not found: {ckpt}")
    model, _ = load_model(ckpt)
    if not isinstance(model.cfg, ModelConfig) or model.cfg.pooling != "attention":
        raise SystemExit("error: no attention records: checkpoint does not use attention pooling")
    manifest = read_manifest(args.manifest)
    clips = manifest.load_split(args.split)
    if not clips:
        raise SystemExit(f"error: split {args.split!r} is empty")
    rng = np.random.default_rng(args.seed)
    if len(clips) > args.batch:
        idx = np.sort(rng.choice(len(clips), size=args.batch, replace=False))
        clips = [clips[i] for i in idx]
    res = predict(model, clips, keep_records=True)
    rows = prototype_report(res.records, res.clip_ids, n_heads=args.heads, k=args.topk)
    out = Path(args.out) if args.out else ckpt.parent / "inspect"
    out.mkdir(parents=True, exist_ok=True)
    path = write_prototypes(rows, {c.clip_id: c for c in clips}, out)
    write_run_json(out, "inspect", {"checkpoint": str(ckpt), "manifest": args.manifest,
                                    "split": args.split, "batch": args.batch, "heads": args.heads,
                                    "topk": args.topk}, args.seed,
                   {"checkpoint": sha256_file(ckpt), "manifest": manifest_digest(args.manifest)})
    print(f"wrote {len(rows)} prototype rows to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usvid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", required=True, choices=sorted(TASKS))
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.add_argument("--image-size", type=int)
    g.add_argument("--noise-std", type=float)
    g.add_argument("--groups", type=int)
    g.add_argument("--t-min", type=int)
    g.add_argument("--t-max", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model from a JSON run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("sweep-heads", help="validation metric versus number of attention heads")
    h.add_argument("--config", required=True)
    h.add_argument("--heads", required=True)
    h.add_argument("--seeds", default="0,1,2")
    h.set_defaults(func=cmd_sweep_heads)

    s = sub.add_parser("sweep-samples", help="test metric versus number of training groups")
    s.add_argument("--config", required=True)
    s.add_argument("--group-counts", required=True)
    s.add_argument("--models", default="usvn,avg,max,temporal")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_sweep_samples)

    i = sub.add_parser("inspect", help="prototype frames of the lowest-entropy heads")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--split", default="val", choices=("train", "val", "test"))
    i.add_argument("--batch", type=int, default=80)
    i.add_argument("--heads", type=int, default=4)
    i.add_argument("--topk", type=int, default=10)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(_threads())
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
