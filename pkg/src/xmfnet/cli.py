"""Command-line entry point: gen-data, train, eval, complete, render."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import AccessAudit, generate_objects, load_dataset, write_dataset
from .errors import ConfigError, DivergenceError, IngestionError, SchemaError
from .geometry import read_pcf, write_pcf
from .losses import EvalMetrics, write_metrics_csv
from .model import XMFNet
from .render import load_camera, read_pgm, render_silhouette, write_pgm
from .training import RunConfig, evaluate, mean_metrics, per_view_breakdown, train_supervised
from .weaksup import train_weak

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "model.xmf"


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args) -> RunConfig:
    """Preset for the chosen scale, then the --config file, then explicit flags."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        try:
            file_cfg = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    scale = args.scale or file_cfg.get("scale", "toy")
    d = _merge(RunConfig.preset(scale).to_dict(), file_cfg)
    d["scale"] = scale
    flags = {"mode": "mode", "seed": "seed", "data": "data", "out": "out", "checkpoint": "checkpoint",
             "views": "views", "shapes": "shapes", "steps": "steps", "batch_size": "batch_size", "lr": "lr"}
    for attr, key in flags.items():
        val = getattr(args, attr, None)
        if val is not None:
            d[key] = val
    for attr, key in (("beta", "beta"), ("alpha", "alpha"), ("lam", "lam")):
        val = getattr(args, attr, None)
        if val is not None:
            d["loss"][key] = val
    if getattr(args, "epsilon_mask", None) is not None:
        d["render"]["epsilon"] = args.epsilon_mask
    return RunConfig.from_dict(d)


def _out_dir(run: RunConfig) -> Path:
    if not run.out:
        raise ConfigError("--out is required")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    run = resolve_config(args)
    out = _out_dir(run)
    objs = generate_objects(run.shapes, run.views, run.model.n_points, run.seed, view_cfg=run.view)
    write_dataset(out, objs)
    run.save(out / CONFIG_NAME)
    fams = {}
    for o in objs:
        fams[o.family] = fams.get(o.family, 0) + 1
    print(f"wrote {len(objs)} objects x {run.views} views to {out}")
    for fam, n in sorted(fams.items()):
        print(f"  {fam}: {n}")
    return EXIT_OK


def _load_split(run: RunConfig, split: str, audit: Optional[AccessAudit] = None):
    if not run.data:
        raise ConfigError("--data is required")
    return load_dataset(run.data, split, run.model.n_points, audit)


def cmd_train(args) -> int:
    run = resolve_config(args)
    out = _out_dir(run)
    run.save(out / CONFIG_NAME)
    audit = AccessAudit()
    train = _load_split(run, "train", audit)
    test = _load_split(run, "test", audit)
    if not train:
        raise ConfigError(f"no training samples under {run.data}")
    ckpt = Path(run.checkpoint) if run.checkpoint else out / CHECKPOINT_NAME
    trainer = train_weak if run.mode == "weak" else train_supervised
    result = trainer(train, run, test, log_path=out / "train_log.csv", checkpoint=ckpt)
    with (out / "access_log.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "path"])
        w.writerows(audit.records)
    gt_reads = audit.reads("train", "complete.pcf")
    print(f"mode={run.mode} steps={run.steps} final_loss={result.final_loss:.6g}"
          + (f" best_eval_cd_e3={result.best_cd_e3:.6g}" if result.best_cd_e3 is not None else ""))
    print(f"checkpoint: {ckpt}")
    print(f"ground-truth reads during training: {len(gt_reads)}")
    return EXIT_OK


def _load_model(run: RunConfig, checkpoint) -> XMFNet:
    if not checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(checkpoint)
    if not path.is_file():
        raise IngestionError(path, "checkpoint not found")
    model = XMFNet(run.model, seed=run.seed)
    model.load(path)
    return model


def _config_for_checkpoint(args) -> RunConfig:
    # a run directory holds its resolved config; use it unless one is given
    if not args.config and args.checkpoint:
        saved = Path(args.checkpoint).parent / CONFIG_NAME
        if saved.is_file():
            args.config = str(saved)
    return resolve_config(args)


def cmd_eval(args) -> int:
    run = _config_for_checkpoint(args)
    out = _out_dir(run)
    run.save(out / CONFIG_NAME)
    model = _load_model(run, run.checkpoint or args.checkpoint)
    samples = _load_split(run, args.split)
    if not samples:
        raise ConfigError(f"no {args.split} samples under {run.data}")
    rows = evaluate(model, samples, run.loss.fscore_threshold)
    cd, f = mean_metrics(rows)
    write_metrics_csv(out / "metrics.csv", [(r["sample_id"], EvalMetrics(r["cd_e3"] / 1e3, r["fscore"]))
                                            for r in rows] + [("mean", EvalMetrics(cd / 1e3, f))])
    with (out / "per_view.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "n", "cd_e3", "fscore"])
        for r in per_view_breakdown(rows):
            w.writerow([r["view"], r["n"], f"{r['cd_e3']:.9g}", f"{r['fscore']:.9g}"])
    print(f"samples={len(rows)} mean_cd_e3={cd:.6g} mean_fscore={f:.6g}")
    return EXIT_OK


def _read_image(path) -> np.ndarray:
    img = read_pgm(path)
    return np.repeat(img[..., None], 3, axis=2)


def _echo_config(run: RunConfig, output: Path) -> None:
    run.save(output.with_name(output.name + ".config.json"))


def cmd_complete(args) -> int:
    run = _config_for_checkpoint(args)
    model = _load_model(run, run.checkpoint or args.checkpoint)
    partial = read_pcf(args.partial)
    if partial.shape[0] != run.model.n_points:
        raise SchemaError(f"{args.partial}: expected {run.model.n_points} points, found {partial.shape[0]}")
    if not run.model.unimodal and not args.image:
        raise ConfigError("--image is required unless the model is unimodal")
    image = None if run.model.unimodal else _read_image(args.image)
    pred = model.complete(partial, image).data
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pcf(out, pred)
    _echo_config(run, out)
    print(f"wrote {pred.shape[0]} points to {out}")
    if args.render:
        if not args.camera:
            raise ConfigError("--render needs --camera")
        img = render_silhouette(pred, load_camera(args.camera), run.render.rho, run.render.k_splat).data
        write_pgm(args.render, img)
        print(f"wrote render to {args.render}")
    return EXIT_OK


def cmd_render(args) -> int:
    run = resolve_config(args)
    pc = read_pcf(args.input)
    cam = load_camera(args.camera)
    img = render_silhouette(pc, cam, run.render.rho, run.render.k_splat).data
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, img)
    _echo_config(run, out)
    print(f"wrote {cam.H}x{cam.W} render to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--scale", choices=["paper", "toy"], help="preset (default toy)")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint")
    common.add_argument("--views", type=int)
    common.add_argument("--shapes", type=int)
    common.add_argument("--mode", choices=["supervised", "weak", "unimodal"])
    common.add_argument("--steps", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--epsilon-mask", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xmfnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(fn=cmd_train)
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--split", choices=["train", "test", "all"], default="test")
    ev.set_defaults(fn=cmd_eval)
    cp = sub.add_parser("complete", parents=[common], help="complete one partial cloud")
    cp.add_argument("--partial", required=True, help="input PCF")
    cp.add_argument("--image", help="input PGM (required unless unimodal)")
    cp.add_argument("--output", required=True, help="output PCF")
    cp.add_argument("--camera", help="camera JSON for --render")
    cp.add_argument("--render", help="also write a rendered PGM")
    cp.set_defaults(fn=cmd_complete)
    rd = sub.add_parser("render", parents=[common], help="render a point cloud silhouette")
    rd.add_argument("--input", required=True, help="PCF file")
    rd.add_argument("--camera", required=True, help="camera JSON")
    rd.add_argument("--output", required=True, help="output PGM")
    rd.set_defaults(fn=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
