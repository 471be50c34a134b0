"""Command-line entry point: ``holofocus <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .errors import HolofocusError, StageFailed

log = logging.getLogger("holofocus")


def _load_config(args):
    from .pipeline import ExperimentConfig

    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _out(args, default="holofocus-out") -> Path:
    return Path(args.out or default)


def cmd_run(args):
    from .pipeline import run_pipeline

    res = run_pipeline(_load_config(args), _out(args), threads=args.threads)
    print(f"ran {len(res.executed)} stages, skipped {len(res.skipped)}; manifest: {res.manifest_path}")


def cmd_simulate(args):
    from .pipeline import run_pipeline

    res = run_pipeline(_load_config(args), _out(args), stop_after="simulate", threads=args.threads)
    print(f"raw holograms in {res.out_dir / 'raw'}")


def cmd_train(args):
    from .pipeline import CnnEntry, VitEntry, run_pipeline

    cfg = _load_config(args)
    models = [m for m in cfg.models if m.family == args.model]
    if not models:
        models = [CnnEntry() if args.model == "cnn" else VitEntry()]
    cfg = cfg.model_copy(update={"scenarios": [args.scenario], "models": models})
    res = run_pipeline(cfg, _out(args), stop_after="train", threads=args.threads)
    for m in models:
        print(f"checkpoint: {res.out_dir / 'models' / f'{m.name}_{args.scenario}' / 'checkpoint'}")


def cmd_preprocess(args):
    from .io import Manifest
    from .preprocess import Scenario, make_scenario_dataset

    raw = Manifest.load(args.raw)
    scen = Scenario(args.scenario, args.anchor, args.roi_size)
    out = make_scenario_dataset(raw, scen, args.out_size or args.roi_size, _out(args))
    print(f"{len(out)} images -> {out.root / 'manifest.json'}")


def cmd_baseline(args):
    from .autofocus import SELECTION, autofocus_sweep, write_curve_csv
    from .io import Manifest, dump_json
    from .optics import Hologram, OpticalConfig

    raw = Manifest.load(args.manifest)
    row = raw.rows[args.index]
    holo = Hologram(raw.physical(row), row["z_true_um"], row["class_label"], OpticalConfig(**raw.meta["optics"]))
    sweep = autofocus_sweep(holo, args.z_min, args.z_max, args.step, args.metric)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(sweep.curve, args.metric, out / "baseline_curve.csv")
    summary = {
        "image": row["path"],
        "kind": args.metric,
        "selection": SELECTION[args.metric],
        "z_best_um": sweep.z_best,
        "z_true_um": row["z_true_um"],
        "n_points": len(sweep.curve),
    }
    dump_json(summary, out / "baseline_summary.json")
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    from .io import Manifest
    from .models import load_checkpoint
    from .train import evaluate, write_report

    model = load_checkpoint(args.checkpoint)
    test = Manifest.load(args.test)
    report = evaluate(model, test, args.anchor)
    paths = write_report(report, _out(args), f"eval_{args.anchor}")
    print(f"accuracy {report.accuracy:.4f}, max class error {report.max_abs_class_error}; {paths[0]}")


def cmd_explain(args):
    from .explain import attention_map, emit_overlay, grad_cam, write_heatmap_csv
    from .io import read_png16
    from .models import load_checkpoint
    from .preprocess import crop_roi

    model = load_checkpoint(args.model)
    img = read_png16(args.image)
    size = model.input_shape[1]
    if img.shape[0] > size:
        img = crop_roi(img, "center", size)
    if args.method == "gradcam":
        target = args.target_class
        if target is None:
            target = int(model.predict(img[None, None].astype(np.float32)).argmax())
        heat = grad_cam(model, img, target)
    else:
        heat = attention_map(model, img, args.attention_method)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    emit_overlay(img, heat, out / f"{stem}_{args.method}.png")
    write_heatmap_csv(heat, out / f"{stem}_{args.method}.csv")
    print(f"wrote {out / f'{stem}_{args.method}.png'}")


def cmd_model_describe(args):
    from .models import build_model

    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model = build_model(args.family, config, args.seed or 0)
    print(model.describe_text())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment (or model) config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="holofocus", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="full pipeline")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate", parents=[common], help="simulate the raw hologram dataset")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="build one scenario dataset")
    s.add_argument("--raw", required=True, help="raw dataset manifest.json")
    s.add_argument("--scenario", required=True, choices=["SFO", "NSO", "SFN", "NSN"])
    s.add_argument("--anchor", default="center", choices=["center", "bottom_left"])
    s.add_argument("--roi-size", type=int, default=64)
    s.add_argument("--out-size", type=int, default=None)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("baseline", parents=[common], help="classical focus-metric sweep")
    s.add_argument("--manifest", required=True, help="raw dataset manifest.json")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--z-min", type=float, required=True)
    s.add_argument("--z-max", type=float, required=True)
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--metric", choices=["variance", "entropy"], default="variance")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("train", parents=[common], help="train one model on one scenario")
    s.add_argument("--scenario", required=True, choices=["SFO", "NSO", "SFN", "NSN"])
    s.add_argument("--model", required=True, choices=["cnn", "vit"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a test manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", required=True, help="test split manifest")
    s.add_argument("--anchor", default="center", choices=["center", "bottom_left"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", parents=[common], help="Grad-CAM / attention overlay")
    s.add_argument("--model", required=True, help="checkpoint directory")
    s.add_argument("--image", required=True)
    s.add_argument("--method", required=True, choices=["gradcam", "attention"])
    s.add_argument("--target-class", type=int, default=None)
    s.add_argument("--attention-method", choices=["rollout", "last_layer"], default="rollout")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("model", parents=[common], help="model utilities")
    msub = s.add_subparsers(dest="model_command", required=True)
    d = msub.add_parser("describe", parents=[common], help="print the layer table")
    d.add_argument("--family", required=True, choices=["cnn", "vit"])
    d.set_defaults(func=cmd_model_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (HolofocusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
