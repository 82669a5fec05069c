# cli.py
"""Command-line entry point: synth, curate, train, eval and report.

Run `python cli.py --help`. Exit codes: 0 ok, 2 usage, 3 validation, 4 I/O,
5 numerical failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import pandas as pd
import plotly.express as px
from dotenv import load_dotenv

import db
from body_model import build_template
from config import load_config, snapshot
from curation import curate
from errors import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, FurpeError, InvalidArgumentError
from evaluation import MetricReport, evaluate, format_report, reports_frame
from learn import ModelSpec, init_state
from records import (load_checkpoint, load_curated, load_dataset, read_json, save_checkpoint, save_curated,
                     save_dataset, write_json, write_text)
from synth import ExpertFeatureMaps, derive_seed, simulate_dataset
from trainer import train_ema

logger = logging.getLogger("furpe")

LOG_ENV = "FURPE_LOG"
LOG_FILE = "furpe.log"


def setup_logging(out_dir):
    """Console without timestamps; `<out>/furpe.log` with them."""
    level = os.environ.get(LOG_ENV, "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "INFO"
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_furpe", False):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    console._furpe = True
    root.addHandler(console)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(out_dir / LOG_FILE, encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    file_handler._furpe = True
    root.addHandler(file_handler)


# ============ COMMANDS ============
def _template(cfg):
    return build_template(cfg.model_dims(), cfg.dims.template_seed)


def cmd_synth(cfg, count, out_dir, name="dataset"):
    if count < 1:
        raise InvalidArgumentError(f"--count must be >= 1, got {count}")
    tpl = _template(cfg)
    feature_maps = ExpertFeatureMaps(tpl.dims, cfg.loss.feature_dims, seed=cfg.seeds.feature_map)
    entries = simulate_dataset(cfg.seeds.master, count, tpl, cfg.noise, feature_maps,
                               cfg.scene.pose_prior_scale, cfg.scene.camera(), cfg.threads)
    out_dir = Path(out_dir)
    path = save_dataset(out_dir / f"{name}.jsonl", entries)
    tpl.save(out_dir / "template.json")
    snapshot(cfg, out_dir)
    print(f"✅ wrote {count} scenes ({6 * count} records) → {path}")
    return EXIT_OK


def cmd_curate(cfg, input_path, out_dir):
    tpl = _template(cfg)
    entries = load_dataset(input_path, tpl)
    samples, report = curate(entries, tpl, cfg.selection, cfg.threads)
    out_dir = Path(out_dir)
    path = save_curated(out_dir / "curated.jsonl", samples)
    write_json(out_dir / "curation_report.json", report.to_dict())
    snapshot(cfg, out_dir)
    if report.kept == 0:
        print(f"❌ 0 samples kept out of {report.input}")
        return EXIT_VALIDATION
    print(f"✅ kept {report.kept}/{report.input} samples → {path}")
    print(f"   discarded: step1 {report.discarded_step1}, step2 {report.discarded_step2}, "
          f"step3 {report.discarded_step3}, gate undefined {report.gate_undefined}")
    return EXIT_OK


def cmd_train(cfg, input_path, out_dir, name="model", eval_path=None):
    tpl = _template(cfg)
    samples = load_curated(input_path, tpl)
    eval_fn = None
    if eval_path is not None:
        eval_entries = load_dataset(eval_path, tpl)
        eval_fn = lambda state: evaluate(state, eval_entries, tpl)  # noqa: E731

    spec = ModelSpec.build(tpl, cfg.network, cfg.loss.feature_dims)
    student = init_state(spec, derive_seed(cfg.seeds.model, 0), cfg.network.head_scale)
    teacher = student.copy()
    config = cfg.model_dump(mode="json")
    run = train_ema(samples, student, teacher, tpl, cfg.optimizer, cfg.loss, cfg.ema, cfg.augmentation,
                    seed=cfg.seeds.master, eval_fn=eval_fn, config=config, progress=sys.stderr.isatty())

    out_dir = Path(out_dir)
    ckpt = save_checkpoint(out_dir / f"{name}.ckpt", run.state, {
        "optimizer": cfg.optimizer.model_dump(mode="json"),
        "loss": cfg.loss.model_dump(mode="json"),
        "ema": cfg.ema.model_dump(mode="json"),
        "seed": cfg.seeds.master,
    })
    run.checkpoints.append(str(ckpt))
    csv_path = out_dir / f"{name}_losses.csv"
    write_text(csv_path, run.history().to_csv(index=False))
    snapshot(cfg, out_dir)

    conn = db.connect(db.db_path(out_dir))
    run_id = db.register_run(conn, name, "train", cfg.seeds.master, config)
    db.set_checkpoint(conn, run_id, ckpt)
    db.log_epoch_losses(conn, run_id, run.losses)
    if run.metrics:
        db.log_metrics(conn, run_id, {k: v for k, v in run.metrics[-1].items() if k != "epoch"})
    conn.close()

    print(f"✅ trained {len(run.losses)} epochs on {len(samples)} samples, final loss {run.final_loss():.6g}")
    print(f"   checkpoint → {ckpt}, losses → {csv_path}")
    return EXIT_OK


def cmd_eval(cfg, checkpoint, input_path, out_dir, name="eval"):
    tpl = _template(cfg)
    state, sidecar = load_checkpoint(checkpoint)
    entries = load_dataset(input_path, tpl)
    report = evaluate(state, entries, tpl)
    out_dir = Path(out_dir)
    write_json(out_dir / f"{name}_metrics.json", report.to_dict())
    table = format_report(report)
    write_text(out_dir / f"{name}_metrics.txt", table + "\n")
    snapshot(cfg, out_dir)

    conn = db.connect(db.db_path(out_dir))
    run_id = db.register_run(conn, name, "eval", sidecar.get("seed", ""), {"checkpoint": str(checkpoint)})
    db.log_metrics(conn, run_id, report.to_row())
    conn.close()

    print(table)
    print(f"✅ evaluated {report.count} samples → {out_dir / f'{name}_metrics.json'}")
    return EXIT_OK


def cmd_report(cfg, metric_paths, out_dir, use_registry=False, plot=False):
    """Merge MetricReport JSON files (and optionally the registry) into one CSV."""
    named = [(Path(p).name.removesuffix("_metrics.json"), MetricReport.from_dict(read_json(p)))
             for p in metric_paths]
    frame = reports_frame(named)
    out_dir = Path(out_dir)
    if use_registry:
        conn = db.connect(db.db_path(out_dir))
        frame = pd.concat([frame, pd.DataFrame(db.get_metric_rows(conn))], ignore_index=True)
        conn.close()
    if frame.empty:
        raise InvalidArgumentError("nothing to report: pass metric files or --registry")
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.csv"
    write_text(path, frame.to_csv(index=False))
    snapshot(cfg, out_dir)
    if plot:
        columns = [c for c in ("pa_mpjpe", "pa_v2v_full", "pa_p2s_median") if c in frame.columns]
        fig = px.bar(frame.melt(id_vars="run", value_vars=columns), x="run", y="value", color="variable",
                     barmode="group", title="Run comparison (mm)")
        write_text(out_dir / "report.html", fig.to_html())
    print(f"✅ merged {len(frame)} runs → {path}")
    return EXIT_OK


# ============ PARSER ============
def build_parser():
    parser = argparse.ArgumentParser(prog="furpe", description="Part-expert distillation pipeline")
    parser.add_argument("--config", help="PipelineConfig JSON file")
    parser.add_argument("--seed", type=int, help="master seed (overrides seeds.master)")
    parser.add_argument("--threads", type=int, help="worker threads (overrides threads)")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate scenes, detections and expert predictions")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--name", default="dataset")

    p = sub.add_parser("curate", help="three-step pseudo-label selection and fusion")
    p.add_argument("--input", required=True)

    p = sub.add_parser("train", help="distillation / EMA training")
    p.add_argument("--input", required=True, help="curated JSON-lines file")
    p.add_argument("--eval", dest="eval_input", help="dataset scored after every epoch")
    p.add_argument("--name", default="model")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--name", default="eval")

    p = sub.add_parser("report", help="merge metric files into one CSV")
    p.add_argument("metrics", nargs="*", help="<name>_metrics.json files")
    p.add_argument("--registry", action="store_true", help="include every run in the registry")
    p.add_argument("--plot", action="store_true", help="also write report.html")
    return parser


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print(f"❌ --threads must be >= 1, got {args.threads}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(args.out)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, threads=args.threads)
        if args.command == "synth":
            return cmd_synth(cfg, args.count, args.out, args.name)
        if args.command == "curate":
            return cmd_curate(cfg, args.input, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.input, args.out, args.name, args.eval_input)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.input, args.out, args.name)
        return cmd_report(cfg, args.metrics, args.out, args.registry, args.plot)
    except FurpeError as e:
        logger.error("%s", e)
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
