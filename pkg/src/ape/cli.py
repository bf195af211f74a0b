"""Command-line entry point: ``ape <command> [--config FILE] [--seed N] [--out DIR] [--workers N]``.

Exit codes: 0 success, 2 invalid configuration, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch
import yaml

from . import plots
from .config import ConfigError, ExperimentConfig, config_from_dict
from .evaluation import edge_table, embed_volume, landmark_table
from .localization import evaluate_localization, make_folds
from .model import CheckpointError, load_checkpoint
from .phantom import PhantomSample, generate_phantom, load_phantom, save_phantom
from .retrieval import DETAIL_COLUMNS, evaluate_retrieval, export_center_embeddings, write_rows
from .train import NonFiniteLossError, train
from .volume_io import EmbeddingMap, VolumeFormatError, load_embedding_map, save_embedding_map

log = logging.getLogger("ape")

COMMANDS = ("generate", "train", "embed", "eval-retrieval", "eval-localization", "export-centers")
LOCALIZATION_COLUMNS = ("organ", "iou_mean", "iou_std", "alpha", "recall", "vr_mean", "vr_std", "n")
LOCALIZATION_DETAIL_COLUMNS = ("organ", "fold", "test_id", "iou", "lo_x", "lo_y", "lo_z", "hi_x", "hi_y", "hi_z")


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(x) if isinstance(x, float) else x for x in r] for r in rows)
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# dataset ---------------------------------------------------------------------

def _phantom_id(seed: int) -> str:
    return f"ph{seed:05d}"


def read_index(data_dir) -> list[str]:
    data_dir = Path(data_dir)
    with open(data_dir / "index.csv", newline="") as f:
        return [row["id"] for row in csv.DictReader(f)]


def load_dataset(data_dir) -> dict[str, PhantomSample]:
    data_dir = Path(data_dir)
    return {vid: load_phantom(data_dir / vid) for vid in read_index(data_dir)}


def _require_dataset(data_dir, minimum: int = 1) -> list[str]:
    index = Path(data_dir) / "index.csv"
    if not index.is_file():
        raise ConfigError(f"dataset index {index} does not exist (run `ape generate` first)")
    ids = read_index(data_dir)
    if len(ids) < minimum:
        raise ConfigError(f"dataset {data_dir} has {len(ids)} volume(s), this command needs at least {minimum}")
    return ids


def _require_checkpoint(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.paths.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist (run `ape train` first)")
    return path


# commands --------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    data_dir = Path(cfg.paths.data)
    data_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.dataset.count):
        seed = cfg.dataset.seed_offset + i
        vid = _phantom_id(seed)
        save_phantom(generate_phantom(cfg.phantom, seed), data_dir / vid)
        rows.append((vid, seed))
    _write_csv(data_dir / "index.csv", ("id", "seed"), rows)
    log.info("wrote %d phantoms to %s", len(rows), data_dir)
    return data_dir


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> Path:
    volumes = None
    if cfg.paths.train_data is not None:
        _require_dataset(cfg.paths.train_data)
        volumes = [s.volume for s in load_dataset(cfg.paths.train_data).values()]
    out = Path(cfg.paths.out) / "train"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    result = train(cfg.train_config(), out, cfg.phantom, cfg.sampler, cfg.model, volumes, resume=resume)
    if cfg.train.variant == "naive" and result.summary["aug_ops"] != 0:
        raise RuntimeError(f"naive training invoked {result.summary['aug_ops']} augmentation ops")
    plots.loss_curve(result.metrics, out / "loss.png")
    log.info("checkpoint written to %s", result.checkpoint)
    return result.checkpoint


def _embed_all(cfg: ExperimentConfig, samples: dict[str, PhantomSample], model) -> dict[str, EmbeddingMap]:
    e = cfg.embed
    maps = {}
    for vid, s in samples.items():
        t0 = time.perf_counter()
        maps[vid] = embed_volume(model, s.volume, e.window, e.overlap, e.foreground_threshold, e.batch_size)
        dt = time.perf_counter() - t0
        log.info("%s: embedded %d voxels at %.0f voxels/s", vid, maps[vid].data[0].size, maps[vid].data[0].size / dt)
    return maps


def cmd_embed(cfg: ExperimentConfig) -> Path:
    ckpt = _require_checkpoint(cfg)
    _require_dataset(cfg.paths.data)
    model, _ = load_checkpoint(ckpt)
    samples = load_dataset(cfg.paths.data)
    out = Path(cfg.paths.out) / "embed"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vid, m in _embed_all(cfg, samples, model).items():
        save_embedding_map(m, out / f"{vid}.apem")
        rows.append((vid, f"{vid}.apem", *m.shape))
    _write_csv(out / "index.csv", ("id", "file", "size_x", "size_y", "size_z"), rows)
    (out / "source.json").write_text(json.dumps(_embed_source(cfg, ckpt), indent=2, sort_keys=True) + "\n")
    return out


def _embed_source(cfg: ExperimentConfig, ckpt: Path) -> dict:
    return {"checkpoint_sha256": _sha256(ckpt), "dataset": str(cfg.paths.data),
            "embed": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg.embed).items()}}


def _maps_for(cfg: ExperimentConfig, samples: dict[str, PhantomSample]) -> dict[str, EmbeddingMap]:
    """Maps written by ``embed`` when they match checkpoint and settings, otherwise computed now."""
    ckpt = _require_checkpoint(cfg)
    embed_dir = Path(cfg.paths.out) / "embed"
    source = embed_dir / "source.json"
    if source.is_file() and json.loads(source.read_text()) == _embed_source(cfg, ckpt):
        if all((embed_dir / f"{vid}.apem").is_file() for vid in samples):
            return {vid: load_embedding_map(embed_dir / f"{vid}.apem") for vid in samples}
    model, _ = load_checkpoint(ckpt)
    return _embed_all(cfg, samples, model)


def cmd_eval_retrieval(cfg: ExperimentConfig) -> Path:
    _require_dataset(cfg.paths.data, minimum=2)
    _require_checkpoint(cfg)
    samples = load_dataset(cfg.paths.data)
    landmarks = {vid: landmark_table(s, cfg.eval.landmark_kinds) for vid, s in samples.items()}
    maps = _maps_for(cfg, samples)
    out = Path(cfg.paths.out) / "retrieval"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "queries.csv", ("volume_id", "landmark", "kind", "x_mm", "y_mm", "z_mm"), [
        (vid, name, kind, *(float(x) for x in p))
        for vid in sorted(landmarks) for name, (kind, p) in sorted(landmarks[vid].items())
    ])
    rows, summary = evaluate_retrieval(maps, landmarks)
    write_rows(out / "results.csv", rows, DETAIL_COLUMNS)
    _write_csv(out / "report.csv", ("kind", "mre_mm", "std_mm", "n"),
               [(kind, mean, std, n) for kind, (mean, std, n) in summary.items()])
    plots.error_histogram(out / "results.csv", out / "errors.png")
    for kind, (mean, std, n) in summary.items():
        log.info("MRE %s: %.2f +- %.2f mm over %d retrievals", kind, mean, std, n)
    return out


def cmd_eval_localization(cfg: ExperimentConfig) -> Path:
    ids = _require_dataset(cfg.paths.data, minimum=1)
    if cfg.eval.shots >= len(ids):
        raise ConfigError(f"eval.shots = {cfg.eval.shots} leaves no test volumes among {len(ids)}")
    _require_checkpoint(cfg)
    samples = load_dataset(cfg.paths.data)
    maps = _maps_for(cfg, samples)
    out = Path(cfg.paths.out) / "localization"
    out.mkdir(parents=True, exist_ok=True)
    folds = make_folds(list(samples), cfg.eval.shots, cfg.seed)
    _write_csv(out / "folds.csv", ("fold", "volume_id"), [(f, vid) for f, fold in enumerate(folds) for vid in fold])
    detail, report = evaluate_localization(
        maps,
        {vid: edge_table(s) for vid, s in samples.items()},
        {vid: s.masks for vid, s in samples.items()},
        {vid: s.volume for vid, s in samples.items()},
        shots=cfg.eval.shots,
        seed=cfg.seed,
    )
    write_rows(out / "detail.csv", detail, LOCALIZATION_DETAIL_COLUMNS)
    write_rows(out / "report.csv", report, LOCALIZATION_COLUMNS)
    plots.iou_bars(out / "report.csv", out / "iou.png")
    for r in report:
        log.info("%s: IoU %.3f, VR@99 %s", r["organ"], r["iou_mean"], r["vr_mean"])
    return out


def cmd_export_centers(cfg: ExperimentConfig) -> Path:
    _require_dataset(cfg.paths.data)
    _require_checkpoint(cfg)
    samples = load_dataset(cfg.paths.data)
    maps = _maps_for(cfg, samples)
    out = Path(cfg.paths.out) / "centers"
    out.mkdir(parents=True, exist_ok=True)
    export_center_embeddings(
        ((vid, maps[vid], {o: lm.center for o, lm in s.landmarks.items()}) for vid, s in samples.items()),
        out / "centers.csv",
    )
    plots.center_scatter(out / "centers.csv", out / "centers.png")
    return out


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (see docs/config.md)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override paths.out")
    common.add_argument("--workers", type=int, help="CPU threads for torch")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ape", description="Anatomical positional embeddings on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the evaluation phantoms")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", action="store_true", help="continue from <out>/train/last.pt")
    sub.add_parser("embed", parents=[common], help="embed every dataset volume")
    sub.add_parser("eval-retrieval", parents=[common], help="landmark retrieval MRE over all volume pairs")
    sub.add_parser("eval-localization", parents=[common], help="few-shot box IoU and VR@99")
    sub.add_parser("export-centers", parents=[common], help="organ-center embeddings as CSV and scatter plot")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            data = yaml.safe_load(args.config.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{args.config}: not valid YAML ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        base = args.config.resolve().parent
    else:
        data, base = {}, Path.cwd()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    if args.out is not None:
        data.setdefault("paths", {})
        if not isinstance(data["paths"], dict):
            raise ConfigError("paths: expected a mapping")
        data["paths"]["out"] = str(args.out.resolve())
    return config_from_dict(data, base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(cfg.workers)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "embed":
            cmd_embed(cfg)
        elif args.command == "eval-retrieval":
            cmd_eval_retrieval(cfg)
        elif args.command == "eval-localization":
            cmd_eval_localization(cfg)
        else:
            cmd_export_centers(cfg)
    except ConfigError as e:
        print(f"ape: config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLossError as e:
        print(f"ape: aborted: {e}", file=sys.stderr)
        return 3
    except (RuntimeError, OSError, CheckpointError, VolumeFormatError, ValueError) as e:
        print(f"ape: aborted: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
