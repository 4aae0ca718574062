"""``pgcn`` command line: synth, train-gen, train-cmp, infer, eval.

Exit codes: 0 ok, 1 other failure, 2 invalid configuration, 3 missing
artifact (checkpoint, dataset), 4 undefined metric.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from pgcn import plotting
from pgcn.checkpoint import load_into, read_checkpoint, save_checkpoint
from pgcn.comparator import ComparatorNet
from pgcn.config import Config, config_from_dict, load_config
from pgcn.data import load_mvtec, read_image, texture_specs, write_gray, write_synthetic_dataset
from pgcn.errors import (CheckpointError, ConfigurationError, IngestionError, PGCNError,
                         UndefinedMetricError)
from pgcn.generator import GenerationNet
from pgcn.metrics import evaluate, grid_search_n, roc_curve
from pgcn.pipeline import DIRECTIONS, Detector
from pgcn import workflow

log = logging.getLogger("pgcn")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_METRIC = 0, 1, 2, 3, 4
GEN_CKPT, CMP_CKPT = "generator.pgcn", "comparator.pgcn"


class MissingArtifact(PGCNError):
    pass


# -- helpers -------------------------------------------------------------------------

def _work_dir(cfg: Config) -> Path:
    return Path(cfg.data.work_dir)


def _write_losses(path: Path, losses) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def _train_tiles(cfg: Config):
    base = Path(cfg.data.root) / cfg.data.category
    if not base.is_dir():
        raise MissingArtifact(f"dataset directory {base} does not exist (run `pgcn synth` first?)")
    train, _ = load_mvtec(cfg.data.root, cfg.data.category)
    if not train.entries:
        raise MissingArtifact(f"no training images under {base / 'train' / 'good'}")
    return workflow.tile_sets(train.entries, cfg.infer.grid_n, cfg.model.tile_resolution)


def _load_checkpoint(path: Path):
    if not path.is_file():
        raise MissingArtifact(f"checkpoint {path} not found")
    return read_checkpoint(path)


def load_generator(path: Path) -> tuple[GenerationNet, Config]:
    ckpt = _load_checkpoint(path)
    cfg = config_from_dict(ckpt.meta.get("config", {}))
    net = GenerationNet(cfg.model, np.random.default_rng(0))
    load_into(net, ckpt).eval()
    return net, cfg


def load_comparator(path: Path, cfg: Config) -> ComparatorNet:
    ckpt = _load_checkpoint(path)
    net = ComparatorNet(cfg.model, np.random.default_rng(0))
    load_into(net, ckpt).eval()
    return net


def load_detector(cfg: Config) -> Detector:
    gen, gen_cfg = load_generator(_work_dir(cfg) / GEN_CKPT)
    cmp = load_comparator(_work_dir(cfg) / CMP_CKPT, gen_cfg)
    return Detector(gen, cmp, cfg.infer.tau)


def _progress(tag: str, every: int = 50):
    def cb(step: int, loss: float) -> None:
        if step % every == 0:
            log.info("%s step %d loss %.6f", tag, step, loss)
    return cb


# -- commands ------------------------------------------------------------------------

def cmd_synth(cfg: Config, args) -> int:
    d = cfg.data
    base = write_synthetic_dataset(
        d.root, d.category, texture_specs(d.textures), image_size=d.image_size, n_train=d.n_train,
        n_test_good=d.n_test_good, n_test_defect=d.n_test_defect, defect_kinds=d.defect_kinds,
        defect_size=tuple(d.defect_size), defect_intensity=d.defect_intensity, seed=cfg.train.seed)
    print(f"wrote synthetic dataset to {base}")
    return EXIT_OK


def cmd_train_gen(cfg: Config, args) -> int:
    sets = _train_tiles(cfg)
    out = _work_dir(cfg)
    meta = {"kind": "generator", "config": cfg.to_dict()}
    ckpt_path = out / GEN_CKPT

    def checkpoint(net):
        save_checkpoint(ckpt_path, net, meta)

    net, losses = workflow.fit_generator(cfg, sets, on_step=_progress("gen"), on_checkpoint=checkpoint)
    save_checkpoint(ckpt_path, net, meta)
    _write_losses(out / "gen_loss.csv", losses)
    plotting.loss_curve(losses, out / "gen_loss.png", "generation loss")
    print(f"generator checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_train_cmp(cfg: Config, args) -> int:
    out = _work_dir(cfg)
    gen, gen_cfg = load_generator(out / GEN_CKPT)
    if gen_cfg.model != cfg.model:
        log.warning("model settings differ from the generator checkpoint; using the checkpoint's")
        cfg.model = gen_cfg.model
    sets = _train_tiles(cfg)
    meta = {"kind": "comparator", "config": cfg.to_dict()}
    ckpt_path = out / CMP_CKPT

    def checkpoint(net):
        save_checkpoint(ckpt_path, net, meta)

    net, losses = workflow.fit_comparator(cfg, gen, sets, on_step=_progress("cmp"), on_checkpoint=checkpoint)
    save_checkpoint(ckpt_path, net, meta)
    _write_losses(out / "cmp_loss.csv", losses)
    plotting.loss_curve(losses, out / "cmp_loss.png", "comparison loss")
    print(f"comparator checkpoint: {ckpt_path}")
    return EXIT_OK


def _tile_mask(final_cls: np.ndarray, th: int, tw: int) -> np.ndarray:
    return np.kron(final_cls.astype(np.float32), np.ones((th, tw), dtype=np.float32))


def cmd_infer(cfg: Config, args) -> int:
    det = load_detector(cfg)
    n = cfg.infer.grid_n
    out = Path(args.out) if args.out else _work_dir(cfg) / "infer"
    out.mkdir(parents=True, exist_ok=True)
    header = ["path", "image_score"] + [f"{d[0].upper()}{i + 1}" for d in ("left", "right") for i in range(n * n)]
    rows, failed = [], 0
    for p in args.images:
        try:
            img = read_image(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", p, exc)
            failed += 1
            continue
        res = det(img, n)
        h, w = res.anomaly_map.shape
        stem = Path(p).stem
        write_gray(out / f"{stem}_heatmap.png", res.anomaly_map)
        write_gray(out / f"{stem}_mask.png", _tile_mask(res.final_cls, h // n, w // n))
        probs = []
        for maps in (res.left, res.right):
            probs += ["" if np.isnan(v) else repr(float(v)) for v in maps.prob.reshape(-1)]
        rows.append([str(p), repr(res.image_score)] + probs)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"processed {len(rows)} image(s), skipped {failed}; outputs in {out}")
    return EXIT_OK if rows else EXIT_OTHER


def cmd_eval(cfg: Config, args) -> int:
    base = Path(cfg.data.root) / cfg.data.category
    if not base.is_dir():
        raise MissingArtifact(f"dataset directory {base} does not exist")
    _, test = load_mvtec(cfg.data.root, cfg.data.category)
    labels = {e.label == "good" for e in test.entries}
    if len(labels) < 2:
        raise UndefinedMetricError("test split holds a single class; AUROC is undefined")
    det = load_detector(cfg)
    out = Path(args.out) if args.out else _work_dir(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)

    if args.grid_search:
        try:
            candidates = [int(v) for v in args.grid_search.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"--grid-search expects comma-separated integers, got {args.grid_search!r}")

        def run(n):
            r = evaluate(det, test.entries, n)
            return r.image_auroc, r.pixel_auroc

        gs = grid_search_n(candidates, run)
        with open(out / "grid_search.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "image_auroc", "pixel_auroc"])
            w.writerows([[n, repr(a), repr(b)] for n, a, b in gs.table])
        plotting.grid_search_figure(gs.table, out / "grid_search.png")
        print(f"best n={gs.best_n}")
        n = gs.best_n
    else:
        n = cfg.infer.grid_n

    res = evaluate(det, test.entries, n)
    with open(out / "images.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "score"])
        w.writerows([[r.path, r.label, repr(r.score)] for r in res.records])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "image_auroc", "pixel_auroc"])
        w.writerow([cfg.data.category, repr(res.image_auroc), repr(res.pixel_auroc)])
    fpr, tpr = roc_curve(res.image_scores, res.image_labels)
    plotting.roc_figure({f"image, n={n}": (fpr, tpr, res.image_auroc)}, out / "roc.png")
    print(f"{cfg.data.category}: image AUROC {res.image_auroc:.4f}, pixel AUROC {res.pixel_auroc:.4f} (n={n})")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train-gen": cmd_train_gen,
    "train-cmp": cmd_train_cmp,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [model], [train], [infer], [data] tables")
    common.add_argument("--preset", help="named base profile, e.g. 'desk'")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="pgcn", description="Patch generation and comparison anomaly detection.",
        epilog="Any config key can be overridden with --section.key=value, e.g. --infer.grid_n=6.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic MVTec-style dataset")
    sub.add_parser("train-gen", parents=[common], help="train the generation network")
    sub.add_parser("train-cmp", parents=[common], help="train the comparator against a frozen generator")
    p = sub.add_parser("infer", parents=[common], help="detect anomalies in images")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", help="output directory (default: <work_dir>/infer)")
    p = sub.add_parser("eval", parents=[common], help="image/pixel AUROC on the test split")
    p.add_argument("--grid-search", metavar="N1,N2,...", help="evaluate several grid sizes and keep the best")
    p.add_argument("--out", help="output directory (default: <work_dir>/eval)")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    overrides = [a for a in rest if a.startswith("--") and "." in a.split("=", 1)[0]]
    unknown = [a for a in rest if a not in overrides]
    if unknown:
        parser.error(f"unrecognized arguments: {' '.join(unknown)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (CheckpointError, IngestionError, PGCNError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
