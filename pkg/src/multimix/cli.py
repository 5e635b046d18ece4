"""``multimix`` command line: train, eval, saliency and synth subcommands.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__, data, metrics, train
from .autodiff import NonFiniteError
from .data import DataError, Datasets, Stream
from .model import CheckpointError
from .saliency import saliency_output

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("multimix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", required=True, help="output directory (created if absent)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--strict-deterministic", action="store_true", help="pin one BLAS thread")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multimix", description="Joint semi-supervised classification and segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from manifests named in the config")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from (weights and optimizer state)")

    p = sub.add_parser("eval", help="evaluate checkpoints on manifests")
    _common(p)
    p.add_argument("--checkpoint", action="append", required=True, help="checkpoint file (repeatable)")
    p.add_argument("--manifest", action="append", required=True, help="manifest CSV (repeatable)")
    p.add_argument("--task", choices=("auto", "classification", "segmentation", "both"), default="auto")

    p = sub.add_parser("saliency", help="dump saliency heatmaps as PGM")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _resolve_config(args) -> train.TrainConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.strict_deterministic:
        overrides.append("train.strict_deterministic=true")
    return train.load_config(args.config, overrides)


def _prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _guard(paths: list[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _write_header(path: Path, cfg: train.TrainConfig, extra: dict[str, object] | None = None) -> None:
    lines = train.header_lines(cfg)
    lines += [f"# {k} = {v}" for k, v in (extra or {}).items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_training_data(cfg: train.TrainConfig) -> Datasets:
    streams = {}
    for name in data.STREAMS:
        path = getattr(cfg, name)
        streams[name] = data.load_stream(path, cfg.input_size) if path else Stream.empty(cfg.input_size)
    ds = Datasets(**streams)
    if len(ds.cls_labeled) == 0 and len(ds.seg_labeled) == 0:
        raise DataError("no labeled data: set data.cls_labeled and/or data.seg_labeled")
    return ds


def _load_model(path: str, cfg: train.TrainConfig):
    # bridge presence is read from the decoder weights; SSL toggles do not affect inference
    params, _ = train.load_checkpoint(path, input_size=cfg.input_size)
    return params


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    datasets = load_training_data(cfg)
    out = _prepare_out(args.out)
    final = out / "final.mmix"
    log_path = out / "log.csv"
    params = state = None
    if args.resume:
        params, state = train.load_checkpoint(
            args.resume, cfg.input_size, bridge_enabled=cfg.bridge,
            ssl_classification_enabled=cfg.ssl_classification, ssl_segmentation_enabled=cfg.ssl_segmentation,
        )
        if state is None:
            raise CheckpointError(f"{args.resume} has no optimizer state; cannot resume")
        state.beta1, state.beta2, state.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        _guard([final], args.force)
    else:
        _guard([final, log_path], args.force)
    result = train.train(cfg, datasets, params=params, state=state, checkpoint_dir=out, log_path=log_path)
    train.save_checkpoint(final, result.params, result.state, force=True)
    logger.info("trained %d steps; wrote %s", result.state.step, final)
    return EXIT_OK


def _infer_task(stream: Stream, task: str) -> str:
    if task != "auto":
        return task
    if stream.labels is not None and stream.masks is not None:
        return "both"
    if stream.masks is not None:
        return "segmentation"
    if stream.labels is not None:
        return "classification"
    raise DataError("manifest has neither labels nor masks; nothing to evaluate")


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out)
    targets = [out / n for n in ("metrics.csv", "roc.csv", "bland_altman.csv", "dice.csv")]
    _guard(targets, args.force)
    models = [(Path(c).stem, _load_model(c, cfg)) for c in args.checkpoint]
    cols = metrics.report_fields()
    metric_rows, roc_rows, ba_rows, dice_rows = [], [], [], []
    for mpath in args.manifest:
        stream = data.load_stream(mpath, cfg.input_size)
        if len(stream) == 0:
            raise DataError(f"{mpath}: empty dataset")
        task = _infer_task(stream, args.task)
        dname = Path(mpath).stem
        for mname, params in models:
            rep = train.evaluate(params, stream, task)
            metric_rows.append([dname, mname, task, len(stream)] + [repr(getattr(rep, c)) for c in cols])
            roc_rows += [[dname, mname, fpr, tpr, thr] for fpr, tpr, thr in rep.roc_rows]
            ba_rows += [[dname, mname, p, m, d] for p, (m, d) in zip(stream.paths, rep.bland_altman_rows)]
            dice_rows += [[dname, mname, p, d] for p, d in zip(stream.paths, rep.dice_rows)]
    _write_csv(targets[0], ["dataset", "model", "task", "n"] + cols, metric_rows)
    _write_csv(targets[1], ["dataset", "model", "fpr", "tpr", "threshold"], roc_rows)
    _write_csv(targets[2], ["dataset", "model", "path", "mean_pixels", "diff_pixels"], ba_rows)
    _write_csv(targets[3], ["dataset", "model", "path", "dice"], dice_rows)
    _write_header(out / "eval_header.txt", cfg, {"checkpoints": ";".join(args.checkpoint),
                                                 "manifests": ";".join(args.manifest)})
    return EXIT_OK


def cmd_saliency(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out)
    index = out / "index.csv"
    _guard([index], args.force)
    params = _load_model(args.checkpoint, cfg)
    stream = data.load_stream(args.manifest, cfg.input_size)
    if len(stream) == 0:
        raise DataError(f"{args.manifest}: empty dataset")
    rows = []
    with train.thread_limit(cfg.strict_deterministic):
        for i in range(len(stream)):
            so = saliency_output(params, stream.images[i : i + 1].astype(params["head.fc.weight"].dtype))
            name = f"{i:04d}_{Path(stream.paths[i]).stem}_saliency.pgm"
            data.write_pgm(out / name, so.y.data[0, 0])
            rows.append([stream.paths[i], int(so.predicted[0]), repr(float(so.confidence[0])), name])
    _write_csv(index, ["path", "predicted_class", "confidence", "heatmap"], rows)
    _write_header(out / "saliency_header.txt", cfg, {"checkpoint": args.checkpoint, "manifest": args.manifest})
    return EXIT_OK


def synth_config(path: str | None, overrides: list[str], seed: int | None) -> data.SynthConfig:
    """Flat keys: size, stream counts, abnormal_prob, seed, cls_source.<field>, seg_source.<field>."""
    settings: dict[str, str] = {}
    if path:
        try:
            settings.update(train.parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise train.ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise train.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    if seed is not None:
        settings["seed"] = str(seed)
    cfg = data.SynthConfig()
    top = {f.name: f.type for f in fields(data.SynthConfig)}
    styles = {f.name for f in fields(data.SourceStyle)}
    changes, style_changes = {}, {"cls_source": {}, "seg_source": {}}
    for key, value in settings.items():
        try:
            if "." in key:
                src, attr = key.split(".", 1)
                if src not in style_changes or attr not in styles:
                    raise train.ConfigError(f"unknown synth key {key!r}")
                style_changes[src][attr] = float(value)
            elif key in top and key not in style_changes:
                changes[key] = float(value) if key == "abnormal_prob" else int(value)
            else:
                raise train.ConfigError(f"unknown synth key {key!r}")
        except ValueError as exc:
            raise train.ConfigError(f"{key}: {exc}") from None
    for src, ch in style_changes.items():
        if ch:
            changes[src] = replace(getattr(cfg, src), **ch)
    cfg = replace(cfg, **changes)
    try:
        cfg.validate()
    except ValueError as exc:
        raise train.ConfigError(str(exc)) from None
    return cfg


def cmd_synth(args) -> int:
    cfg = synth_config(args.config, args.overrides, args.seed)
    out = Path(args.out)
    _guard([out / "dataset.toml"], args.force)
    manifests = data.synth_generate(cfg, out)
    for name, path in manifests.items():
        logger.info("%s: %s", name, path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "saliency": cmd_saliency, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"multimix: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (train.ConfigError, FileExistsError) as exc:
        print(f"multimix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"multimix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (train.TrainingDiverged, NonFiniteError) as exc:
        snap = getattr(exc, "snapshot", None)
        extra = f" (snapshot {snap})" if snap else ""
        print(f"multimix: numeric failure: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures (dataset budgets, empty datasets, task/annotation mismatch)
        print(f"multimix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
