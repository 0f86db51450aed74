"""Command-line entry point: ``anatomy-ssl <command> [options]``.

Commands: ``gen-data``, ``pretrain``, ``detect``, ``probe`` and ``plot``.
Settings come from a flat ``key = value`` file (``--config``) with ``phantom.``,
``train.`` and ``eval.`` prefixes, overridden by repeated ``--set key=value``
flags and finally by command flags such as ``--epochs``. ``--print-config``
echoes the resolved settings.

Exit codes: 0 success, 2 usage or configuration, 3 data or persistence, 4 numerical.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    EvaluationError,
    IntegrityError,
    NumericalError,
    PersistenceError,
)
from .phantom import PhantomConfig

log = logging.getLogger("anatomy_ssl")

OUT_ENV = "ANATOMY_SSL_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class EvalOptions:
    encoder: str = "teacher"
    probe_l2: float = 1e-3
    probe_max_iter: int = 200
    grid: int = 3
    grid_samples: int = 4


def _default_train():
    from .trainer import TrainConfig

    return TrainConfig()


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: object = field(default_factory=_default_train)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def flat(self) -> dict[str, object]:
        out = {}
        for section in ("phantom", "train", "eval"):
            for key, value in _flatten(getattr(self, section)).items():
                out[f"{section}.{key}"] = value
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.flat().items()))


def _flatten(obj) -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": x for k, x in _flatten(v).items()})
        else:
            out[f.name] = v
    return out


def _fmt(v) -> str:
    return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, current, key: str):
    text = raw.strip()
    try:
        if isinstance(current, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if current is None:
            return None if text.lower() in ("none", "") else int(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, str):
            return text
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    raise ConfigurationError(f"{key} cannot be set from the command line")


def _set_path(obj, parts: list[str], raw: str, key: str):
    names = {f.name for f in dataclasses.fields(obj)}
    if parts[0] not in names:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    current = getattr(obj, parts[0])
    if len(parts) > 1:
        if not dataclasses.is_dataclass(current):
            raise ConfigurationError(f"unknown configuration key {key!r}")
        return dataclasses.replace(obj, **{parts[0]: _set_path(current, parts[1:], raw, key)})
    if dataclasses.is_dataclass(current):
        raise ConfigurationError(f"{key} is a section, not a value")
    return dataclasses.replace(obj, **{parts[0]: _coerce(raw, current, key)})


def apply_setting(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    section, _, rest = key.strip().partition(".")
    if section not in ("phantom", "train", "eval") or not rest:
        raise ConfigurationError(f"unknown configuration key {key!r} (expected phantom.*, train.* or eval.*)")
    return dataclasses.replace(cfg, **{section: _set_path(getattr(cfg, section), rest.split("."), raw, key)})


def parse_config_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        cfg = apply_setting(cfg, key, value)
    return cfg


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise PersistenceError(f"cannot read config {args.config}: {exc}") from exc
        cfg = parse_config_text(text, cfg, args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        cfg = apply_setting(cfg, *item.split("=", 1))
    for attr, key in (("epochs", "train.epochs"), ("batch_size", "train.batch_size"), ("seed", "train.seed")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg = apply_setting(cfg, key, str(value))
    if getattr(args, "encoder", None):
        cfg = apply_setting(cfg, "eval.encoder", args.encoder)
    cfg.phantom.validate()
    cfg.train.validate()
    if cfg.eval.encoder not in ("teacher", "student"):
        raise ConfigurationError(f"eval.encoder must be teacher or student, got {cfg.eval.encoder!r}")
    return cfg


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    if root:
        return Path(root) / command
    raise UsageError(f"{command}: --out is required (or set {OUT_ENV})")


# --------------------------------------------------------------------------- plotting


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(metrics: dict, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in ("l_total", "l_stru", "l_cate", "l_recon"):
        if metrics[col].size:
            ax.plot(metrics["step"], metrics[col], label=col, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_score_histogram(scores: np.ndarray, abnormal: np.ndarray, threshold: float | None, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(scores.min(), scores.max(), 40) if scores.max() > scores.min() else 10
    ax.hist(scores[~abnormal], bins=bins, alpha=0.6, label="normal")
    ax.hist(scores[abnormal], bins=bins, alpha=0.6, label="abnormal")
    if threshold is not None:
        ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("normality score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_reconstruction_grid(rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]], path: Path) -> Path:
    plt = _pyplot()
    fig, axes = plt.subplots(len(rows), 3, figsize=(6, 2 * len(rows)), squeeze=False)
    for r, images in enumerate(rows):
        for c, (img, title) in enumerate(zip(images, ("x", "x'", "y"))):
            axes[r, c].imshow(img, cmap="gray", vmin=0, vmax=1)
            axes[r, c].set_axis_off()
            if r == 0:
                axes[r, c].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _read_scores(path: Path):
    ids, scores, abnormal = [], [], []
    for line in path.read_text().splitlines()[1:]:
        parts = line.split("\t")
        if len(parts) != 3:
            continue
        ids.append(parts[0])
        scores.append(float(parts[1]))
        abnormal.append(parts[2] == "abnormal")
    return ids, np.array(scores), np.array(abnormal, dtype=bool)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .phantom import build_dataset

    if args.count < 1 or args.abnormal < 0:
        raise UsageError("--count must be >= 1 and --abnormal >= 0")
    m = build_dataset(args.count, args.seed, args.out, cfg.phantom, split=args.split, abnormal_count=args.abnormal)
    n_abn = sum(e.is_abnormal for e in m.entries)
    print(f"wrote {len(m.entries)} images ({len(m.entries) - n_abn} normal, {n_abn} abnormal) "
          f"at {m.height}x{m.width} to {m.root}")
    return EXIT_OK


def _load_images(path, cfg: RunConfig, normal_only: bool = False):
    from .phantom import load_dataset

    ds = load_dataset(path)
    size = cfg.train.backbone.image_size
    if (ds.manifest.height, ds.manifest.width) != (size, size):
        raise ConfigurationError(
            f"dataset images are {ds.manifest.height}x{ds.manifest.width}, model expects {size}x{size}"
        )
    if normal_only:
        keep = ~ds.labels()
        return ds, ds.stack()[keep]
    return ds, ds.stack()


def cmd_pretrain(args, cfg: RunConfig) -> int:
    from .trainer import pretrain, read_metrics

    out = _out_dir(args, "pretrain")
    _, images = _load_images(args.data, cfg, normal_only=True)

    def progress(step, parts):
        if step % 50 == 0:
            log.info("step %d  loss %.4f", step, parts.l_total)

    try:
        res = pretrain(images, cfg.train, out, resume=args.resume, max_steps=args.max_steps, progress=progress)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (diagnostics: {out / 'diagnostics.json'})") from exc
    plot_loss_curve(read_metrics(res.metrics), out / "loss_curve.png")
    print(f"checkpoint {res.checkpoint}\nmetrics {res.metrics}\nplot {out / 'loss_curve.png'}")
    return EXIT_OK


def _load_model(path):
    from .trainer import load_checkpoint

    if not Path(path).exists():
        raise PersistenceError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def cmd_detect(args, cfg: RunConfig) -> int:
    from .evaluate import detect, reconstruct, write_report, write_scores
    from .backbone import unpatchify
    from .slm import apply_slm, draw_slm, sample_rng

    import torch

    out = _out_dir(args, "detect")
    out.mkdir(parents=True, exist_ok=True)
    state = _load_model(args.checkpoint)
    cfg = dataclasses.replace(cfg, train=state.cfg)
    ds, images = _load_images(args.data, cfg)
    report, samples = detect(state.model, ds, cfg.eval.encoder)
    write_scores(out / "scores.tsv", samples)
    write_report(out / "report.txt", report)
    scores = np.array([s.score for s in samples])
    plot_score_histogram(scores, ds.labels(), report.threshold, out / "score_hist.png")

    normals = images[~ds.labels()][: cfg.eval.grid_samples]
    rows = []
    side = cfg.train.backbone.image_size
    for i, x in enumerate(normals):
        x_aug = apply_slm(x, draw_slm(x, sample_rng(cfg.train.seed, i, 0), cfg.train.slm_config()))
        y = reconstruct(state.model, x_aug, cfg.eval.encoder)
        y_img = unpatchify(torch.from_numpy(y[None]), cfg.train.backbone.patch, side, side)[0].numpy()
        rows.append((x, x_aug, np.clip(y_img, 0, 1)))
    if rows:
        plot_reconstruction_grid(rows, out / "recon_grid.png")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    from .evaluate import ProbeConfig, linear_probe, write_report

    out = _out_dir(args, "probe")
    out.mkdir(parents=True, exist_ok=True)
    state = _load_model(args.checkpoint)
    cfg = dataclasses.replace(cfg, train=state.cfg)
    train_ds, train_x = _load_images(args.train, cfg)
    test_ds, test_x = _load_images(args.test, cfg)
    encoder = state.model.teacher if cfg.eval.encoder == "teacher" else state.model.student
    pcfg = ProbeConfig(cfg.eval.probe_l2, cfg.eval.probe_max_iter, cfg.eval.encoder)
    report = linear_probe(encoder, train_x, train_ds.labels(), test_x, test_ds.labels(), pcfg,
                          freeze_check=args.freeze_check)
    if args.freeze_check:
        report.extra["freeze_check"] = "passed"
    write_report(out / "probe_report.txt", report)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    from .trainer import read_metrics

    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    made = []
    metrics_path = run / "metrics.csv"
    if metrics_path.exists():
        lines = [ln for ln in metrics_path.read_text().splitlines()[1:] if ln.strip()]
        metrics = read_metrics(metrics_path)
        if metrics["step"].size < len(lines):
            print(f"warning: {metrics_path} is truncated; plotting {metrics['step'].size} of {len(lines)} rows",
                  file=sys.stderr)
        if metrics["step"].size:
            made.append(plot_loss_curve(metrics, out / "loss_curve.png"))
    scores_path = run / "scores.tsv"
    if scores_path.exists():
        _, scores, abnormal = _read_scores(scores_path)
        if scores.size:
            made.append(plot_score_histogram(scores, abnormal, None, out / "score_hist.png"))
    if not made:
        raise PersistenceError(f"{run} holds no metrics.csv or scores.tsv to plot")
    print("\n".join(str(p) for p in made))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "detect": cmd_detect,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anatomy-ssl", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--print-config", action="store_true", help="print the resolved settings and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="write a phantom dataset (PNGs + manifest)")
    g.add_argument("--count", type=int, required=True, help="number of normal images")
    g.add_argument("--abnormal", type=int, default=0, help="additional SLM-lesioned images")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="self-supervised pre-training on the normal images of a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help=f"run directory (default ${OUT_ENV}/pretrain)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int, help="stop after this many global steps")

    d = sub.add_parser("detect", help="score a labelled dataset and report AUC/ACC/F1")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", help=f"output directory (default ${OUT_ENV}/detect)")
    d.add_argument("--encoder", choices=("teacher", "student"))

    r = sub.add_parser("probe", help="linear probe on frozen pooled features")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--train", required=True, help="labelled dataset for fitting the probe")
    r.add_argument("--test", required=True, help="labelled held-out dataset")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/probe)")
    r.add_argument("--encoder", choices=("teacher", "student"))
    r.add_argument("--freeze-check", action="store_true", help="fail unless encoder bytes are unchanged")

    pl = sub.add_parser("plot", help="regenerate plots from a run directory")
    pl.add_argument("--run", required=True, help="directory holding metrics.csv and/or scores.tsv")
    pl.add_argument("--out", help="where to write the PNGs (default: the run directory)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_text(), end="")
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("anatomy-ssl: error: a command is required", file=sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"anatomy-ssl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PersistenceError, IntegrityError, DegenerateInputError, EvaluationError, OSError) as exc:
        print(f"anatomy-ssl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"anatomy-ssl: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
