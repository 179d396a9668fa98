"""Command-line entry point: synth, search, train, eval, stream, count-ops."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .autograd import set_default_dtype
from .autograd.nn import StateError
from .checkpoint import PrecisionError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .events import (
    SyntheticDataset,
    dataset_from_scenes,
    synthetic_scenes,
    with_aug_source,
)
from .evaluation import (
    EnergyModel,
    StreamSession,
    count_ops,
    evaluate,
    firing_rate_report,
    histograms_csv,
    miou,
    miou_table,
    stream_sequences,
)
from .formats import FormatError, atomic_write, read_events, read_images, read_labels, write_events, \
    write_images, write_labels
from .genotype import Genotype, GenotypeError, uniform_genotype
from .network import ConfigError, ModelConfig, SpikingEDN
from .search import SearchConfig, SearchSpace, Supernet, run_search, split_half
from .training import TrainConfig, TrainingDiverged, train

SNAPSHOT = "config.resolved.ini"


# -- config -> objects -----------------------------------------------------------------


def model_config(cfg: RunConfig) -> ModelConfig:
    ssam = cfg.text("model", "ssam")
    mc = ModelConfig(
        num_classes=cfg.int("data", "num_classes"),
        in_channels=cfg.int("data", "n_frames"),
        stem_channels=cfg.int("model", "stem_channels"),
        node_width=cfg.int("model", "node_width"),
        aspp_channels=cfg.int("model", "aspp_channels"),
        aspp_rates=cfg.ints("model", "aspp_rates"),
        decoder_channels=cfg.int("model", "decoder_channels"),
        placement=cfg.get("model", "placement"),
        u_th=cfg.float("model", "u_th"),
        tau=cfg.float("model", "tau"),
        beta=cfg.float("model", "beta"),
        tau_a=cfg.float("model", "tau_a"),
        tau_a_range=cfg.floats("model", "tau_a_range"),
        surrogate=cfg.get("model", "surrogate"),
        surrogate_temp=cfg.float("model", "surrogate_temp"),
        ssam=ssam.upper() if ssam else None,
        ssam_multiplicative=cfg.bool("model", "ssam_multiplicative"),
        seed=cfg.int("run", "seed"),
    )
    if mc.ssam and cfg.get("data", "aug") == "none":
        raise ConfigError("model.ssam needs an augmented input channel but data.aug = none")
    return mc


def genotype_for(cfg: RunConfig) -> Genotype:
    path = cfg.text("model", "genotype")
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"genotype file {p} does not exist")
        return Genotype.from_text(p.read_text())
    g = uniform_genotype(list(cfg.ints("model", "levels")), cfg.get("model", "op"), plan=cfg.ints("model", "plan"))
    g.validate()
    return g


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.int("train", "epochs"),
        batch_size=cfg.int("train", "batch_size"),
        lr=cfg.float("train", "lr"),
        poly_power=cfg.float("train", "poly_power"),
        seed=cfg.int("run", "seed"),
        seq_len=cfg.int("data", "seq_len"),
        warmup=cfg.int("data", "warmup"),
        weight_decay=cfg.float("train", "weight_decay"),
        grad_clip=cfg.opt_float("train", "grad_clip"),
        precision=cfg.get("run", "precision"),
        eval_every=cfg.int("train", "eval_every"),
    )


def apply_precision(cfg: RunConfig) -> None:
    prec = cfg.get("run", "precision")
    if prec not in ("float32", "float64"):
        raise ConfigError(f"run.precision must be float32 or float64, got {prec!r}")
    set_default_dtype(np.dtype(prec))


def _scene_files(d: Path) -> list[Path]:
    return sorted(d.glob("scene_*.evs"))


def load_scenes(d: Path):
    files = _scene_files(d)
    if not files:
        raise ConfigError(f"no scene_*.evs files in {d}")
    scenes = []
    for f in files:
        stream = read_events(f)
        labels = read_labels(f.with_suffix(".lbl"))
        img_path = f.with_suffix(".img")
        images = read_images(img_path) if img_path.exists() else None
        scenes.append((stream, labels, images))
    return scenes


def dataset_for(cfg: RunConfig, scenes_key: str = "scenes", size_key: str = "size", section: str = "data") -> SyntheticDataset:
    kw = dict(num_classes=cfg.int("data", "num_classes"), seq_len=cfg.int("data", "seq_len"),
              warmup=cfg.int("data", "warmup"), n_frames=cfg.int("data", "n_frames"),
              delta_t_us=cfg.int("data", "delta_t_us"), test_fraction=cfg.float("data", "test_fraction"))
    d = cfg.text("data", "dir")
    if d and section == "data":
        scenes = load_scenes(Path(d))
    else:
        scenes = synthetic_scenes(cfg.int(section, scenes_key), cfg.int("run", "seed"), kw["num_classes"],
                                  cfg.int(section, size_key), cfg.int("data", "stacks_per_scene"), kw["delta_t_us"],
                                  max_shapes=cfg.int("data", "max_shapes"))
    ds = dataset_from_scenes(scenes, **kw)
    aug = cfg.get("data", "aug")
    ds.train = with_aug_source(ds.train, aug)
    ds.test = with_aug_source(ds.test, aug)
    if not ds.train and not ds.test:
        raise ConfigError("dataset produced no sequences (too few stacks per scene for data.seq_len?)")
    return ds


def _checkpoint_path(cfg: RunConfig, section: str) -> Path:
    p = cfg.text(section, "checkpoint")
    if not p:
        raise ConfigError(f"{section}.checkpoint is not set (use --checkpoint or --set {section}.checkpoint=PATH)")
    p = Path(p)
    if not p.is_file():
        raise ConfigError(f"checkpoint {p} does not exist")
    return p


def _write_text(path: Path, text: str) -> None:
    atomic_write(path, text.encode())


# -- commands ------------------------------------------------------------------------------


def check_synth(cfg: RunConfig) -> None:
    if min(cfg.int("data", "scenes"), cfg.int("data", "size"), cfg.int("data", "stacks_per_scene")) < 1:
        raise ConfigError("data.scenes, data.size and data.stacks_per_scene must be positive")
    if cfg.int("data", "max_shapes") < 1:
        raise ConfigError("data.max_shapes must be at least 1; a scene without shapes produces no data")


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    check_synth(cfg)
    n = cfg.int("data", "scenes")
    size = cfg.int("data", "size")
    dt = cfg.int("data", "delta_t_us")
    scenes = synthetic_scenes(n, cfg.int("run", "seed"), cfg.int("data", "num_classes"), size,
                              cfg.int("data", "stacks_per_scene"), dt, max_shapes=cfg.int("data", "max_shapes"))
    lines = ["scene events per_window density_per_px"]
    total = 0
    for i, (stream, labels, images) in enumerate(scenes):
        stem = out / f"scene_{i:04d}"
        write_events(stem.with_suffix(".evs"), stream)
        write_labels(stem.with_suffix(".lbl"), labels)
        write_images(stem.with_suffix(".img"), images)
        per = np.bincount((stream.t // dt).astype(np.int64), minlength=len(labels))[:len(labels)]
        total += len(stream)
        dens = per / float(stream.width * stream.height)
        lines.append(f"{i} {len(stream)} {','.join(str(int(v)) for v in per)} "
                     f"{','.join(f'{v:.4f}' for v in dens)}")
    lines.append(f"total_events {total}")
    text = "\n".join(lines) + "\n"
    _write_text(out / "stats.txt", text)
    print(text, end="")
    return 0


def cmd_search(cfg: RunConfig, out: Path) -> int:
    mc = model_config(cfg)
    scfg = SearchConfig(epochs=cfg.int("search", "epochs"), warmup_epochs=cfg.int("search", "warmup_epochs"),
                        batch_size=cfg.int("search", "batch_size"), w_lr=cfg.float("search", "w_lr"),
                        a_lr=cfg.float("search", "a_lr"), seed=cfg.int("run", "seed"))
    plan = cfg.ints("model", "plan")[:cfg.int("search", "levels")]
    space = SearchSpace(layers=cfg.int("search", "layers"), plan=tuple(plan))
    ds = dataset_for(cfg, "scenes", "size", section="search")
    wsplit, asplit = split_half(ds.train + ds.test)
    net = Supernet(space, mc)
    log = (out / "search.ndjson").open("w")
    try:
        res = run_search(net, wsplit, asplit, scfg, log=lambda r: log.write(json.dumps(r) + "\n"))
    finally:
        log.close()
    _write_text(out / "genotype.txt", res.genotype.to_text())
    print(res.genotype.to_text(), end="")
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    mc = model_config(cfg)
    geno = genotype_for(cfg)
    tc = train_config(cfg)
    model = SpikingEDN(geno, mc)
    ds = dataset_for(cfg)
    if not ds.train:
        raise ConfigError("no training sequences")
    t0 = time.perf_counter()
    with (out / "metrics.ndjson").open("w") as log:
        hist = train(model, ds.train, tc, ds.test or None, log=log)
    val = hist.last("val")
    meta = {"epoch": tc.epochs, "seed": tc.seed, "train": {k: v for k, v in vars(tc).items()},
            "metrics": {"val_miou": val["miou"] if val else None,
                        "train_loss": hist.last("train")["loss"] if hist.last("train") else None},
            "seconds": round(time.perf_counter() - t0, 1)}
    save_checkpoint(model, meta, out / "model.sedn")
    msg = f"trained {tc.epochs} epochs in {meta['seconds']}s; val miou {meta['metrics']['val_miou']}"
    _write_text(out / "report.txt", msg + "\n")
    print(msg)
    return 0


def _load_model(cfg: RunConfig, section: str) -> SpikingEDN:
    model, _, _ = load_checkpoint(_checkpoint_path(cfg, section))
    if model.expects_aug and cfg.get("data", "aug") == "none":
        raise ConfigError("checkpoint uses SSAM but data.aug = none")
    return model


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model = _load_model(cfg, "eval")
    ds = dataset_for(cfg)
    seqs = ds.test or ds.train
    acc = evaluate(model, seqs, cfg.int("eval", "batch_size"))
    text = miou_table(acc)
    _write_text(out / "report.txt", text)
    np.savetxt(out / "confusion.txt", acc.matrix, fmt="%d")
    print(text, end="")
    return 0


def cmd_stream(cfg: RunConfig, out: Path) -> int:
    model = _load_model(cfg, "stream")
    ds = dataset_for(cfg)
    seqs = ds.test or ds.train
    reset = cfg.int("stream", "reset_every")
    session = StreamSession(model, reset_every=reset if reset > 0 else None)
    preds = []
    with (out / "stream.ndjson").open("w") as log:
        for frames, aug, lab in stream_sequences(seqs):
            pred = session.step(frames, aug if model.expects_aug else None, lab)
            preds.append(pred)
            m = miou(session.acc)[0] if session.acc.total else None
            log.write(json.dumps({"step": session.step_count, "miou": m}) + "\n")
    if cfg.bool("stream", "dump"):
        write_labels(out / "predictions.lbl", np.stack(preds))
    m, per = miou(session.acc)
    text = f"steps {session.step_count}\nreset_every {reset}\nmiou {m:.4f}\n"
    _write_text(out / "report.txt", text)
    print(text, end="")
    return 0


def cmd_count_ops(cfg: RunConfig, out: Path) -> int:
    model = _load_model(cfg, "count_ops")
    ds = dataset_for(cfg)
    seqs = ds.test or ds.train
    model.eval()
    if cfg.bool("count_ops", "fold"):
        model.fold()
    ledger = count_ops(model, seqs, cfg.int("count_ops", "batch_size"))
    energy = EnergyModel()
    text = ledger.to_text(energy)
    _write_text(out / "ledger.txt", text)
    report = firing_rate_report(model, seqs, cfg.int("count_ops", "batch_size"))
    _write_text(out / "firing_rates.csv", histograms_csv(report))
    print(text, end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "count-ops": cmd_count_ops,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikingedn", description="Spiking event-camera segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [section] key = value settings")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if name in ("eval", "stream", "count-ops"):
            p.add_argument("--checkpoint", help="model checkpoint to load")
        if name in ("train", "eval", "stream", "count-ops"):
            p.add_argument("--data", help="directory written by 'synth' (default: synthesise in memory)")
    return parser


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if getattr(args, "checkpoint", None):
            section = args.command.replace("-", "_")
            overrides.append(f"{section}.checkpoint={args.checkpoint}")
        if getattr(args, "data", None):
            overrides.append(f"data.dir={args.data}")
        cfg = RunConfig.load(args.config, overrides)
        apply_precision(cfg)
        # validate everything that can be validated before touching data or the output directory
        model_config(cfg)
        if args.command == "synth":
            check_synth(cfg)
        if args.command == "train":
            genotype_for(cfg)
            train_config(cfg)
        if args.command in ("eval", "stream", "count-ops"):
            _checkpoint_path(cfg, args.command.replace("-", "_"))
        out = prepare_out(args.out, args.force)
        _write_text(out / SNAPSHOT, cfg.to_text())
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, GenotypeError) as exc:
        print(f"spikingedn {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, PrecisionError, StateError, TrainingDiverged, ValueError, OSError, KeyError) as exc:
        print(f"spikingedn {args.command}: error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return 1
    finally:
        set_default_dtype(np.float32)


if __name__ == "__main__":
    sys.exit(main())
