"""Command-line entry point: ``guidedgan <verb> --config run.ini [options]``.

Exit codes: 0 ok, 2 configuration error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ExperimentConfig
from .corpus import read_corpus, read_manifest, write_corpus, write_manifest
from .experiments import (Splits, correlation_csv, correlation_rows, cross_model,
                          feature_triplet_csv, make_splits, scaling_study)
from .losses import LossConfigError
from .metrics import evaluate
from .training import (DivergenceError, IntegrityError, fine_tune, gan_objective,
                       grid_csv, resume_checkpoint, train_acoustic_model, train_gan,
                       train_mtr_baseline)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
SPLIT_NAMES = ("clean_train", "noisy_train", "dev", "noisy_dev", "test", "noisy_test")


class DataError(OSError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve(args) -> ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides += [f"{section}.seed={seed}" for section in args.seed_sections]
    if getattr(args, "guidance_weight", None) is not None:
        overrides.append(f"gan.guidance_weight={args.guidance_weight}")
    if overrides:
        cfg = config_mod.override(cfg, overrides)
    config_mod.validate(cfg)
    return cfg


def _echo(cfg: ExperimentConfig) -> None:
    print(f"# resolved config (hash {cfg.hash()})")
    print(config_mod.dumps(cfg), end="")


def _comment(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.hash()}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(f"wrote {path}")


def _load_split(data: Path, name: str) -> list:
    path = data / f"{name}.bin"
    if not path.exists():
        raise DataError(f"missing corpus file {path}; run gen-data first")
    return read_corpus(path)


def _senone_to_token(data: Path, cfg: ExperimentConfig):
    import numpy as np

    manifest, extra = read_manifest(data / "manifest.json")
    table = np.full(manifest.n_senones, -1, dtype=np.int64)
    for tok, seq in enumerate(extra["token_senones"]):
        table[list(seq)] = tok
    return table


def _load_splits(data: Path, cfg: ExperimentConfig) -> Splits:
    parts = {name: _load_split(data, name) for name in SPLIT_NAMES}
    return Splits(**parts, senone_to_token=_senone_to_token(data, cfg))


def _load_net(path, key: str):
    return Checkpoint.load(path).build(key)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: ExperimentConfig) -> None:
    from .corpus import build_lexicon, partition_by_hours

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_splits(cfg)
    for name, corpus in splits.named().items():
        write_corpus(out / f"{name}.bin", corpus, cfg.corpus.n_senones)
        print(f"wrote {out / (name + '.bin')} ({len(corpus)} utterances)")
    lexicon = build_lexicon(cfg.corpus)
    write_manifest(out / "manifest.json", cfg.corpus, {"token_senones": lexicon.token_senones,
                                                      "corruption": cfg.corruption.to_dict(),
                                                      "config_hash": cfg.hash()})
    parts = partition_by_hours(splits.noisy_train, cfg.splits.hours, cfg.corpus.frames_per_hour,
                               cfg.corpus.seed)
    lines = [f"# {_comment(cfg)}", "hours,utterances,frames,utt_ids"]
    for h, part in zip(cfg.splits.hours, parts):
        lines.append(f"{h!r},{len(part)},{sum(u.n_frames for u in part)},"
                     + " ".join(u.utt_id for u in part))
    _write(out / "partitions.csv", "\n".join(lines) + "\n")
    _write(out / "config.ini", config_mod.dumps(cfg))


def _am_outputs(result, out: Path, cfg: ExperimentConfig, extra_meta: dict) -> None:
    meta = {"seed": extra_meta.pop("seed"), "config_hash": cfg.hash(), **extra_meta}
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint(meta).save(out)
    print(f"wrote {out} (best epoch {result.best_epoch}, dev SeER {result.best_seer:.4f})")
    _write(out.with_suffix(".log.csv"), result.log.metric_csv(_comment(cfg)))
    _write(out.with_suffix(".time.csv"), result.log.timing_csv(_comment(cfg)))


def cmd_train_am(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    train = _load_split(data, args.train_split)
    dev = _load_split(data, args.dev_split)
    result = train_acoustic_model(train, dev, cfg.am_training, spec=cfg.acoustic_model)
    _am_outputs(result, Path(args.out), cfg, {"seed": cfg.am_training.seed})


def _earlier_timings(state_path: Path, last_epoch: int) -> list:
    # the state checkpoint carries no timings, so take them from the interrupted run's CSV
    suffix = ".state.ggan"
    if not state_path.name.endswith(suffix):
        return []
    path = state_path.with_name(state_path.name[:-len(suffix)] + ".time.csv")
    if not path.exists():
        return []
    rows = [line.split(",") for line in path.read_text().splitlines()[2:] if line]
    return [(int(e), float(t)) for e, t in rows if int(e) <= last_epoch]


def cmd_train_gan(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    clean, noisy = _load_split(data, "clean_train"), _load_split(data, "noisy_train")
    dev = _load_split(data, "noisy_dev")
    am = _load_net(args.am, "acoustic_model")
    out = Path(args.out)
    state_path = out.with_suffix(".state.ggan")
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None and resume.metadata.get("config_hash") != _gan_hash(cfg):
        print("warning: resuming with a different GAN config than the one saved", file=sys.stderr)

    def save_state(state, gan_cfg):
        resume_checkpoint(state, gan_cfg).save(state_path)

    result = train_gan(clean, noisy, am, dev, cfg.gan, resume=resume,
                       keep_snapshots=bool(args.snapshots), on_epoch=save_state)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint({"seed": cfg.gan.seed, "experiment_hash": cfg.hash()}).save(out)
    print(f"wrote {out} (best epoch {result.best_epoch}, dev SeER {result.best_seer:.4f}, "
          f"{result.g_steps} G steps = {result.d_steps} D steps)")
    _write(out.with_suffix(".log.csv"), result.log.metric_csv(_comment(cfg)))
    _write(out.with_suffix(".steps.csv"), result.log.step_csv(_comment(cfg)))
    if resume is not None:
        result.log.wall_clock[:0] = _earlier_timings(Path(args.resume), resume.metadata["epoch"])
    _write(out.with_suffix(".time.csv"), result.log.timing_csv(_comment(cfg)))
    if args.snapshots:
        snap_dir = Path(args.snapshots)
        snap_dir.mkdir(parents=True, exist_ok=True)
        for epoch, step, dev_seer, state in result.snapshots:
            ck = Checkpoint.from_module(result.generator,
                                        metadata={"epoch": epoch, "step": step, "dev_seer": dev_seer})
            ck.tensors = {f"generator.{k}": v for k, v in state.items()}
            ck.save(snap_dir / f"step{step:07d}.ggan")
        print(f"wrote {len(result.snapshots)} snapshots to {snap_dir}")


def _gan_hash(cfg: ExperimentConfig) -> str:
    from .checkpoint import config_hash

    return config_hash(cfg.gan.to_dict())


def cmd_finetune(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    noisy, dev = _load_split(data, "noisy_train"), _load_split(data, "noisy_dev")
    am = _load_net(args.am, "acoustic_model")
    gen = _load_net(args.generator, "generator")
    result = fine_tune(am, gen, noisy, dev, cfg.finetune)
    _am_outputs(result, Path(args.out), cfg, {"seed": cfg.finetune.seed, "generator": str(args.generator)})


def cmd_train_mtr(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    noisy, dev = _load_split(data, "noisy_train"), _load_split(data, "noisy_dev")
    sets = args.sets or cfg.mtr_sets
    result = train_mtr_baseline(noisy, dev, cfg.am_training, cfg.perturb, sets, spec=cfg.acoustic_model)
    _am_outputs(result, Path(args.out), cfg, {"seed": cfg.am_training.seed, "mtr_sets": sets})
    print(f"MTR +{sets}: wall-clock {result.log.total_seconds:.1f}s")


def cmd_grid(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    clean, noisy = _load_split(data, "clean_train"), _load_split(data, "noisy_train")
    dev = _load_split(data, "noisy_dev")
    am = _load_net(args.am, "acoustic_model")
    from .experiments import run_trials
    from .training import grid_search

    best, trials = grid_search(cfg.grid, cfg.gan, gan_objective(clean, noisy, am, dev),
                               runner=lambda fn, items: run_trials(fn, items))
    _write(Path(args.out), grid_csv(trials, _comment(cfg)))
    print(f"best: batch {best.batch_size} lr_g {best.lr_g} lr_d {best.lr_d} "
          f"lambda {best.guidance_weight}")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    corpus = _load_split(data, args.split)
    am = _load_net(args.am, "acoustic_model")
    gen = _load_net(args.generator, "generator") if args.generator else None
    report = evaluate(am, gen, corpus, _senone_to_token(data, cfg), args.min_run)
    out = Path(args.out)
    _write(out.with_suffix(".json"), report.to_json())
    _write(out.with_suffix(".csv"), f"# {_comment(cfg)}\n" + report.to_csv())
    print(f"SeER {report.seer:.4f}  TER {report.token_error_rate:.4f}  "
          f"S {report.counts.substitutions} D {report.counts.deletions} I {report.counts.insertions}")
    if args.export_features:
        _export(data, gen, args.export_features, out.parent / (out.name + "_features"), cfg, args.split)


def _export(data: Path, gen, utt_ids: list, out_dir: Path, cfg: ExperimentConfig,
            split: str = "noisy_dev") -> None:
    noisy_split = split if split.startswith("noisy_") else f"noisy_{split}"
    clean_split = noisy_split[len("noisy_"):]
    if clean_split == "train":
        raise DataError("feature triplets need a split with clean and corrupted versions (dev or test)")
    clean = {u.utt_id: u for u in _load_split(data, clean_split)}
    noisy = {u.utt_id: u for u in _load_split(data, noisy_split)}
    for utt_id in utt_ids:
        if utt_id not in clean:
            raise DataError(f"utterance {utt_id!r} not in {clean_split}")
        _write(out_dir / f"{utt_id}.csv",
               feature_triplet_csv(clean[utt_id], noisy[utt_id], gen, _comment(cfg)))


def cmd_export_features(args, cfg: ExperimentConfig) -> None:
    gen = _load_net(args.generator, "generator") if args.generator else None
    _export(Path(args.data), gen, args.utt, Path(args.out), cfg, args.split)


def cmd_scaling_study(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    splits = _load_splits(data, cfg)
    am = _load_net(args.am, "acoustic_model")
    hours = args.hours or cfg.splits.hours
    rows = scaling_study(cfg, splits, am, hours, cfg.gan.seed)
    lines = [f"# {_comment(cfg)}", "hours,utterances,frames,dev_SeER,dev_TER"]
    lines += [f"{r['hours']!r},{r['utterances']},{r['frames']},{r['dev_SeER']!r},{r['dev_TER']!r}"
              for r in rows]
    _write(Path(args.out), "\n".join(lines) + "\n")


def cmd_correlate(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    corpus = _load_split(data, args.split)
    am = _load_net(args.am, "acoustic_model")
    paths = sorted(Path(args.checkpoint_dir).glob("*.ggan"))
    gens = []
    for path in paths:
        ck = Checkpoint.load(path)
        gens.append((ck.metadata.get("step", path.stem), ck.build("generator")))
    gens.sort(key=lambda item: (not isinstance(item[0], int), item[0]))
    if len(gens) < 3:
        raise ConfigError(f"correlate needs at least 3 checkpoints, found {len(gens)} in {args.checkpoint_dir}")
    rows, r = correlation_rows(am, gens, corpus, _senone_to_token(data, cfg), strict=False)
    if r != r:
        print("warning: a metric is constant across checkpoints, pearson r undefined", file=sys.stderr)
    _write(Path(args.out), correlation_csv(rows, "step", f"{_comment(cfg)} pearson_r={r!r}"))
    print(f"Pearson r(SeER, TER) = {r:.4f} over {len(rows)} checkpoints")


def cmd_cross_model(args, cfg: ExperimentConfig) -> None:
    data = Path(args.data)
    corpus = _load_split(data, args.split)
    gen = _load_net(args.generator, "generator")
    guided = _load_net(args.am, "acoustic_model")
    other = _load_net(args.other_am, "acoustic_model")
    report = cross_model(gen, guided, other, corpus)
    _write(Path(args.out), json.dumps(report, indent=2) + "\n")
    for name, row in report.items():
        print(f"{name:>7}: baseline {row['baseline_SeER']:.4f} -> with generator "
              f"{row['generator_SeER']:.4f} (delta {row['delta']:+.4f})")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedgan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, seed_sections=()):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file (INI with JSON values)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        if seed_sections:
            p.add_argument("--seed", type=int, help="shortcut for " +
                           ", ".join(f"{s}.seed" for s in seed_sections))
        p.set_defaults(func=fn, seed_sections=seed_sections)
        return p

    p = add("gen-data", cmd_gen_data, "write corpus splits, manifest and partitions", ("corpus",))
    p.add_argument("--out", required=True)

    p = add("train-am", cmd_train_am, "train an acoustic model", ("am_training",))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-split", default="clean_train", choices=SPLIT_NAMES)
    p.add_argument("--dev-split", default="dev", choices=SPLIT_NAMES)

    p = add("train-gan", cmd_train_gan, "train a Guided-GAN generator", ("gan",))
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True, help="frozen acoustic model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="guidance_weight", type=float, help="shortcut for gan.guidance_weight")
    p.add_argument("--resume", help="state checkpoint written by an earlier run (<out>.state.ggan)")
    p.add_argument("--snapshots", help="directory for one generator checkpoint per evaluation")

    p = add("finetune", cmd_finetune, "fine-tune an acoustic model on enhanced features", ("finetune",))
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)

    p = add("train-mtr", cmd_train_mtr, "train a multi-style (MTR) baseline", ("am_training",))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sets", help="perturbed copies, e.g. s, v, sv, s+v (default: experiment.mtr_sets)")

    p = add("grid", cmd_grid, "two-phase GAN hyperparameter grid search", ("gan",))
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True)
    p.add_argument("--out", required=True, help="CSV of all trials")

    p = add("evaluate", cmd_evaluate, "SeER / token error report")
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True)
    p.add_argument("--generator")
    p.add_argument("--split", default="noisy_dev", choices=SPLIT_NAMES)
    p.add_argument("--min-run", type=int, default=2)
    p.add_argument("--out", required=True, help="output prefix; writes .json and .csv")
    p.add_argument("--export-features", nargs="+", metavar="UTT_ID",
                   help="also dump clean/corrupted/generated triplets for these utterances")

    p = add("scaling-study", cmd_scaling_study, "GAN per training-size partition", ("gan",))
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True)
    p.add_argument("--hours", type=float, nargs="+", help="default: splits.hours")
    p.add_argument("--out", required=True)

    p = add("correlate", cmd_correlate, "SeER vs token error correlation over checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--am", required=True)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--split", default="noisy_dev", choices=SPLIT_NAMES)
    p.add_argument("--out", required=True)

    p = add("cross-model", cmd_cross_model, "apply a generator to an acoustic model it was not guided by")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--am", required=True, help="the acoustic model used for guidance")
    p.add_argument("--other-am", required=True)
    p.add_argument("--split", default="noisy_dev", choices=SPLIT_NAMES)
    p.add_argument("--out", required=True)

    p = add("export-features", cmd_export_features, "clean/corrupted/generated frames as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--generator")
    p.add_argument("--split", default="noisy_dev", choices=("noisy_dev", "noisy_test"))
    p.add_argument("--utt", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
    except (ConfigError, LossConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _echo(cfg)
    try:
        args.func(args, cfg)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, LossConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IntegrityError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
