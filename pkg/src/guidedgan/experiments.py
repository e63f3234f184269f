"""Experiment recipes: data splits, the full pipeline, scaling, correlation and cross-model studies."""

from __future__ import annotations

import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .corpus import (FeatureUtterance, build_lexicon, corrupt_corpus,
                     partition_by_hours, synth_corpus)
from .metrics import correlation_study, evaluate, feature_correlation, seer
from .models import enhance
from .nn import Module
from .training import (AmResult, GanResult, fine_tune, train_acoustic_model, train_gan,
                       train_mtr_baseline)


def worker_count() -> int:
    """Parallel trial workers from GGAN_THREADS; 0 (the default) means sequential."""
    raw = os.environ.get("GGAN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"GGAN_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError("GGAN_THREADS must be >= 0")
    return n


def run_trials(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Map ``fn`` over independent trials; results come back in input order."""
    workers = worker_count() if workers is None else workers
    if workers <= 0 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Splits:
    clean_train: list
    noisy_train: list
    dev: list           # clean dev
    noisy_dev: list
    test: list
    noisy_test: list
    senone_to_token: np.ndarray

    def named(self) -> dict:
        return {"clean_train": self.clean_train, "noisy_train": self.noisy_train, "dev": self.dev,
                "noisy_dev": self.noisy_dev, "test": self.test, "noisy_test": self.noisy_test}


def make_splits(cfg: ExperimentConfig, seed: int | None = None) -> Splits:
    """Disjoint utterance sets from one synthetic corpus; the noisy sets pass the channel.

    The clean and noisy training sets hold different utterances, so no
    parallel clean/noisy pair exists anywhere in the training data.
    """
    manifest = cfg.corpus if seed is None else replace(cfg.corpus, seed=seed)
    corpus = synth_corpus(manifest)
    s = cfg.splits
    cuts = np.cumsum([0, s.clean_train, s.noisy_train, s.dev, s.test])
    clean_train, noisy_src, dev, test = (corpus[cuts[i]:cuts[i + 1]] for i in range(4))
    channel_seed = manifest.seed
    lexicon = build_lexicon(manifest)
    return Splits(clean_train, corrupt_corpus(noisy_src, cfg.corruption, channel_seed), dev,
                  corrupt_corpus(dev, cfg.corruption, channel_seed), test,
                  corrupt_corpus(test, cfg.corruption, channel_seed),
                  lexicon.senone_to_token(manifest.n_senones))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    seed: int
    am: AmResult
    gan: GanResult
    finetuned: AmResult
    clean_dev_seer: float
    noisy_dev_seer: float
    gan_dev_seer: float
    ft_dev_seer: float
    gan_seconds: float
    ft_seconds: float

    def row(self) -> dict:
        return {"seed": self.seed, "clean_dev_SeER": self.clean_dev_seer,
                "noisy_dev_SeER": self.noisy_dev_seer, "gan_dev_SeER": self.gan_dev_seer,
                "gan_ft_dev_SeER": self.ft_dev_seer}


def train_clean_am(cfg: ExperimentConfig, splits: Splits, seed: int) -> AmResult:
    return train_acoustic_model(splits.clean_train, splits.dev, replace(cfg.am_training, seed=seed),
                                spec=cfg.acoustic_model)


def run_pipeline(cfg: ExperimentConfig, seed: int, splits: Splits | None = None,
                 am: AmResult | None = None, keep_snapshots: bool = False) -> PipelineResult:
    """Clean AM, then the guided GAN on the noisy set, then fine-tuning on enhanced features."""
    splits = splits or make_splits(cfg, seed)
    am = am or train_clean_am(cfg, splits, seed)
    t0 = time.perf_counter()
    gan = train_gan(splits.clean_train, splits.noisy_train, am.model, splits.noisy_dev,
                    replace(cfg.gan, seed=seed), keep_snapshots=keep_snapshots)
    gan_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    ft = fine_tune(am.model, gan.generator, splits.noisy_train, splits.noisy_dev,
                   replace(cfg.finetune, seed=seed))
    ft_seconds = time.perf_counter() - t0
    return PipelineResult(seed, am, gan, ft, seer(am.model, None, splits.dev),
                          seer(am.model, None, splits.noisy_dev), gan.best_seer,
                          seer(ft.model, gan.generator, splits.noisy_dev), gan_seconds, ft_seconds)


def mtr_comparison(cfg: ExperimentConfig, splits: Splits, pipeline: PipelineResult,
                   sets: str | None = None) -> list[dict]:
    """MTR baseline beside GAN+FT on the same noisy data, with wall-clock of each."""
    seed = pipeline.seed
    t0 = time.perf_counter()
    mtr = train_mtr_baseline(splits.noisy_train, splits.noisy_dev, replace(cfg.am_training, seed=seed),
                             cfg.perturb, sets or cfg.mtr_sets, spec=cfg.acoustic_model)
    mtr_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    noisy = train_acoustic_model(splits.noisy_train, splits.noisy_dev,
                                 replace(cfg.am_training, seed=seed), spec=cfg.acoustic_model)
    noisy_seconds = time.perf_counter() - t0
    return [
        {"system": "noisy-trained AM", "dev_SeER": noisy.best_seer,
         "test_SeER": seer(noisy.model, None, splits.noisy_test), "wall_clock_s": noisy_seconds},
        {"system": f"MTR +{sets or cfg.mtr_sets}", "dev_SeER": mtr.best_seer,
         "test_SeER": seer(mtr.model, None, splits.noisy_test), "wall_clock_s": mtr_seconds},
        {"system": "Guided-GAN + FT", "dev_SeER": pipeline.ft_dev_seer,
         "test_SeER": seer(pipeline.finetuned.model, pipeline.gan.generator, splits.noisy_test),
         "wall_clock_s": pipeline.gan_seconds + pipeline.ft_seconds},
    ]


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def scaling_study(cfg: ExperimentConfig, splits: Splits, am: Module, hours: Sequence[float],
                  seed: int, collect: list | None = None) -> list[dict]:
    """One guided GAN per nested noisy-train partition; dev SeER/TER per size.

    Trained GanResults are appended to ``collect`` when it is given.
    """
    parts = partition_by_hours(splits.noisy_train, list(hours), cfg.corpus.frames_per_hour, seed)

    def trial(item):
        h, part = item
        gan = train_gan(splits.clean_train, part, am, splits.noisy_dev, replace(cfg.gan, seed=seed))
        if collect is not None:
            collect.append(gan)
        rep = evaluate(am, gan.generator, splits.noisy_dev, splits.senone_to_token)
        return {"hours": h, "utterances": len(part), "frames": int(sum(u.n_frames for u in part)),
                "dev_SeER": rep.seer, "dev_TER": rep.token_error_rate}

    return run_trials(trial, list(zip(hours, parts)))


def snapshot_generators(gan: GanResult) -> list[tuple[int, Module]]:
    """(step, generator) for every evaluated snapshot of a run kept with ``keep_snapshots``."""
    from .checkpoint import Checkpoint

    out = []
    for _, step, _, state in gan.snapshots:
        ck = Checkpoint.from_module(gan.generator)
        ck.tensors = {f"generator.{k}": v for k, v in state.items()}
        out.append((step, ck.build("generator")))
    return out


def correlation_rows(am: Module, generators: Sequence[tuple], corpus,
                     senone_to_token: np.ndarray, strict: bool = True) -> tuple[list, float]:
    """``generators`` holds (label, generator) pairs; rows keep that order."""
    labels = [label for label, _ in generators]
    rows, r = correlation_study(am, [g for _, g in generators], corpus, senone_to_token, labels,
                                strict=strict)
    return rows, r


def correlation_csv(rows: list, label_name: str = "step", comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(f"{label_name},SeER,TER\n")
    for row in rows:
        buf.write(f"{row['label']},{row['seer']!r},{row['ter']!r}\n")
    return buf.getvalue()


def cross_model(generator: Module, guided_am: Module, other_am: Module, corpus) -> dict:
    """SeER of both acoustic models with and without the generator."""
    out = {}
    for name, am in (("guided", guided_am), ("other", other_am)):
        base = seer(am, None, corpus)
        with_gen = seer(am, generator, corpus)
        out[name] = {"baseline_SeER": base, "generator_SeER": with_gen, "delta": with_gen - base}
    return out


def feature_triplets(clean: FeatureUtterance, noisy: FeatureUtterance,
                     generator: Module | None) -> np.ndarray:
    """(T, 3F) rows of clean, corrupted and generated frames for one utterance."""
    if clean.frames.shape != noisy.frames.shape:
        raise ValueError("clean and corrupted versions must have the same shape")
    generated = enhance(generator, noisy.frames)
    return np.concatenate([clean.frames, noisy.frames, generated], axis=0).T


def feature_triplet_csv(clean: FeatureUtterance, noisy: FeatureUtterance,
                        generator: Module | None, comment: str | None = None) -> str:
    rows = feature_triplets(clean, noisy, generator)
    f = clean.frames.shape[0]
    header = [f"{kind}_{i}" for kind in ("clean", "corrupted", "generated") for i in range(f)]
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(f"{v:.6g}" for v in row) + "\n")
    return buf.getvalue()


def feature_similarity(clean: FeatureUtterance, noisy: FeatureUtterance,
                       generator: Module | None) -> dict:
    """Cosine correlation of corrupted and generated frames with the clean frames."""
    return {"corrupted": feature_correlation(clean.frames, noisy.frames),
            "generated": feature_correlation(clean.frames, enhance(generator, noisy.frames))}
