"""Acoustic-model training, Guided-GAN adversarial training, fine-tuning, grid search, MTR."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .autodiff import NonFiniteError, Tensor, backward, no_grad
from .checkpoint import Checkpoint, config_hash
from .corpus import PerturbSpec, chunk_corpus, context_window, mtr_corpus
from .losses import LossConfig, generator_loss, gradient_penalty, total_discriminator_loss
from .metrics import seer
from .models import (AcousticModelSpec, DiscriminatorSpec, GeneratorSpec, build_acoustic_model,
                     build_discriminator, build_generator)
from .nn import SGD, Adam, EarlyStopper, Module, PlateauScheduler, state_hash


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite; training was aborted."""


class IntegrityError(RuntimeError):
    """A training invariant (frozen guide, update parity, loss bound) was violated."""


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else repr(float(x))


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class AmTrainConfig:
    batch_size: int = 256
    lr: float = 0.1
    max_epochs: int = 15
    plateau_threshold: float = 0.001
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("AM training config needs positive batch size, lr and patience")
        if self.plateau_threshold < 0:
            raise ValueError("plateau threshold must be >= 0")


@dataclass
class GanTrainConfig:
    loss: str = "SN-GAN"
    guidance_weight: float = 1.0
    gp_weight: float = 10.0
    lr_g: float = 3e-3
    lr_d: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    eval_every: int = 1
    window: int = 32
    hop: int = 16
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorSpec(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorSpec(**self.discriminator)
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.eval_every < 1:
            raise ValueError("batch size, patience and eval_every must be positive")
        if self.window < 1 or self.hop < 1:
            raise ValueError("window and hop must be positive")
        if self.discriminator.window != self.window:
            self.discriminator = replace(self.discriminator, window=self.window)
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.guidance_weight, self.gp_weight)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GridSpec:
    batch_sizes: list = field(default_factory=lambda: [16])
    lrs_g: list = field(default_factory=lambda: [1e-3])
    lrs_d: list = field(default_factory=lambda: [1e-3])
    guidance_weights: list = field(default_factory=lambda: [1.0])
    trial_epochs: int = 3

    def __post_init__(self):
        for name in ("batch_sizes", "lrs_g", "lrs_d", "guidance_weights"):
            values = getattr(self, name)
            if not values:
                raise ValueError(f"grid {name} is empty")
            setattr(self, name, sorted(values))
        if self.trial_epochs < 1:
            raise ValueError("trial_epochs must be >= 1")


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

EPOCH_COLUMNS = ("epoch", "step", "L_G", "L_D", "dev_SeER", "lr_G", "lr_D")
AM_COLUMNS = ("epoch", "train_loss", "dev_SeER", "lr")


@dataclass
class TrainLog:
    """Per-epoch metric rows, per-step losses and (separately) wall-clock times.

    Timings are kept out of the metric CSV so that two identical runs produce
    byte-identical metric logs.
    """

    columns: tuple
    rows: list = field(default_factory=list)
    steps: list = field(default_factory=list)      # (step, L_G, L_D)
    wall_clock: list = field(default_factory=list)  # (epoch, seconds)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def metric_csv(self, comment: str | None = None) -> str:
        lines = [f"# {comment}"] if comment else []
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in self.columns))
        return "\n".join(lines) + "\n"

    def step_csv(self, comment: str | None = None) -> str:
        lines = [f"# {comment}"] if comment else []
        lines.append("step,L_G,L_D")
        lines += [f"{s},{_fmt(g)},{_fmt(d)}" for s, g, d in self.steps]
        return "\n".join(lines) + "\n"

    def timing_csv(self, comment: str | None = None) -> str:
        lines = [f"# {comment}"] if comment else []
        lines.append("epoch,wall_clock_s")
        lines += [f"{e},{t:.3f}" for e, t in self.wall_clock]
        return "\n".join(lines) + "\n"

    @property
    def total_seconds(self) -> float:
        return float(sum(t for _, t in self.wall_clock))

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "rows": self.rows,
                "steps": [list(s) for s in self.steps], "wall_clock": [list(w) for w in self.wall_clock]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(tuple(d["columns"]), [dict(r) for r in d["rows"]],
                   [tuple(s) for s in d["steps"]], [tuple(w) for w in d["wall_clock"]])


def _best_epoch(log: TrainLog) -> int:
    """Epoch of the first minimum of the logged dev SeER."""
    evaluated = [row for row in log.rows if row["dev_SeER"] is not None]
    best = min(evaluated, key=lambda row: row["dev_SeER"])
    return best["epoch"]


# ---------------------------------------------------------------------------
# acoustic model
# ---------------------------------------------------------------------------

@dataclass
class AmResult:
    model: Module
    log: TrainLog
    best_epoch: int
    best_seer: float

    def checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"best_epoch": self.best_epoch, "dev_seer": self.best_seer}
        meta.update(metadata or {})
        return Checkpoint.from_module(self.model, metadata=meta)


def spliced_rows(corpus, radius: int, generator: Module | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack every frame's context window: ((N, (2r+1)F) rows, (N,) labels)."""
    from .models import enhance

    rows, labels = [], []
    for utt in corpus:
        if utt.n_frames == 0:
            continue
        rows.append(context_window(enhance(generator, utt.frames), radius).T)
        labels.append(np.asarray(utt.senone_labels, dtype=np.int64))
    if not rows:
        raise ValueError("corpus has no frames")
    return np.ascontiguousarray(np.concatenate(rows), dtype=np.float32), np.concatenate(labels)


def _check_shapes(train, dev) -> None:
    if not train or not dev:
        raise ValueError("train and dev corpora must be non-empty")
    if train[0].frames.shape[0] != dev[0].frames.shape[0]:
        raise ValueError("train and dev corpora have different feature dimensions")


def train_acoustic_model(train, dev, cfg: AmTrainConfig, spec: AcousticModelSpec | None = None,
                         init_model: Module | None = None, generator: Module | None = None,
                         dev_generator: Module | None = None) -> AmResult:
    """SGD with the plateau scheduler; returns the model at the lowest dev SeER.

    ``generator`` (frozen) is applied to training frames and, unless
    ``dev_generator`` overrides it, to dev frames too.  Epoch 0 is the
    untrained (or initial) model, so zero epochs returns the input unchanged.
    """
    _check_shapes(train, dev)
    dev_generator = generator if dev_generator is None else dev_generator
    if init_model is not None:
        am = init_model
        spec = am.spec
    else:
        if spec is None:
            n_senones = 1 + max(int(u.senone_labels.max(initial=0)) for u in list(train) + list(dev))
            spec = AcousticModelSpec(feature_dim=train[0].frames.shape[0], n_senones=n_senones)
        am = build_acoustic_model(spec, cfg.seed)
    if generator is not None:
        generator.eval()
    rows, labels = spliced_rows(train, spec.context_radius, generator)
    if labels.max() >= spec.n_senones:
        raise ValueError("training labels exceed the model's senone count")

    log = TrainLog(AM_COLUMNS)
    sched = PlateauScheduler(cfg.lr, threshold=cfg.plateau_threshold)
    stopper = EarlyStopper(cfg.patience)
    opt = SGD(am.parameters(), cfg.lr)

    t0 = time.perf_counter()
    dev_seer = seer(am, dev_generator, dev)
    sched.update(dev_seer)
    stopper.update(dev_seer, 0)
    best_state = am.state_dict()
    log.rows.append({"epoch": 0, "train_loss": float("nan"), "dev_SeER": dev_seer, "lr": cfg.lr})
    log.wall_clock.append((0, time.perf_counter() - t0))

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        am.train()
        order = _rng(cfg.seed, 11, epoch).permutation(len(labels))
        for i, drop in enumerate(am.drops):
            drop._rng = _rng(cfg.seed, 12, epoch, i)
        opt.lr = sched.lr
        total, n = 0.0, 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:        # batch statistics need two rows
                    continue
                opt.zero_grad()
                loss = F.nll_loss(am(Tensor(rows[idx])), labels[idx])
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"acoustic model loss became {loss.item()} at epoch {epoch}")
                backward(loss)
                try:
                    opt.step()
                except FloatingPointError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                total += loss.item() * len(idx)
                n += len(idx)
        except NonFiniteError as exc:
            raise DivergenceError(f"acoustic model epoch {epoch}: {exc}") from exc
        am.eval()
        dev_seer = seer(am, dev_generator, dev)
        lr_used = opt.lr
        sched.update(dev_seer)
        log.rows.append({"epoch": epoch, "train_loss": total / max(n, 1), "dev_SeER": dev_seer,
                         "lr": lr_used})
        improved = dev_seer < stopper.best_metric
        verdict = stopper.update(dev_seer, epoch)
        if improved:
            best_state = am.state_dict()
        log.wall_clock.append((epoch, time.perf_counter() - t0))
        if verdict == "stop":
            break

    am.load_state_dict(best_state)
    am.eval()
    return AmResult(am, log, int(stopper.best_ref), float(stopper.best_metric))


def fine_tune(am: Module, generator: Module, noisy_train, dev, cfg: AmTrainConfig) -> AmResult:
    """Continue training a copy of ``am`` on generator-enhanced noisy frames."""
    from .checkpoint import Checkpoint

    copy = Checkpoint.from_module(am).build("acoustic_model")
    generator.requires_grad_(False)
    try:
        return train_acoustic_model(noisy_train, dev, cfg, init_model=copy, generator=generator)
    finally:
        generator.requires_grad_(True)


def train_mtr_baseline(noisy_train, dev, cfg: AmTrainConfig, perturb: PerturbSpec | None = None,
                       sets: str = "s+v", spec: AcousticModelSpec | None = None) -> AmResult:
    """Train an AM on the noisy set plus perturbed copies.

    ``sets`` names the added copies joined by ``+``: ``s`` (speed), ``v``
    (volume), ``sv`` (both on one copy); ``"s+v"`` adds two sets.
    """
    data = mtr_training_set(noisy_train, perturb or PerturbSpec(), sets)
    return train_acoustic_model(data, dev, cfg, spec=spec)


MTR_SETS = {"s": "speed", "v": "volume", "sv": "both"}


def mtr_training_set(noisy_train, perturb: PerturbSpec, sets: str) -> list:
    names = [s for s in sets.split("+") if s]
    if not names or any(n not in ("s", "v", "sv") for n in names):
        raise ValueError(f"bad MTR set list {sets!r}; use e.g. 's', 'v', 'sv', 's+v'")
    data = list(noisy_train)
    for name in names:
        data += mtr_corpus(noisy_train, perturb, MTR_SETS[name])
    return data


# ---------------------------------------------------------------------------
# Guided-GAN
# ---------------------------------------------------------------------------

@dataclass
class GanResult:
    generator: Module
    discriminator: Module
    log: TrainLog
    best_epoch: int
    best_seer: float
    g_steps: int
    d_steps: int
    am_hash: str
    snapshots: list = field(default_factory=list)   # (epoch, step, dev SeER, generator state)
    config: dict = field(default_factory=dict)

    def checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"best_epoch": self.best_epoch, "dev_seer": self.best_seer, "g_steps": self.g_steps,
                "d_steps": self.d_steps, "am_hash": self.am_hash,
                "config_hash": config_hash(self.config)}
        meta.update(metadata or {})
        return Checkpoint.from_module(self.generator, metadata=meta)


@dataclass
class _GanState:
    generator: Module
    discriminator: Module
    opt_g: Adam
    opt_d: Adam
    log: TrainLog
    stopper: EarlyStopper
    best_state: dict
    epoch: int = 0
    g_steps: int = 0
    d_steps: int = 0


def _adam_tensors(prefix: str, opt: Adam) -> dict:
    out = {}
    for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
        out[f"{prefix}.m.{i}"] = m
        out[f"{prefix}.v.{i}"] = v
    return out


def _load_adam(prefix: str, opt: Adam, tensors: dict, t: int) -> None:
    n = len(opt.params)
    if f"{prefix}.m.0" in tensors:
        opt.state.m = [np.array(tensors[f"{prefix}.m.{i}"]) for i in range(n)]
        opt.state.v = [np.array(tensors[f"{prefix}.v.{i}"]) for i in range(n)]
    opt.state.t = t


def resume_checkpoint(result_state: _GanState, cfg: GanTrainConfig) -> Checkpoint:
    s = result_state
    ck = Checkpoint({})
    ck.add_module(s.generator, "generator")
    ck.add_module(s.discriminator, "discriminator")
    ck.tensors.update(_adam_tensors("adam_g", s.opt_g))
    ck.tensors.update(_adam_tensors("adam_d", s.opt_d))
    best = {f"best.{k}": v for k, v in s.best_state.items()}
    ck.tensors.update(best)
    ck.metadata.update({
        "epoch": s.epoch, "g_steps": s.g_steps, "d_steps": s.d_steps,
        "adam_g_t": s.opt_g.state.t, "adam_d_t": s.opt_d.state.t,
        "stopper": {"best_metric": s.stopper.best_metric, "best_ref": s.stopper.best_ref,
                    "bad_epochs": s.stopper.bad_epochs},
        "log": {**s.log.to_dict(), "wall_clock": []},  # timings would make the state non-reproducible
        "config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
    })
    return ck


def _batches(n_items: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_items)
    return [order[i:i + batch] for i in range(0, n_items - batch + 1, batch)]


def _checked(value: Tensor, what: str, step: int) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise DivergenceError(f"{what} became {v} at step {step}")
    return v


def train_gan(clean_train, noisy_train, am: Module, noisy_dev, cfg: GanTrainConfig,
              resume: Checkpoint | None = None, keep_snapshots: bool = False,
              on_epoch: Callable | None = None) -> GanResult:
    """Adversarial training of a generator guided by a frozen acoustic model.

    Clean and noisy windows are drawn from independent permutations, so no
    pairing between the two sets exists.  Each step updates D once and then
    G once.  Dev SeER (AM on enhanced noisy dev) is evaluated every
    ``eval_every`` epochs, epoch 0 being the untrained generator; the returned
    generator is the one at the first minimum of that log.
    """
    loss_cfg = cfg.loss_config()
    x_clean, _ = chunk_corpus(clean_train, cfg.window, cfg.hop)
    x_noisy, y_noisy = chunk_corpus(noisy_train, cfg.window, cfg.hop)
    if x_clean.shape[1] != x_noisy.shape[1]:
        raise ValueError("clean and noisy corpora have different feature dimensions")
    if am.spec.feature_dim != x_noisy.shape[1]:
        raise ValueError("acoustic model feature dimension does not match the corpus")
    batch = min(cfg.batch_size, len(x_clean), len(x_noisy))

    am.eval()
    am.requires_grad_(False)
    am_hash = state_hash(am)

    if resume is not None:
        gen = resume.build("generator")
        disc = resume.build("discriminator")
    else:
        gen = build_generator(cfg.generator, cfg.seed)
        disc = build_discriminator(cfg.discriminator, cfg.seed + 1)
    state = _GanState(gen, disc, Adam(gen.parameters(), cfg.lr_g), Adam(disc.parameters(), cfg.lr_d),
                      TrainLog(EPOCH_COLUMNS), EarlyStopper(cfg.patience), gen.state_dict())
    if resume is not None:
        meta = resume.metadata
        state.epoch, state.g_steps, state.d_steps = meta["epoch"], meta["g_steps"], meta["d_steps"]
        _load_adam("adam_g", state.opt_g, resume.tensors, meta["adam_g_t"])
        _load_adam("adam_d", state.opt_d, resume.tensors, meta["adam_d_t"])
        st = meta["stopper"]
        state.stopper = EarlyStopper(cfg.patience, st["best_metric"], st["best_ref"], st["bad_epochs"])
        state.log = TrainLog.from_dict(meta["log"])
        state.best_state = {k[len("best."):]: v for k, v in resume.tensors.items()
                            if k.startswith("best.")}
    snapshots = []

    def evaluate(epoch: int, l_g: float, l_d: float, seconds: float) -> str:
        dev = seer(am, gen, noisy_dev) if epoch % cfg.eval_every == 0 else None
        state.log.rows.append({"epoch": epoch, "step": state.g_steps, "L_G": l_g, "L_D": l_d,
                               "dev_SeER": dev, "lr_G": cfg.lr_g, "lr_D": cfg.lr_d})
        state.log.wall_clock.append((epoch, seconds))
        if dev is None:
            return "continue"
        if keep_snapshots:
            snapshots.append((epoch, state.g_steps, dev, gen.state_dict()))
        improved = dev < state.stopper.best_metric
        verdict = state.stopper.update(dev, epoch)
        if improved:
            state.best_state = gen.state_dict()
        return verdict

    verdict = "continue"
    if resume is None:
        t0 = time.perf_counter()
        verdict = evaluate(0, float("nan"), float("nan"), time.perf_counter() - t0)

    while verdict != "stop" and state.epoch < cfg.max_epochs:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        gen.train()
        disc.train()
        for i, drop in enumerate(disc.drops):
            drop._rng = _rng(cfg.seed, 21, epoch, i)
        gp_rng = _rng(cfg.seed, 22, epoch)
        noisy_batches = _batches(len(x_noisy), batch, _rng(cfg.seed, 23, epoch))
        clean_rng = _rng(cfg.seed, 24, epoch)
        clean_batches: list = []
        sum_g = sum_d = 0.0
        try:
            for noisy_idx in noisy_batches:
                if not clean_batches:
                    clean_batches = _batches(len(x_clean), batch, clean_rng)[::-1]
                clean_idx = clean_batches.pop()
                real = Tensor(x_clean[clean_idx])
                noisy = Tensor(x_noisy[noisy_idx])
                step = state.d_steps + 1

                # discriminator update on a detached fake batch
                with no_grad():
                    fake = gen(noisy)
                state.opt_d.zero_grad()
                d_real, d_fake = disc(real), disc(Tensor(fake.data))
                penalty = None
                if loss_cfg.family == "WGAN-GP" and loss_cfg.gp_weight > 0:
                    penalty = gradient_penalty(disc, real.data, fake.data, gp_rng)
                l_d = total_discriminator_loss(loss_cfg, d_real, d_fake, penalty)
                l_d_value = _checked(l_d, "L_D", step)
                if loss_cfg.family == "SN-GAN" and abs(l_d_value) > 1.0:
                    raise IntegrityError(f"|L_D| = {abs(l_d_value)} > 1 at step {step}")
                backward(l_d)
                try:
                    state.opt_d.step()
                except FloatingPointError as exc:
                    raise DivergenceError(f"discriminator step {step}: {exc}") from exc
                state.d_steps += 1

                # generator update through D and the frozen acoustic model
                disc.requires_grad_(False)
                try:
                    state.opt_g.zero_grad()
                    fake = gen(noisy)
                    log_probs = None
                    if loss_cfg.guidance_weight > 0:
                        log_probs = am(F.context_splice(fake, am.spec.context_radius))
                    labels = y_noisy[noisy_idx].reshape(-1)
                    l_g = generator_loss(loss_cfg, disc(fake), log_probs, labels)
                    l_g_value = _checked(l_g, "L_G", step)
                    backward(l_g)
                    try:
                        state.opt_g.step()
                    except FloatingPointError as exc:
                        raise DivergenceError(f"generator step {step}: {exc}") from exc
                finally:
                    disc.requires_grad_(True)
                state.g_steps += 1
                if state.g_steps != state.d_steps:
                    raise IntegrityError("generator and discriminator step counts diverged")
                state.log.steps.append((state.g_steps, l_g_value, l_d_value))
                sum_g += l_g_value
                sum_d += l_d_value
        except NonFiniteError as exc:
            raise DivergenceError(f"step {state.d_steps + 1}: {exc}") from exc

        n = max(len(noisy_batches), 1)
        state.epoch = epoch
        verdict = evaluate(epoch, sum_g / n, sum_d / n, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(state, cfg)

    if state_hash(am) != am_hash:
        raise IntegrityError("frozen acoustic model changed during GAN training")
    gen.load_state_dict(state.best_state)
    gen.eval()
    result = GanResult(gen, disc, state.log, int(state.stopper.best_ref),
                       float(state.stopper.best_metric), state.g_steps, state.d_steps, am_hash,
                       snapshots, cfg.to_dict())
    verify_gan_result(result, am)
    return result


def verify_gan_result(result: GanResult, am: Module) -> None:
    """Frozen guide unchanged, equal update counts, best epoch = argmin of the log."""
    if state_hash(am) != result.am_hash:
        raise IntegrityError("acoustic model hash changed")
    if result.g_steps != result.d_steps:
        raise IntegrityError(f"{result.g_steps} generator vs {result.d_steps} discriminator steps")
    if _best_epoch(result.log) != result.best_epoch:
        raise IntegrityError("returned generator is not the argmin of the logged dev SeER")


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

@dataclass
class GridTrial:
    phase: int
    batch_size: int
    lr_g: float
    lr_d: float
    guidance_weight: float
    objective: float | None = None
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.batch_size, self.lr_g, self.lr_d, self.guidance_weight)


def _neighbours(values: list, center) -> list:
    i = values.index(center)
    return values[max(i - 1, 0): i + 2]


def _pick(trials: list[GridTrial]) -> GridTrial:
    ok = [t for t in trials if t.objective is not None]
    if not ok:
        listing = "; ".join(f"{t.key}: {t.error}" for t in trials)
        raise DivergenceError(f"every grid trial diverged: {listing}")
    return min(ok, key=lambda t: (t.objective, t.key))


def grid_search(grid: GridSpec, base: GanTrainConfig, objective: Callable[[GanTrainConfig], float],
                runner: Callable | None = None) -> tuple[GanTrainConfig, list[GridTrial]]:
    """Two-phase search; returns the winning config and every trial in run order.

    Phase 1 crosses batch size with both learning rates at the base guidance
    weight.  Phase 2 varies the guidance weight over the full set and
    re-varies batch size and learning rates over the neighbours of the
    phase-1 winner.  Ties break on the lexicographic config order.
    ``objective`` maps a config to a dev SeER and may raise DivergenceError.
    """
    runner = runner or (lambda fn, items: [fn(x) for x in items])

    def run(trial: GridTrial) -> GridTrial:
        cfg = replace(base, batch_size=trial.batch_size, lr_g=trial.lr_g, lr_d=trial.lr_d,
                      guidance_weight=trial.guidance_weight, max_epochs=grid.trial_epochs)
        try:
            trial.objective = float(objective(cfg))
            if not math.isfinite(trial.objective):
                raise DivergenceError("non-finite objective")
        except (DivergenceError, FloatingPointError) as exc:
            trial.objective, trial.error = None, str(exc)
        return trial

    phase1 = [GridTrial(1, b, g, d, base.guidance_weight)
              for b, g, d in itertools.product(grid.batch_sizes, grid.lrs_g, grid.lrs_d)]
    phase1 = runner(run, phase1)
    center = _pick(phase1)
    trials = list(phase1)
    if len(phase1) * len(grid.guidance_weights) > 1:
        seen = {t.key for t in phase1}
        phase2 = []
        for b, g, d, lam in itertools.product(_neighbours(grid.batch_sizes, center.batch_size),
                                              _neighbours(grid.lrs_g, center.lr_g),
                                              _neighbours(grid.lrs_d, center.lr_d),
                                              grid.guidance_weights):
            if (b, g, d, lam) not in seen:
                seen.add((b, g, d, lam))
                phase2.append(GridTrial(2, b, g, d, lam))
        trials += runner(run, phase2)
    best = _pick(trials)
    return replace(base, batch_size=best.batch_size, lr_g=best.lr_g, lr_d=best.lr_d,
                   guidance_weight=best.guidance_weight), trials


def phase2_center(trials: Sequence[GridTrial]) -> GridTrial:
    return _pick([t for t in trials if t.phase == 1])


def grid_csv(trials: Sequence[GridTrial], comment: str | None = None) -> str:
    lines = [f"# {comment}"] if comment else []
    lines.append("phase,batch_size,lr_g,lr_d,guidance_weight,dev_SeER,error")
    for t in trials:
        err = (t.error or "").replace(",", ";").replace("\n", " ")
        lines.append(f"{t.phase},{t.batch_size},{t.lr_g!r},{t.lr_d!r},{t.guidance_weight!r},"
                     f"{_fmt(t.objective) if t.objective is not None else ''},{err}")
    return "\n".join(lines) + "\n"


def gan_objective(clean_train, noisy_train, am: Module, noisy_dev) -> Callable[[GanTrainConfig], float]:
    """Short-budget objective for grid search: best dev SeER of one GAN run."""
    def objective(cfg: GanTrainConfig) -> float:
        return train_gan(clean_train, noisy_train, am, noisy_dev, cfg).best_seer
    return objective
