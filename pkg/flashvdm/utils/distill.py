"""
Progressive flow distillation on toy 2-d data

Stages, each seeded per (seed, stage, step):

1. `train_teacher`: conditional flow matching with label dropout
2. `guidance_distill`: a w-conditioned student regresses the teacher's
   classifier-free guided velocity for w ~ U[w_min, w_max]
3. `cfd_train`: consistency flow distillation over a multi-phase
   schedule, followed by single-phase finetuning
4. `adversarial_finetune`: hinge-loss discriminator heads on the
   teacher's hidden activations, combined with the consistency loss

`Workdir` and `run_stage` chain the stages through checkpoints, which
is what the command line uses
"""

import json
import os
from dataclasses import dataclass
from typing import IO, Any, Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import LOG_MANAGER
from .autodiff import DivergenceError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DistillConfig, to_dict
from .flow import (
    Adam,
    FlowModel,
    Module,
    cfg_velocity,
    drop_labels,
    ema_update,
    energy_distance,
    pseudo_huber,
    sample,
    sample_toy_data,
    squared_error,
    student_predict,
)

log = LOG_MANAGER.get_logger(__name__)

STAGES = ("teacher", "gd", "cfd", "adv")
STAGE_IDS = {"teacher": 0, "gd": 1, "cfd": 2, "cfd-finetune": 3, "adv": 4, "eval": 5}
DISC_TAPS = (1, 2)
TEACHER_NFE = 50
HELDOUT_SEED = 10_000

GuideVelocity = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

__all__ = [
    "DivergenceError",
    "PrerequisiteError",
    "TrainLog",
    "PhaseSchedule",
    "DiscriminatorHeads",
    "train_teacher",
    "guidance_distill",
    "cfd_train",
    "adversarial_finetune",
    "run_stage",
    "evaluate",
]


class PrerequisiteError(RuntimeError):
    """
    A stage needs the checkpoint of an earlier `stage`
    """

    def __init__(self, stage: str, path: str) -> None:
        super().__init__(f"missing {stage} checkpoint ({path}); run `distill {stage}` first")
        self.stage = stage
        self.path = path


class TrainLog:
    """
    Collects every step's loss per stage and writes a JSON-lines record
    (stage, step, loss, lr) every `every` steps
    """

    def __init__(self, sink: Optional[IO] = None, every: int = 100) -> None:
        self.sink = sink
        self.every = every
        self.history: Dict[str, List[float]] = {}

    def record(self, stage: str, step: int, loss: float, lr: float, **extra: float) -> None:
        self.history.setdefault(stage, []).append(loss)
        if step % self.every:
            return
        entry = {"stage": stage, "step": step, "loss": loss, "lr": lr, **extra}
        log.info(f"{stage} step {step}: loss {loss:.6f}")
        if self.sink is not None:
            self.sink.write(json.dumps(entry, sort_keys=True) + "\n")
            self.sink.flush()


def _rng(cfg: DistillConfig, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STAGE_IDS[stage], step])


def _batch_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**32))


def _checked(loss: Tensor, stage: str, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(stage, step, value)
    return value


def _interpolate(x0: np.ndarray, noise: np.ndarray, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (1.0 - t) * x0 + t * noise


def flow_matching_loss(
    model: FlowModel, x0: np.ndarray, labels: np.ndarray, noise: np.ndarray, t: np.ndarray
) -> Tensor:
    """
    Mean squared error between `v(x_t, t, c)` and `noise - x0`
    """
    prediction = model(_interpolate(x0, noise, t), t, labels)
    return squared_error(prediction, noise - x0).mean()


def train_teacher(
    cfg: DistillConfig,
    steps: Optional[int] = None,
    train_log: Optional[TrainLog] = None,
) -> FlowModel:
    """
    Conditional flow-matching teacher; `cfg.label_dropout` of the labels
    are replaced by the null class so the model also learns the
    unconditional velocity
    """
    steps = cfg.teacher_steps if steps is None else steps
    train_log = train_log or TrainLog(every=cfg.log_every)
    model = FlowModel(cfg.hidden, cfg.layers, cfg.freqs, seed=cfg.seed)
    optimizer = Adam(model.parameters(), cfg.teacher_lr)

    for step in range(1, steps + 1):
        rng = _rng(cfg, "teacher", step)
        batch = sample_toy_data(cfg.dist, cfg.batch_size, _batch_seed(rng))
        labels = drop_labels(batch.labels, cfg.label_dropout, rng)
        t = rng.random(cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, 2))

        loss = flow_matching_loss(model, batch.points, labels, noise, t)
        value = _checked(loss, "teacher", step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        train_log.record("teacher", step, value, optimizer.lr)
    return model


def guidance_loss(
    student: FlowModel,
    teacher: FlowModel,
    x_t: np.ndarray,
    t: np.ndarray,
    labels: np.ndarray,
    w: np.ndarray,
) -> Tensor:
    target = cfg_velocity(teacher, x_t, t, labels, w).detach()
    return squared_error(student(x_t, t, labels, w), target).mean()


def guidance_distill(
    teacher: FlowModel,
    cfg: DistillConfig,
    steps: Optional[int] = None,
    train_log: Optional[TrainLog] = None,
) -> FlowModel:
    """
    Student initialized from the teacher plus a zero guidance
    embedding, trained to match the teacher's guided velocity
    """
    steps = cfg.gd_steps if steps is None else steps
    train_log = train_log or TrainLog(every=cfg.log_every)
    student = teacher.with_w_embedding()
    optimizer = Adam(student.parameters(), cfg.gd_lr)

    for step in range(1, steps + 1):
        rng = _rng(cfg, "gd", step)
        batch = sample_toy_data(cfg.dist, cfg.batch_size, _batch_seed(rng))
        t = rng.random(cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, 2))
        w = rng.uniform(cfg.w_min, cfg.w_max, cfg.batch_size)
        x_t = _interpolate(batch.points, noise, t)

        loss = guidance_loss(student, teacher, x_t, t, batch.labels, w)
        value = _checked(loss, "gd", step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        train_log.record("gd", step, value, optimizer.lr)
    return student


def guidance_gap(
    student: FlowModel, teacher: FlowModel, w: float, cfg: DistillConfig, n: int = 2048, seed: int = 0
) -> float:
    """
    Mean squared velocity gap between the student at `w` and the
    teacher's guided velocity, on held-out `(x_t, t)`
    """
    rng = np.random.default_rng([HELDOUT_SEED, seed])
    batch = sample_toy_data(cfg.dist, n, _batch_seed(rng))
    t = rng.random(n)
    x_t = _interpolate(batch.points, rng.standard_normal((n, 2)), t)
    w = np.full(n, w, dtype=np.float64)
    return guidance_loss(student, teacher, x_t, t, batch.labels, w).item()


@dataclass(frozen=True)
class PhaseSchedule:
    """
    Splits the `num_timesteps` grid over [0, 1] into `phases` equal
    sub-trajectories; a time in `(low, high]` of a phase maps to `low`
    """

    phases: int
    num_timesteps: int = 100

    def __post_init__(self) -> None:
        if self.phases < 1:
            raise ValueError(f"need at least one phase, got {self.phases}")
        if self.num_timesteps < self.phases:
            raise ValueError(
                f"{self.phases} phases do not fit a grid of {self.num_timesteps} steps"
            )

    @property
    def boundary_steps(self) -> np.ndarray:
        """
        Phase boundaries as grid indices, from `num_timesteps` down to 0
        """
        steps = np.linspace(self.num_timesteps, 0, self.phases + 1)
        return np.round(steps).astype(np.int64)

    @property
    def boundaries(self) -> np.ndarray:
        return self.boundary_steps / self.num_timesteps

    def end_step(self, steps: np.ndarray) -> np.ndarray:
        ascending = self.boundary_steps[::-1]
        j = np.searchsorted(ascending, np.asarray(steps), side="left")
        return ascending[np.maximum(j - 1, 0)]

    def t_end(self, t: np.ndarray) -> np.ndarray:
        ascending = self.boundaries[::-1]
        j = np.searchsorted(ascending, np.asarray(t, dtype=np.float64), side="left")
        return ascending[np.maximum(j - 1, 0)]


class CfdBatch(NamedTuple):
    """
    One consistency-distillation batch on the time grid: `step` is
    t_n, `next_step` the k-skip target t_{n+1}, `end_step` the phase
    boundary
    """

    x0: np.ndarray
    labels: np.ndarray
    noise: np.ndarray
    step: np.ndarray
    next_step: np.ndarray
    end_step: np.ndarray


def sample_cfd_batch(
    cfg: DistillConfig, schedule: PhaseSchedule, rng: np.random.Generator
) -> CfdBatch:
    """
    Draw one phase for the whole batch, then grid times inside it
    """
    data = sample_toy_data(cfg.dist, cfg.batch_size, _batch_seed(rng))
    phase = int(rng.integers(schedule.phases))
    high, low = schedule.boundary_steps[phase], schedule.boundary_steps[phase + 1]
    step = rng.integers(low + 1, high + 1, cfg.batch_size)
    next_step = np.maximum(step - cfg.k_skip, low)
    noise = rng.standard_normal((cfg.batch_size, 2))
    return CfdBatch(data.points, data.labels, noise, step, next_step, np.full_like(step, low))


def teacher_guide(teacher: FlowModel, w: float) -> GuideVelocity:
    def velocity(x: np.ndarray, t: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return cfg_velocity(teacher, x, t, labels, w).data

    return velocity


def student_guide(student: FlowModel, w: float) -> GuideVelocity:
    def velocity(x: np.ndarray, t: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return student(x, t, labels, np.full(len(x), w)).data

    return velocity


def cfd_loss(
    student: FlowModel,
    target: FlowModel,
    guide: GuideVelocity,
    batch: CfdBatch,
    cfg: DistillConfig,
) -> Tensor:
    """
    Consistency loss: the student's one-step prediction of the phase
    end from x_{t_n} against the (stop-gradient) target network's
    prediction from the guide's k-skip Euler step x_{t_{n+1}}
    """
    grid = cfg.num_timesteps
    t = batch.step / grid
    t_next = batch.next_step / grid
    t_end = batch.end_step / grid
    x_t = _interpolate(batch.x0, batch.noise, t)
    x_next = x_t + (t_next - t)[:, None] * guide(x_t, t, batch.labels)
    w = np.full(len(t), cfg.w_const)

    goal = student_predict(target, x_next, t_next, t_end, batch.labels, w).detach()
    prediction = student_predict(student, x_t, t, t_end, batch.labels, w)
    if cfg.loss == "huber":
        return pseudo_huber(prediction, goal, cfg.huber_c).mean()
    return squared_error(prediction, goal).mean()


def _consistency_round(
    student: FlowModel,
    target: FlowModel,
    guide: GuideVelocity,
    cfg: DistillConfig,
    schedule: PhaseSchedule,
    steps: int,
    lr: float,
    stage: str,
    train_log: TrainLog,
) -> None:
    optimizer = Adam(student.parameters(), lr)
    for step in range(1, steps + 1):
        rng = _rng(cfg, stage, step)
        loss = cfd_loss(student, target, guide, sample_cfd_batch(cfg, schedule, rng), cfg)
        value = _checked(loss, stage, step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if target is not student:
            ema_update(target, student, cfg.ema_decay)
        train_log.record(stage, step, value, lr, phases=schedule.phases)


def cfd_train(
    student_init: FlowModel,
    teacher: FlowModel,
    cfg: DistillConfig,
    schedule: Optional[PhaseSchedule] = None,
    steps: Optional[int] = None,
    train_log: Optional[TrainLog] = None,
) -> FlowModel:
    """
    Multi-phase consistency distillation, then (with
    `cfg.phase1_finetune`) single-phase finetuning at `cfg.finetune_lr`

    The target network is an EMA copy of the student when `cfg.use_ema`
    is set, the student itself (under stop-gradient) otherwise. The
    guide is the teacher with guidance `cfg.w_const`, or the
    guidance-distilled initialization for `cfd_teacher = "distilled"`
    """
    if not student_init.w_embedded:
        student_init = student_init.with_w_embedding()
    schedule = schedule or PhaseSchedule(cfg.phases, cfg.num_timesteps)
    train_log = train_log or TrainLog(every=cfg.log_every)
    if cfg.cfd_teacher == "original":
        guide = teacher_guide(teacher, cfg.w_const)
    else:
        guide = student_guide(student_init.copy(), cfg.w_const)

    student = student_init.copy()
    target = student.copy() if cfg.use_ema else student
    steps = cfg.cfd_steps if steps is None else steps
    _consistency_round(student, target, guide, cfg, schedule, steps, cfg.cfd_lr, "cfd", train_log)

    if cfg.phase1_finetune and schedule.phases > 1:
        single = PhaseSchedule(1, cfg.num_timesteps)
        _consistency_round(
            student,
            target,
            guide,
            cfg,
            single,
            cfg.finetune_steps,
            cfg.finetune_lr,
            "cfd-finetune",
            train_log,
        )
    return student


class DiscriminatorHeads(Module):
    """
    One small SiLU MLP per tapped hidden layer of the teacher, each
    giving a scalar per sample
    """

    def __init__(
        self,
        width: int,
        taps: Sequence[int] = DISC_TAPS,
        hidden: int = 64,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if not taps:
            raise ValueError("need at least one discriminator head")
        self.taps = tuple(taps)
        rng = np.random.default_rng(seed)
        for tap in self.taps:
            self._param(f"head{tap}.w1", rng.standard_normal((width, hidden)) / np.sqrt(width))
            self._param(f"head{tap}.b1", np.zeros(hidden))
            self._param(f"head{tap}.w2", rng.standard_normal((hidden, 1)) / np.sqrt(hidden))
            self._param(f"head{tap}.b2", np.zeros(1))

    def features(self, teacher: FlowModel, x: Any, labels: np.ndarray) -> List[Tensor]:
        """
        Teacher activations at the clean end of the trajectory (t = 0)
        """
        if max(self.taps) > teacher.layers or min(self.taps) < 1:
            raise ValueError(f"taps {self.taps} outside the teacher's {teacher.layers} layers")
        _, hidden = teacher(x, 0.0, labels, taps=True)
        return [hidden[tap - 1] for tap in self.taps]

    def forward(self, features: Sequence[Tensor]) -> List[Tensor]:
        p = self.params
        outputs = []
        for tap, h in zip(self.taps, features):
            z = (h @ p[f"head{tap}.w1"] + p[f"head{tap}.b1"]).silu()
            outputs.append((z @ p[f"head{tap}.w2"] + p[f"head{tap}.b2"]).reshape(h.shape[0]))
        return outputs

    __call__ = forward


def discriminator_loss(d_real: Sequence[Tensor], d_fake: Sequence[Tensor]) -> Tensor:
    """
    Hinge loss summed over heads: `ReLU(1 + D(real)) + ReLU(1 - D(fake))`,
    so real samples are pushed to D <= -1 and fakes to D >= 1
    """
    total = Tensor(0.0)
    for real, fake in zip(d_real, d_fake):
        total = total + (real + 1.0).relu().mean() + (1.0 - fake).relu().mean()
    return total


def generator_loss(d_fake: Sequence[Tensor]) -> Tensor:
    """
    Mean head output on fakes summed over heads; minimizing it moves
    fakes toward the real side
    """
    total = Tensor(0.0)
    for fake in d_fake:
        total = total + fake.mean()
    return total


def adversarial_finetune(
    generator: FlowModel,
    teacher: FlowModel,
    cfg: DistillConfig,
    steps: Optional[int] = None,
    train_log: Optional[TrainLog] = None,
    taps: Sequence[int] = DISC_TAPS,
) -> FlowModel:
    """
    Alternate discriminator and generator updates

    Real samples are data, fakes are the generator's one-step
    predictions of x_0 from grid times; the generator minimizes
    `L_cfd + lambda_adv * generator_loss` at a tenth of the
    discriminator's learning rate
    """
    steps = cfg.adv_steps if steps is None else steps
    train_log = train_log or TrainLog(every=cfg.log_every)
    generator = generator.copy()
    target = generator.copy() if cfg.use_ema else generator
    heads = DiscriminatorHeads(teacher.hidden, taps, cfg.disc_hidden, cfg.seed)
    guide = teacher_guide(teacher, cfg.w_const)
    single = PhaseSchedule(1, cfg.num_timesteps)
    disc_opt = Adam(heads.parameters(), cfg.adv_lr)
    gen_opt = Adam(generator.parameters(), cfg.adv_lr / 10)

    for step in range(1, steps + 1):
        rng = _rng(cfg, "adv", step)
        batch = sample_cfd_batch(cfg, single, rng)
        t = batch.step / cfg.num_timesteps
        x_t = _interpolate(batch.x0, batch.noise, t)
        w = np.full(len(t), cfg.w_const)
        fake = student_predict(generator, x_t, t, 0.0, batch.labels, w)

        d_loss = discriminator_loss(
            heads(heads.features(teacher, batch.x0, batch.labels)),
            heads(heads.features(teacher, fake.detach(), batch.labels)),
        )
        d_value = _checked(d_loss, "adv", step)
        heads.zero_grad()
        teacher.zero_grad()
        d_loss.backward()
        disc_opt.step()

        adv = generator_loss(heads(heads.features(teacher, fake, batch.labels)))
        g_loss = cfd_loss(generator, target, guide, batch, cfg) + cfg.lambda_adv * adv
        g_value = _checked(g_loss, "adv", step)
        generator.zero_grad()
        heads.zero_grad()
        teacher.zero_grad()
        g_loss.backward()
        gen_opt.step()
        if target is not generator:
            ema_update(target, generator, cfg.ema_decay)
        train_log.record("adv", step, g_value, gen_opt.lr, disc_loss=d_value)

    teacher.zero_grad()
    return generator


class Workdir:
    """
    Checkpoints, the training log and sample files of one distillation
    run
    """

    def __init__(self, root: str) -> None:
        self.root = root

    def checkpoint(self, stage: str) -> str:
        return os.path.join(self.root, f"{stage}.ckpt")

    @property
    def log_path(self) -> str:
        return os.path.join(self.root, "train_log.jsonl")

    def samples(self, stage: str, nfe: int, seed: int) -> str:
        return os.path.join(self.root, f"samples_{stage}_nfe{nfe}_seed{seed}.npy")

    def sample_meta(self, stage: str, nfe: int, seed: int) -> str:
        return os.path.splitext(self.samples(stage, nfe, seed))[0] + ".json"

    def has(self, stage: str) -> bool:
        return os.path.isfile(self.checkpoint(stage))

    def load(self, stage: str) -> FlowModel:
        if not self.has(stage):
            raise PrerequisiteError(stage, self.checkpoint(stage))
        return load_checkpoint(self.checkpoint(stage)).model


def run_stage(
    stage: str,
    workdir: Workdir,
    cfg: DistillConfig,
    steps: Optional[int] = None,
) -> FlowModel:
    """
    Run one stage from the checkpoints of the stages it depends on and
    save its own; gd needs teacher, cfd needs gd (teacher only without
    GD warmup), adv needs cfd and teacher

    Raises `PrerequisiteError` naming the missing stage
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    os.makedirs(workdir.root, exist_ok=True)

    teacher = None if stage == "teacher" else workdir.load("teacher")
    with open(workdir.log_path, "a", encoding="utf-8") as sink:
        train_log = TrainLog(sink, cfg.log_every)
        if stage == "teacher":
            model = train_teacher(cfg, steps, train_log)
        elif stage == "gd":
            model = guidance_distill(teacher, cfg, steps, train_log)
        elif stage == "cfd":
            init = workdir.load("gd") if cfg.gd_warmup else teacher.with_w_embedding()
            model = cfd_train(init, teacher, cfg, steps=steps, train_log=train_log)
        else:
            model = adversarial_finetune(workdir.load("cfd"), teacher, cfg, steps, train_log)

    losses = train_log.history.get(stage, [])
    meta = {
        "stage": stage,
        "config": to_dict(cfg),
        "steps": len(losses),
        "final_loss": losses[-1] if losses else None,
    }
    save_checkpoint(workdir.checkpoint(stage), model, meta)
    log.info(f"{stage}: saved {workdir.checkpoint(stage)}")
    return model


def heldout_data(cfg: DistillConfig, n: int, seed: int):
    return sample_toy_data(cfg.dist, n, HELDOUT_SEED + seed)


def sample_stage(
    stage: str, workdir: Workdir, cfg: DistillConfig, nfe: int, seed: int, n: int = 4096
) -> str:
    """
    Write `n` samples of a stage's model (labels of the held-out set,
    guidance `cfg.w_const`) to an `.npy` file and return its path

    A JSON sidecar with the same stem records the stage, NFE, seed,
    count and the resolved config, so the file can be regenerated
    """
    model = workdir.load(stage)
    labels = heldout_data(cfg, n, seed).labels
    points = sample(model, n, labels, nfe, cfg.w_const, seed)
    path = workdir.samples(stage, nfe, seed)
    np.save(path, points)
    meta = {
        "stage": stage,
        "nfe": nfe,
        "seed": seed,
        "count": n,
        "guidance": cfg.w_const,
        "samples": os.path.basename(path),
        "config": to_dict(cfg),
    }
    with open(workdir.sample_meta(stage, nfe, seed), "w", encoding="utf-8") as file:
        file.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def evaluate(
    workdir: Workdir, cfg: DistillConfig, nfe: int = 5, seed: int = 0, n: int = 4096
) -> Dict[str, float]:
    """
    Energy distance to held-out data: the teacher at `TEACHER_NFE`
    steps and every available student stage at `nfe`
    """
    data = heldout_data(cfg, n, seed)
    results = {}
    teacher = workdir.load("teacher")
    teacher_points = sample(teacher, n, data.labels, TEACHER_NFE, cfg.w_const, seed)
    results[f"teacher@{TEACHER_NFE}"] = energy_distance(teacher_points, data.points)
    for stage in STAGES[1:]:
        if workdir.has(stage):
            points = sample(workdir.load(stage), n, data.labels, nfe, cfg.w_const, seed)
            results[f"{stage}@{nfe}"] = energy_distance(points, data.points)
    for name, value in results.items():
        log.info(f"energy distance {name}: {value:.5f}")
    return results
