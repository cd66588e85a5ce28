"""Phase-incremental training loop.

Each step performs three gradient flows from a single backward pass over
disjoint graphs:

* student encoder, projector, predictor and prototype bank from
  ``L_ssl + L_clus + alpha * L_esr + L_dis``;
* cluster centers from ``L_clus`` alone (the margin loss sees them through a
  stop-gradient);
* the current teacher from its own SSL loss (distillation targets are
  stop-gradient copies of its outputs).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, add, concat_rows, l2_normalize, mul
from .checkpoint import load_arrays, save_arrays
from .config import TrainConfig, dump_config, parse_config_text
from .data import AugmentationPolicy, Dataset, PhaseSchedule, generate_synthetic, load_dataset, make_views, split_phases, train_test_split
from .encoder import Encoder, EncoderConfig, Predictor, TeacherSnapshot, snapshot
from .esr import AlphaSchedule, CenterSplit, constraint_satisfaction, esr_loss, split_centers
from .evaluation import ProbeConfig, RunMetrics, average_accuracy, linear_probe, per_phase_accuracy, write_metrics_csv
from .mtd import GammaSchedule, past_distill_loss, relation_distill_loss
from .optim import SGD, lr_schedule
from .pc import (
    ClusterCenters,
    ClusterStats,
    PrototypeBank,
    PrototypeQueue,
    cluster_stats,
    clustering_loss,
    extended_prototypes,
    prototype_attraction,
    refresh_queue,
)
from .ssl import SslConfig, ntxent_loss, swav_lite_loss

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["phase", "epoch", "l_ssl", "l_clus", "l_esr", "l_dis_pa", "l_dis_cu", "gamma", "alpha", "lr"]
TERMS = ("l_ssl", "l_clus", "l_esr", "l_dis_pa", "l_dis_cu", "l_ssl_cu", "total")

# rng stream tags; every generator is derived from one of the three named seeds
_S_PREDICTOR, _S_BANK, _S_CENTERS, _S_QUEUE, _S_ORDER, _S_AUG, _S_TEACHER, _S_PROBE = range(2, 10)


class NonFiniteLossError(FloatingPointError):
    pass


class MemoryContractError(AssertionError):
    pass


def rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


@dataclass
class CurrentTeacher:
    encoder: Encoder
    bank: PrototypeBank | None
    optimizer: SGD

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + ([self.bank.vectors] if self.bank else [])


@dataclass
class PhaseState:
    config: TrainConfig
    student: Encoder
    predictor: Predictor
    bank: PrototypeBank
    centers: ClusterCenters
    split: CenterSplit
    phase: int = 0
    student_opt: SGD | None = None
    center_opt: SGD | None = None
    past_teacher: TeacherSnapshot | None = None
    current_teacher: CurrentTeacher | None = None
    queue: PrototypeQueue | None = None
    prev_centers: np.ndarray | None = None
    prev_stats: ClusterStats | None = None

    def student_parameters(self) -> list[Tensor]:
        return self.student.parameters() + self.predictor.parameters() + [self.bank.vectors]


@dataclass
class LossReport:
    phase: int
    epoch: int
    values: dict[str, float]
    gamma: float
    alpha: float
    lr: float

    def row(self) -> list:
        v = self.values
        return [self.phase + 1, self.epoch, *(repr(v[k]) for k in LOSS_COLUMNS[2:7]), repr(self.gamma), repr(self.alpha), repr(self.lr)]


@dataclass
class RunResult:
    config: TrainConfig
    metrics: RunMetrics
    losses: list[LossReport]
    schedule: PhaseSchedule
    split: CenterSplit
    satisfaction: list[float] = field(default_factory=list)
    state: PhaseState | None = None

    @property
    def average_accuracy(self) -> float:
        return average_accuracy(self.metrics)


def encoder_config(cfg: TrainConfig) -> EncoderConfig:
    return EncoderConfig(cfg.input_dim, cfg.hidden_dims, cfg.embed_dim, seed=cfg.seed_model)


def ssl_config(cfg: TrainConfig) -> SslConfig:
    return SslConfig(cfg.objective, cfg.ssl_temperature, cfg.sinkhorn_iters, cfg.sinkhorn_eps)


def alpha_schedule(cfg: TrainConfig) -> AlphaSchedule:
    if cfg.alpha_schedule == "staged":
        return AlphaSchedule.staged(cfg.alpha_pairs())
    return AlphaSchedule(cfg.alpha)


def augmentation(cfg: TrainConfig) -> AugmentationPolicy:
    return AugmentationPolicy(cfg.aug_noise, cfg.aug_mask, cfg.aug_scale_min, cfg.aug_scale_max)


def init_state(cfg: TrainConfig) -> PhaseState:
    ad.set_default_dtype(cfg.dtype)
    d = cfg.embed_dim
    return PhaseState(
        config=cfg,
        student=Encoder(encoder_config(cfg)),
        predictor=Predictor(d, [cfg.seed_model, _S_PREDICTOR]),
        bank=PrototypeBank.random(cfg.n_prototypes, d, rng(cfg.seed_model, _S_BANK)),
        centers=ClusterCenters.random(cfg.n_centers, d, rng(cfg.seed_model, _S_CENTERS)),
        split=split_centers(cfg.n_centers, cfg.chosen_proportion, cfg.seed_split),
    )


def begin_phase(state: PhaseState, t: int) -> None:
    """Fresh optimizers (schedules restart per phase) and a fresh current teacher."""
    cfg = state.config
    state.phase = t
    state.student_opt = SGD(state.student_parameters(), cfg.momentum)
    state.center_opt = SGD([state.centers.vectors], cfg.momentum)
    state.current_teacher = None
    if cfg.use_current_teacher:
        enc = Encoder(encoder_config(cfg), stream=1000 + t)
        bank = None
        if cfg.objective == "swav_lite":
            bank = PrototypeBank.random(cfg.n_prototypes, cfg.embed_dim, rng(cfg.seed_model, _S_TEACHER, t), "teacher.prototypes")
        teacher = CurrentTeacher(enc, bank, None)
        teacher.optimizer = SGD(teacher.parameters(), cfg.momentum)
        state.current_teacher = teacher


def _ssl(cfg: TrainConfig, scfg: SslConfig, z1: Tensor, z2: Tensor, prototypes: Tensor | None, queue: Tensor | None = None) -> Tensor:
    if cfg.objective == "swav_lite":
        return swav_lite_loss(z1, z2, prototypes, scfg.temperature, scfg.sinkhorn_iters, scfg.sinkhorn_eps, queue)
    return ntxent_loss(z1, z2, scfg.temperature)


def loss_terms(state: PhaseState, x1: np.ndarray, x2: np.ndarray, gamma: float, alpha: float) -> dict[str, Tensor]:
    """Build every loss term for one batch on the active tape."""
    cfg = state.config
    scfg = ssl_config(cfg)
    zero = Tensor(0.0)
    v1, v2 = Tensor(x1), Tensor(x2)
    f1, f2 = state.student(v1), state.student(v2)
    z1, z2 = state.student.project(f1), state.student.project(f2)
    terms = {k: zero for k in TERMS}

    queue = state.queue if cfg.use_pc else None
    if cfg.objective == "swav_lite":
        if cfg.queue_mode == "prototypes":
            terms["l_ssl"] = _ssl(cfg, scfg, z1, z2, extended_prototypes(state.bank, queue))
        else:
            queue_rows = queue.vectors if queue is not None and queue.count else None
            terms["l_ssl"] = _ssl(cfg, scfg, z1, z2, state.bank.vectors, queue_rows)
    else:
        terms["l_ssl"] = _ssl(cfg, scfg, z1, z2, None)
        if cfg.use_pc:
            terms["l_ssl"] = add(terms["l_ssl"], prototype_attraction(concat_rows([z1, z2]), state.bank))

    if cfg.use_pc:
        terms["l_clus"] = clustering_loss(state.bank, state.centers)
    if cfg.use_esr:
        terms["l_esr"] = esr_loss(concat_rows([z1, z2]), state.centers, state.split, cfg.esr_lambda)
    if cfg.use_past_teacher and state.past_teacher is not None:
        p1, p2 = state.past_teacher(v1), state.past_teacher(v2)
        terms["l_dis_pa"] = mul(
            add(past_distill_loss(f1, p1, state.predictor), past_distill_loss(f2, p2, state.predictor)), 0.5
        )
    teacher = state.current_teacher
    if teacher is not None:
        g1, g2 = teacher.encoder(v1), teacher.encoder(v2)
        terms["l_dis_cu"] = relation_distill_loss(
            f1, f2, g1, g2, cfg.relation_tau, cfg.relation_symmetric, cfg.relation_keep_diagonal
        )
        h1, h2 = teacher.encoder.project(g1), teacher.encoder.project(g2)
        terms["l_ssl_cu"] = _ssl(cfg, scfg, h1, h2, teacher.bank.vectors if teacher.bank else None)

    terms["total"] = add(
        add(add(add(terms["l_ssl"], terms["l_clus"]), mul(terms["l_esr"], alpha)), terms["l_dis_pa"]),
        mul(terms["l_dis_cu"], gamma),
    )
    return terms


def train_step(state: PhaseState, x1: np.ndarray, x2: np.ndarray, lr: float, gamma: float, alpha: float) -> dict[str, float]:
    optimizers = [state.student_opt, state.center_opt]
    if state.current_teacher is not None:
        optimizers.append(state.current_teacher.optimizer)
    for opt in optimizers:
        opt.zero_grad()
    with Tape() as tape:
        terms = loss_terms(state, x1, x2, gamma, alpha)
        objective = add(terms["total"], terms["l_ssl_cu"])
    values = {k: float(v.data) for k, v in terms.items()}
    for name, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite {name} ({v}) in phase {state.phase + 1}")
    summed = values["l_ssl"] + values["l_clus"] + alpha * values["l_esr"] + values["l_dis_pa"] + gamma * values["l_dis_cu"]
    if abs(summed - values["total"]) > 1e-12 * max(1.0, abs(summed)):
        raise AssertionError(f"total loss {values['total']!r} != sum of terms {summed!r}")
    tape.backward(objective)
    for opt in optimizers:
        opt.step(lr)
    return values


def train_epoch(state: PhaseState, samples: np.ndarray, epoch: int) -> LossReport:
    cfg = state.config
    t = state.phase
    lr = lr_schedule(epoch, cfg.epochs, cfg.base_lr, cfg.warmup_epochs, cfg.base_lr * cfg.lr_floor_ratio)
    gamma = GammaSchedule(cfg.gamma_initial, cfg.gamma_final)(epoch, cfg.epochs)
    alpha = alpha_schedule(cfg)(epoch, cfg.epochs)
    if cfg.use_pc:
        state.queue = refresh_queue(
            state.prev_centers, state.prev_stats, rng(cfg.seed_model, _S_QUEUE, t, epoch), cfg.embed_dim, t - 1
        )
    n = len(samples)
    bs = min(cfg.batch_size, n)
    order = rng(cfg.seed_data, _S_ORDER, t, epoch).permutation(n)
    aug_rng = rng(cfg.seed_data, _S_AUG, t, epoch)
    policy = augmentation(cfg)
    sums = dict.fromkeys(TERMS, 0.0)
    steps = n // bs
    for b in range(steps):
        x = samples[order[b * bs : (b + 1) * bs]]
        x1, x2 = make_views(x, policy, aug_rng)
        try:
            out = train_step(state, x1, x2, lr, gamma, alpha)
        except ad.DegenerateInputError as exc:
            raise ad.DegenerateInputError(
                f"phase {t + 1}, epoch {epoch}, batch {b}: {exc} "
                "(a relu stack emitted an all-zero row; wider hidden_dims or embed_dim make this unlikely)"
            ) from exc
        for k, v in out.items():
            sums[k] += v
    return LossReport(t, epoch, {k: v / steps for k, v in sums.items()}, gamma, alpha, lr)


def end_phase(state: PhaseState) -> None:
    """Snapshot the student as the next past teacher and record cluster statistics."""
    unit_bank = l2_normalize(ad.stop_gradient(state.bank.vectors)).data
    unit_centers = l2_normalize(ad.stop_gradient(state.centers.vectors)).data
    state.prev_stats = cluster_stats(unit_bank, unit_centers)
    state.prev_centers = unit_centers.copy()
    state.past_teacher = snapshot(state.student, state.phase)
    state.current_teacher = None
    state.student_opt = state.center_opt = None


def run_phase(state: PhaseState, samples: np.ndarray, t: int) -> tuple[PhaseState, list[LossReport]]:
    if len(samples) == 0:
        raise ValueError(f"phase {t + 1} has no training samples")
    begin_phase(state, t)
    reports = []
    for epoch in range(state.config.epochs):
        reports.append(train_epoch(state, samples, epoch))
    end_phase(state)
    return state, reports


def phase_satisfaction(state: PhaseState, samples: np.ndarray) -> float:
    """Fraction of (un-augmented) phase samples meeting the chosen/reserved margin."""
    z = state.student.project(state.student(Tensor(samples)))
    return constraint_satisfaction(z, state.centers, state.split, state.config.esr_lambda)


def _walk_arrays(obj, seen: set, path: str = "state"):
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, np.ndarray):
        yield path, obj
    elif isinstance(obj, Tensor):
        yield from _walk_arrays(obj.data, seen, path + ".data")
        if obj.grad is not None:
            yield from _walk_arrays(obj.grad, seen, path + ".grad")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk_arrays(v, seen, f"{path}[{k!r}]")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _walk_arrays(v, seen, f"{path}[{i}]")
    elif hasattr(obj, "__dict__"):
        for k, v in vars(obj).items():
            yield from _walk_arrays(v, seen, f"{path}.{k}")


def _allowed_arrays(state: PhaseState) -> set[int]:
    """Ids of the arrays the carried state may hold: parameters, optimizer buffers, stats, queue."""
    params = state.student_parameters() + [state.centers.vectors]
    if state.past_teacher is not None:
        params += state.past_teacher.parameters()
    if state.current_teacher is not None:
        params += state.current_teacher.parameters()
    if state.queue is not None:
        params.append(state.queue.vectors)
    allowed = [a for p in params for a in (p.data, p.grad) if a is not None]
    for opt in (state.student_opt, state.center_opt):
        if opt is not None:
            allowed += opt.velocity
    if state.prev_stats is not None:
        allowed += [state.prev_stats.counts, state.prev_stats.means, state.prev_stats.variances]
    if state.prev_centers is not None:
        allowed.append(state.prev_centers)
    return {id(a) for a in allowed}


def assert_memory_free(state: PhaseState, forbidden_rows) -> None:
    """Fail if the carried state holds any sample- or feature-sized array besides its learnables."""
    cfg = state.config
    forbidden = {int(m) for m in forbidden_rows}
    widths = {cfg.input_dim, cfg.embed_dim}
    allowed = _allowed_arrays(state)
    for path, arr in _walk_arrays(state, set()):
        if id(arr) in allowed:
            continue
        if arr.ndim == 2 and arr.shape[0] in forbidden and arr.shape[1] in widths:
            raise MemoryContractError(f"{path} holds a {arr.shape} array after phase teardown")


# ------------------------------------------------------------------ checkpoints


def save_state(state: PhaseState, path) -> None:
    arrays = {f"student.{k}": v for k, v in state.student.state_dict().items()}
    arrays.update({f"predictor.{p.name}": p.data for p in state.predictor.parameters()})
    arrays["bank"] = state.bank.vectors.data
    arrays["centers"] = state.centers.vectors.data
    if state.prev_stats is not None:
        arrays["stats.counts"] = state.prev_stats.counts.astype(np.float64)
        arrays["stats.means"] = state.prev_stats.means
        arrays["stats.variances"] = state.prev_stats.variances
        arrays["stats.centers"] = state.prev_centers
    meta = {"phase": str(state.phase), "chosen": ",".join(map(str, state.split.chosen))}
    meta["config"] = dump_config(state.config).replace("\n", ";").rstrip(";")
    save_arrays(path, arrays, meta)


def checkpoint_config(meta: dict) -> TrainConfig:
    return TrainConfig(**parse_config_text(meta["config"].replace(";", "\n")))


def load_state(path, cfg: TrainConfig | None = None) -> PhaseState:
    """Rebuild the carried state at the end of the checkpointed phase."""
    arrays, meta = load_arrays(path)
    cfg = cfg or checkpoint_config(meta)
    state = init_state(cfg)
    state.student.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("student.")})
    for p in state.predictor.parameters():
        p.data = arrays[f"predictor.{p.name}"].copy()
    state.bank.vectors.data = arrays["bank"].copy()
    state.centers.vectors.data = arrays["centers"].copy()
    state.phase = int(meta["phase"])
    if "stats.counts" in arrays:
        state.prev_stats = ClusterStats(
            arrays["stats.counts"].astype(np.int64), arrays["stats.means"].copy(), arrays["stats.variances"].copy()
        )
        state.prev_centers = arrays["stats.centers"].copy()
    state.past_teacher = snapshot(state.student, state.phase)
    return state


def load_encoder(path) -> tuple[Encoder, TrainConfig]:
    arrays, meta = load_arrays(path)
    cfg = checkpoint_config(meta)
    enc = Encoder(encoder_config(cfg))
    enc.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("student.")})
    return enc, cfg


# ------------------------------------------------------------------ full run


def prepare_data(cfg: TrainConfig, dataset: Dataset | None = None) -> tuple[Dataset, Dataset, PhaseSchedule]:
    if dataset is None:
        if cfg.dataset:
            dataset = load_dataset(cfg.dataset)
        else:
            dataset = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.input_dim, cfg.difficulty, cfg.seed_data)
    if dataset.input_dim != cfg.input_dim:
        raise ValueError(f"dataset has {dataset.input_dim} features but input_dim = {cfg.input_dim}")
    train, test = train_test_split(dataset, cfg.test_fraction, cfg.seed_data)
    return train, test, split_phases(dataset.num_classes, cfg.phases, cfg.seed_data)


def probe_phase(state: PhaseState, train: Dataset, test: Dataset, schedule: PhaseSchedule, t: int) -> dict[int, float]:
    cfg = state.config
    seen = [c for phase in schedule.phases[: t + 1] for c in phase]
    tr = np.isin(train.labels, seen)
    te = np.isin(test.labels, seen)
    probe = ProbeConfig(cfg.probe_epochs, cfg.probe_lr, cfg.momentum, cfg.probe_batch, seed=cfg.seed_model)
    class_acc = linear_probe(state.student, train.samples[tr], train.labels[tr], test.samples[te], test.labels[te], probe)
    return per_phase_accuracy(class_acc, schedule.phase_of_class())


def run_experiment(
    cfg: TrainConfig,
    dataset: Dataset | None = None,
    out_dir=None,
    resume_from=None,
    keep_state: bool = False,
) -> RunResult:
    train, test, schedule = prepare_data(cfg, dataset)
    metrics = RunMetrics(cfg.phases)
    losses: list[LossReport] = []
    satisfaction: list[float] = []
    start = 0
    if resume_from is not None:
        state = load_state(resume_from, cfg)
        start = state.phase + 1
        if out_dir is None:
            raise ValueError("resuming needs the original output directory")
        losses, metrics, satisfaction = _load_progress(Path(out_dir), start, cfg.phases)
    else:
        state = init_state(cfg)
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for t in range(start, cfg.phases):
        idx = np.flatnonzero(np.isin(train.labels, schedule[t]))
        samples = train.samples[idx]
        state, reports = run_phase(state, samples, t)
        losses += reports
        satisfaction.append(phase_satisfaction(state, samples))
        n_phase = len(samples)
        del samples
        assert_memory_free(state, {n_phase, len(train), len(test)})
        for i, acc in probe_phase(state, train, test, schedule, t).items():
            metrics.record(t, i, acc)
        log.info("phase %d/%d  seen-average accuracy %.4f", t + 1, cfg.phases, metrics.seen_average(t))
        if ckpt_dir is not None:
            save_state(state, ckpt_dir / f"phase_{t + 1}.bin")

    result = RunResult(cfg, metrics, losses, schedule, state.split, satisfaction, state if keep_state else None)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


def _load_progress(out: Path, start: int, phases: int):
    losses = []
    with open(out / "losses.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if int(r["phase"]) <= start:
                vals = {k: float(r[k]) for k in LOSS_COLUMNS[2:7]}
                losses.append(LossReport(int(r["phase"]) - 1, int(r["epoch"]), vals, float(r["gamma"]), float(r["alpha"]), float(r["lr"])))
    metrics = RunMetrics(phases)
    with open(out / "metrics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if r["after_phase"] != "A_T" and int(r["after_phase"]) <= start:
                metrics.record(int(r["after_phase"]) - 1, int(r["phase_of_classes"]) - 1, float(r["accuracy"]))
    satisfaction = []
    with open(out / "diagnostics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if int(r["phase"]) <= start:
                satisfaction.append(float(r["constraint_satisfaction"]))
    return losses, metrics, satisfaction


def write_outputs(result: RunResult, out: Path) -> None:
    from .report import write_chart

    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in result.losses:
            w.writerow(r.row())
    write_metrics_csv(result.metrics, out / "metrics.csv")
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "constraint_satisfaction"])
        for t, s in enumerate(result.satisfaction):
            w.writerow([t + 1, repr(s)])
    lines = [
        "# run manifest",
        dump_config(cfg).rstrip("\n"),
        f"variant = {'baseline' if cfg.is_baseline else 'cppf'}",
        f"chosen_centers = {','.join(map(str, result.split.chosen))}",
        f"reserved_centers = {','.join(map(str, result.split.reserved))}",
        *(f"phase_{t + 1}_classes = {','.join(map(str, c))}" for t, c in enumerate(result.schedule.phases)),
        *(f"checkpoint_phase_{t + 1} = checkpoints/phase_{t + 1}.bin" for t in range(cfg.phases)),
        f"A_T = {average_accuracy(result.metrics)!r}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    write_chart(result.metrics, out / "chart.svg")
