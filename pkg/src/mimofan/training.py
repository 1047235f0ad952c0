"""Training loop, k-fold cross validation, ensembling and the ablation matrix."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .metrics import ClassWeights, DegenerateSampleError, EvalReport, dps_loss, mean_std, paired_t_test
from .network import Model, NetworkConfig, build, predict_mask, predict_proba
from .pyramid import label_pyramid
from .tensor import ContractError, DimensionError, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    kind: str = "adam"


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; call zero_grad before backward")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return [cid for cid, f in self.assignments.items() if f == fold]

    def sizes(self) -> list[int]:
        return [len(self.members(f)) for f in range(self.k)]


def kfold_split(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then round-robin assignment to ``k`` folds."""
    ids = list(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k = {k} exceeds the number of cases ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, seed, {ids[j]: pos % k for pos, j in enumerate(order)})


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRunConfig:
    manifest: str
    out_dir: str
    network: NetworkConfig = NetworkConfig()
    weights: ClassWeights = ClassWeights()
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def batch_loss(model: Model, x: Tensor, y: np.ndarray, weights: ClassWeights) -> Tensor:
    """Training loss: every head under deep pyramid supervision, else the finest only."""
    cfg = model.config
    outs = model.forward(x)
    if cfg.arch == "mimofan" and cfg.dps:
        labels = label_pyramid(Tensor(y), cfg.scales)
        return dps_loss(outs, labels, weights)
    return dps_loss(outs[:1], [Tensor(y)], weights)


def predict_masks(model: Model, images: np.ndarray, batch: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode binary masks and foreground probabilities, (n, 1, h, w) each."""
    masks, fg = [], []
    for i in range(0, len(images), batch):
        prob = predict_proba(model, Tensor(images[i : i + batch].astype(model.dtype, copy=False)))
        masks.append(predict_mask(prob).data)
        fg.append(prob.data[:, 1:2])
    return np.concatenate(masks), np.concatenate(fg)


@dataclass
class FitResult:
    model: Model
    losses: list[tuple[int, int, float]]
    best_epoch: int
    best_dice: float
    epoch_dice: list[float]


def fit(
    model: Model,
    images: np.ndarray,
    masks: np.ndarray,
    epochs: int,
    batch_size: int = 4,
    seed: int = 0,
    weights: ClassWeights = ClassWeights(),
    lr: float = 1e-3,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Adam training; with ``val`` the best-scoring epoch's weights are restored.

    Validation score is the average Dice of the evaluation-mode prediction at
    the finest scale (scale-fused when the model enables it).
    """
    from .metrics import dice

    rng = np.random.default_rng(seed)
    opt = OptimizerState(lr=lr)
    losses: list[tuple[int, int, float]] = []
    best_state, best_dice, best_epoch = None, -1.0, -1
    epoch_dice: list[float] = []
    n = len(images)
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            x = Tensor(images[idx].astype(model.dtype, copy=False))
            with Tape() as tape:
                loss = batch_loss(model, x, masks[idx], weights)
            value = loss.item()
            if not math.isfinite(value):
                norms = {k: float(np.abs(p.data).max()) for k, p in model.params.items()}
                worst = max(norms, key=norms.get)
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, step {opt.step + 1}; "
                    f"largest parameter magnitude {norms[worst]:.3g} in {worst}"
                )
            model.zero_grad()
            tape.backward(loss)
            adam_step(model.params, opt)
            losses.append((epoch, opt.step, value))
        if val is not None:
            pred, _ = predict_masks(model, val[0])
            score = float(np.mean([dice(p, t) for p, t in zip(pred, val[1])]))
            epoch_dice.append(score)
            if score > best_dice:
                best_dice, best_epoch = score, epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            log.info("epoch %d loss %.5f val dice %.4f", epoch, losses[-1][2], score)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, losses, best_epoch, best_dice, epoch_dice)


def write_loss_log(losses, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for epoch, step, value in losses:
            w.writerow([epoch, step, repr(value)])


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    checkpoint: Path
    best_epoch: int
    losses: list[tuple[int, int, float]]
    seconds: float


def checkpoint_config(config: TrainRunConfig) -> str:
    return config.network.to_text()


def save_model(model: Model, path) -> None:
    dataio.save_checkpoint(model.state_dict(), path, model.config.to_text())


def load_model(path) -> Model:
    tensors, text = dataio.load_checkpoint(path)
    try:
        cfg = NetworkConfig.from_text(text)
    except (ValueError, TypeError) as exc:
        raise dataio.ParseError(f"config blob is not a network config: {exc}", 12, path) from exc
    model = build(cfg, 0)
    model.load_state_dict(tensors)
    return model.eval()


def _load_arrays(config: TrainRunConfig):
    manifest = dataio.load_manifest(config.manifest, divisor=config.network.divisor)
    images, masks = dataio.load_cases(manifest)
    return manifest, images, masks


def train_fold(config: TrainRunConfig, plan: FoldPlan, fold: int, data=None) -> FoldResult:
    """Train on every fold except ``fold`` and evaluate on ``fold``.

    Writes ``loss.csv``, ``best.mfan`` and ``eval.csv`` under
    ``out_dir/fold{fold}``.
    """
    if not 0 <= fold < plan.k:
        raise ValueError(f"fold {fold} out of range for k = {plan.k}")
    manifest, images, masks = data if data is not None else _load_arrays(config)
    ids = manifest.case_ids
    if set(ids) != set(plan.assignments):
        raise ValueError("fold plan does not cover the manifest's cases")
    val_idx = np.array([i for i, c in enumerate(ids) if plan.assignments[c] == fold])
    train_idx = np.array([i for i, c in enumerate(ids) if plan.assignments[c] != fold])
    out = Path(config.out_dir) / f"fold{fold}"
    out.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    model = build(config.network, config.seed)
    result = fit(
        model,
        images[train_idx],
        masks[train_idx],
        config.epochs,
        config.batch_size,
        config.seed,
        config.weights,
        config.lr,
        val=(images[val_idx], masks[val_idx]),
    )
    pred, _ = predict_masks(model, images[val_idx])
    report = EvalReport.from_cases(fold, [ids[i] for i in val_idx], list(pred), list(masks[val_idx]))
    seconds = time.perf_counter() - start

    write_loss_log(result.losses, out / "loss.csv")
    save_model(model, out / "best.mfan")
    report.write_csv(out / "eval.csv")
    log.info("fold %d: average dice %.4f (best epoch %d, %.1fs)", fold, report.average_dice, result.best_epoch, seconds)
    return FoldResult(fold, report, out / "best.mfan", result.best_epoch, result.losses, seconds)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------


def majority_vote(preds: Sequence, probs: Sequence | None = None) -> Tensor:
    """Per-voxel majority of binary masks.

    A tie (possible only for even ensembles) resolves to foreground iff the mean
    foreground probability over models is >= 0.5; ``probs`` must then be given,
    either as single-channel foreground maps or 2-channel probability maps.
    """
    arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in preds]
    if not arrays:
        raise ValueError("majority_vote needs at least one prediction")
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise DimensionError(f"majority_vote: shape mismatch {a.shape} vs {shape}")
    k = len(arrays)
    votes = np.sum([a > 0.5 for a in arrays], axis=0)
    out = 2 * votes > k
    ties = 2 * votes == k
    if ties.any():
        if probs is None:
            raise ValueError("even ensemble tie: probability maps are required to break it")
        fg = []
        for p in probs:
            a = p.data if isinstance(p, Tensor) else np.asarray(p)
            if a.ndim == 4 and a.shape[1] == 2:
                a = a[:, 1:2]
            if a.shape != shape:
                raise DimensionError(f"majority_vote: probability shape {a.shape} vs mask {shape}")
            fg.append(a)
        mean_fg = np.mean(fg, axis=0)
        out = np.where(ties, mean_fg >= 0.5, out)
    dtype = arrays[0].dtype if arrays[0].dtype in (np.float32, np.float64) else np.float32
    return Tensor(out.astype(dtype))


def ensemble_predict(models: Sequence[Model], images: np.ndarray) -> np.ndarray:
    masks, probs = zip(*(predict_masks(m, images) for m in models))
    return majority_vote(list(masks), list(probs)).data


@dataclass
class CVResult:
    folds: list[FoldResult]
    ensemble: EvalReport | None


def _fold_job(args):
    config, plan, fold = args
    return train_fold(config, plan, fold)


def run_cv(config: TrainRunConfig, k: int = 5, jobs: int = 1, test_manifest: str | None = None) -> CVResult:
    """k-fold training plus a majority-vote ensemble of the fold models.

    The ensemble is scored on ``test_manifest`` when given, otherwise on the
    full training manifest (an in-sample figure, written as
    ``ensemble_insample.csv``).
    """
    manifest, images, masks = _load_arrays(config)
    plan = kfold_split(manifest.case_ids, k, config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_fold_plan(plan, out / "folds.csv")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, [(config, plan, f) for f in range(k)]))
    else:
        folds = [train_fold(config, plan, f, data=(manifest, images, masks)) for f in range(k)]
    models = [load_model(f.checkpoint) for f in folds]
    if test_manifest:
        tm = dataio.load_manifest(test_manifest, divisor=config.network.divisor)
        timages, tmasks = dataio.load_cases(tm)
        ids, name = tm.case_ids, "ensemble_test.csv"
    else:
        timages, tmasks, ids, name = images, masks, manifest.case_ids, "ensemble_insample.csv"
    voted = ensemble_predict(models, timages)
    ensemble = EvalReport.from_cases(-1, ids, list(voted), list(tmasks))
    ensemble.write_csv(out / name)
    return CVResult(folds, ensemble)


def write_fold_plan(plan: FoldPlan, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "fold"])
        for cid, f in plan.assignments.items():
            w.writerow([cid, f])


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("U-Net", dict(arch="unet")),
    ("ResU-Net", dict(arch="resunet")),
    ("MIMO-FAN (DCC)", dict(arch="mimofan", dcc=True, dps=False, sf=False)),
    ("MIMO-FAN (DPS)", dict(arch="mimofan", dcc=False, dps=True, sf=False)),
    ("MIMO-FAN (DCC+DPS)", dict(arch="mimofan", dcc=True, dps=True, sf=False)),
    ("MIMO-FAN (DCC+DPS+SF)", dict(arch="mimofan", dcc=True, dps=True, sf=True)),
]
FULL_MODEL = "MIMO-FAN (DCC+DPS+SF)"


@dataclass
class AblationResult:
    k: int
    rows: list[tuple[str, list[float]]]
    ttests: list[tuple[str, float, float, float, int]]
    folds: dict[str, list[FoldResult]] = field(default_factory=dict)

    def row(self, label: str) -> list[float]:
        return dict(self.rows)[label]

    def table(self) -> list[list]:
        """``[arch, fold1..foldk, mean, std]`` per row (Dice fractions, population std)."""
        out = []
        for label, scores in self.rows:
            m, s = mean_std(scores)
            out.append([label, *scores, m, s])
        return out


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_").replace("__", "_")


def _ablation_job(args):
    config, plan, fold = args
    return train_fold(config, plan, fold)


def run_ablation(base: TrainRunConfig, k: int = 5, jobs: int = 1, rows=ABLATION_ROWS) -> AblationResult:
    """Train every ablation row on every fold; write ``ablation.csv`` and ``ttests.csv``."""
    manifest, images, masks = _load_arrays(base)
    plan = kfold_split(manifest.case_ids, k, base.seed)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_fold_plan(plan, out / "folds.csv")
    jobs_list = []
    for label, overrides in rows:
        net = replace(base.network, **overrides)
        cfg = replace(base, network=net, out_dir=str(out / _slug(label)))
        jobs_list += [(cfg, plan, f) for f in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fold_results = list(pool.map(_ablation_job, jobs_list))
    else:
        data = (manifest, images, masks)
        fold_results = [train_fold(c, p, f, data=data) for c, p, f in jobs_list]
    per_row = {label: fold_results[i * k : (i + 1) * k] for i, (label, _) in enumerate(rows)}
    table_rows = [(label, [r.report.average_dice for r in per_row[label]]) for label, _ in rows]
    result = AblationResult(k, table_rows, [], per_row)
    labels = [label for label, _ in rows]
    if FULL_MODEL in labels:
        full = result.row(FULL_MODEL)
        for label, other in table_rows:
            if label == FULL_MODEL:
                continue
            try:
                two = paired_t_test(full, other)
                one = paired_t_test(full, other, alternative="greater")
                result.ttests.append((label, two.t, two.p, one.p, two.df))
            except DegenerateSampleError:
                result.ttests.append((label, float("nan"), float("nan"), float("nan"), k - 1))
    write_ablation_csv(result, out / "ablation.csv")
    write_ttests_csv(result, out / "ttests.csv")
    return result


def write_ablation_csv(result: AblationResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", *[f"fold{i + 1}" for i in range(result.k)], "mean", "std"])
        for row in result.table():
            w.writerow([row[0], *[repr(float(v)) for v in row[1:]]])


def write_ttests_csv(result: AblationResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "t", "p_two_sided", "p_greater", "df"])
        for label, t, p2, p1, df in result.ttests:
            w.writerow([f"{FULL_MODEL} vs {label}", repr(t), repr(p2), repr(p1), df])
