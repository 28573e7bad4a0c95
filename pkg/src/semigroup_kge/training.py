"""Self-adversarial negative-sampling loss, rule penalty, Adam, training loop.

Gradients are computed analytically (no autodiff) and accumulated sparsely:
each batch touches only the entity and relation rows it references. The
softmax weights over negatives are treated as constants during
differentiation (stop-gradient), following the sampling scheme this loss
adopts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import IDENTITY, DatasetSplits, RuleConstraint, Triplet
from .errors import ContractError, DivergenceError, ValidationError
from .model import (
    ModelConfig,
    ParameterSet,
    Variant,
    init_parameters,
)

# Below this distance the L2-norm gradient is taken as zero (the kink at the
# origin is measure-zero; a zero subgradient is safe).
SCORE_GRAD_FLOOR = 1e-12

CORRUPTION_MODES = ("single", "both")


@dataclass
class LossConfig:
    gamma: float = 9.0
    alpha: float = 1.0
    n_neg: int = 16
    p_loss: float = 1.0
    corruption: str = "single"

    def __post_init__(self) -> None:
        if self.n_neg < 1:
            raise ValidationError(f"n_neg={self.n_neg} must be >= 1")
        if not self.gamma > 0:
            raise ValidationError(f"gamma={self.gamma} must be > 0")
        if self.p_loss < 0:
            raise ValidationError(f"p_loss={self.p_loss} must be >= 0")
        if self.corruption not in CORRUPTION_MODES:
            raise ValidationError(f"corruption must be one of {CORRUPTION_MODES}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    anneal_factor: float = 0.1
    anneal_patience: int = 10
    batch_size: int = 1000

    def __post_init__(self) -> None:
        if not 0 < self.anneal_factor < 1:
            raise ValidationError(f"anneal_factor={self.anneal_factor} must be in (0, 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class TrainSchedule:
    max_steps: int = 100_000
    eval_interval: int = 1000
    seed: int = 0
    eval_max_queries: int = 0  # 0 = evaluate the full validation split


# --- numerics ---------------------------------------------------------------


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_sigmoid(x: np.ndarray | float) -> np.ndarray:
    """log(sigmoid(x)) as -softplus(-x); overflow-free for any finite x."""
    x = np.asarray(x, dtype=np.float64)
    return -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))


def adversarial_weights(neg_scores: np.ndarray, alpha: float) -> np.ndarray:
    """Softmax of alpha*(gamma - score) over the last axis.

    The margin shifts every logit equally, so it cancels and is not needed;
    alpha=0 gives uniform weights.
    """
    scores = np.asarray(neg_scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ContractError("adversarial weights need finite scores")
    z = -alpha * scores
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


# --- negative sampling ------------------------------------------------------


@dataclass
class NegativeBatch:
    """Corrupted triplets for one positive; `sides[i]` records whether the
    i-th negative replaced the head (0), the tail (1), or both (2)."""

    heads: np.ndarray
    tails: np.ndarray
    sides: np.ndarray


def _replace_uniform(
    original: np.ndarray, num_entities: int, rng: np.random.Generator, shape: tuple[int, ...]
) -> np.ndarray:
    # Uniform over all entities except the original: sample from N_e - 1 and
    # skip over the original id.
    cand = rng.integers(0, num_entities - 1, size=shape)
    return cand + (cand >= original)


def sample_negative_arrays(
    heads: np.ndarray,
    tails: np.ndarray,
    n_neg: int,
    num_entities: int,
    rng: np.random.Generator,
    corruption: str = "single",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched corruption: returns (neg_heads, neg_tails, sides), each (B, n_neg)."""
    if num_entities < 2:
        raise ValidationError("negative sampling needs at least 2 entities")
    batch = heads.shape[0]
    shape = (batch, n_neg)
    if corruption == "single":
        sides = rng.integers(0, 2, size=shape, dtype=np.int64)
        adj_h = _replace_uniform(heads[:, None], num_entities, rng, shape)
        adj_t = _replace_uniform(tails[:, None], num_entities, rng, shape)
        neg_h = np.where(sides == 0, adj_h, heads[:, None])
        neg_t = np.where(sides == 1, adj_t, tails[:, None])
    elif corruption == "both":
        sides = np.full(shape, 2, dtype=np.int64)
        neg_h = _replace_uniform(heads[:, None], num_entities, rng, shape)
        neg_t = _replace_uniform(tails[:, None], num_entities, rng, shape)
    else:
        raise ValidationError(f"corruption must be one of {CORRUPTION_MODES}")
    return neg_h, neg_t, sides


def sample_negatives(
    triplet: Triplet,
    n_neg: int,
    num_entities: int,
    rng: np.random.Generator,
    corruption: str = "single",
) -> NegativeBatch:
    neg_h, neg_t, sides = sample_negative_arrays(
        np.array([triplet.head]), np.array([triplet.tail]), n_neg, num_entities, rng, corruption
    )
    return NegativeBatch(heads=neg_h[0], tails=neg_t[0], sides=sides[0])


# --- gradients --------------------------------------------------------------


@dataclass
class Gradients:
    """Sparse gradient rows; ids are unique and sorted."""

    ent_ids: np.ndarray
    ent_grads: np.ndarray  # (U, n, k)
    rel_ids: np.ndarray
    rel_mat_grads: np.ndarray  # (V, n, k, k) or (V, k, k)
    rel_shift_grads: np.ndarray | None  # (V, n, k) for SHARED_SHIFT

    def to_dense(
        self, config: ModelConfig
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        ent = np.zeros((config.num_entities, config.n, config.k))
        ent[self.ent_ids] = self.ent_grads
        mats = np.zeros(config.mats_shape((config.num_relations,)))
        mats[self.rel_ids] = self.rel_mat_grads
        shifts = None
        if self.rel_shift_grads is not None:
            shifts = np.zeros((config.num_relations, config.n, config.k))
            shifts[self.rel_ids] = self.rel_shift_grads
        return ent, mats, shifts


def _compact(ids: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uids, inverse = np.unique(ids, return_inverse=True)
    out = np.zeros((uids.size, *grads.shape[1:]))
    np.add.at(out, inverse, grads)
    return uids, out


def merge_gradients(a: Gradients, b: Gradients) -> Gradients:
    ent_ids, ent_grads = _compact(
        np.concatenate([a.ent_ids, b.ent_ids]), np.concatenate([a.ent_grads, b.ent_grads])
    )
    rel_ids, rel_mats = _compact(
        np.concatenate([a.rel_ids, b.rel_ids]),
        np.concatenate([a.rel_mat_grads, b.rel_mat_grads]),
    )
    shift = None
    if a.rel_shift_grads is not None:
        _, shift = _compact(
            np.concatenate([a.rel_ids, b.rel_ids]),
            np.concatenate([a.rel_shift_grads, b.rel_shift_grads]),
        )
    return Gradients(ent_ids, ent_grads, rel_ids, rel_mats, shift)


def _safe_inverse(norms: np.ndarray) -> np.ndarray:
    return np.where(norms > SCORE_GRAD_FLOOR, 1.0 / np.maximum(norms, SCORE_GRAD_FLOOR), 0.0)


def batch_loss_and_grads(
    params: ParameterSet,
    heads: np.ndarray,
    rels: np.ndarray,
    tails: np.ndarray,
    neg_heads: np.ndarray,
    neg_tails: np.ndarray,
    cfg: LossConfig,
    weights: np.ndarray | None = None,
    with_grads: bool = True,
) -> tuple[float, Gradients | None, np.ndarray]:
    """Mean loss over the batch, sparse gradients, and the softmax weights.

    Passing ``weights`` freezes them instead of recomputing from the current
    scores; gradient checks rely on this to differentiate exactly the
    function the analytic gradient describes.
    """
    config = params.config
    full = config.variant is Variant.FULL
    gamma, p_ratio = cfg.gamma, cfg.p_loss
    batch = heads.shape[0]

    v_h = params.entities[heads]  # (B, n, k)
    v_t = params.entities[tails]
    mats = params.rel_mats[rels]  # (B, n, k, k) or (B, k, k)
    if full:
        mapped_pos = np.einsum("anij,anj->ani", mats, v_h)
    else:
        mapped_pos = np.einsum("aij,anj->ani", mats, v_h)
    if params.rel_shifts is not None:
        mapped_pos = mapped_pos + params.rel_shifts[rels]
    u_pos = mapped_pos - v_t
    s_pos = np.sqrt(np.einsum("ank,ank->a", u_pos, u_pos))

    v_nh = params.entities[neg_heads]  # (B, K, n, k)
    v_nt = params.entities[neg_tails]
    if full:
        mapped_neg = np.einsum("anij,acnj->acni", mats, v_nh)
    else:
        mapped_neg = np.einsum("aij,acnj->acni", mats, v_nh)
    if params.rel_shifts is not None:
        mapped_neg = mapped_neg + params.rel_shifts[rels][:, None]
    u_neg = mapped_neg - v_nt
    s_neg = np.sqrt(np.einsum("acnk,acnk->ac", u_neg, u_neg))

    if weights is None:
        weights = adversarial_weights(s_neg, cfg.alpha)

    per_triplet = -(
        log_sigmoid(gamma - s_pos) + p_ratio * np.sum(weights * log_sigmoid(s_neg - gamma), axis=1)
    ) / (p_ratio + 1.0)
    loss = float(per_triplet.mean())

    if not with_grads:
        return loss, None, weights

    # d(mean loss)/d(score)
    ds_pos = sigmoid(s_pos - gamma) / ((p_ratio + 1.0) * batch)  # (B,)
    ds_neg = -(p_ratio / (p_ratio + 1.0)) * weights * sigmoid(gamma - s_neg) / batch  # (B, K)

    g_pos = (ds_pos * _safe_inverse(s_pos))[:, None, None] * u_pos  # (B, n, k)
    g_neg = (ds_neg * _safe_inverse(s_neg))[:, :, None, None] * u_neg  # (B, K, n, k)

    if full:
        back_pos = np.einsum("anij,ani->anj", mats, g_pos)
        back_neg = np.einsum("anij,acni->acnj", mats, g_neg)
        mat_grads = np.einsum("ani,anj->anij", g_pos, v_h)
        mat_grads += np.einsum("acni,acnj->anij", g_neg, v_nh)
    else:
        back_pos = np.einsum("aij,ani->anj", mats, g_pos)
        back_neg = np.einsum("aij,acni->acnj", mats, g_neg)
        mat_grads = np.einsum("ani,anj->aij", g_pos, v_h)
        mat_grads += np.einsum("acni,acnj->aij", g_neg, v_nh)

    n, k = config.n, config.k
    ent_ids = np.concatenate([tails, heads, neg_tails.ravel(), neg_heads.ravel()])
    ent_grads = np.concatenate(
        [-g_pos, back_pos, -g_neg.reshape(-1, n, k), back_neg.reshape(-1, n, k)]
    )
    ent_ids, ent_grads = _compact(ent_ids, ent_grads)

    shift_grads = None
    if params.rel_shifts is not None:
        shift_grads = g_pos + g_neg.sum(axis=1)  # (B, n, k)
        rel_ids, packed = _compact(
            rels, np.concatenate([mat_grads.reshape(batch, -1), shift_grads.reshape(batch, -1)], axis=1)
        )
        mat_flat = packed[:, : k * k].reshape(-1, k, k)
        shift_part = packed[:, k * k :].reshape(-1, n, k)
        grads = Gradients(ent_ids, ent_grads, rel_ids, mat_flat, shift_part)
    else:
        rel_ids, mat_part = _compact(rels, mat_grads)
        grads = Gradients(ent_ids, ent_grads, rel_ids, mat_part, None)
    return loss, grads, weights


def positive_negative_loss(
    params: ParameterSet, triplet: Triplet, negs: NegativeBatch, cfg: LossConfig
) -> tuple[float, Gradients]:
    """Loss and gradients for a single positive with its negatives."""
    loss, grads, _ = batch_loss_and_grads(
        params,
        np.array([triplet.head]),
        np.array([triplet.relation]),
        np.array([triplet.tail]),
        negs.heads[None, :],
        negs.tails[None, :],
        cfg,
    )
    assert grads is not None
    return loss, grads


# --- rule regularization ----------------------------------------------------


def rule_regularization(
    params: ParameterSet, rules: Sequence[RuleConstraint]
) -> tuple[float, Gradients]:
    """Sum of weight * ||compose(a, b) - target|| with analytic gradients
    through both composed relations and a learned target."""
    config = params.config
    full = config.variant is Variant.FULL
    shifted = config.variant is Variant.SHARED_SHIFT
    n, k = config.n, config.k
    eye = np.eye(k)
    target_eye = np.broadcast_to(eye, (n, k, k)) if full else eye

    penalty = 0.0
    rel_ids: list[int] = []
    mat_grads: list[np.ndarray] = []
    shift_grads: list[np.ndarray] = []

    def push(rel: int, mat: np.ndarray, shift: np.ndarray | None) -> None:
        rel_ids.append(rel)
        mat_grads.append(mat)
        if shifted:
            shift_grads.append(np.zeros((n, k)) if shift is None else shift)

    for rule in rules:
        mat_a = params.rel_mats[rule.left_a]
        mat_b = params.rel_mats[rule.left_b]
        composed = np.einsum("nij,njl->nil", mat_b, mat_a) if full else mat_b @ mat_a
        if rule.target == IDENTITY:
            res_m = composed - target_eye
        else:
            res_m = composed - params.rel_mats[rule.target]
        sq = np.sum(res_m * res_m)
        res_d = None
        if shifted:
            shift_a = params.rel_shifts[rule.left_a]
            shift_b = params.rel_shifts[rule.left_b]
            composed_shift = np.einsum("ij,nj->ni", mat_b, shift_a) + shift_b
            if rule.target == IDENTITY:
                res_d = composed_shift
            else:
                res_d = composed_shift - params.rel_shifts[rule.target]
            sq += np.sum(res_d * res_d)
        residual = float(np.sqrt(sq))
        penalty += rule.weight * residual
        if rule.weight == 0.0 or residual <= SCORE_GRAD_FLOOR:
            continue
        scale = rule.weight / residual
        g_m = scale * res_m
        if full:
            grad_a = np.einsum("nji,njl->nil", mat_b, g_m)
            grad_b = np.einsum("nil,njl->nij", g_m, mat_a)
        else:
            grad_a = mat_b.T @ g_m
            grad_b = g_m @ mat_a.T
        grad_shift_a = grad_shift_b = None
        if shifted:
            g_d = scale * res_d
            grad_b = grad_b + np.einsum("ni,nj->ij", g_d, shift_a)
            grad_shift_a = np.einsum("ji,nj->ni", mat_b, g_d)
            grad_shift_b = g_d
        push(rule.left_a, grad_a, grad_shift_a)
        push(rule.left_b, grad_b, grad_shift_b)
        if rule.target != IDENTITY:
            push(rule.target, -g_m, None if res_d is None else -scale * res_d)

    if rel_ids:
        ids = np.asarray(rel_ids, dtype=np.int64)
        if shifted:
            packed = np.concatenate(
                [
                    np.stack(mat_grads).reshape(len(rel_ids), -1),
                    np.stack(shift_grads).reshape(len(rel_ids), -1),
                ],
                axis=1,
            )
            ids, packed = _compact(ids, packed)
            mats_part = packed[:, : k * k].reshape(-1, k, k)
            shifts_part = packed[:, k * k :].reshape(-1, n, k)
        else:
            ids, mats_part = _compact(ids, np.stack(mat_grads))
            shifts_part = None
    else:
        ids = np.zeros(0, dtype=np.int64)
        mats_part = np.zeros(config.mats_shape((0,)))
        shifts_part = np.zeros((0, n, k)) if shifted else None
    empty_ent = np.zeros(0, dtype=np.int64)
    return penalty, Gradients(
        empty_ent, np.zeros((0, n, k)), ids, mats_part, shifts_part
    )


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    ent_m: np.ndarray
    ent_v: np.ndarray
    mat_m: np.ndarray
    mat_v: np.ndarray
    shift_m: np.ndarray | None
    shift_v: np.ndarray | None

    @classmethod
    def zeros(cls, config: ModelConfig) -> "AdamState":
        ent = (config.num_entities, config.n, config.k)
        mats = config.mats_shape((config.num_relations,))
        shift = (
            (config.num_relations, config.n, config.k)
            if config.variant is Variant.SHARED_SHIFT
            else None
        )
        return cls(
            step=0,
            ent_m=np.zeros(ent),
            ent_v=np.zeros(ent),
            mat_m=np.zeros(mats),
            mat_v=np.zeros(mats),
            shift_m=np.zeros(shift) if shift else None,
            shift_v=np.zeros(shift) if shift else None,
        )


def _adam_rows(
    table: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    ids: np.ndarray,
    grads: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    bias1: float,
    bias2: float,
) -> None:
    m_rows = beta1 * m[ids] + (1.0 - beta1) * grads
    v_rows = beta2 * v[ids] + (1.0 - beta2) * grads * grads
    m[ids] = m_rows
    v[ids] = v_rows
    table[ids] -= lr * (m_rows / bias1) / (np.sqrt(v_rows / bias2) + eps)


def adam_step(
    params: ParameterSet,
    grads: Gradients,
    state: AdamState,
    cfg: OptimizerConfig,
    lr: float | None = None,
) -> None:
    """One bias-corrected Adam update restricted to the touched rows."""
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    bias1 = 1.0 - cfg.adam_beta1 ** state.step
    bias2 = 1.0 - cfg.adam_beta2 ** state.step
    common = (lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, bias1, bias2)
    if grads.ent_ids.size:
        _adam_rows(params.entities, state.ent_m, state.ent_v, grads.ent_ids, grads.ent_grads, *common)
    if grads.rel_ids.size:
        _adam_rows(params.rel_mats, state.mat_m, state.mat_v, grads.rel_ids, grads.rel_mat_grads, *common)
        if grads.rel_shift_grads is not None:
            _adam_rows(
                params.rel_shifts,
                state.shift_m,
                state.shift_v,
                grads.rel_ids,
                grads.rel_shift_grads,
                *common,
            )


# --- training loop ----------------------------------------------------------


@dataclass
class EvalRecord:
    step: int
    learning_rate: float
    train_loss: float
    mr: float
    mrr: float
    hits1: float
    hits3: float
    hits10: float

    CSV_HEADER = "step,learning_rate,train_loss,valid_mr,valid_mrr,valid_hits1,valid_hits3,valid_hits10"

    def csv_row(self) -> str:
        return (
            f"{self.step},{self.learning_rate:.10g},{self.train_loss:.10g},"
            f"{self.mr:.10g},{self.mrr:.10g},{self.hits1:.10g},{self.hits3:.10g},{self.hits10:.10g}"
        )


@dataclass
class TrainResult:
    params: ParameterSet  # best validation-MRR snapshot
    history: list[EvalRecord]
    best_step: int
    best_mrr: float
    steps_run: int
    stop_reason: str


class _BatchSampler:
    """Shuffled epochs sliced into fixed-size batches (wrap by reshuffling)."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        self.count = count
        self.batch_size = min(batch_size, count)
        self.rng = rng
        self.order = rng.permutation(count)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.count:
            self.order = self.rng.permutation(self.count)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch


def _check_touched_finite(params: ParameterSet, grads: Gradients, step: int) -> None:
    ok = np.isfinite(params.entities[grads.ent_ids]).all() and np.isfinite(
        params.rel_mats[grads.rel_ids]
    ).all()
    if ok and params.rel_shifts is not None and grads.rel_shift_grads is not None:
        ok = np.isfinite(params.rel_shifts[grads.rel_ids]).all()
    if not ok:
        raise DivergenceError(f"non-finite parameters after step {step}")


def train(
    splits: DatasetSplits,
    rules: Sequence[RuleConstraint],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    schedule: TrainSchedule,
) -> TrainResult:
    """Mini-batch training with validation-MRR annealing and best-checkpoint
    selection. Stops at max_steps, or early once the learning rate has been
    annealed twice and validation MRR still fails to improve for a full
    patience window."""
    from .evaluation import evaluate  # deferred: evaluation imports model only

    if not splits.train:
        raise ValidationError("train split is empty")
    seed_seq = np.random.SeedSequence(schedule.seed)
    init_seed, sample_seed = seed_seq.spawn(2)
    params = init_parameters(model_cfg, np.random.default_rng(init_seed), margin=loss_cfg.gamma)
    rng = np.random.default_rng(sample_seed)
    state = AdamState.zeros(model_cfg)

    triples = np.asarray(splits.train, dtype=np.int64)
    sampler = _BatchSampler(len(splits.train), opt_cfg.batch_size, rng)

    lr = opt_cfg.learning_rate
    best_params = params.copy()
    best_mrr = -np.inf
    best_step = 0
    evals_since_improve = 0
    anneal_count = 0
    history: list[EvalRecord] = []
    window_losses: list[float] = []
    stop_reason = "max_steps reached"
    steps_run = 0

    for step in range(1, schedule.max_steps + 1):
        steps_run = step
        idx = sampler.next()
        heads, rels, tails = triples[idx, 0], triples[idx, 1], triples[idx, 2]
        neg_h, neg_t, _ = sample_negative_arrays(
            heads, tails, loss_cfg.n_neg, model_cfg.num_entities, rng, loss_cfg.corruption
        )
        loss, grads, _ = batch_loss_and_grads(params, heads, rels, tails, neg_h, neg_t, loss_cfg)
        assert grads is not None
        if rules:
            penalty, rule_grads = rule_regularization(params, rules)
            loss += penalty
            grads = merge_gradients(grads, rule_grads)
        adam_step(params, grads, state, opt_cfg, lr=lr)
        _check_touched_finite(params, grads, step)
        window_losses.append(loss)

        if schedule.eval_interval > 0 and step % schedule.eval_interval == 0:
            report = evaluate(
                params,
                splits.valid,
                splits.filter_index,
                max_queries=schedule.eval_max_queries,
                subsample_seed=schedule.seed,
            )
            history.append(
                EvalRecord(
                    step=step,
                    learning_rate=lr,
                    train_loss=float(np.mean(window_losses)),
                    mr=report.overall.mr,
                    mrr=report.overall.mrr,
                    hits1=report.overall.hits[1],
                    hits3=report.overall.hits[3],
                    hits10=report.overall.hits[10],
                )
            )
            window_losses = []
            if report.overall.mrr > best_mrr:
                best_mrr = report.overall.mrr
                best_params = params.copy()
                best_step = step
                evals_since_improve = 0
            else:
                evals_since_improve += 1
                if evals_since_improve >= opt_cfg.anneal_patience:
                    if anneal_count >= 2:
                        stop_reason = "no improvement after two annealings"
                        break
                    lr *= opt_cfg.anneal_factor
                    anneal_count += 1
                    evals_since_improve = 0

    if not history:
        best_params = params.copy()
        best_step = steps_run
        best_mrr = float("nan")
    return TrainResult(
        params=best_params,
        history=history,
        best_step=best_step,
        best_mrr=best_mrr,
        steps_run=steps_run,
        stop_reason=stop_reason,
    )
