"""Relation matrices, entity vectors, and the core algebra.

A relation acts on an entity vector as a block-diagonal linear map made of
``n`` blocks of size ``k x k``. Three parameterizations are supported:

* ``full``         - n distinct k x k blocks per relation
* ``shared``       - one k x k block reused across all n subspaces
* ``shared_shift`` - one shared block plus a per-subspace translation

The big (nk) x (nk) matrix is never materialized; everything is computed
blockwise. Matrices are unconstrained (they may be singular), so relations
form a semigroup under composition, not a group.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import IDENTITY, RuleConstraint, Vocabulary
from .errors import CheckpointError, ContractError, ValidationError

CHECKPOINT_FORMAT = "semigroup-kge-checkpoint-v1"

# Relation matrices start as identity plus uniform noise of this half-width
# (scaled by 1/sqrt(k)); entity entries are uniform in +-margin/(n*k).
INIT_NOISE = 0.1


class Variant(str, Enum):
    FULL = "full"
    SHARED = "shared"
    SHARED_SHIFT = "shared_shift"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    k: int
    n: int
    num_entities: int
    num_relations: int

    def __post_init__(self) -> None:
        if self.k < 1 or self.n < 1:
            raise ValidationError(f"block size k={self.k} and count n={self.n} must be >= 1")
        if self.num_entities < 1 or self.num_relations < 1:
            raise ValidationError("need at least one entity and one relation")

    @property
    def entity_dim(self) -> int:
        return self.n * self.k

    @property
    def relation_param_count(self) -> int:
        """Parameters per relation."""
        if self.variant is Variant.FULL:
            return self.n * self.k * self.k
        if self.variant is Variant.SHARED:
            return self.k * self.k
        return self.k * self.k + self.n * self.k

    def mats_shape(self, leading: tuple[int, ...] = ()) -> tuple[int, ...]:
        if self.variant is Variant.FULL:
            return (*leading, self.n, self.k, self.k)
        return (*leading, self.k, self.k)


@dataclass
class RelationValue:
    """Concrete parameters of one relation (or of a composition result)."""

    variant: Variant
    n: int
    k: int
    mats: np.ndarray  # (n, k, k) for FULL, (k, k) otherwise
    shift: np.ndarray | None = None  # (n, k) for SHARED_SHIFT

    def flat(self) -> np.ndarray:
        """All parameter entries as one vector (matrices then shifts)."""
        parts = [self.mats.ravel()]
        if self.shift is not None:
            parts.append(self.shift.ravel())
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.flat() ** 2)))


@dataclass
class ParameterSet:
    config: ModelConfig
    entities: np.ndarray  # (N_e, n, k)
    rel_mats: np.ndarray  # (N_r, n, k, k) for FULL, (N_r, k, k) otherwise
    rel_shifts: np.ndarray | None  # (N_r, n, k) for SHARED_SHIFT, else None

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            config=self.config,
            entities=self.entities.copy(),
            rel_mats=self.rel_mats.copy(),
            rel_shifts=None if self.rel_shifts is None else self.rel_shifts.copy(),
        )

    def relation_value(self, rel: int) -> RelationValue:
        cfg = self.config
        shift = None if self.rel_shifts is None else self.rel_shifts[rel].copy()
        return RelationValue(cfg.variant, cfg.n, cfg.k, self.rel_mats[rel].copy(), shift)

    def all_finite(self) -> bool:
        ok = np.isfinite(self.entities).all() and np.isfinite(self.rel_mats).all()
        if self.rel_shifts is not None:
            ok = ok and np.isfinite(self.rel_shifts).all()
        return bool(ok)


def init_parameters(
    config: ModelConfig, seed: int | np.random.Generator, margin: float = 9.0
) -> ParameterSet:
    """Deterministic initialization: relation blocks near the identity,
    shifts at zero, entity entries uniform in +-margin/(n*k)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = margin / config.entity_dim
    entities = rng.uniform(-bound, bound, size=(config.num_entities, config.n, config.k))
    noise_half_width = INIT_NOISE / np.sqrt(config.k)
    mats = rng.uniform(
        -noise_half_width, noise_half_width, size=config.mats_shape((config.num_relations,))
    )
    mats += np.eye(config.k)
    shifts = None
    if config.variant is Variant.SHARED_SHIFT:
        shifts = np.zeros((config.num_relations, config.n, config.k))
    return ParameterSet(config=config, entities=entities, rel_mats=mats, rel_shifts=shifts)


def identity_value(config: ModelConfig) -> RelationValue:
    """The identity map in the variant's parameter shape."""
    eye = np.eye(config.k)
    if config.variant is Variant.FULL:
        mats = np.broadcast_to(eye, (config.n, config.k, config.k)).copy()
    else:
        mats = eye.copy()
    shift = np.zeros((config.n, config.k)) if config.variant is Variant.SHARED_SHIFT else None
    return RelationValue(config.variant, config.n, config.k, mats, shift)


def _blockwise_apply(value: RelationValue, blocks: np.ndarray) -> np.ndarray:
    """Apply relation parameters to entity blocks of shape (..., n, k)."""
    if value.variant is Variant.FULL:
        out = np.einsum("nij,...nj->...ni", value.mats, blocks)
    else:
        out = np.einsum("ij,...nj->...ni", value.mats, blocks)
    if value.shift is not None:
        out = out + value.shift
    return out


def apply_relation(params: ParameterSet, rel: int, v: np.ndarray) -> np.ndarray:
    """Map an entity vector through one relation, blockwise.

    ``v`` may be flat of length n*k or already shaped (n, k); the result has
    the same shape as the input.
    """
    cfg = params.config
    v = np.asarray(v, dtype=np.float64)
    flat_in = v.ndim == 1
    if flat_in:
        if v.shape[0] != cfg.entity_dim:
            raise ContractError(
                f"entity vector has dimension {v.shape[0]}, expected n*k={cfg.entity_dim}"
            )
        v = v.reshape(cfg.n, cfg.k)
    elif v.shape != (cfg.n, cfg.k):
        raise ContractError(f"entity blocks have shape {v.shape}, expected {(cfg.n, cfg.k)}")
    out = _blockwise_apply(params.relation_value(rel), v)
    return out.reshape(-1) if flat_in else out


def score(params: ParameterSet, head: int, rel: int, tail: int) -> float:
    """Euclidean distance between the mapped head and the tail vector."""
    diff = _blockwise_apply(params.relation_value(rel), params.entities[head])
    diff = diff - params.entities[tail]
    return float(np.sqrt(np.sum(diff * diff)))


def _as_value(params: ParameterSet, rel: int | RelationValue) -> RelationValue:
    if isinstance(rel, RelationValue):
        return rel
    return params.relation_value(rel)


def compose_values(a: RelationValue, b: RelationValue) -> RelationValue:
    """Parameters of the relation 'follow a, then b'.

    The matrix part is b's blocks times a's blocks, so that applying the
    composed value equals applying a first and b second.
    """
    if a.variant is not b.variant or a.n != b.n or a.k != b.k:
        raise ContractError(
            f"cannot compose {a.variant.value}(n={a.n},k={a.k}) "
            f"with {b.variant.value}(n={b.n},k={b.k})"
        )
    if a.variant is Variant.FULL:
        mats = np.einsum("nij,njl->nil", b.mats, a.mats)
    else:
        mats = b.mats @ a.mats
    shift = None
    if a.variant is Variant.SHARED_SHIFT:
        shift = np.einsum("ij,nj->ni", b.mats, a.shift) + b.shift
    return RelationValue(a.variant, a.n, a.k, mats, shift)


def compose(
    params: ParameterSet, rel_a: int | RelationValue, rel_b: int | RelationValue
) -> RelationValue:
    """Compose two relations of the model (a fires first)."""
    return compose_values(_as_value(params, rel_a), _as_value(params, rel_b))


def composition_residual(params: ParameterSet, rule: RuleConstraint) -> float:
    """Parameter-space distance between compose(left_a, left_b) and the
    rule's target (IDENTITY means identity blocks and zero shifts)."""
    composed = compose(params, rule.left_a, rule.left_b)
    if rule.target == IDENTITY:
        target = identity_value(params.config)
    else:
        target = params.relation_value(rule.target)
    return float(np.sqrt(np.sum((composed.flat() - target.flat()) ** 2)))


# --- checkpoint io ----------------------------------------------------------
#
# A checkpoint is a zip of .npy members (np.load-compatible) written with
# fixed zip timestamps so that identical parameters produce bit-identical
# files.

_CHECKPOINT_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | Path, params: ParameterSet, vocab: Vocabulary) -> None:
    cfg = params.config
    if (len(vocab.entity_names), len(vocab.relation_names)) != (
        cfg.num_entities,
        cfg.num_relations,
    ):
        raise ContractError("vocabulary sizes do not match the parameter tables")
    arrays: list[tuple[str, np.ndarray]] = [
        ("format", np.array(CHECKPOINT_FORMAT)),
        ("variant", np.array(cfg.variant.value)),
        ("k", np.array(cfg.k, dtype=np.int64)),
        ("n", np.array(cfg.n, dtype=np.int64)),
        ("entity_names", np.array(vocab.entity_names)),
        ("relation_names", np.array(vocab.relation_names)),
        ("entities", params.entities),
        ("rel_mats", params.rel_mats),
    ]
    if params.rel_shifts is not None:
        arrays.append(("rel_shifts", params.rel_shifts))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays:
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(name + ".npy", date_time=_CHECKPOINT_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, Vocabulary]:
    try:
        blob = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    except (ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT} file (missing format tag): {exc}"
        ) from None
    with blob:
        if "format" not in blob:
            raise CheckpointError(f"{path} carries no format tag; expected {CHECKPOINT_FORMAT}")
        tag = str(blob["format"])
        if tag != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} has format tag {tag!r}, expected {CHECKPOINT_FORMAT}")
        try:
            variant = Variant(str(blob["variant"]))
            entity_names = [str(s) for s in blob["entity_names"]]
            relation_names = [str(s) for s in blob["relation_names"]]
            entities = np.asarray(blob["entities"], dtype=np.float64)
            rel_mats = np.asarray(blob["rel_mats"], dtype=np.float64)
            rel_shifts = (
                np.asarray(blob["rel_shifts"], dtype=np.float64) if "rel_shifts" in blob else None
            )
            config = ModelConfig(
                variant=variant,
                k=int(blob["k"]),
                n=int(blob["n"]),
                num_entities=len(entity_names),
                num_relations=len(relation_names),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: corrupt checkpoint payload: {exc}") from None
    expected_entities = (config.num_entities, config.n, config.k)
    if entities.shape != expected_entities:
        raise CheckpointError(
            f"{path}: entity table shape {entities.shape} != {expected_entities}"
        )
    if rel_mats.shape != config.mats_shape((config.num_relations,)):
        raise CheckpointError(f"{path}: relation table shape {rel_mats.shape} is invalid")
    if variant is Variant.SHARED_SHIFT and (
        rel_shifts is None or rel_shifts.shape != (config.num_relations, config.n, config.k)
    ):
        raise CheckpointError(f"{path}: shift table missing or misshaped")
    params = ParameterSet(
        config=config, entities=entities, rel_mats=rel_mats, rel_shifts=rel_shifts
    )
    return params, Vocabulary(entity_names, relation_names)
