"""Rotation-based knowledge-graph embeddings in numpy.

Entities live in C^d; every relation is a vector of unit-modulus complex
numbers stored as raw phases, so the rotation constraint holds by
construction and never needs re-projection.  Plausibility of (h, r, t) is
sigmoid(-||h*r - t||) with the L2 norm taken over C^d viewed as R^2d.

Training minimizes the self-adversarial negative-sampling objective

    L = softplus(d_pos - margin) + sum_j w_j * softplus(margin - d_neg_j)

where the weights w = softmax(-alpha * d_neg) are recomputed every step and
treated as constants (no gradient flows through the softmax).  Gradients are
analytic; `batch_loss_and_grad` takes the weights explicitly so a finite
difference check differentiates exactly the objective the optimizer sees.

Gradient conventions: for a complex parameter the returned gradient is
dL/dRe + i*dL/dIm, so a step is simply `param -= lr * grad`.  With
u = h*r - t and d = ||u||:

    grad_h d    = conj(r) * u / d          (elementwise)
    grad_t d    = -u / d
    d d/d phi_k = Im(conj(h_k r_k) u_k) / d
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    EmptyTrainingSet,
    InvalidParams,
    UnknownCategory,
    UnknownEntity,
    UnknownRelation,
)
from .ontology import Ontology, relations_in_category

DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 12.0
    adv_temperature: float = 1.0
    negatives: int = 64
    batch_size: int = 256
    epochs: int = 500
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise InvalidParams("margin must be > 0")
        if self.negatives < 1:
            raise InvalidParams("negatives must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise InvalidParams("bad batch_size / epochs / learning_rate")


@dataclass
class KgeModel:
    dim: int
    entity_index: dict[str, int]
    relation_index: dict[str, int]
    entity_emb: np.ndarray  # (n_entities, dim) complex128
    rel_phase: np.ndarray  # (n_relations, dim) float64, radians
    trainer_state: dict = field(default_factory=dict)

    def copy(self) -> "KgeModel":
        return KgeModel(
            dim=self.dim,
            entity_index=dict(self.entity_index),
            relation_index=dict(self.relation_index),
            entity_emb=self.entity_emb.copy(),
            rel_phase=self.rel_phase.copy(),
            trainer_state=dict(self.trainer_state),
        )

    def relation_vector(self, r: str) -> np.ndarray:
        if r not in self.relation_index:
            raise UnknownRelation(f"relation {r!r} not in model")
        return np.exp(1j * self.rel_phase[self.relation_index[r]])

    def embedding_of(self, mention: str) -> np.ndarray | None:
        row = self.entity_index.get(mention)
        return None if row is None else self.entity_emb[row]

    def score(self, h: str, r: str, t: str) -> float:
        for m in (h, t):
            if m not in self.entity_index:
                raise UnknownEntity(f"entity {m!r} not in model")
        return self.score_vectors(
            self.entity_emb[self.entity_index[h]],
            r,
            self.entity_emb[self.entity_index[t]],
        )

    def score_vectors(self, h_vec: np.ndarray, r: str, t_vec: np.ndarray) -> float:
        u = h_vec * self.relation_vector(r) - t_vec
        return float(expit(-np.linalg.norm(u)))

    def check_invariants(self) -> None:
        moduli = np.abs(np.exp(1j * self.rel_phase))
        if not np.allclose(moduli, 1.0, atol=1e-6):
            raise InvalidParams("rotation constraint violated")
        if not (np.isfinite(self.entity_emb).all() and np.isfinite(self.rel_phase).all()):
            raise InvalidParams("non-finite parameters")
        rows = sorted(self.entity_index.values())
        if rows != list(range(len(self.entity_emb))):
            raise InvalidParams("entity_index is not a bijection onto rows")


def init_epsilon(margin: float, dim: int) -> float:
    # component scale that puts initial distances well inside the margin
    return (margin + 2.0) / dim


def new_model(
    entities: list[str],
    relations: list[str],
    dim: int = 512,
    seed: int = 0,
    margin: float = 12.0,
) -> KgeModel:
    rng = np.random.default_rng(seed)
    eps = init_epsilon(margin, dim)
    n_e, n_r = len(entities), len(relations)
    emb = rng.uniform(-eps, eps, size=(n_e, dim)) + 1j * rng.uniform(
        -eps, eps, size=(n_e, dim)
    )
    phases = rng.uniform(-math.pi, math.pi, size=(n_r, dim))
    return KgeModel(
        dim=dim,
        entity_index={e: i for i, e in enumerate(entities)},
        relation_index={r: i for i, r in enumerate(relations)},
        entity_emb=emb,
        rel_phase=phases,
        trainer_state={"step": 0, "learning_rate": 0.0, "seed": seed},
    )


def batch_loss_and_grad(
    entity_emb: np.ndarray,
    rel_phase: np.ndarray,
    pos: np.ndarray,
    neg_ent: np.ndarray,
    neg_side: np.ndarray,
    weights: np.ndarray,
    margin: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean batch loss and analytic gradients, weights taken as constants.

    pos: (B, 3) int rows (h, r, t); neg_ent: (B, n) replacement entities;
    neg_side: (B, n) with 0 = corrupt head, 1 = corrupt tail; weights: (B, n)
    rows on the simplex.
    """
    B = len(pos)
    h_idx, r_idx, t_idx = pos[:, 0], pos[:, 1], pos[:, 2]
    r = np.exp(1j * rel_phase[r_idx])  # (B, d)
    h = entity_emb[h_idx]
    t = entity_emb[t_idx]

    u_pos = h * r - t
    d_pos = np.linalg.norm(u_pos, axis=1)
    d_pos_safe = np.maximum(d_pos, DISTANCE_FLOOR)

    corrupt_head = (neg_side == 0)[:, :, None]
    e_neg = entity_emb[neg_ent]  # (B, n, d)
    h_eff = np.where(corrupt_head, e_neg, h[:, None, :])
    t_eff = np.where(corrupt_head, t[:, None, :], e_neg)
    r3 = r[:, None, :]
    u_neg = h_eff * r3 - t_eff
    d_neg = np.linalg.norm(u_neg, axis=2)  # (B, n)
    d_neg_safe = np.maximum(d_neg, DISTANCE_FLOOR)

    softplus = lambda x: np.logaddexp(0.0, x)
    loss = float(
        np.mean(
            softplus(d_pos - margin)
            + np.sum(weights * softplus(margin - d_neg), axis=1)
        )
    )

    # dL/dd_pos = sigmoid(d_pos - margin); dL/dd_neg_j = -w_j sigmoid(margin - d_neg_j)
    c_pos = expit(d_pos - margin) / B
    c_neg = -(weights * expit(margin - d_neg)) / B

    g_pos_u = (c_pos / d_pos_safe)[:, None] * u_pos  # (B, d)
    g_neg_u = (c_neg / d_neg_safe)[:, :, None] * u_neg  # (B, n, d)

    grad_emb = np.zeros_like(entity_emb)
    np.add.at(grad_emb, h_idx, g_pos_u * np.conj(r))
    np.add.at(grad_emb, t_idx, -g_pos_u)

    h_eff_idx = np.where(neg_side == 0, neg_ent, h_idx[:, None])  # (B, n)
    t_eff_idx = np.where(neg_side == 0, t_idx[:, None], neg_ent)
    flat_h = (g_neg_u * np.conj(r3)).reshape(-1, entity_emb.shape[1])
    np.add.at(grad_emb, h_eff_idx.ravel(), flat_h)
    np.add.at(grad_emb, t_eff_idx.ravel(), -g_neg_u.reshape(-1, entity_emb.shape[1]))

    grad_phase = np.zeros_like(rel_phase)
    pos_phase = np.imag(np.conj(h * r) * g_pos_u)
    neg_phase = np.imag(np.conj(h_eff * r3) * g_neg_u).sum(axis=1)
    np.add.at(grad_phase, r_idx, pos_phase + neg_phase)

    return loss, grad_emb, grad_phase


def corrupted_distances(
    entity_emb: np.ndarray,
    rel_phase: np.ndarray,
    pos: np.ndarray,
    neg_ent: np.ndarray,
    neg_side: np.ndarray,
) -> np.ndarray:
    r = np.exp(1j * rel_phase[pos[:, 1]])[:, None, :]
    corrupt_head = (neg_side == 0)[:, :, None]
    e_neg = entity_emb[neg_ent]
    h_eff = np.where(corrupt_head, e_neg, entity_emb[pos[:, 0]][:, None, :])
    t_eff = np.where(corrupt_head, entity_emb[pos[:, 2]][:, None, :], e_neg)
    return np.linalg.norm(h_eff * r - t_eff, axis=2)


def _sample_negatives(rng, pos, n_entities, n_relations, positive_keys, n):
    """Uniform head-or-tail corruption, resampled away from known positives."""
    B = len(pos)
    side = rng.integers(0, 2, size=(B, n))
    ent = rng.integers(0, n_entities, size=(B, n))
    for _ in range(10):
        h_eff = np.where(side == 0, ent, pos[:, 0:1])
        t_eff = np.where(side == 0, pos[:, 2:3], ent)
        keys = (h_eff * n_relations + pos[:, 1:2]) * n_entities + t_eff
        bad = np.isin(keys, positive_keys)
        if not bad.any():
            break
        ent[bad] = rng.integers(0, n_entities, size=int(bad.sum()))
    return ent, side


def _register(m: KgeModel, triples, rng, margin: float, init_fn=None) -> None:
    """Give fresh rows to mentions and relations the model has never seen."""
    eps = init_epsilon(margin, m.dim)
    new_rows = []
    for h, r, t in triples:
        for mention in (h, t):
            if mention not in m.entity_index:
                m.entity_index[mention] = len(m.entity_index)
                vec = init_fn(mention) if init_fn is not None else None
                if vec is None:
                    vec = rng.uniform(-eps, eps, size=m.dim) + 1j * rng.uniform(
                        -eps, eps, size=m.dim
                    )
                new_rows.append(np.asarray(vec, dtype=np.complex128))
        if r not in m.relation_index:
            m.relation_index[r] = len(m.relation_index)
            m.rel_phase = np.vstack(
                [m.rel_phase, rng.uniform(-math.pi, math.pi, size=(1, m.dim))]
            )
    if new_rows:
        m.entity_emb = np.vstack([m.entity_emb, np.stack(new_rows)])


def train(
    m: KgeModel,
    triples: list[tuple[str, str, str]],
    cfg: TrainConfig,
    init_fn=None,
) -> KgeModel:
    """Gradient descent from m's current parameters; returns a new model."""
    if not triples:
        raise EmptyTrainingSet("no triples to train on")
    m = m.copy()
    rng = np.random.default_rng(cfg.seed)
    _register(m, triples, rng, cfg.margin, init_fn)

    n_e = len(m.entity_index)
    n_r = len(m.relation_index)
    idx = np.array(
        [
            (m.entity_index[h], m.relation_index[r], m.entity_index[t])
            for h, r, t in triples
        ],
        dtype=np.int64,
    )
    positive_keys = np.unique((idx[:, 0] * n_r + idx[:, 1]) * n_e + idx[:, 2])

    lr = cfg.learning_rate
    milestones = {cfg.epochs // 2, (cfg.epochs * 3) // 4}
    initial_loss = None
    last_loss = None
    step = m.trainer_state.get("step", 0)
    for epoch in range(cfg.epochs):
        if epoch in milestones and epoch > 0:
            lr *= 0.5
        order = rng.permutation(len(idx))
        for lo in range(0, len(order), cfg.batch_size):
            pos = idx[order[lo : lo + cfg.batch_size]]
            neg_ent, neg_side = _sample_negatives(
                rng, pos, n_e, n_r, positive_keys, cfg.negatives
            )
            d_neg = corrupted_distances(m.entity_emb, m.rel_phase, pos, neg_ent, neg_side)
            weights = softmax(-cfg.adv_temperature * d_neg, axis=1)
            loss, g_emb, g_phase = batch_loss_and_grad(
                m.entity_emb, m.rel_phase, pos, neg_ent, neg_side, weights, cfg.margin
            )
            m.entity_emb -= lr * g_emb
            m.rel_phase -= lr * g_phase
            step += 1
            if initial_loss is None:
                initial_loss = loss
            last_loss = loss
        m.check_invariants()

    m.trainer_state = {
        "step": step,
        "learning_rate": lr,
        "seed": cfg.seed,
        "initial_loss": initial_loss,
        "final_loss": last_loss,
    }
    return m


def warm_start(
    m: KgeModel,
    new_triples: list[tuple[str, str, str]],
    epochs: int = 20,
    cfg: TrainConfig | None = None,
    init_fn=None,
) -> KgeModel:
    """Short fine-tune from existing parameters; rows of old entities are kept.

    New mentions are appended with `init_fn` (a semantic projection when one
    is available) or random initialization.  Zero triples or zero epochs is a
    clean no-op on the parameters.
    """
    cfg = replace(cfg or TrainConfig(), epochs=epochs)
    if not new_triples or epochs == 0:
        out = m.copy()
        if new_triples:
            _register(out, new_triples, np.random.default_rng(cfg.seed), cfg.margin, init_fn)
        return out
    return train(m, new_triples, cfg, init_fn)


def rank_relations(
    m: KgeModel,
    h: str,
    t: str,
    category: str,
    o: Ontology,
    k: int = 3,
    h_vec: np.ndarray | None = None,
    t_vec: np.ndarray | None = None,
) -> list[tuple[str, float]]:
    """Top-k relations of one category by score; ties break on schema order.

    Only relations of the claimed category are scored, so the ranking can
    never drift outside it.  Unseen mentions may be scored by passing their
    projected vectors explicitly.
    """
    rel_ids = [r.id for r in relations_in_category(o, category)]  # UnknownCategory
    if h_vec is None:
        if h not in m.entity_index:
            raise UnknownEntity(f"entity {h!r} not in model and no vector given")
        h_vec = m.entity_emb[m.entity_index[h]]
    if t_vec is None:
        if t not in m.entity_index:
            raise UnknownEntity(f"entity {t!r} not in model and no vector given")
        t_vec = m.entity_emb[m.entity_index[t]]
    scored = [(rid, m.score_vectors(h_vec, rid, t_vec)) for rid in rel_ids]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    return [scored[i] for i in order[:k]]


def save_model(m: KgeModel, path: str | Path) -> None:
    entities = sorted(m.entity_index, key=m.entity_index.get)
    relations = sorted(m.relation_index, key=m.relation_index.get)
    save_checkpoint(
        path,
        meta={
            "kind": "kge",
            "dim": m.dim,
            "entities": entities,
            "relations": relations,
            "trainer_state": m.trainer_state,
        },
        sections={"entity_emb": m.entity_emb, "rel_phase": m.rel_phase},
    )


def load_model(path: str | Path) -> KgeModel:
    meta, sections = load_checkpoint(path)
    model = KgeModel(
        dim=meta["dim"],
        entity_index={e: i for i, e in enumerate(meta["entities"])},
        relation_index={r: i for i, r in enumerate(meta["relations"])},
        entity_emb=sections["entity_emb"],
        rel_phase=sections["rel_phase"],
        trainer_state=meta.get("trainer_state", {}),
    )
    model.check_invariants()
    return model
