"""Project text-encoder vectors of unseen entity mentions into the embedding
space through a learned affine map.

The map solves ridge regression in closed form: flatten each known entity's
complex embedding into 2d reals (first half real parts, second half
imaginary, the layout every checkpoint declares), then fit W, b minimizing
sum ||W v(e) + b - flat(e)||^2 + lambda ||W||^2 with the bias unpenalized.
Known entities never go through the map; callers route them to their learned
rows directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InsufficientEntities, InvalidParams, ShapeError, TransportError
from .kge import KgeModel

RIDGE_LAMBDA = 1e-3


class SemanticEncoder(Protocol):
    out_dim: int

    def encode(self, mention: str) -> np.ndarray: ...


class HashEncoder:
    """Deterministic test double: seeded random projection of character
    n-gram counts.

    Shared n-grams produce nearby vectors, which is all the tests need from
    a semantic encoder; no network, no model weights.
    """

    def __init__(self, out_dim: int = 64, seed: int = 0, ngram: int = 2):
        if out_dim < 1 or ngram < 1:
            raise InvalidParams("out_dim and ngram must be >= 1")
        self.out_dim = out_dim
        self.ngram = ngram
        self._rng_seed = seed

    def _gram_row(self, gram: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self._rng_seed}:{gram}".encode("utf-8")).digest()
        gram_seed = int.from_bytes(digest[:8], "little")
        return np.random.default_rng(gram_seed).standard_normal(self.out_dim)

    def encode(self, mention: str) -> np.ndarray:
        padded = f"^{mention}$"
        grams = [
            padded[i : i + self.ngram] for i in range(len(padded) - self.ngram + 1)
        ]
        out = np.zeros(self.out_dim)
        for g in grams:
            out += self._gram_row(g)
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else out


class HttpEncoder:
    """Thin client for an embedding endpoint (configured via LECKG_ENC_URL)."""

    def __init__(self, base_url: str, out_dim: int = 768, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.out_dim = out_dim
        self._client = httpx.Client(timeout=timeout)

    def encode(self, mention: str) -> np.ndarray:
        try:
            resp = self._client.post(f"{self.base_url}/embed", json={"text": mention})
        except httpx.HTTPError as exc:
            raise TransportError(f"encoder unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"encoder returned {resp.status_code}")
        vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
        if vec.shape != (self.out_dim,):
            raise ShapeError(f"encoder returned shape {vec.shape}, want ({self.out_dim},)")
        return vec

    def close(self) -> None:
        self._client.close()


@dataclass(frozen=True)
class AlignmentMap:
    W: np.ndarray  # (2*dim_kge, enc_dim)
    b: np.ndarray  # (2*dim_kge,)
    fit_stats: dict

    @property
    def kge_dim(self) -> int:
        return self.W.shape[0] // 2

    @property
    def enc_dim(self) -> int:
        return self.W.shape[1]


def flatten_complex(vec: np.ndarray) -> np.ndarray:
    return np.concatenate([vec.real, vec.imag])


def unflatten_complex(flat: np.ndarray) -> np.ndarray:
    if flat.ndim != 1 or flat.shape[0] % 2 != 0:
        raise ShapeError(f"flat vector of even length required, got {flat.shape}")
    half = flat.shape[0] // 2
    return flat[:half] + 1j * flat[half:]


def fit_alignment(
    enc: SemanticEncoder,
    m: KgeModel,
    entities: list[str] | None = None,
    holdout: float = 0.1,
    ridge_lambda: float = RIDGE_LAMBDA,
    seed: int = 0,
) -> AlignmentMap:
    """Closed-form ridge fit from encoder vectors to flattened embeddings.

    The bias is absorbed as an unpenalized augmented column.  ``holdout``
    withholds a seeded fraction of entities to report generalization error;
    the map itself is fit on the remainder.
    """
    if entities is None:
        entities = sorted(m.entity_index, key=m.entity_index.get)
    if len(entities) < 2:
        raise InsufficientEntities(f"need >= 2 entities, got {len(entities)}")
    if not 0.0 <= holdout < 1.0:
        raise InvalidParams("holdout must be in [0, 1)")

    V = np.stack([enc.encode(e) for e in entities])  # (N, enc_dim)
    Y = np.stack(
        [flatten_complex(m.entity_emb[m.entity_index[e]]) for e in entities]
    )  # (N, 2d)

    n_hold = int(round(holdout * len(entities)))
    order = np.random.default_rng(seed).permutation(len(entities))
    hold_idx, fit_idx = order[:n_hold], order[n_hold:]
    if len(fit_idx) == 0:
        raise InsufficientEntities("holdout leaves no training entities")

    Vf, Yf = V[fit_idx], Y[fit_idx]
    # augmented design [V | 1]; ridge penalty on W only, not on the bias row
    A = np.hstack([Vf, np.ones((len(Vf), 1))])
    reg = ridge_lambda * np.eye(A.shape[1])
    reg[-1, -1] = 0.0
    coef = np.linalg.solve(A.T @ A + reg, A.T @ Yf)  # (enc_dim + 1, 2d)
    W = coef[:-1].T  # (2d, enc_dim)
    b = coef[-1]

    def rel_err(idx):
        if len(idx) == 0:
            return None
        pred = V[idx] @ W.T + b
        denom = np.linalg.norm(Y[idx])
        return float(np.linalg.norm(pred - Y[idx]) / max(denom, 1e-12))

    return AlignmentMap(
        W=W,
        b=b,
        fit_stats={
            "train_rel_err": rel_err(fit_idx),
            "holdout_rel_err": rel_err(hold_idx),
            "n_fit": int(len(fit_idx)),
            "n_holdout": int(len(hold_idx)),
            "ridge_lambda": ridge_lambda,
        },
    )


def project(amap: AlignmentMap, enc_vec: np.ndarray) -> np.ndarray:
    if enc_vec.shape != (amap.enc_dim,):
        raise ShapeError(
            f"encoder vector shape {enc_vec.shape} does not match map ({amap.enc_dim},)"
        )
    return unflatten_complex(amap.W @ enc_vec + amap.b)


def embed_unseen(amap: AlignmentMap, enc: SemanticEncoder, mention: str,
                 m: KgeModel | None = None) -> np.ndarray:
    """Deterministic embedding for a mention the model has no row for."""
    if m is not None:
        assert mention not in m.entity_index, (
            f"{mention!r} is a known entity; use its learned row instead"
        )
    return project(amap, enc.encode(mention))


def stochastic_embeddings(
    amap: AlignmentMap,
    enc: SemanticEncoder,
    mention: str,
    runs: int = 5,
    drop_rate: float = 0.1,
    seed: int = 0,
) -> list[np.ndarray]:
    """Monte-Carlo dropout samples of the projected embedding.

    Each run zeroes encoder-output coordinates independently with probability
    ``drop_rate`` and rescales survivors by 1/(1-drop_rate) (inverted
    dropout), then projects.  Seeded per call: no shared RNG state.
    """
    if runs < 1:
        raise InvalidParams("runs must be >= 1")
    if not 0.0 <= drop_rate < 1.0:
        raise InvalidParams("drop_rate must be in [0, 1)")
    base = enc.encode(mention)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(runs):
        mask = rng.random(base.shape[0]) >= drop_rate
        dropped = np.where(mask, base / (1.0 - drop_rate), 0.0)
        out.append(project(amap, dropped))
    return out


def save_alignment(amap: AlignmentMap, path: str | Path) -> None:
    save_checkpoint(
        path,
        meta={"kind": "alignment", "fit_stats": amap.fit_stats},
        sections={"W": amap.W, "b": amap.b},
    )


def load_alignment(path: str | Path) -> AlignmentMap:
    meta, sections = load_checkpoint(path)
    return AlignmentMap(W=sections["W"], b=sections["b"], fit_stats=meta["fit_stats"])
