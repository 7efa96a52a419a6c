import numpy as np
import pytest
from scipy.stats import spearmanr

from leckg.errors import InsufficientEntities, InvalidParams, ShapeError
from leckg.kge import KgeModel
from leckg.semantic_init import (
    AlignmentMap,
    HashEncoder,
    embed_unseen,
    fit_alignment,
    flatten_complex,
    load_alignment,
    project,
    save_alignment,
    stochastic_embeddings,
    unflatten_complex,
)


def planted_setup(n=100, enc_dim=16, d=4, seed=11):
    """Entities whose embeddings are exactly an affine image of encoder vectors."""
    enc = HashEncoder(out_dim=enc_dim, seed=3)
    rng = np.random.default_rng(seed)
    mentions = [f"entity-{i:03d}" for i in range(n)]
    W_true = rng.normal(size=(2 * d, enc_dim))
    b_true = rng.normal(size=2 * d)
    rows = np.stack(
        [unflatten_complex(W_true @ enc.encode(s) + b_true) for s in mentions]
    )
    m = KgeModel(
        dim=d,
        entity_index={s: i for i, s in enumerate(mentions)},
        relation_index={"r": 0},
        entity_emb=rows,
        rel_phase=rng.uniform(-np.pi, np.pi, (1, d)),
    )
    return enc, m, W_true, b_true


# ------------------------------------------------------------ layout


def test_flatten_layout_first_half_real():
    v = np.array([1 + 2j, 3 + 4j])
    assert np.array_equal(flatten_complex(v), [1.0, 3.0, 2.0, 4.0])
    assert np.array_equal(unflatten_complex(np.array([1.0, 3.0, 2.0, 4.0])), v)


def test_flatten_round_trip():
    rng = np.random.default_rng(0)
    v = rng.normal(size=8) + 1j * rng.normal(size=8)
    assert np.array_equal(unflatten_complex(flatten_complex(v)), v)


def test_unflatten_rejects_odd_length():
    with pytest.raises(ShapeError):
        unflatten_complex(np.zeros(5))


# ------------------------------------------------------------ encoder double


def test_hash_encoder_deterministic():
    enc = HashEncoder(out_dim=32, seed=1)
    assert np.array_equal(enc.encode("云南省"), enc.encode("云南省"))
    enc2 = HashEncoder(out_dim=32, seed=1)
    assert np.array_equal(enc.encode("云南省"), enc2.encode("云南省"))


def test_hash_encoder_ngram_overlap_means_nearby():
    enc = HashEncoder(out_dim=64, seed=1)
    a = enc.encode("森林覆盖率")
    near = enc.encode("森林覆盖")
    far = enc.encode("MODIS")
    cos = lambda x, y: float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
    assert cos(a, near) > cos(a, far)


def test_hash_encoder_unit_norm_nonempty():
    enc = HashEncoder(out_dim=16, seed=2)
    assert np.linalg.norm(enc.encode("x")) == pytest.approx(1.0)


# ------------------------------------------------------------ fitting


def test_planted_map_recovered_within_tolerance():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, holdout=0.1, seed=5)
    assert amap.fit_stats["holdout_rel_err"] < 1e-3
    assert amap.fit_stats["n_holdout"] == 10


def test_projection_scores_rank_correlate_with_true_embeddings():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, holdout=0.1, seed=5)
    hold = np.random.default_rng(5).permutation(len(m.entity_emb))[:10]
    mentions = sorted(m.entity_index, key=m.entity_index.get)
    true_scores, proj_scores = [], []
    anchor = m.entity_emb[0]
    for i in hold:
        true_vec = m.entity_emb[i]
        proj_vec = project(amap, enc.encode(mentions[i]))
        true_scores.append(m.score_vectors(anchor, "r", true_vec))
        proj_scores.append(m.score_vectors(anchor, "r", proj_vec))
    rho = spearmanr(true_scores, proj_scores).statistic
    assert rho >= 0.8


def test_two_entities_interpolated_near_exactly():
    # underdetermined fit: ridge still interpolates the training points
    enc, m, _, _ = planted_setup(n=2)
    amap = fit_alignment(enc, m, holdout=0.0, seed=0)
    assert amap.fit_stats["train_rel_err"] < 5e-3  # ridge bias only
    assert amap.fit_stats["holdout_rel_err"] is None


def test_fewer_than_two_entities_rejected():
    enc, m, _, _ = planted_setup(n=5)
    with pytest.raises(InsufficientEntities):
        fit_alignment(enc, m, entities=["entity-000"])


def test_bad_holdout_fraction():
    enc, m, _, _ = planted_setup(n=5)
    with pytest.raises(InvalidParams):
        fit_alignment(enc, m, holdout=1.0)


# ------------------------------------------------------------ applying


def test_project_shape_mismatch():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    with pytest.raises(ShapeError):
        project(amap, np.zeros(amap.enc_dim + 1))


def test_zero_encoder_vector_projects_to_bias():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    got = project(amap, np.zeros(amap.enc_dim))
    assert np.allclose(got, unflatten_complex(amap.b))


def test_embed_unseen_guards_known_entities():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    vec = embed_unseen(amap, enc, "never-seen-mention", m)
    assert vec.shape == (m.dim,)
    with pytest.raises(AssertionError):
        embed_unseen(amap, enc, "entity-000", m)


# ------------------------------------------------------------ MC dropout


def test_stochastic_embeddings_reproducible_and_counted():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    runs_a = stochastic_embeddings(amap, enc, "新实体", runs=5, drop_rate=0.2, seed=9)
    runs_b = stochastic_embeddings(amap, enc, "新实体", runs=5, drop_rate=0.2, seed=9)
    assert len(runs_a) == 5
    for x, y in zip(runs_a, runs_b):
        assert np.array_equal(x, y)


def test_stochastic_zero_drop_rate_equals_deterministic():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    det = embed_unseen(amap, enc, "新实体")
    for v in stochastic_embeddings(amap, enc, "新实体", runs=3, drop_rate=0.0, seed=1):
        assert np.allclose(v, det)


def test_stochastic_spread_grows_with_drop_rate():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)

    def spread(rate):
        vs = stochastic_embeddings(amap, enc, "新实体", runs=20, drop_rate=rate, seed=4)
        stack = np.stack([flatten_complex(v) for v in vs])
        return float(stack.std(axis=0).mean())

    assert spread(0.0) < 1e-12
    assert spread(0.3) > spread(0.05) > 1e-6


def test_stochastic_param_validation():
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    with pytest.raises(InvalidParams):
        stochastic_embeddings(amap, enc, "x", runs=0)
    with pytest.raises(InvalidParams):
        stochastic_embeddings(amap, enc, "x", drop_rate=1.0)


# ------------------------------------------------------------ persistence


def test_alignment_checkpoint_round_trip(tmp_path):
    enc, m, _, _ = planted_setup()
    amap = fit_alignment(enc, m, seed=5)
    p = tmp_path / "alignment.leckg"
    save_alignment(amap, p)
    again = load_alignment(p)
    assert np.array_equal(again.W, amap.W)
    assert np.array_equal(again.b, amap.b)
    assert again.fit_stats == amap.fit_stats
