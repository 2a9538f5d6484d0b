import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from taskcl.encoding import (
    EmbeddingError,
    EncoderParams,
    ProjectionHead,
    ProjectionParams,
    SetEncoder,
    aggregate_features,
    check_nondegenerate,
    encode_support_set,
    project_embedding,
    set_reduce,
)
from taskcl.episodes import build_domain, sample_episode
from taskcl.metalearn import AdaptState, ModelConfig, build_model

IMG = build_domain({"kind": "synthetic-image", "classes": 10, "per_class": 12}, 0, "img")
VEC = build_domain({"kind": "gaussian", "classes": 10, "per_class": 12, "dim": 8}, 0, "vec")


def conv_encoder(seed=0, **kw):
    torch.manual_seed(seed)
    return SetEncoder(EncoderParams(**kw), (1, 28, 28), ways=5)


def permuted(task, perm):
    return task.replace(support_x=task.support_x[perm], support_y=task.support_y[perm], support_ids=task.support_ids[perm])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_set_encoder_bitwise_permutation_invariant(seed):
    enc = conv_encoder()
    t = sample_episode(IMG, 5, 2, 1, seed % 1000)
    perm = np.random.default_rng(seed).permutation(10)
    a = encode_support_set(t, enc).vector
    b = encode_support_set(permuted(t, perm), enc).vector
    assert a.tobytes() == b.tobytes()


def test_label_conditioned_encoder_invariant_and_label_sensitive():
    enc = conv_encoder(label_conditioning=True)
    t = sample_episode(IMG, 5, 2, 1, 3)
    perm = np.random.default_rng(0).permutation(10)
    assert encode_support_set(t, enc).vector.tobytes() == encode_support_set(permuted(t, perm), enc).vector.tobytes()
    relab = t.replace(support_y=(t.support_y + 1) % 5)
    assert not np.array_equal(encode_support_set(relab, enc).vector, encode_support_set(t, enc).vector)


@pytest.mark.parametrize("shape", [(2, 1), (5, 1), (5, 3), (3, 5)])
def test_output_length(shape):
    enc = conv_encoder(output_dim=17)
    t = sample_episode(IMG, shape[0], shape[1], 1, 0)
    assert encode_support_set(t, enc).vector.shape == (17,)


def test_vector_encoder_and_shape_mismatch():
    torch.manual_seed(0)
    enc = SetEncoder(EncoderParams(), (8,))
    t = sample_episode(VEC, 5, 1, 1, 0)
    assert encode_support_set(t, enc).vector.shape == (64,)
    with pytest.raises(EmbeddingError):
        encode_support_set(sample_episode(IMG, 5, 1, 1, 0), enc)


def test_separated_domains_distance():
    enc = conv_encoder()
    far = build_domain({"kind": "synthetic-image", "family": "gratings", "classes": 10, "per_class": 12}, 1, "far")
    za = np.stack([encode_support_set(sample_episode(IMG, 5, 1, 1, s), enc).vector for s in range(25)])
    zb = np.stack([encode_support_set(sample_episode(far, 5, 1, 1, s), enc).vector for s in range(25)])

    def mean_pairwise(A, B):
        return np.mean([np.linalg.norm(a - b) for a in A for b in B])

    intra = (mean_pairwise(za, za) + mean_pairwise(zb, zb)) / 2
    assert mean_pairwise(za, zb) > intra


def test_set_reduce_mean_matches_loop():
    h = torch.as_tensor(np.random.default_rng(0).normal(size=(7, 5)))
    ref = [sum(float(h[i, j]) for i in range(7)) / 7 for j in range(5)]
    assert np.allclose(set_reduce(h, "mean").numpy(), ref, atol=1e-14, rtol=0)
    with pytest.raises(EmbeddingError):
        set_reduce(h, "median")


# ---------------------------------------------------------------------------
# feature aggregation


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(input_shape=(1, 28, 28), ways=5), 0)


def test_single_sample_mean_is_feature(model):
    t = sample_episode(IMG, 1, 1, 1, 0)
    with torch.no_grad():
        f = model.features(model.as_tensor(t.support_x))[0].double().numpy()
    assert np.array_equal(aggregate_features(t, model).vector, f)


@pytest.mark.parametrize("reducer", ["mean", "max", "min"])
def test_identical_samples(model, reducer):
    t = sample_episode(IMG, 5, 1, 1, 0)
    same = t.replace(support_x=np.repeat(t.support_x[:1], 5, axis=0))
    single = sample_episode(IMG, 1, 1, 1, 0).replace(support_x=t.support_x[:1])
    # float32 normalisation reduces in a batch-size dependent order
    assert np.allclose(aggregate_features(same, model, reducer=reducer).vector, aggregate_features(single, model).vector, rtol=1e-5, atol=1e-6)


def test_mean_matches_brute_force(model):
    t = sample_episode(IMG, 5, 2, 1, 4)
    with torch.no_grad():
        H = model.features(model.as_tensor(t.support_x)).double().numpy()
    ref = np.array([sum(H[i, j] for i in range(10)) / 10 for j in range(H.shape[1])])
    assert np.allclose(aggregate_features(t, model).vector, ref, atol=1e-6)


def test_post_with_zero_steps_equals_pre(model):
    t = sample_episode(IMG, 5, 1, 1, 2)
    pre = aggregate_features(t, model, "pre").vector
    post = aggregate_features(t, model, "post", state=AdaptState(steps=0)).vector
    assert pre.tobytes() == post.tobytes()
    # zero head: the first step only moves the head, features change from step 2
    one = aggregate_features(t, model, "post", state=AdaptState(steps=1, inner_lr=0.5)).vector
    assert one.tobytes() == pre.tobytes()
    two = aggregate_features(t, model, "post", state=AdaptState(steps=2, inner_lr=0.5)).vector
    assert not np.array_equal(pre, two)


def test_aggregate_errors(model):
    t = sample_episode(IMG, 5, 1, 1, 2)
    with pytest.raises(EmbeddingError):
        aggregate_features(t, model, reducer="median")
    with pytest.raises(EmbeddingError):
        aggregate_features(t, model, "post")


# ---------------------------------------------------------------------------
# projection


def test_projection_unit_norm():
    torch.manual_seed(0)
    head = ProjectionHead(16, ProjectionParams(layers=(32, 8)))
    out = project_embedding(np.random.default_rng(0).normal(size=(5, 16)), head)
    assert out.shape == (5, 8)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)


def test_projection_identity():
    head = ProjectionHead(6, ProjectionParams(layers=(6,), unit_normalize=False, init="identity"))
    z = np.random.default_rng(1).normal(size=6)
    assert np.allclose(project_embedding(z, head), z, atol=1e-7)


def test_zero_input_degenerate():
    head = ProjectionHead(4, ProjectionParams(layers=(4,), unit_normalize=False, init="identity"))
    out = project_embedding(np.zeros(4), head)
    assert np.all(out == 0)
    with pytest.raises(EmbeddingError):
        check_nondegenerate(torch.as_tensor(out[None]))
    with pytest.raises(EmbeddingError):
        project_embedding(np.zeros(5), head)
