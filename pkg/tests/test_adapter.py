import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wsidistill.adapter import (
    AdapterError,
    FewShotCache,
    affinities,
    build_cache,
    cache_from_features,
    cache_logits,
    combined_logits,
    embed,
    grid_search,
    inject_low_rank,
    load_cache,
    low_rank_finetune,
    low_rank_parameters,
    normalize_rows,
    save_cache,
)
from wsidistill.backbone import VisionTransformer
from wsidistill.config import AdapterConfig

from conftest import tiny_model


def test_build_cache_shapes_and_norms():
    enc = VisionTransformer(tiny_model())
    imgs = torch.rand(2, 3, 16, 16)
    cache = build_cache(enc, imgs, [0, 1])
    assert cache.keys.shape == (2, 8)
    assert cache.values.tolist() == [[1, 0], [0, 1]]
    assert np.allclose(np.linalg.norm(cache.keys, axis=1), 1, atol=1e-6)
    dup = build_cache(enc, torch.cat([imgs[:1], imgs[:1], imgs[1:], imgs[1:]]), [0, 0, 1, 1])
    assert np.array_equal(dup.keys[0], dup.keys[1])


def test_support_validation():
    with pytest.raises(AdapterError):
        cache_from_features(np.eye(3), [0, 0, 2])  # class 1 empty
    with pytest.raises(AdapterError):
        cache_from_features(np.eye(3), [0, 0, 1])  # unequal shots


def test_affinity_examples():
    cache = cache_from_features(np.eye(3)[:2], [0, 1])
    a = affinities(np.array([1.0, 0, 0]), cache, 5.5)
    assert a[0, 0] == 1.0
    assert a[0, 1] == pytest.approx(math.exp(-5.5), abs=1e-15)
    assert round(a[0, 1], 6) == 0.004087
    assert np.allclose(affinities(np.array([1.0, 0, 0]), cache, 1e-9), 1.0)
    with pytest.raises(AdapterError):
        affinities(np.array([1.0, 0, 0]), cache, 0.0)


def test_cache_logit_examples():
    cache = FewShotCache(normalize_rows(np.eye(4)), np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float))
    assert cache_logits(np.array([0.9, 0.1, 0.2, 0.3]), cache).tolist() == [[pytest.approx(1.0), 0.5]]
    assert cache_logits(np.array([1.0, 0, 0, 0]), cache).tolist() == [[1.0, 0.0]]
    assert cache_logits(np.full(4, 0.3), cache).tolist() == [[pytest.approx(0.6), pytest.approx(0.6)]]


def test_hand_computed_pipeline():
    # N=2 classes, K_shot=2, D=3: every number below is evaluated independently with math
    raw = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
    labels = [0, 0, 1, 1]
    raw_adapted = np.array([[1.0, 2.0, 0.0], [2.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    f = np.array([0.6, 0.8, 0.0])
    f_adapted = np.array([0.0, 0.6, 0.8])
    beta, alpha, alpha_p = 2.0, 0.7, 1.3

    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u)) / math.sqrt(sum(b * b for b in v))

    def scores(query, keys):
        out = [0.0, 0.0]
        for key, c in zip(keys, labels):
            out[c] += math.exp(-beta * (1 - cos(query, key)))
        return out

    s, s_p = scores(f, raw), scores(f_adapted, raw_adapted)
    expected = [alpha * s[c] + alpha_p * s_p[c] for c in range(2)]

    cache = cache_from_features(raw, labels)
    cache_p = cache_from_features(raw_adapted, labels)
    cfg = AdapterConfig(beta=beta, alpha=alpha, alpha_prime=alpha_p)
    got = combined_logits(f, f_adapted, cache, cache_p, cfg)[0]
    assert got.tolist() == pytest.approx(expected, abs=1e-9)

    only_cache = combined_logits(f, None, cache, None, AdapterConfig(beta=beta, alpha=alpha, alpha_prime=0.0))[0]
    assert only_cache.tolist() == pytest.approx([alpha * v for v in s], abs=1e-12)
    same = combined_logits(f, f, cache, cache, AdapterConfig(beta=beta, alpha=0.5, alpha_prime=0.5))[0]
    assert same.tolist() == pytest.approx(s, abs=1e-12)
    with pytest.raises(AdapterError):
        combined_logits(f, f, cache, cache, AdapterConfig(alpha=0.0, alpha_prime=0.0))


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_large_beta_matches_nearest_neighbour():
    rng = np.random.default_rng(0)
    trials = 0
    while trials < 1000:
        keys = _unit(rng, 12, 8)
        labels = np.repeat(np.arange(3), 4)
        q = _unit(rng, 1, 8)[0]
        sims = np.sort(keys @ q)
        if sims[-1] - sims[-2] < 0.05:
            continue
        cache = cache_from_features(keys, labels)
        pred = cache_logits(affinities(q, cache, 100.0), cache).argmax()
        assert pred == labels[np.argmax(keys @ q)]
        trials += 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 4))
def test_row_permutation_and_bounds(seed, shots, n):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n), shots)
    keys = _unit(rng, n * shots, 5)
    q = _unit(rng, 3, 5)
    cache = cache_from_features(keys, labels)
    perm = rng.permutation(len(labels))
    permuted = cache_from_features(keys[perm], labels[perm])
    a = affinities(q, cache, 5.5)
    s = cache_logits(a, cache)
    assert np.allclose(s, cache_logits(affinities(q, permuted, 5.5), permuted), atol=1e-12)
    assert np.all((a > 0) & (a <= 1.0))
    assert np.all((s > 0) & (s <= shots + 1e-12))


# ----- low-rank branch ---------------------------------------------------------------

def test_zero_init_low_rank_is_bit_identical():
    enc = VisionTransformer(tiny_model(depth=2)).eval()
    adapted = inject_low_rank(enc, 2).eval()
    x = torch.rand(3, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(enc(x), adapted(x))
    zero_steps = low_rank_finetune(enc, x[:2], [0, 1], AdapterConfig(rank=2), epochs=0)
    with torch.no_grad():
        assert torch.equal(enc(x), zero_steps(x))


def test_trainable_count_is_two_d_r_per_site():
    d, r, depth = 8, 2, 3
    adapted = inject_low_rank(VisionTransformer(tiny_model(depth=depth)), r)
    trainable = [p for p in adapted.parameters() if p.requires_grad]
    assert sum(p.numel() for p in trainable) == depth * 2 * (2 * d * r)  # q and v sites per block
    assert {id(p) for p in trainable} == {id(p) for p in low_rank_parameters(adapted)}
    with pytest.raises(AdapterError):
        inject_low_rank(VisionTransformer(tiny_model()), d)


def test_finetune_leaves_frozen_weights_untouched():
    enc = VisionTransformer(tiny_model()).double()
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    imgs = torch.rand(4, 3, 16, 16, dtype=torch.float64)
    adapted = low_rank_finetune(enc, imgs, [0, 0, 1, 1], AdapterConfig(rank=2), epochs=3)
    for k, v in enc.state_dict().items():
        assert torch.equal(v, before[k])
    base = {k: v for k, v in adapted.state_dict().items() if ".base." in k}
    for k, v in base.items():
        assert torch.equal(v, before[k.replace(".base.", ".")])


def test_finetune_separates_toy_support_set():
    torch.manual_seed(0)
    n_per = 4
    # class 0 bright with vertical bars, class 1 bright with horizontal bars; frozen encoder at init confuses them
    imgs = []
    for c in (0, 1):
        for k in range(n_per):
            img = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
            stripe = (torch.arange(16) // 2 + k) % 2 == 0
            if c == 0:
                img[:, :, stripe] += 0.3
            else:
                img[:, stripe, :] += 0.3
            imgs.append(img)
    imgs = torch.stack(imgs)
    labels = [0] * n_per + [1] * n_per
    enc = VisionTransformer(tiny_model(embed_dim=16, depth=2)).double()
    cfg = AdapterConfig(rank=4, finetune_lr=0.01, beta=5.5, logit_scale=10.0)
    adapted = low_rank_finetune(enc, imgs, labels, cfg, epochs=150)
    cache = build_cache(adapted, imgs, labels)
    pred = cache_logits(affinities(embed(adapted, imgs), cache, cfg.beta), cache).argmax(1)
    assert pred.tolist() == labels


def test_grid_search_prefers_informative_branch():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1], 3)
    good = np.concatenate([_unit(rng, 3, 4) * 0.1 + [1, 0, 0, 0], _unit(rng, 3, 4) * 0.1 + [0, 1, 0, 0]])
    noise = _unit(rng, 6, 4)
    cache_bad, cache_good = cache_from_features(noise, labels), cache_from_features(good, labels)
    y_val = np.array([0, 1, 0, 1])
    f_good = normalize_rows(np.array([[1, 0.05, 0, 0], [0.05, 1, 0, 0], [1, 0, 0.1, 0], [0, 1, 0, 0.1]]))
    f_bad = _unit(rng, 4, 4)
    cfg, acc = grid_search(f_bad, f_good, y_val, cache_bad, cache_good, AdapterConfig(),
                           alphas=(1.0,), alpha_primes=(0.0, 5.0))
    assert acc == 1.0 and cfg.alpha_prime == 5.0


def test_cache_roundtrip(tmp_path):
    cache = cache_from_features(_unit(np.random.default_rng(0), 6, 5), [0, 0, 1, 1, 2, 2])
    save_cache(cache, tmp_path, meta={"beta": 5.5})
    again, meta = load_cache(tmp_path)
    assert np.allclose(again.keys, cache.keys, atol=1e-6)
    assert np.array_equal(again.values, cache.values) and meta["beta"] == 5.5 and meta["shots"] == 2
