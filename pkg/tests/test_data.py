import io

import numpy as np
import pytest
from scipy.stats import chisquare

from sumrec.data import (
    PopularitySampler,
    SyntheticConfig,
    dumps_dataset,
    generate_synthetic,
    ingest_taobao,
    load_dataset,
    loads_dataset,
    read_behaviors,
    save_dataset,
)

SMALL = dict(n_users=60, n_items=80, D=8, seq_len_mean=12, seq_len_cap=30)


def toy_log(rows):
    return io.StringIO("user_id,item_id,category_id,behavior_type,timestamp\n" + "\n".join(rows) + "\n")


def pv_rows(user, n, start=100, item="a", cat="c1"):
    return [f"{user},{item}{t},{cat},pv,{start + t}" for t in range(n)]


# -------------------------------------------------------------- synthetic


def test_noise_free_single_interest_histories_sit_on_centroid():
    ds = generate_synthetic(SyntheticConfig(noise_std=0.0, interests_per_user=1, **SMALL))
    V = ds.items.vectors
    for s in ds["train"][:50]:
        first = V[s.history[0]]
        for i in s.history:
            assert float(V[i] @ first) == pytest.approx(1.0, abs=1e-12)


def test_label_ratio_per_user():
    ds = generate_synthetic(SyntheticConfig(neg_ratio=4, **SMALL))
    for split in ("train", "valid", "test"):
        labels = {}
        for s in ds[split]:
            labels.setdefault(s.user_id, []).append(s.label)
        for ys in labels.values():
            assert sorted(ys) == [0, 0, 0, 0, 1]


def test_synthetic_is_deterministic_per_seed():
    a = dumps_dataset(generate_synthetic(SyntheticConfig(seed=3, **SMALL)))
    b = dumps_dataset(generate_synthetic(SyntheticConfig(seed=3, **SMALL)))
    c = dumps_dataset(generate_synthetic(SyntheticConfig(seed=4, **SMALL)))
    assert a == b and a != c


def test_synthetic_splits_are_disjoint_and_proportional():
    ds = generate_synthetic(SyntheticConfig(**{**SMALL, "n_users": 200}))
    tr, va, te = ds.users("train"), ds.users("valid"), ds.users("test")
    assert not (tr & va or tr & te or va & te)
    assert (len(tr), len(va), len(te)) == (140, 30, 30)


def test_synthetic_histories_respect_bounds_and_time():
    cfg = SyntheticConfig(**SMALL)
    ds = generate_synthetic(cfg)
    for s in ds["train"]:
        assert cfg.seq_len_min <= len(s.history) <= cfg.seq_len_cap
        assert np.all(np.diff(s.timestamps) > 0) and s.timestamps[-1] < s.target_time


def test_synthetic_items_are_unit_norm():
    ds = generate_synthetic(SyntheticConfig(**SMALL))
    assert np.allclose(np.linalg.norm(ds.items.vectors, axis=1), 1.0)


def test_full_transition_walks_the_pool_cyclically():
    cfg = SyntheticConfig(transition_prob=1.0, session_burst_len=1e12, interests_per_user=1, pool_size=4, **SMALL)
    ds = generate_synthetic(cfg)
    for s in ds["train"]:
        h = s.history
        assert np.array_equal(h[4:], h[:-4]) and len(set(h[:4].tolist())) == 4
        if s.label == 1:
            assert s.target == h[-4]


@pytest.mark.parametrize("bad", [dict(n_interests=1), dict(seq_len_cap=101), dict(interests_per_user=5),
                                 dict(transition_prob=1.5)])
def test_synthetic_rejects_infeasible_config(bad):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(**{**SMALL, **bad}))


# --------------------------------------------------------------- taobao


def test_taobao_toy_log_hand_checked():
    rows = (
        pv_rows("u1", 21)  # 21 page views: kept
        + ["u1,b1,c2,buy,110", "u1,b2,c2,buy,500", "u1,x,c1,cart,111"]
        + pv_rows("u2", 19, item="z")  # 19 page views: excluded
        + ["u2,b1,c2,buy,1000"]
        + pv_rows("u3", 25, start=50, item="y")
        + ["u3,b3,c3,buy,50"]  # nothing viewed before: skipped
    )
    ds, report = ingest_taobao(toy_log(rows), max_len=100, neg_ratio=2, seed=0)
    assert report.users_kept == 2 and report.users_dropped == 1 and report.malformed == 0
    samples = [s for split in ("train", "valid", "test") for s in ds[split]]
    assert {s.user_id for s in samples} == {"u1"}
    positives = sorted((s for s in samples if s.label == 1), key=lambda s: s.target_time)
    assert len(positives) == 2 and len(samples) == 6
    raw = ds.items.raw_ids
    # buy at t=110 sees page views at t=100..109 only
    first = positives[0]
    assert [raw[i] for i in first.history] == [f"a{t}" for t in range(10)]
    assert raw[first.target] == "b1" and first.target_time == 110
    # second buy sees all 21 page views
    assert len(positives[1].history) == 21
    assert ds.D == 80 and ds.items.learned
    for s in samples:
        if s.label == 0:
            group_pos = next(p for p in positives if p.group == s.group)
            assert s.target != group_pos.target
            assert np.array_equal(s.history, group_pos.history)


def test_taobao_exactly_twenty_views_is_excluded():
    rows = pv_rows("u1", 20) + ["u1,b,c,buy,999"]
    ds, report = ingest_taobao(toy_log(rows))
    assert report.users_kept == 0


def test_taobao_history_is_causal_and_truncated():
    rows = pv_rows("u1", 150) + ["u1,b,c,buy,200", "u1,a120,c1,pv,200"]
    ds, _ = ingest_taobao(toy_log(rows), max_len=100, neg_ratio=1)
    pos = next(s for split in ("train", "valid", "test") for s in ds[split] if s.label == 1)
    assert len(pos.history) == 100
    assert pos.timestamps.max() < 200 and pos.timestamps.min() == 200 - 100
    assert np.all(np.diff(pos.timestamps) >= 0)


def test_malformed_rows_counted_then_abort_over_one_percent():
    good = pv_rows("u1", 30)
    _, report = read_behaviors(io.StringIO("\n".join(good + ["u1,a,c,pv,notatime"])), max_malformed=0.05)
    assert report.malformed == 1 and report.rows == 31
    with pytest.raises(ValueError, match="malformed"):
        read_behaviors(io.StringIO("\n".join(good + ["u1,a,c,click,1"])))


def test_popularity_sampler_matches_counts():
    counts = np.array([50, 20, 10, 10, 5, 3, 1, 1], dtype=float)
    sampler = PopularitySampler(counts, np.random.default_rng(0))
    draws = sampler.sample(100_000)
    observed = np.bincount(draws, minlength=len(counts))
    expected = counts / counts.sum() * len(draws)
    assert chisquare(observed, expected).pvalue > 0.01


def test_popularity_sampler_excludes():
    sampler = PopularitySampler([5, 1, 1], np.random.default_rng(0))
    assert 0 not in sampler.sample(200, exclude=[0])
    with pytest.raises(ValueError):
        sampler.sample(1, exclude=[0, 1, 2])


# ------------------------------------------------------------ file format


def test_dataset_file_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(**SMALL))
    path = tmp_path / "ds.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert dumps_dataset(back) == path.read_text()
    assert np.array_equal(back.items.vectors, ds.items.vectors)


def test_learned_dataset_round_trip():
    rows = pv_rows("u1", 25) + ["u1,b,c,buy,999"]
    ds, _ = ingest_taobao(toy_log(rows), neg_ratio=1)
    text = dumps_dataset(ds)
    assert dumps_dataset(loads_dataset(text)) == text


def test_dataset_loader_rejects_bad_files():
    with pytest.raises(ValueError, match="magic"):
        loads_dataset("hello\n")
    text = dumps_dataset(generate_synthetic(SyntheticConfig(**SMALL)))
    with pytest.raises(ValueError):
        loads_dataset("\n".join(text.splitlines()[:-1]))
