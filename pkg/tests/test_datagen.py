from collections import Counter

import pytest
from hypothesis import given

from verchunk.datagen import GenConfig, generate, generate_graph, key_name, summarize
from verchunk.model import materialize_all

from strategies import gen_configs


@pytest.mark.parametrize("bad", [dict(n_versions=0), dict(update_pct=0.6), dict(pd=1.5),
                                 dict(update_dist="pareto"), dict(branch_factor=0.5), dict(merge_rate=1.0)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        GenConfig(**bad)


def test_chain_summary():
    g = generate(GenConfig(n_versions=300, base_records=100, update_pct=0.5, seed=1))
    s = summarize(g)
    assert s["versions"] == 300 and s["avg_depth"] == 300 and s["merges"] == 0
    assert all(len(g.children(v)) <= 1 for v in g.versions)


def test_single_version_is_base_only():
    g = generate(GenConfig(n_versions=1, base_records=10))
    assert g.versions == [g.root]
    assert sorted(r.key for r in g.root_records) == [key_name(i) for i in range(10)]


@given(gen_configs())
def test_generation_is_deterministic(cfg):
    assert generate_graph(cfg) == generate_graph(cfg)
    assert materialize_all(generate(cfg)) == materialize_all(generate(cfg))


@given(gen_configs())
def test_graph_shape(cfg):
    g = generate(cfg)
    assert len(g) == cfg.n_versions
    g.validate()
    if cfg.merge_rate == 0:
        assert g.is_tree()
    for v in g.versions:
        assert all(p < v for p in g.parents[v])


@given(gen_configs(merges=False))
def test_updates_change_at_most_pd_of_the_payload(cfg):
    g = generate(cfg)
    c = materialize_all(g)
    bound = max(1, int(cfg.pd * cfg.record_size))
    for v in g.versions:
        p = g.parent(v)
        if p is None:
            continue
        for r in g.delta(p, v).updates:
            old = c[p][r.key].payload
            assert len(old) == len(r.payload)
            assert sum(a != b for a, b in zip(old, r.payload)) <= bound


def test_update_fraction_and_size_balance():
    cfg = GenConfig(n_versions=80, base_records=1000, update_pct=0.1, branch_factor=1.5, seed=4)
    g = generate(cfg)
    c = materialize_all(g)
    fracs = []
    for v in g.versions:
        p = g.parent(v)
        if p is not None:
            d = g.delta(p, v)
            fracs.append((len(d.adds) + len(d.updates) + len(d.deletes)) / len(c[p]))
    mean = sum(fracs) / len(fracs)
    assert 0.08 <= mean <= 0.12
    sizes = [len(x) for x in c.values()]
    assert 900 <= min(sizes) and max(sizes) <= 1100


def test_zipf_concentrates_updates():
    def top_share(dist):
        g = generate(GenConfig(n_versions=60, base_records=500, update_pct=0.05, update_dist=dist, seed=3))
        hits = Counter()
        for v in g.versions:
            p = g.parent(v)
            if p is not None:
                hits.update(r.key for r in g.delta(p, v).updates)
        total = sum(hits.values())
        return sum(n for _, n in hits.most_common(25)) / total
    assert top_share("zipf") > 2 * top_share("random")


def test_merges_appear_at_the_requested_rate():
    g = generate(GenConfig(n_versions=200, base_records=50, branch_factor=1.5, merge_rate=0.2, seed=2))
    assert 20 <= len(g.merges()) <= 60
    for m in g.merges():
        assert len(set(g.parents[m])) == len(g.parents[m]) >= 2
