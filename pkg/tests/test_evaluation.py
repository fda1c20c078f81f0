import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossmodal_attack.dataset import ItemImages, synth_dataset
from crossmodal_attack.encoders import FeatureEncoder
from crossmodal_attack.evaluation import (ABLATIONS, AttackReport, calibrate_pixel_baseline, cross_domain_eval,
                                          evaluate_attack, hr_at_k, merge_reports, pixel_baseline, read_reports_csv,
                                          read_table, run_ablations, write_reports_csv, write_table)
from crossmodal_attack.victim import train_victim


def test_hr_examples():
    assert hr_at_k([["a", "b"], ["a"], ["c", "a"]], "a", 2) == 1
    assert hr_at_k([["b"], ["c"]], "a", 2) == 0
    assert hr_at_k([["a"], ["b"], ["c"]], "a", 1) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        hr_at_k([], "a", 5)
    with pytest.raises(ValueError):
        hr_at_k([["a", "b", "c"]], "a", 2)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_hr_matches_indicator_sum(data):
    n_users = data.draw(st.integers(1, 50))
    k = data.draw(st.integers(1, 6))
    items = [f"i{j}" for j in range(10)]
    lists = [data.draw(st.lists(st.sampled_from(items), max_size=k, unique=True)) for _ in range(n_users)]
    target = data.draw(st.sampled_from(items))
    assert hr_at_k(lists, target, k) == sum(target in row for row in lists) / n_users


# -- report plumbing --------------------------------------------------------

def report(label, seeds, rng, post=True):
    n = len(seeds)
    pre = {k: rng.uniform(0, 0.2, (n, 3)) for k in (5, 10, 20)}
    return AttackReport(label, ("t1", "t2", "t3"), seeds, (5, 10, 20), pre,
                        {k: rng.uniform(0, 1, (n, 3)) for k in (5, 10, 20)} if post else None,
                        rng.uniform(0.5, 1, (n, 3)) if post else None, rng.uniform(0, 3, (n, 3)) if post else None,
                        rng.uniform(-1, 1, n) if post else None, fingerprint="abc123")


def test_std_contract():
    rng = np.random.default_rng(0)
    single, multi = report("a", [0], rng), report("b", [0, 1, 2, 3, 4], rng)
    assert single.summary()["hr@10_post_std"] == 0
    s = multi.summary()
    per_seed = multi.post[10].mean(axis=1)
    assert s["hr@10_post_mean"] == pytest.approx(per_seed.mean())
    assert s["hr@10_post_std"] == pytest.approx(per_seed.std())
    assert s["hr@10_post_std"] > 0


def test_report_range_check():
    with pytest.raises(ValueError):
        AttackReport("x", ("t",), (0,), (5,), {5: [[1.5]]})


def test_json_and_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    r = report("full", [3, 1, 2], rng)
    r.to_json(tmp_path / "r.json")
    from crossmodal_attack.evaluation import load_report
    for back in (load_report(tmp_path / "r.json"), (r.to_csv(tmp_path / "r.csv"), load_report(tmp_path / "r.csv"))[1]):
        assert back.seeds == r.seeds and back.targets == r.targets and back.fingerprint == "abc123"
        for k in r.ks:
            assert np.array_equal(back.pre[k], r.pre[k]) and np.array_equal(back.post[k], r.post[k])
        assert np.array_equal(back.ssim, r.ssim) and np.array_equal(back.objective, r.objective)
    pre_only = report("pre", [0], rng, post=False)
    pre_only.to_csv(tmp_path / "p.csv")
    assert AttackReport.from_csv(tmp_path / "p.csv").post is None


def test_multi_report_csv_and_table(tmp_path):
    rng = np.random.default_rng(2)
    reps = [report(name, [0, 1], rng) for name in ABLATIONS]
    write_reports_csv(reps, tmp_path / "all.csv")
    back = read_reports_csv(tmp_path / "all.csv")
    assert [b.label for b in back] == list(ABLATIONS)
    with pytest.raises(ValueError):
        AttackReport.from_csv(tmp_path / "all.csv")
    with pytest.raises(ValueError):
        write_reports_csv([reps[0], reps[0]], tmp_path / "dup.csv")
    write_table(reps, tmp_path / "t.csv")
    rows = read_table(tmp_path / "t.csv")
    assert [r["variant"] for r in rows] == ["full", "w/o A", "w/o B"]
    assert rows[0]["hr@10_post_mean"] == pytest.approx(reps[0].summary()["hr@10_post_mean"])


def test_merge_and_ablation_driver():
    rng = np.random.default_rng(3)
    pre = {k: np.full((1, 3), 0.1) for k in (5, 10, 20)}
    calls = []

    def variant(overrides, seed):
        calls.append((tuple(overrides.items()), seed))
        post = {k: rng.uniform(0, 1, (1, 3)) for k in (5, 10, 20)}
        return AttackReport("x", ("a", "b", "c"), (seed,), (5, 10, 20), pre, post)

    out = run_ablations(variant, [0, 1])
    assert list(out) == ["full", "w/o A", "w/o B"]
    assert all(r.seeds == (0, 1) for r in out.values())
    assert (("align_weight", 0.0),) in [c[0] for c in calls] and (("eta", 0.0),) in [c[0] for c in calls]
    assert all(np.array_equal(out["full"].pre[10], r.pre[10]) for r in out.values())
    with pytest.raises(ValueError):
        merge_reports([])


# -- evaluation against a brute-force oracle --------------------------------

@pytest.fixture(scope="module")
def tiny():
    ds = synth_dataset(10, 20, 0.3, 1.0, 5, image_size=8)
    enc = FeatureEncoder(d_f=8, epochs=2, seed=0).fit(ds.images.pixels)
    mf = train_victim("mf", ds.graph, seed=0, dim=8, epochs=5)
    vbpr = train_victim("vbpr", ds.graph, ds.images.pixels, enc, seed=0, dim=8, epochs=5)
    return ds, enc, (mf, vbpr)


def brute_hr(ds, enc, models, targets, adv_pixels, k, m):
    """Full re-ranking from raw factors: features recomputed, every item scored, two stages by hand."""
    mf, vb = models
    feats = enc.transform(ds.images.stack(vb.items_)).astype(np.float64)
    for t, px in zip(targets, adv_pixels):
        feats[vb.item_index(t)] = enc.transform(px[None])[0]
    f = vb.factors_
    gu, gi = f.gamma_u.detach().double().numpy(), f.gamma_i.detach().double().numpy()
    tu, W = f.theta_u.detach().double().numpy(), f.W.detach().double().numpy()
    mgu, mgi = mf.factors_.gamma_u.detach().double().numpy(), mf.factors_.gamma_i.detach().double().numpy()
    seen = vb.train_graph_.adjacency().toarray() > 0
    hits = np.zeros(len(targets))
    for u in range(len(vb.users_)):
        s1 = mgu[u] @ mgi.T
        s2 = gu[u] @ gi.T + tu[u] @ (feats @ W.T).T
        cand = [i for i in range(len(vb.items_)) if not seen[u, i]]
        short = sorted(cand, key=lambda i: (-s1[i], i))[:m]
        top = sorted(short, key=lambda i: (-s2[i], i))[:k]
        hits += [vb.item_index(t) in top for t in targets]
    return hits / len(vb.users_)


def test_noop_attack_is_exact(tiny):
    ds, _, models = tiny
    targets = ds.images.ids[:4]
    r = evaluate_attack(models, ds.images, targets, ds.images.subset(targets), ks=(1, 3, 5), shortlist_size=10)
    for k in r.ks:
        assert np.array_equal(r.pre[k], r.post[k])
    assert np.allclose(r.ssim, 1) and np.all(r.l2 == 0)


def test_matches_brute_force_oracle(tiny):
    ds, enc, models = tiny
    targets = [i for i in models[1].items_ if i in ds.images][:4]
    rng = np.random.default_rng(0)
    adv = np.clip(ds.images.stack(targets) + rng.normal(0, 0.3, (4, 8, 8, 3)), 0, 1).astype(np.float32)
    r = evaluate_attack(models, ds.images, targets, ItemImages(targets, adv, "adversarial"), ks=(1, 3, 5),
                        shortlist_size=10)
    for k in (1, 3, 5):
        clean = brute_hr(ds, enc, models, targets, ds.images.stack(targets), k, 10)
        assert np.allclose(r.pre[k][0], clean, atol=1e-12)
        assert np.allclose(r.post[k][0], brute_hr(ds, enc, models, targets, adv, k, 10), atol=1e-12)


def test_missing_adversarial_named(tiny):
    ds, _, models = tiny
    targets = ds.images.ids[:2]
    with pytest.raises(KeyError, match=targets[1]):
        evaluate_attack(models, ds.images, targets, ds.images.subset(targets[:1]), ks=(1,), shortlist_size=5)


def test_cross_domain_degenerate_matches_evaluate(tiny):
    ds, _, models = tiny
    targets = ds.images.ids[:3]

    class Shift:
        def transform(self, images, models=None):
            return ItemImages(images.ids, np.clip(images.pixels + 0.2, 0, 1), "adversarial")

    cd = cross_domain_eval(Shift(), models, ds.images, targets, None, ks=(1, 3), shortlist_size=10,
                           fingerprints=("A", "B"))
    direct = evaluate_attack(models, ds.images, targets, Shift().transform(ds.images.subset(targets)), ks=(1, 3),
                             shortlist_size=10)
    assert cd.fingerprint == "A->B" and cd.meta["source_fingerprint"] == "A"
    for k in (1, 3):
        assert np.array_equal(cd.post[k], direct.post[k])


# -- pixel baseline ---------------------------------------------------------

def linear_surrogate(seed=0):
    w = torch.as_tensor(np.random.default_rng(seed).normal(size=(3, 8, 8)))
    return lambda x: (torch.tanh(x * 3) * w).flatten(1).sum(1)


def test_pixel_baseline_contract():
    x = np.random.default_rng(1).uniform(size=(4, 8, 8, 3)).astype(np.float32)
    same, trace = pixel_baseline(linear_surrogate(), x, 0.0)
    assert np.array_equal(same, x) and len(trace.scores) == 1
    for eps in (1, 8, 32):
        adv, trace = pixel_baseline(linear_surrogate(), x, eps, steps=10)
        assert np.abs(adv.astype(np.float64) - x).max() <= eps / 255 + 1e-6
        assert adv.min() >= 0 and adv.max() <= 1
        assert np.all(np.diff(trace.scores) >= -1e-12)
        assert trace.scores[-1] > trace.scores[0]
    with pytest.raises(ValueError):
        pixel_baseline(linear_surrogate(), x, -1)


def test_pixel_baseline_calibration():
    x = np.random.default_rng(2).uniform(0.2, 0.8, size=(3, 8, 8, 3)).astype(np.float32)
    eps, adv, trace, d = calibrate_pixel_baseline(linear_surrogate(), x, 0.05, steps=5)
    assert abs(d - 0.05) < 0.02
    assert np.abs(adv - x).max() <= eps / 255 + 1e-6
