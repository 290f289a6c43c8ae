import io

import numpy as np
import pytest

from robustnet import attacks, data, nn, training

SPECS = (nn.Dense(8, 12), nn.Relu(), nn.Dense(12, 4))
SHAPE = (8,)


@pytest.fixture(scope="module")
def trained():
    ds = data.synth_blobs(60, 4, 8, spread=0.15, seed=31)
    train, test = data.split_shuffle(ds, 0.75, seed=2)
    cfg = training.TrainConfig(epochs=12, batch_size=16, lr=0.3, momentum=0.9, seed=4)
    net, _ = training.standard_train_loop(SPECS, SHAPE, train, test, cfg)
    return net, test


@pytest.fixture(scope="module")
def adv_set(trained):
    net, test = trained
    return attacks.build_adversarial_set(
        net, test, ["l1", "l2", "linf"],
        radii={"linf": 0.2, "l2": 0.8, "l1": 1.0},
        pool_size=len(test), seed=5, source_id=data.fingerprint(net))


def test_evaluate_basics(trained):
    net, test = trained
    acc = attacks.evaluate(net, test)
    assert 0.5 < acc <= 1.0
    # permutation invariance
    perm = np.random.default_rng(0).permutation(len(test))
    assert attacks.evaluate(net, test.subset(perm)) == pytest.approx(acc)
    # single correctly classified example
    for i in range(len(test)):
        if nn.predict(net, test.x[i]) == test.y[i]:
            assert attacks.evaluate(net, test.subset([i])) == 1.0
            break
    with pytest.raises(ValueError, match="empty"):
        attacks.evaluate(net, test.head(0))


def test_evaluate_workers_match_serial(trained):
    net, test = trained
    assert attacks.evaluate(net, test, workers=3) == attacks.evaluate(net, test)


def test_generating_net_scores_zero_on_own_set(trained, adv_set):
    net, test = trained
    assert len(adv_set) > 0
    ds = attacks.adversarial_dataset(adv_set, net.input_shape, test.num_classes)
    assert attacks.evaluate(net, ds) == 0.0


def test_every_record_recheckable(trained, adv_set):
    net, test = trained
    assert attacks.validate_adversarial_set(adv_set, net, test) == []


def test_records_sorted_and_provenance(trained, adv_set):
    net, _ = trained
    idx = [(r.origin_index, attacks.FAMILY_CODES[r.family]) for r in adv_set.records]
    assert idx == sorted(idx)
    assert adv_set.source_id == data.fingerprint(net)


def test_tiny_radius_may_yield_empty_set(trained):
    net, test = trained
    rnd = nn.init_params(SPECS, SHAPE, seed=999)  # untrained net
    adv = attacks.build_adversarial_set(rnd, test, ["linf"], {"linf": 1e-9},
                                        pool_size=50, seed=6)
    assert len(adv) >= 0  # empty is a valid outcome
    for rec in adv.records:
        assert rec.family == "linf"


def test_round_trip_preserves_everything(trained, adv_set, tmp_path):
    net, test = trained
    path = tmp_path / "set.advs"
    attacks.save_adversarial_set(adv_set, path)
    loaded = attacks.load_adversarial_set(path)
    assert len(loaded) == len(adv_set)
    for a, b in zip(adv_set.records, loaded.records):
        assert (a.origin_index, a.true_label, a.family) == (b.origin_index, b.true_label, b.family)
        assert a.radius == pytest.approx(b.radius, rel=1e-6)
        np.testing.assert_array_equal(a.example, b.example)
    # invariants still hold against the generating checkpoint
    assert attacks.validate_adversarial_set(loaded, net, test) == []


def test_advs_file_rejects_corruption(adv_set, tmp_path):
    path = tmp_path / "set.advs"
    attacks.save_adversarial_set(adv_set, path)
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.advs"
    truncated.write_bytes(blob[:-3])
    with pytest.raises(attacks.AdvSetError, match="truncated|trailing"):
        attacks.load_adversarial_set(truncated)
    bad_magic = tmp_path / "magic.advs"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(attacks.AdvSetError):
        attacks.load_adversarial_set(bad_magic)


def test_empty_set_round_trips(tmp_path):
    path = tmp_path / "empty.advs"
    attacks.save_adversarial_set(attacks.AdversarialSet([]), path)
    assert len(attacks.load_adversarial_set(path)) == 0


def test_cross_evaluate_consistency(trained, adv_set):
    net, test = trained
    other = nn.init_params(SPECS, SHAPE, seed=77)
    rows = attacks.cross_evaluate([("gen", net), ("rand", other)], adv_set, test)
    assert rows[0].adv_acc == 0.0  # generating net, by construction
    assert rows[0].clean_acc == pytest.approx(attacks.evaluate(net, test))
    assert rows[1].clean_acc == pytest.approx(attacks.evaluate(other, test))
    buf = io.StringIO()
    attacks.write_cross_eval_csv(rows, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "net,clean_acc,adv_acc"
    assert len(lines) == 3


def test_sweep_epsilon_zero_equals_clean(trained):
    net, test = trained
    report = attacks.epsilon_sweep([("net", net)], test, [0.0, 0.3])
    clean = attacks.evaluate(net, test)
    assert report.rows[0].accuracy == pytest.approx(clean)
    assert report.rows[-1].accuracy <= report.rows[0].accuracy
    assert all(r.n == len(test) for r in report.rows)


def test_sweep_requires_increasing_eps(trained):
    net, test = trained
    with pytest.raises(ValueError):
        attacks.epsilon_sweep([("net", net)], test, [0.2, 0.1])
    with pytest.raises(ValueError):
        attacks.epsilon_sweep([("net", net)], test, [])


def test_sweep_deterministic_and_csv(trained):
    net, test = trained
    subset = test.subset(attacks.candidate_pool(len(test), 20, seed=9))
    a = attacks.epsilon_sweep([("net", net)], subset, [0.1, 0.2])
    b = attacks.epsilon_sweep([("net", net)], subset, [0.1, 0.2])
    assert [(r.epsilon, r.accuracy) for r in a.rows] == [(r.epsilon, r.accuracy) for r in b.rows]
    buf = io.StringIO()
    a.to_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "net,epsilon,accuracy,n"
    assert len(lines) == 3


def test_single_pixel_records(trained):
    net, test = trained
    hits = attacks.single_pixel_report(net, test, r=1.0, pool_size=len(test), seed=3)
    rerun = attacks.single_pixel_report(net, test, r=1.0, pool_size=len(test), seed=3)
    assert [(h.origin_index, h.pixel_flat) for h in hits] == \
           [(h.origin_index, h.pixel_flat) for h in rerun]
    for h in hits:
        x = test.x[h.origin_index]
        grads = nn.input_gradients(net, x[None], test.y[h.origin_index][None])
        spec_step = np.zeros_like(x)
        assert h.new_label != h.old_label
        assert h.old_label == test.y[h.origin_index]
        # exactly one coordinate differs
        from robustnet import perturb
        adv = perturb.apply_steps(x[None], grads, perturb.UncertaintySpec("l1", 1.0))[0]
        assert int(np.sum(adv != x)) == 1
        assert np.flatnonzero(adv != x)[0] == h.pixel_flat


def test_single_pixel_rejects_bad_radius(trained):
    net, test = trained
    with pytest.raises(ValueError):
        attacks.single_pixel_report(net, test, r=0.0)


def test_candidate_pool_sorted_subset():
    pool = attacks.candidate_pool(100, 10, seed=4)
    assert len(pool) == 10 and np.all(np.diff(pool) > 0)
    assert np.array_equal(attacks.candidate_pool(5, 10, seed=4), np.arange(5))
