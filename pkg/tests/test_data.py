from collections import Counter

import numpy as np
import pytest

from feddap_sim.data import (
    DataError,
    DomainSpec,
    Samples,
    default_domain_specs,
    generate,
    load_csv,
    make_outlier_client,
    partition,
    train_test_split,
    write_csv,
)


def identity_specs(C=3, k=4, D=2, sigma=0.0):
    means = np.arange(C * k, dtype=float).reshape(C, k)
    return [DomainSpec(d, means, np.eye(k), np.zeros(k), sigma) for d in range(D)]


def multiset(s: Samples):
    return Counter((tuple(x.tolist()), y, d) for x, y, d in s)


def test_noiseless_identity_reproduces_means():
    specs = identity_specs()
    s = generate(specs, 5, seed=1)
    assert len(s) == 2 * 3 * 5
    for x, y, d in s:
        np.testing.assert_array_equal(x, specs[d].class_means[y])


def test_generate_is_deterministic():
    specs = default_domain_specs(3, 4, 6, seed=7)
    assert generate(specs, 20, seed=3) == generate(specs, 20, seed=3)
    assert not generate(specs, 20, seed=3) == generate(specs, 20, seed=4)


def test_generate_rejects_inconsistent_classes():
    a = identity_specs(C=3)[0]
    b = DomainSpec(1, np.zeros((4, 4)), np.eye(4), np.zeros(4), 1.0)
    with pytest.raises(DataError):
        generate([a, b], 2, seed=0)


def test_domainspec_validation():
    with pytest.raises(DataError):
        DomainSpec(0, np.zeros((1, 3)), np.eye(3), np.zeros(3), 1.0)
    with pytest.raises(DataError):
        DomainSpec(0, np.zeros((2, 3)), np.eye(2), np.zeros(3), 1.0)


def test_sample_means_converge_to_analytic_mean():
    specs = default_domain_specs(2, 2, 3, seed=11, noise_sigma=0.8)
    n = 10000
    s = generate(specs, n, seed=5)
    for spec in specs:
        # per-coordinate std of A(mean + eps) + b is sigma * row norm of A
        sd = spec.noise_sigma * np.linalg.norm(spec.transform, axis=1)
        for c in range(2):
            rows = (s.y == c) & (s.d == spec.domain_id)
            emp = s.X[rows].mean(axis=0)
            assert np.all(np.abs(emp - spec.analytic_mean(c)) < 5 * sd / np.sqrt(n))


def test_domain_shift_is_real():
    specs = default_domain_specs(3, 3, 5, seed=2)
    for c in range(3):
        m = [spec.analytic_mean(c) for spec in specs]
        assert np.linalg.norm(m[0] - m[1]) > 1e-3
        assert np.linalg.norm(m[1] - m[2]) > 1e-3


def test_partition_single_client_keeps_domain():
    s = generate(default_domain_specs(2, 3, 4, seed=0), 10, seed=0)
    clients = partition(s, {0: 1, 1: 1}, seed=0)
    assert [c.domain_id for c in clients] == [0, 1]
    for c in clients:
        assert c.samples == s.where_domain(c.domain_id)


def test_partition_conserves_and_balances():
    s = generate(default_domain_specs(2, 3, 4, seed=0), 200, seed=0)  # 600 per domain
    clients = partition(s, {0: 3, 1: 2}, seed=9)
    union = Samples.concat([c.samples for c in clients])
    assert multiset(union) == multiset(s)
    sizes = {d: [c.n for c in clients if c.domain_id == d] for d in (0, 1)}
    assert all(abs(n - 200) <= 1 for n in sizes[0])
    assert all(abs(n - 300) <= 1 for n in sizes[1])
    for c in clients:
        assert np.all(c.class_counts(3) >= 1)


def test_partition_rebalances_missing_classes():
    # 3 samples per class, 3 clients: random split often leaves a client without a class
    s = generate(identity_specs(C=3, D=1, sigma=1.0), 3, seed=0)
    for seed in range(20):
        clients = partition(s, {0: 3}, seed=seed)
        assert multiset(Samples.concat([c.samples for c in clients])) == multiset(s)
        for c in clients:
            assert set(c.samples.y.tolist()) == {0, 1, 2}


def test_partition_impossible_class_coverage():
    s = generate(identity_specs(C=3, D=1, sigma=1.0), 2, seed=0)
    with pytest.raises(DataError):
        partition(s, {0: 3}, seed=0)


def test_partition_errors():
    s = generate(identity_specs(D=1), 3, seed=0)
    with pytest.raises(DataError):
        partition(s, {5: 1}, seed=0)
    with pytest.raises(DataError):
        partition(s, {0: 0}, seed=0)


def test_train_test_split_strata():
    s = generate(default_domain_specs(3, 4, 3, seed=1), 37, seed=2)
    train, test = train_test_split(s, 0.3, seed=4)
    assert len(train) + len(test) == len(s)
    for c in range(4):
        for d in range(3):
            k = int(np.sum((test.y == c) & (test.d == d)))
            assert abs(k - round(0.3 * 37)) <= 1
    again = train_test_split(s, 0.3, seed=4)
    assert again[0] == train and again[1] == test
    _, empty = train_test_split(s, 0.0, seed=4)
    assert len(empty) == 0


def test_csv_round_trip(tmp_path):
    s = generate(default_domain_specs(2, 3, 4, seed=0), 5, seed=0)
    path = tmp_path / "d.csv"
    write_csv(s, path)
    assert load_csv(path) == s


def test_csv_header_only(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,x1,y,d\n")
    assert len(load_csv(path)) == 0


def test_csv_bad_row_names_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,x1,y,d\n1.0,2.0,0,0\n1.0,abc,1,0\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(path)


def test_outlier_client_is_noisier():
    spec = default_domain_specs(1, 3, 4, seed=0, noise_sigma=0.5)[0]
    calm = make_outlier_client(spec, 500, 1.0, client_id=0, seed=0)
    loud = make_outlier_client(spec, 500, 5.0, client_id=1, seed=0)
    spread = lambda c: np.mean([c.samples.X[c.samples.y == k].std(axis=0).mean() for k in range(3)])
    assert spread(loud) / spread(calm) == pytest.approx(5.0, rel=0.15)
    assert loud.domain_id == 0 and np.all(loud.class_counts(3) == 500)
