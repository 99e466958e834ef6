import numpy as np
import pytest

from splitft.data import Dataset, batches, epoch_indices, gen_majority_task, load_csv, save_csv
from splitft.nn import ModelConfig


@pytest.fixture(scope="module")
def big(default_cfg_module):
    return gen_majority_task(10_000, default_cfg_module, 0)


@pytest.fixture(scope="module")
def default_cfg_module():
    return ModelConfig()


def test_deterministic(default_cfg):
    a, b = gen_majority_task(50, default_cfg, 4), gen_majority_task(50, default_cfg, 4)
    assert np.array_equal(a.sequences, b.sequences) and np.array_equal(a.labels, b.labels)
    c = gen_majority_task(50, default_cfg, 5)
    assert not np.array_equal(a.sequences, c.sequences)


def test_labels_follow_counts(big):
    c7 = (big.sequences == 7).sum(1)
    c9 = (big.sequences == 9).sum(1)
    assert np.all(c7 != c9)
    assert np.array_equal(big.labels, (c7 > c9).astype(np.int64))


def test_balance(big):
    assert 0.45 <= big.labels.mean() <= 0.55


def test_valid_ids(big, default_cfg_module):
    big.validate(default_cfg_module)
    assert big.sequences.shape == (10_000, default_cfg_module.seq_len)


def test_learnable_by_bag_of_tokens(big, default_cfg_module):
    from sklearn.linear_model import LogisticRegression

    counts = np.stack([np.bincount(s, minlength=default_cfg_module.vocab_size) for s in big.sequences])
    clf = LogisticRegression(max_iter=2000).fit(counts[:8000], big.labels[:8000])
    assert clf.score(counts[8000:], big.labels[8000:]) >= 0.95


def test_rejects_small_vocab():
    with pytest.raises(ValueError):
        gen_majority_task(10, ModelConfig(vocab_size=9), 0)
    with pytest.raises(ValueError):
        gen_majority_task(0, ModelConfig(), 0)


def test_batch_equal_to_size():
    idx = epoch_indices(12, 12, 0, epochs=1)
    assert len(idx) == 1 and sorted(idx[0]) == list(range(12))


def test_epochs_reproducible():
    a = epoch_indices(30, 7, 3, epochs=2)
    b = epoch_indices(30, 7, 3, epochs=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[5])  # second epoch reshuffled


@pytest.mark.parametrize("n,b", [(30, 7), (10, 10), (5, 8), (1, 3), (64, 32)])
def test_epoch_covers_dataset(n, b):
    per_epoch = -(-n // b)
    idx = epoch_indices(n, b, 1, epochs=2)
    assert len(idx) == 2 * per_epoch
    for e in range(2):
        chunk = idx[e * per_epoch : (e + 1) * per_epoch]
        assert all(len(x) == b for x in chunk)
        assert set(np.concatenate(chunk)) == set(range(n))


def test_batches_shapes(default_cfg):
    ds = gen_majority_task(20, default_cfg, 0)
    x, y = next(batches(ds, 8, 0))
    assert x.shape == (8, default_cfg.seq_len) and y.shape == (8,)
    with pytest.raises(ValueError):
        next(batches(ds, 0, 0))


def test_csv_round_trip(tmp_path, default_cfg):
    ds = gen_majority_task(25, default_cfg, 2)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    assert path.read_text().splitlines()[0].startswith("label,tok0,tok1")
    back = load_csv(path)
    assert np.array_equal(back.sequences, ds.sequences) and np.array_equal(back.labels, ds.labels)


def test_csv_rejects_ragged(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("1,2,3\n0,1\n")
    with pytest.raises(ValueError):
        load_csv(path)


def test_validate_catches_bad_ids(default_cfg):
    ds = Dataset(np.full((2, default_cfg.seq_len), default_cfg.vocab_size), np.zeros(2, np.int64))
    with pytest.raises(ValueError):
        ds.validate(default_cfg)
