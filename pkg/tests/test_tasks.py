import numpy as np
import pytest

from refillkv.errors import ConfigError
from refillkv.tasks import RecallTask, markov_corpus, markov_sequences, selection_hits


def test_markov_is_seeded_and_in_range():
    a, b = markov_corpus(1, 500, 30), markov_corpus(1, 500, 30)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() < 30
    assert not np.array_equal(a, markov_corpus(2, 500, 30))


def test_markov_follows_sparse_transitions():
    s = markov_corpus(0, 5000, 20, branching=3)
    successors = {}
    for x, y in zip(s[:-1], s[1:]):
        successors.setdefault(int(x), set()).add(int(y))
    assert max(len(v) for v in successors.values()) <= 3


def test_markov_sequences_split_one_stream():
    seqs = markov_sequences(4, 3, 10, 16)
    np.testing.assert_array_equal(np.concatenate(seqs), markov_corpus(4, 30, 16))


def test_recall_example_structure():
    task = RecallTask()
    for ex in task.examples(0, 30):
        assert ex.context.size == task.context_len
        keys = task.key_of(ex.context)
        pos = np.flatnonzero(keys == ex.query[0])
        assert pos.size == 1 and pos[0] // task.interval == ex.group
        pair = ex.context[pos[0]]
        assert ex.answer[0] == task.n_keys + (pair - task.pair_base) % task.n_values
        per_group = [(keys[g * 8:(g + 1) * 8] >= 0).sum() for g in range(task.n_groups)]
        assert per_group == [task.pairs_per_group] * task.n_groups
        assert ex.context.max() < task.vocab_size - 2
        assert selection_hits(task, ex, [ex.group]) and not selection_hits(task, ex, [])


def test_recall_config_checks():
    with pytest.raises(ConfigError):
        RecallTask(n_keys=4, n_groups=4, pairs_per_group=2)
    with pytest.raises(ConfigError):
        RecallTask(interval=1, pairs_per_group=2)


def test_pretrain_item_masks():
    task = RecallTask()
    tokens, targets, weights, masks = task.pretrain_item(np.random.default_rng(0), 3, 2, True)
    n = task.context_len
    assert tokens.size == n + 6 and weights.sum() == 3
    assert np.all(targets[n::2] == tokens[n + 1::2])
    assert not masks[0][n:, :n].any() and masks[1][n:, :n].all()
    assert np.array_equal(masks[0][:n, :n], np.eye(n, dtype=bool))
    _, _, _, later = task.pretrain_item(np.random.default_rng(0), 3, 2, False)
    assert np.array_equal(later[0][:n, :n], np.tril(np.ones((n, n), bool)))
