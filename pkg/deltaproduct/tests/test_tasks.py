import math

import numpy as np
import pytest
import torch

from deltaproduct.config import BracketSamplerConfig, TaskSpec
from deltaproduct.errors import TaskGenerationError
from deltaproduct.groups import group_by_name
from deltaproduct.tasks import (
    IGNORE_INDEX,
    TaskInstance,
    acc_rand,
    collate,
    evaluate_expression,
    export_jsonl,
    gen_chomsky,
    gen_group_word,
    gen_modarith,
    gen_parity,
    generate,
    modarith_vocab,
    read_jsonl,
    scaled_accuracy,
    task_vocab,
    vocab_size,
    write_vocab,
)


def decode(instance, vocab):
    names = {i: name for name, i in vocab.items()}
    return [names[t] for t in instance.tokens]


def test_group_word_targets_are_prefix_products():
    spec = TaskSpec(group='S4')
    group = group_by_name('S4')
    for instance in gen_group_word(spec, seed=0, count=20, length=30):
        assert instance.tokens[0] == 24
        assert instance.targets[0] == IGNORE_INDEX
        assert instance.loss_mask == [False] + [True] * 30
        word = [group.elements[i] for i in instance.tokens[1:]]
        assert instance.targets[1:] == [group.index(y) for y in group.prefix_products(word)]


def test_group_word_tokens_are_roughly_uniform():
    spec = TaskSpec(group='S3')
    tokens = np.concatenate([x.tokens[1:] for x in gen_group_word(spec, seed=1, count=200, length=60)])
    counts = np.bincount(tokens, minlength=6)
    expected = len(tokens) / 6
    sigma = math.sqrt(len(tokens) * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - expected) < 5 * sigma)


def test_generators_are_deterministic():
    spec = TaskSpec(family='modarith_brackets', modulus=7)
    a = generate(spec, seed=9, count=10, length_range=(5, 40))
    b = generate(spec, seed=9, count=10, length_range=(5, 40))
    c = generate(spec, seed=10, count=10, length_range=(5, 40))
    assert a == b
    assert a != c


def test_group_words_with_length_range():
    instances = generate(TaskSpec(group='A5'), seed=0, count=50, length_range=(3, 9))
    assert {x.length for x in instances} <= set(range(3, 10))
    assert len({x.length for x in instances}) > 1


def test_parity_targets():
    instances = gen_parity(seed=2, count=100, length_range=(1, 30))
    for x in instances:
        assert x.tokens[0] == 2
        bits = x.tokens[1:]
        assert x.targets[1:] == [int(v) for v in np.cumsum(bits) % 2]
        assert 1 <= x.length <= 30


def test_parity_bits_are_balanced():
    bits = np.concatenate([x.tokens[1:] for x in gen_parity(seed=3, count=100, length_range=(50, 50))])
    assert abs(bits.mean() - 0.5) < 5 * math.sqrt(0.25 / len(bits))


@pytest.mark.parametrize(
    'expression, modulus, expected',
    [
        ('2+1-2*2-3', 5, 1),
        ('((1-(-2))+((4)+3))', 5, 0),
        ('3*4*2', 5, 4),
        ('(-3)', 7, 4),
        ('4', 5, 4),
    ],
)
def test_evaluate_expression(expression, modulus, expected):
    assert evaluate_expression(list(expression), modulus) == expected


@pytest.mark.parametrize('expression', ['2+', '(1+2', '1+2)', '*3', ''])
def test_evaluate_expression_rejects_malformed(expression):
    with pytest.raises(TaskGenerationError):
        evaluate_expression(list(expression), 5)


@pytest.mark.parametrize('family', ['modarith_nobrackets', 'modarith_brackets'])
def test_modarith_targets_match_python_arithmetic(family):
    spec = TaskSpec(family=family, modulus=5)
    vocab = task_vocab(spec)
    for x in generate(spec, seed=4, count=200, length_range=(3, 40)):
        symbols = decode(x, vocab)
        assert symbols[0] == 'BOS'
        eq = symbols.index('=')
        expression = ''.join(symbols[1:eq])
        assert x.targets[eq + 1] == eval(expression) % 5
        assert x.loss_mask.count(True) == 1
        assert x.loss_mask[eq + 1]
        assert set(symbols[eq + 1 :]) == {'PAD'}


def test_modarith_lengths_and_budget():
    spec = TaskSpec(family='modarith_nobrackets', modulus=5)
    for x in gen_modarith(spec, seed=5, count=100, length_range=(3, 12), brackets=False):
        assert 3 <= x.length <= 12
        eq = x.tokens.index(modarith_vocab(5, False)['='])
        assert eq - 1 <= x.length - 2


def test_modarith_rejects_short_lengths():
    spec = TaskSpec(family='modarith_nobrackets', modulus=5)
    with pytest.raises(TaskGenerationError):
        gen_modarith(spec, seed=0, count=3, length_range=(2, 2), brackets=False)


def test_bracket_sampler_without_brackets_is_flat_digit():
    spec = TaskSpec(
        family='modarith_brackets',
        modulus=5,
        brackets=BracketSamplerConfig(p_binary=0.0, p_unary=0.0, p_paren=0.0),
    )
    vocab = task_vocab(spec)
    for x in generate(spec, seed=6, count=20, length_range=(10, 10)):
        symbols = decode(x, vocab)
        assert symbols.index('=') == 2
        assert symbols[1].isdigit()


def test_operator_weights_restrict_operators():
    spec = TaskSpec(family='modarith_nobrackets', modulus=5, operator_weights={'+': 1.0, '-': 0.0, '*': 0.0})
    vocab = task_vocab(spec)
    symbols = [s for x in generate(spec, seed=7, count=20, length_range=(20, 20)) for s in decode(x, vocab)]
    assert '+' in symbols
    assert '-' not in symbols
    assert '*' not in symbols


def test_vocab_sizes():
    assert vocab_size(TaskSpec(group='S3')) == 7
    assert vocab_size(TaskSpec(family='parity')) == 3
    assert vocab_size(TaskSpec(family='modarith_nobrackets', modulus=5)) == 11
    assert vocab_size(TaskSpec(family='modarith_brackets', modulus=5)) == 13


def test_chance_levels():
    assert acc_rand(TaskSpec(group='S5')) == pytest.approx(1 / 120)
    assert acc_rand(TaskSpec(family='parity')) == 0.5
    assert acc_rand(TaskSpec(family='modarith_brackets', modulus=7)) == pytest.approx(1 / 7)


def test_scaled_accuracy():
    assert scaled_accuracy(0.6, 0.2) == pytest.approx(0.5)
    assert scaled_accuracy(1.0, 0.5) == 1.0
    assert scaled_accuracy(0.1, 0.2) == 0.0
    with pytest.raises(TaskGenerationError):
        scaled_accuracy(0.5, 1.0)


def test_instance_rejects_scored_ignore_mismatch():
    with pytest.raises(TaskGenerationError):
        TaskInstance(tokens=[2, 1], targets=[0, 1], loss_mask=[False, True])
    with pytest.raises(TaskGenerationError):
        TaskInstance(tokens=[2, 1], targets=[IGNORE_INDEX], loss_mask=[False, True])


def test_collate_pads_with_ignored_targets():
    instances = gen_parity(seed=0, count=4, length_range=(2, 6))
    tokens, targets = collate(instances, pad_id=2)
    width = max(len(x) for x in instances)
    assert tokens.shape == targets.shape == (4, width)
    for row, x in enumerate(instances):
        assert tokens[row, len(x) :].eq(2).all()
        assert targets[row, len(x) :].eq(IGNORE_INDEX).all()
        assert targets[row, : len(x)].tolist() == x.targets
    assert tokens.dtype == torch.long


def test_jsonl_export(tmp_path):
    spec = TaskSpec(family='modarith_brackets', modulus=5)
    instances = generate(spec, seed=8, count=5, length_range=(4, 20))
    path = export_jsonl(instances, tmp_path / 'data' / 'eval.jsonl')
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 5
    assert read_jsonl(path) == instances


def test_write_vocab(tmp_path):
    path = write_vocab(TaskSpec(family='parity'), tmp_path / 'vocab.json')
    assert path.read_text().count('BOS') == 1


def test_gen_chomsky_dispatches_on_family():
    parity = gen_chomsky(TaskSpec(family='parity'), seed=5, count=3, length_range=(4, 9))
    assert [i.tokens for i in parity] == [i.tokens for i in gen_parity(5, 3, (4, 9))]
    spec = TaskSpec(family='modarith_brackets', modulus=5)
    expressions = gen_chomsky(spec, seed=5, count=3, length_range=(5, 12))
    assert [i.tokens for i in expressions] == [i.tokens for i in gen_modarith(spec, 5, 3, (5, 12), brackets=True)]
    with pytest.raises(TaskGenerationError):
        gen_chomsky(TaskSpec(group='S3'), seed=5, count=3, length_range=(4, 9))
