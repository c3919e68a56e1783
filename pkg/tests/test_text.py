import itertools

import numpy as np
import pytest

from scenemotion.text import BOS, CLASS_NAMES, EOS, PAD, UNK, FrozenTextEncoder, Vocabulary

VOCAB = Vocabulary()


def test_tokenize_example():
    ids, n = VOCAB.tokenize("walk to the bed")
    want = [BOS, VOCAB.ids["walk"], VOCAB.ids["to"], VOCAB.ids["the"], VOCAB.ids["bed"], EOS]
    assert n == 6 and ids[:6].tolist() == want and np.all(ids[6:] == PAD) and len(ids) == 16


def test_detokenize_roundtrip():
    text = "sit on the chair that is closest to the table"
    assert VOCAB.detokenize(VOCAB.tokenize(text)[0]) == text


def test_unknown_word():
    ids, _ = VOCAB.tokenize("walk to the spaceship")
    assert UNK in ids.tolist()


def test_tokenize_width_guard():
    with pytest.raises(ValueError):
        VOCAB.tokenize("walk", width=1)


def test_encode_equals_class_embedding():
    enc = FrozenTextEncoder(VOCAB, 64)
    assert np.array_equal(enc.encode("chair"), enc.class_embedding("chair"))
    assert np.linalg.norm(enc.class_embedding("sofa")) == pytest.approx(1.0)


def test_encode_ignores_padding():
    enc = FrozenTextEncoder(VOCAB, 64)
    assert np.array_equal(enc.encode("walk to the bed", 10), enc.encode("walk to the bed", 30))


def test_class_embeddings_near_orthogonal():
    m = FrozenTextEncoder(VOCAB, 64).class_matrix()
    for i, j in itertools.combinations(range(len(CLASS_NAMES)), 2):
        assert abs(m[i] @ m[j]) < 0.4


def test_table_stable_per_seed():
    a = FrozenTextEncoder(VOCAB, 64, seed=3).table.data
    b = FrozenTextEncoder(VOCAB, 64, seed=3).table.data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, FrozenTextEncoder(VOCAB, 64, seed=4).table.data)


def test_argmax_recovers_class_of_clean_feature():
    enc = FrozenTextEncoder(VOCAB, 64)
    m = enc.class_matrix()
    for i, name in enumerate(CLASS_NAMES):
        assert int(np.argmax(m @ enc.class_embedding(name))) == i


def test_unknown_class_and_empty_text():
    enc = FrozenTextEncoder(VOCAB, 64)
    with pytest.raises(KeyError):
        enc.class_embedding("spaceship")
    with pytest.raises(ValueError):
        enc.encode_text(np.array([BOS, EOS, PAD]))


def test_frozen_by_default():
    assert not FrozenTextEncoder(VOCAB).trainable
    assert FrozenTextEncoder(VOCAB, trainable=True).trainable
