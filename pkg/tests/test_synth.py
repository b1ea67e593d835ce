import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abnblip import rng as rngmod
from abnblip.corpus_io import CorpusError, read_corpus, read_volume, volume_bytes, write_corpus
from abnblip.synth import (
    BOS_BASE,
    DEC,
    EOS,
    SPECIALS,
    DataConfigError,
    Vocabulary,
    default_priors,
    generate_case,
    is_positive_finding,
    make_corpus,
    preprocess_volume,
    signature_mask,
    split_sizes,
)
from abnblip.taxonomy import N_ABN, NAMES, REGION_OF, REGIONS, name_tokens, region_members

SMALL = (16, 16, 8)


def test_taxonomy_regions_partition():
    assert N_ABN == 32 and len(REGIONS) == 7
    members = [region_members(r) for r in range(7)]
    assert all(members)
    assert sorted(sum(members, [])) == list(range(32))
    assert len(set(NAMES)) == 32
    assert all(0 <= REGION_OF[k] < 7 for k in range(32))


def test_names_are_distinct_keywords():
    phrases = [" ".join(name_tokens(k)) for k in range(32)]
    assert len(set(phrases)) == 32


def test_prior_zero_gives_background_and_negative_text():
    case = generate_case(3, np.zeros(32), SMALL)
    assert not case.labels.any()
    assert all(not is_positive_finding(f) for f in case.findings)
    # pure background + noise: mean close to the background level
    assert abs(float(case.volume.mean()) + 200.0) < 10.0


def test_prior_one_every_case_positive():
    rates = np.mean([generate_case(s, np.ones(32), SMALL).labels for s in range(200)], axis=0)
    assert np.all(rates == 1.0)


def test_same_seed_bitwise_identical():
    a = generate_case(11, default_priors())
    b = generate_case(11, default_priors())
    assert a.same_as(b)
    assert a.volume.tobytes() == b.volume.tobytes()


def test_findings_frame_and_label_consistency():
    for seed in range(30):
        case = generate_case(seed, default_priors(), SMALL)
        for k, f in enumerate(case.findings):
            assert f[0] == DEC and f[1] == f"BOS_{k}" and f[-1] == EOS
            assert is_positive_finding(f) == bool(case.labels[k])


def test_positive_case_contains_its_signature():
    prior = np.zeros(32)
    prior[9] = 1.0
    pos = generate_case(5, prior, noise=0.0)
    neg = generate_case(5, np.zeros(32), noise=0.0)
    diff = pos.volume - neg.volume
    assert np.abs(diff).max() > 0
    # the difference is confined to a bounded cell of the grid
    assert np.count_nonzero(diff) < 0.1 * diff.size


def test_signature_cells_region_contiguous():
    # mask extents live inside the volume for every abnormality and severity
    for k in range(32):
        for sev in range(3):
            m = signature_mask(k, sev, (32, 32, 20), (0, 0, 0))
            assert m.shape == (32, 32, 20) and m.any()


def test_extents_too_small_is_config_error():
    with pytest.raises(DataConfigError):
        generate_case(0, default_priors(), (8, 8, 4))
    with pytest.raises(DataConfigError):
        generate_case(0, np.full(31, 0.5))


def test_split_sizes_7_1_2_ratio():
    assert split_sizes(10, (0.7, 0.1, 0.2)) == (7, 1, 2)
    assert split_sizes(2000, (0.7, 0.1, 0.2)) == (1400, 200, 400)


@given(st.integers(10, 500))
def test_split_every_part_nonempty(n):
    sizes = split_sizes(n, (0.7, 0.1, 0.2))
    assert sum(sizes) == n and min(sizes) >= 1


def test_corpus_split_is_partition_and_vocab_roundtrip():
    corpus = make_corpus(40, 2, extents=SMALL)
    assert sorted(corpus.split) == sorted(["train"] * 28 + ["val"] * 4 + ["test"] * 8)
    idx = sum((corpus.indices(s) for s in ("train", "val", "test")), [])
    assert sorted(idx) == list(range(40))
    for case in corpus.cases:
        for f in case.findings:
            assert corpus.vocab.decode(corpus.vocab.encode(f)) == f


def test_vocabulary_layout():
    v = Vocabulary.closed()
    assert v.tokens[: len(SPECIALS)] == SPECIALS
    assert v.index["BOS_0"] == BOS_BASE
    assert 80 <= len(v) <= 120
    with pytest.raises(KeyError):
        v.encode(["not-a-word"])


def test_positive_rate_within_binomial_bound():
    # labels are the first draw of each case stream, so only they are needed here
    n = 2000
    priors = default_priors()
    labels = np.array(
        [np.random.default_rng(rngmod.derive_seed(0, "data", i)).random(32) < priors for i in range(n)]
    )
    sigma = np.sqrt(priors * (1 - priors) / n)
    assert np.all(np.abs(labels.mean(axis=0) - priors) <= 3 * sigma)
    # and the generator really uses that draw
    case = generate_case(rngmod.derive_seed(0, "data", 7), priors, SMALL)
    assert np.array_equal(case.labels, labels[7])


def test_preprocess_anchor_points():
    out = preprocess_volume(np.array([-1200.0, -1000.0, 0.0, 1000.0, 1500.0]))
    assert np.array_equal(out, [0.0, 0.0, 0.5, 1.0, 1.0])


@settings(max_examples=50)
@given(st.floats(-3000, 3000), st.floats(-3000, 3000))
def test_preprocess_monotone(a, b):
    lo, hi = sorted([a, b])
    pa, pb = preprocess_volume(np.array([lo, hi]))
    assert pa <= pb


def test_corpus_disk_roundtrip(tmp_path):
    corpus = make_corpus(12, 4, extents=SMALL)
    write_corpus(corpus, tmp_path)
    back = read_corpus(tmp_path)
    assert back.split == corpus.split and back.vocab == corpus.vocab
    for a, b in zip(corpus.cases, back.cases):
        assert a.same_as(b)


def test_corrupt_volume_rejected(tmp_path):
    vol = np.zeros((2, 3, 4), dtype=np.float32)
    p = tmp_path / "v.vol"
    p.write_bytes(volume_bytes(vol)[:-4])
    with pytest.raises(CorpusError):
        read_volume(p)
    with pytest.raises(CorpusError):
        read_corpus(tmp_path / "missing")
