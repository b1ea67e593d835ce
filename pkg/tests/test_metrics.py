import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abnblip.metrics import (
    bleu,
    ce_from_labels,
    ce_metrics,
    classification_metrics,
    extract_labels,
    lcs_length,
    meteor_simplified,
    nlg_scores,
    read_metrics_tsv,
    roc_auc,
    rouge,
    sentence_labels,
    write_metrics,
)
from abnblip.synth import detokenize, finding_tokens
from abnblip.taxonomy import N_ABN, REGIONS, region_members

WORDS = list("abcdef")


# ------------------------------------------------------------------ oracles


def auc_pair_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            wins += 1 if p > q else Fraction(1, 2) if p == q else 0
    return float(wins / (len(pos) * len(neg)))


def count_ngrams(tokens, n):
    out = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu_oracle(cand, ref, n=4):
    if not cand:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        c, r = count_ngrams(cand, order), count_ngrams(ref, order)
        total = sum(c.values())
        match = 0
        for g, v in c.items():
            match += min(v, r.get(g, 0))
        if total == 0 or match == 0:
            return 0.0
        log_sum += math.log(match / total)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / n)


def lcs_dp_oracle(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l_oracle(c, r):
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    lcs = lcs_dp_oracle(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def rand_seq(rng, lo=0, hi=12):
    return [WORDS[i] for i in rng.integers(0, len(WORDS), size=rng.integers(lo, hi + 1))]


# ------------------------------------------------------------------ AUC


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1], [1, 0, 0]) == (1.0, False)
    assert roc_auc([0.5, 0.5], [1, 0]) == (0.5, False)
    assert roc_auc([0.1, 0.2], [1, 1]) == (0.5, True)


def test_auc_matches_pair_oracle_50_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P = np.round(rng.random((20, 32)), 1)  # coarse grid forces ties
        Y = rng.random((20, 32)) < 0.4
        for k in range(32):
            if Y[:, k].all() or not Y[:, k].any():
                continue
            assert roc_auc(P[:, k], Y[:, k])[0] == auc_pair_oracle(P[:, k], Y[:, k])


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=15)
    y = np.arange(15) % 3 == 0
    a = roc_auc(s, y)[0]
    assert roc_auc(np.exp(s), y)[0] == a
    assert roc_auc(3.0 * s + 2.0, y)[0] == a


def test_classification_perfect_scores():
    Y = np.random.default_rng(1).random((12, 32)) < 0.5
    Y[0], Y[1] = True, False
    m = classification_metrics(Y.astype(float), Y)
    assert m.macro["acc"] == m.macro["sen"] == m.macro["spe"] == 1.0


def test_region_rows_average_members():
    rng = np.random.default_rng(2)
    P, Y = rng.random((30, 32)), rng.random((30, 32)) < 0.5
    m = classification_metrics(P, Y)
    for r, name in enumerate(REGIONS):
        for f in ("auc", "sen", "f1"):
            expect = np.mean([m.per_label[k][f] for k in region_members(r)])
            assert m.per_region[name][f] == pytest.approx(expect, abs=1e-15)
    pooled = classification_metrics(P, Y, pooled=True)
    assert set(pooled.per_region) == set(REGIONS)
    flat = m.flat()
    assert "cls.macro.auc" in flat and "cls.abn.31.f1" in flat and "cls.degenerate_auc" in flat


def test_classification_shape_error():
    with pytest.raises(ValueError):
        classification_metrics(np.zeros((3, 32)), np.zeros((3, 31)))


# ------------------------------------------------------------------ BLEU / ROUGE / METEOR


def test_bleu_examples():
    assert bleu(list("abcd"), list("abcd")) == 1.0
    assert bleu(list("abc"), list("abd"), n=1) == pytest.approx(2 / 3, abs=1e-15)
    short = bleu(list("abcd"), list("abcdef"))
    assert 0 < short < 1
    assert bleu([], list("ab")) == 0.0


def test_bleu_matches_counting_oracle_50_instances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c, r = rand_seq(rng, 1), rand_seq(rng, 1)
        for n in (1, 2, 4):
            assert bleu(c, r, n) == bleu_oracle(c, r, n)


def test_rouge_examples():
    assert rouge(list("abcd"), list("abcd"), "1") == rouge(list("abcd"), list("abcd"), "L") == 1.0
    assert rouge(list("abcd"), list("acbd"), "L") == 0.75
    assert rouge(list("ab"), list("cd"), "L") == rouge(list("ab"), list("cd"), "1") == 0.0


def test_rouge_l_matches_dp_oracle_50_instances():
    rng = np.random.default_rng(4)
    for _ in range(50):
        c, r = rand_seq(rng), rand_seq(rng)
        assert lcs_length(c, r) == lcs_dp_oracle(c, r)
        assert rouge(c, r, "L") == rouge_l_oracle(c, r)


def test_meteor_examples():
    assert meteor_simplified(["a"], ["a"]) == 0.5
    m = 5
    assert meteor_simplified(list("abcde"), list("abcde")) == pytest.approx(1 - 0.5 / m**3, abs=1e-15)
    assert meteor_simplified(list("ab"), list("cd")) == 0.0


def test_meteor_fragmentation_closed_form():
    # "a b c d" vs "c d a b": two chunks of two, P = R = 1
    assert meteor_simplified(list("abcd"), list("cdab")) == pytest.approx(1 - 0.5 * (2 / 4) ** 3)


@settings(max_examples=60)
@given(st.lists(st.sampled_from(WORDS), max_size=10), st.lists(st.sampled_from(WORDS), max_size=10))
def test_text_scores_bounded(c, r):
    for v in nlg_scores(c, r).values():
        assert 0.0 <= v <= 1.0 + 1e-12
    if c:
        assert rouge(c, c) == 1.0
    # unsmoothed BLEU-4 needs at least one 4-gram
    if len(c) >= 4:
        assert bleu(c, c) == pytest.approx(1.0)


# ------------------------------------------------------------------ clinical efficacy


def test_ce_hand_example():
    Y = np.zeros((1, N_ABN), dtype=bool)
    Y[0, 0] = True
    text = "Acute pulmonary embolism is present. Moderate pleural effusion is seen."
    s = ce_metrics([text], Y)
    assert s.precision == 0.5 and s.recall == 1.0 and s.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_ce_longest_keyword_wins():
    labels = sentence_labels("acute pulmonary embolism is seen")
    assert labels == {0: True}


@pytest.mark.parametrize("cue", ["no", "without", "negative for"])
def test_ce_negation_cues(cue):
    assert not extract_labels(f"{cue} pleural effusion.").any()
    assert extract_labels(f"pleural effusion, {cue} pneumothorax.")[17]


def test_ce_rendered_references_are_perfect():
    rng = np.random.default_rng(5)
    texts, Y = [], rng.random((6, N_ABN)) < 0.3
    for y in Y:
        sev = rng.integers(0, 3, size=N_ABN)
        texts.append("\n".join(detokenize(finding_tokens(k, int(sev[k]) if y[k] else None)) + "." for k in range(N_ABN)))
    s = ce_metrics(texts, Y)
    assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)


def test_ce_all_negative_degenerate():
    s = ce_from_labels(np.zeros((3, N_ABN)), np.zeros((3, N_ABN)))
    assert (s.precision, s.recall, s.f1, s.degenerate) == (1.0, 1.0, 1.0, True)


def test_ce_sentence_order_invariant():
    a = "Mild emphysema is seen. No pneumothorax. Cardiomegaly is present."
    b = "Cardiomegaly is present. Mild emphysema is seen. No pneumothorax."
    assert np.array_equal(extract_labels(a), extract_labels(b))


def test_ce_skips_header_lines():
    assert not extract_labels("# REPORT case-emphysema\n## Lungs and Airways\nno emphysema.").any()


# ------------------------------------------------------------------ output


def test_write_metrics_roundtrip(tmp_path):
    vals = {"b": 0.1 + 0.2, "a": 1.0}
    write_metrics(vals, tmp_path / "m.tsv", tmp_path / "m.json")
    assert read_metrics_tsv(tmp_path / "m.tsv") == vals
    assert list(json.loads((tmp_path / "m.json").read_text())) == ["a", "b"]
