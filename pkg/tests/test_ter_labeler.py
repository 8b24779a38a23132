import itertools

import pytest

from tqe.ter_labeler import (
    BAD,
    DEL,
    INS,
    MATCH,
    OK,
    SUB,
    align,
    gap_tags,
    hter,
    label,
    script_cost,
    word_tags,
)


def brute_force_cost(m, t):
    """Exhaustive minimal edit cost: enumerate every monotone pairing of MT
    positions with post-edit positions; unmatched positions cost one
    deletion/insertion each, mismatched pairs one substitution."""
    best = len(m) + len(t)
    for k in range(0, min(len(m), len(t)) + 1):
        for mi in itertools.combinations(range(len(m)), k):
            for tj in itertools.combinations(range(len(t)), k):
                subs = sum(1 for a, b in zip(mi, tj) if m[a] != t[b])
                cost = subs + (len(m) - k) + (len(t) - k)
                if cost < best:
                    best = cost
    return best


def test_align_identity():
    script = align(list("abc"), list("abc"))
    assert [op.kind for op in script] == [MATCH, MATCH, MATCH]
    assert script_cost(script) == 0


def test_align_single_substitution():
    script = align(list("axc"), list("abc"))
    assert [op.kind for op in script] == [MATCH, SUB, MATCH]
    assert script_cost(script) == 1


def test_align_monotone_and_complete():
    script = align(list("axbzz"), list("aybc"))
    mt_seen = [op.i for op in script if op.i >= 0]
    pe_seen = [op.j for op in script if op.j >= 0]
    assert mt_seen == list(range(5))
    assert pe_seen == list(range(4))


def test_align_matches_brute_force_small():
    # random-ish exhaustive slice: all pairs up to length 3 over two symbols
    seqs = [tuple(s) for n in range(4) for s in itertools.product("ab", repeat=n)]
    for m in seqs:
        for t in seqs:
            assert script_cost(align(m, t)) == brute_force_cost(m, t), (m, t)


def test_align_deterministic_tiebreak():
    a = align(list("ab"), list("ba"))
    b = align(list("ab"), list("ba"))
    assert a == b
    # equal-cost alternatives exist; the rule prefers the diagonal
    assert [op.kind for op in a] == [SUB, SUB]


def test_hter_zero_cost():
    assert hter(align("abc", "abc"), 3) == 0.0


def test_hter_single_edit_over_three():
    assert hter(align(list("axc"), list("abc")), 3) == pytest.approx(1 / 3)


def test_hter_clipped_at_one():
    script = align(list("abcde"), list("x"))
    assert script_cost(script) == 5
    assert hter(script, 1) == 1.0


def test_hter_empty_reference_nonempty_mt():
    script = align(list("ab"), [])
    assert hter(script, 0) == 1.0


def test_hter_both_empty():
    assert hter(align([], []), 0) == 0.0


def test_word_tags_identity_all_ok():
    assert word_tags(align("abc", "abc"), 3) == [OK, OK, OK]


def test_word_tags_substitution():
    assert word_tags(align(list("axc"), list("abc")), 3) == [OK, BAD, OK]


def test_word_tags_trailing_deletion():
    assert word_tags(align(list("abcd"), list("abc")), 4) == [OK, OK, OK, BAD]


def test_gap_tags_identity():
    assert gap_tags(align("abc", "abc"), 3) == [OK, OK, OK, OK]


def test_gap_tags_missing_token():
    assert gap_tags(align(list("ac"), list("abc")), 2) == [OK, BAD, OK]


def test_gap_tags_empty_mt():
    assert gap_tags(align([], ["a"]), 0) == [BAD]


def test_gap_tags_collapse_multiple_insertions():
    script = align(list("a"), list("axy"))
    assert sum(1 for op in script if op.kind == INS) == 2
    assert gap_tags(script, 1) == [OK, BAD]


def test_label_identity():
    lab = label(list("abc"), list("abc"))
    assert lab.h == 0.0 and set(lab.y) == {OK} and set(lab.g) == {OK}


def test_label_substitution_case():
    lab = label(list("axc"), list("abc"))
    assert lab.h == pytest.approx(1 / 3)
    assert list(lab.y) == [OK, BAD, OK]
    assert list(lab.g) == [OK, OK, OK, OK]


def test_label_insertion_case():
    lab = label(list("ac"), list("abc"))
    assert lab.h == pytest.approx(1 / 3)
    assert list(lab.y) == [OK, OK]
    assert list(lab.g) == [OK, BAD, OK]


def test_label_shapes():
    lab = label(list("abcd"), list("xy"))
    assert len(lab.y) == 4 and len(lab.g) == 5


def test_zero_hter_iff_equal_and_all_ok():
    seqs = [tuple(s) for n in range(4) for s in itertools.product("ab", repeat=n)]
    for m in seqs:
        for t in seqs:
            lab = label(m, t)
            assert (lab.h == 0.0) == (m == t)
            if lab.h == 0.0:
                assert BAD not in lab.y and BAD not in lab.g


def test_bad_counts_match_script_composition():
    seqs = [tuple(s) for n in range(5) for s in itertools.product("abc", repeat=n)]
    import random

    rng = random.Random(0)
    for _ in range(300):
        m, t = rng.choice(seqs), rng.choice(seqs)
        script = align(m, t)
        n_sub = sum(1 for op in script if op.kind == SUB)
        n_del = sum(1 for op in script if op.kind == DEL)
        ins_boundaries = len(
            {sum(1 for p in script[:k] if p.kind != INS)
             for k, op in enumerate(script) if op.kind == INS}
        )
        lab = label(m, t)
        assert sum(lab.y) == n_sub + n_del
        assert sum(lab.g) == ins_boundaries
        assert sum(lab.y) + ins_boundaries <= script_cost(script)
