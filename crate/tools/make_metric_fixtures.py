#!/usr/bin/env python3
"""Generate frozen oracle fixtures for the metric test suite.

The BLEU values come from a self-contained reference implementation of
sentence BLEU (modified n-gram precision, geometric mean over orders
1..4, brevity penalty, no smoothing). The Welch p-values come from
scipy. Run from the repo root; output lands in crates/core/tests/fixtures/.
"""

import json
import math
import random
from collections import Counter

import scipy.stats as st

OUT = "crates/core/tests/fixtures"


def ref_bleu(candidate, reference, max_n=4):
    """Sentence BLEU with clipped precisions and brevity penalty, no smoothing.

    Orders where the candidate has no n-grams at all are skipped (effective
    order), so a short identical pair still scores 1.0. A populated order
    with zero clipped matches zeroes the score.
    """
    if len(candidate) == 0:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        cand_ngrams = Counter(tuple(candidate[i:i + n]) for i in range(len(candidate) - n + 1))
        ref_ngrams = Counter(tuple(reference[i:i + n]) for i in range(len(reference) - n + 1))
        total = sum(cand_ngrams.values())
        if total == 0:
            break
        clipped = sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
        if clipped == 0:
            return 0.0
        logs.append(math.log(clipped / total))
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(logs) / len(logs))


def bleu_cases():
    cases = []

    def add(name, cand, ref):
        cases.append({
            "name": name,
            "candidate": cand,
            "reference": ref,
            "expected": ref_bleu(cand, ref),
        })

    add("identity", ["the", "quick", "brown", "fox", "jumps"],
        ["the", "quick", "brown", "fox", "jumps"])
    add("clipped_unigram_zero_bigram", ["the", "the", "the", "the"], ["the", "cat"])
    add("single_token_match", ["a"], ["a"])
    add("single_token_miss", ["a"], ["b"])
    add("shortened_perfect_prefix", ["the", "quick", "brown", "fox"],
        ["the", "quick", "brown", "fox", "jumps", "over"])
    add("long_candidate_extra_tail",
        ["the", "quick", "brown", "fox", "jumps", "over", "it", "now"],
        ["the", "quick", "brown", "fox", "jumps"])
    add("half_overlap",
        ["a", "b", "c", "d", "w", "x", "y", "z"],
        ["a", "b", "c", "d", "e", "f", "g", "h"])
    add("repeated_reference",
        ["go", "go", "stop", "go"],
        ["go", "stop", "go", "go", "stop"])
    add("shifted_window",
        ["b", "c", "d", "e", "f"],
        ["a", "b", "c", "d", "e", "f", "g"])
    add("disjoint", ["p", "q", "r", "s", "t"], ["u", "v", "w", "x", "y"])

    rng = random.Random(20240817)
    vocab = [f"w{i}" for i in range(12)]
    for i in range(8):
        ref = [rng.choice(vocab) for _ in range(rng.randint(6, 24))]
        cand = list(ref)
        for _ in range(rng.randint(0, 6)):
            pos = rng.randrange(len(cand))
            cand[pos] = rng.choice(vocab)
        if rng.random() < 0.5 and len(cand) > 5:
            cand = cand[:rng.randint(5, len(cand))]
        add(f"random_{i}", cand, ref)

    return cases


def welch_cases():
    """Raw-sample Welch cases plus a (t, df) -> p grid, all from scipy."""
    sample_cases = []

    def add(name, a, b):
        t, p = st.ttest_ind(a, b, equal_var=False)
        n1, n2 = len(a), len(b)
        v1 = st.tvar(a)
        v2 = st.tvar(b)
        df = (v1 / n1 + v2 / n2) ** 2 / (
            (v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)
        )
        sample_cases.append({
            "name": name, "a": a, "b": b,
            "t": float(t), "df": float(df), "p": float(p),
        })

    add("hand_case", [1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    add("unequal_var", [1.0, 1.1, 0.9, 1.05, 0.95], [2.0, 4.0, 1.0, 5.0, 3.0])
    add("unequal_n", [10.0, 12.0, 9.0, 11.0], [10.5, 11.5, 10.0, 12.5, 9.5, 11.0])
    add("far_apart", [0.0, 0.1, -0.1, 0.05], [10.0, 10.2, 9.9, 10.1])
    add("noisy_overlap", [5.1, 4.9, 5.3, 4.7, 5.0, 5.2], [5.0, 5.4, 4.8, 5.1, 5.3])

    grid = []
    for t, df in [(-1.0, 8.0), (0.0, 5.0), (2.5, 3.7), (-3.2, 12.44),
                  (1.0, 1.5), (4.0, 30.0), (0.5, 2.0), (-0.1, 99.0),
                  (6.0, 4.0), (-0.75, 17.3)]:
        p = 2.0 * st.t.sf(abs(t), df)
        grid.append({"t": t, "df": df, "p": float(p)})

    return {"samples": sample_cases, "grid": grid}


def main():
    with open(f"{OUT}/bleu_oracle.json", "w") as f:
        json.dump(bleu_cases(), f, indent=1)
        f.write("\n")
    with open(f"{OUT}/welch_oracle.json", "w") as f:
        json.dump(welch_cases(), f, indent=1)
        f.write("\n")
    # sanity: spec hand cases
    assert ref_bleu(["x"], ["x"]) == 1.0
    assert ref_bleu(["the", "the", "the", "the"], ["the", "cat"]) == 0.0
    hand = welch_cases()["samples"][0]
    assert abs(hand["t"] - (-1.0)) < 1e-12 and abs(hand["df"] - 8.0) < 1e-12
    print("fixtures written")


if __name__ == "__main__":
    main()
