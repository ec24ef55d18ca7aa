#!/usr/bin/env python3
"""Generate the bundled desk-scale text corpus and the small QA fixture.

Everything is produced from a fixed seed so the files are reproducible;
no external downloads. Run from the repo root.
"""

import json
import random

SUBJECTS = [
    "the archive", "a survey party", "the harbor master", "the old press",
    "a river pilot", "the night clerk", "the union hall", "a field agent",
    "the observatory", "the freight office", "a junior engineer", "the cartographer",
    "the signal tower", "a quiet ledger", "the foundry", "the telegraph line",
]
VERBS = [
    "recorded", "measured", "repaired", "inspected", "catalogued", "dispatched",
    "rebuilt", "traced", "audited", "signaled", "surveyed", "indexed",
    "reported", "charted", "copied", "balanced",
]
OBJECTS = [
    "the northern channel", "every incoming manifest", "the damaged flume",
    "a set of brass fittings", "the quarterly returns", "the coastal route",
    "three crates of type", "the reservoir gauge", "the branch accounts",
    "the midnight schedule", "a bundle of proofs", "the muster roll",
    "the lower switchyard", "an uncut map sheet", "the relay battery",
    "the harbor soundings",
]
TAILS = [
    "before the thaw", "without much ceremony", "under a borrowed lamp",
    "against standing orders", "for the second time that week", "in careful duplicate",
    "while the fog held", "ahead of the inspection", "despite the late post",
    "with the spare instruments", "by the old reckoning", "after the last ferry",
]


def sentence(rng):
    s = f"{rng.choice(SUBJECTS)} {rng.choice(VERBS)} {rng.choice(OBJECTS)}"
    if rng.random() < 0.6:
        s += f" {rng.choice(TAILS)}"
    return s[0].upper() + s[1:] + "."


def paragraph(rng):
    return " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))


def main():
    rng = random.Random(6021)
    parts = []
    size = 0
    while size < 1_000_000:
        p = paragraph(rng)
        parts.append(p)
        size += len(p) + 2
    with open("fixtures/corpus.txt", "w") as f:
        f.write("\n\n".join(parts))
        f.write("\n")

    qa = [
        {"context": "The relay battery sits in the lower switchyard and is charged from the flume turbine every morning.", "question": "Where is the relay battery?", "answer": "the lower switchyard"},
        {"context": "Harbor soundings are taken at dawn by the river pilot and entered in the blue ledger before the first ferry.", "question": "Who takes the harbor soundings?", "answer": "the river pilot"},
        {"context": "The foundry pours on Tuesdays; the cast fittings cool for two days before inspection.", "question": "How long do the fittings cool?", "answer": "two days"},
        {"context": "The telegraph line to the observatory was rebuilt after the spring flood and now follows the coastal route.", "question": "Which route does the telegraph line follow?", "answer": "the coastal route"},
        {"context": "Quarterly returns are balanced by the night clerk in careful duplicate and posted to the freight office.", "question": "Who balances the quarterly returns?", "answer": "the night clerk"},
        {"context": "The cartographer keeps an uncut map sheet of the northern channel pinned above the survey bench.", "question": "What is pinned above the survey bench?", "answer": "an uncut map sheet"},
        {"context": "Three crates of type arrived for the old press, but one crate was held at the signal tower.", "question": "How many crates were held?", "answer": "one crate"},
        {"context": "The reservoir gauge reads high after rain, so the junior engineer logs it twice, at noon and at midnight.", "question": "When is the gauge logged?", "answer": "at noon and at midnight"},
    ]
    with open("fixtures/qa_small.jsonl", "w") as f:
        for rec in qa:
            f.write(json.dumps(rec) + "\n")
    print("corpus", size, "bytes;", len(qa), "qa records")


if __name__ == "__main__":
    main()
