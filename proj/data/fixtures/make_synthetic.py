#!/usr/bin/env python3
"""Regenerates the synthetic review fixtures in this directory."""
import json

ASPECTS = ["battery", "screen", "camera", "speaker", "keyboard", "price", "design", "charger"]
OPINIONS = ["great", "sharp", "solid", "loud", "fast", "cheap", "sleek", "reliable"]
PRODUCTS = ["phone", "laptop", "tablet", "watch"]
CODENAMES = ["zorbex", "quillon", "vantrix", "mirelo", "daxton", "pelquor",
             "sorvin", "kestrix", "lumora", "trevant", "oblinx", "zephra"]


def overfit_rows():
    for i in range(32):
        a1 = ASPECTS[i % 8]
        a2 = ASPECTS[(i + 1 + i // 8) % 8]
        o1 = OPINIONS[(5 * i + i // 8) % 8]
        o2 = OPINIONS[(3 * i + 1) % 8]
        prod = PRODUCTS[i % 4]
        yield a1, o1, a2, o2, prod


def conll(a1, o1, a2, o2, prod):
    # the a1 is o1 and the a2 is o2 , i love this prod .
    rows = [
        ("the", "DT", 2, "det"), (a1, "NN", 4, "nsubj"), ("is", "VBZ", 4, "cop"),
        (o1, "JJ", 0, "root"), ("and", "CC", 4, "cc"), ("the", "DT", 7, "det"),
        (a2, "NN", 9, "nsubj"), ("is", "VBZ", 9, "cop"), (o2, "JJ", 4, "conj"),
        (",", ",", 4, "punct"), ("i", "PRP", 12, "nsubj"), ("love", "VBP", 4, "parataxis"),
        ("this", "DT", 14, "det"), (prod, "NN", 12, "dobj"), (".", ".", 4, "punct"),
    ]
    return "".join(f"{k}\t{f}\t{p}\t{h}\t{d}\n" for k, (f, p, h, d) in enumerate(rows, 1))


def main():
    with open("overfit_pairs.jsonl", "w") as out, open("overfit_parses.conll", "w") as parses:
        for a1, o1, a2, o2, prod in overfit_rows():
            review = f"The {a1} is {o1} and the {a2} is {o2}, I love this {prod}."
            summary = f"{o1} {a1} and {o2} {a2}"
            out.write(json.dumps({"review": review, "summary": summary}) + "\n")
            parses.write(conll(a1, o1, a2, o2, prod) + "\n")
    with open("copy_pairs.jsonl", "w") as out:
        for i, code in enumerate(CODENAMES):
            a, o = ASPECTS[i % 4], OPINIONS[(i // 4 + i) % 4]
            review = f"the {code} {a} is {o} and i love it so much ."
            summary = f"{code} {a} is {o}"
            out.write(json.dumps({"review": review, "summary": summary}) + "\n")


if __name__ == "__main__":
    main()
