#!/usr/bin/env python3
"""Build the bundled KJV corpus fixture from the `kjv` npm package.

    npm pack kjv && tar xzf kjv-1.0.0.tgz
    python3 scripts/prepare_kjv.py package/json/verses-1769.json

Writes one verse per line, punctuation split into separate tokens, with the
italic markers ([...]) and paragraph marks (#) of the 1769 text removed.
"""
import gzip
import json
import re
import sys

PUNCT = re.compile(r"([.,;:!?()])")


def verses(path):
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    for text in data.values():
        text = text.replace("[", "").replace("]", "").replace("#", "")
        toks = PUNCT.sub(r" \1 ", text).split()
        if toks:
            yield " ".join(toks)


def main():
    src = sys.argv[1]
    out_dir = sys.argv[2] if len(sys.argv) > 2 else "crates/snm/tests/data"
    lines = list(verses(src))
    with gzip.GzipFile(f"{out_dir}/kjv.txt.gz", "wb", mtime=0) as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
    with open(f"{out_dir}/kjv-1k.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(lines[:1000]) + "\n")
    print(f"{len(lines)} lines, {sum(len(l.split()) for l in lines)} tokens")


if __name__ == "__main__":
    main()
