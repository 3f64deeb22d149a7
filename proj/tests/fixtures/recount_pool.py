#!/usr/bin/env python3
"""Brute-force recount of the template corpus for an annotation file.

Written independently of the C++ pool builder: every record is checked
pairwise, every span is substituted on raw UTF-8 bytes, and dedupe is a
linear scan. Prints the corpus, one template per line.
"""
import json
import sys

WS = b" \t\n\r\f\v"


def spans_ok(caption, spans):
    n = len(caption)
    for s, e in spans:
        if not (0 <= s < e <= n):
            return False
        if caption[s:e].strip(WS) == b"":
            return False
    for i in range(len(spans)):
        for j in range(len(spans)):
            if i != j:
                a, b = spans[i], spans[j]
                if a[0] < b[1] and b[0] < a[1]:
                    return False
    return True


def substitute(caption, s, e):
    left, right = caption[:s], caption[e:]
    if left.endswith(b" "):
        left = left.rstrip(b" ") + b" "
    if right.startswith(b" "):
        right = b" " + right.lstrip(b" ")
    return (left + b"{}" + right).strip(WS)


def content_bytes(t):
    return sum(1 for c in t.replace(b"{}", b"") if c not in WS)


def recount(lines):
    corpus = []
    for line in lines:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            caption = rec["caption"]
            raw = rec.get("noun_phrases", [])
            spans = [(int(p[0]), int(p[1])) for p in raw if isinstance(p, list) and len(p) == 2]
            if len(spans) != len(raw) or not isinstance(caption, str):
                continue
        except (ValueError, KeyError, TypeError):
            continue
        if "\n" in caption or "\r" in caption:
            continue
        cap = caption.encode("utf-8")
        if not spans_ok(cap, spans):
            continue
        for s, e in spans:
            t = substitute(cap, s, e)
            if t.count(b"{}") < 1 or content_bytes(t) < 3:
                continue
            if t not in corpus:
                corpus.append(t)
    return corpus


if __name__ == "__main__":
    with open(sys.argv[1], encoding="utf-8") as f:
        out = recount(f.read().splitlines())
    sys.stdout.buffer.write(b"".join(t + b"\n" for t in out))
