"""Regenerate the GPT-2 vocab/merges files and the reference tokenization fixture.

Input: a GPT-2 rank file in tiktoken format (base64 token, rank per line).
Output (in the given directory): vocab.json, merges.txt, tokenizer_fixture.jsonl
"""
import base64
import json
import sys

import tiktoken

PAT = r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def recover_merge(token, ranks):
    parts = [bytes([b]) for b in token]
    limit = ranks[token]
    while True:
        best = None
        for i in range(len(parts) - 1):
            r = ranks.get(parts[i] + parts[i + 1])
            if r is not None and r < limit and (best is None or r < best[0]):
                best = (r, i)
        if best is None:
            break
        i = best[1]
        parts = parts[:i] + [parts[i] + parts[i + 1]] + parts[i + 2:]
    assert len(parts) == 2, token
    return parts


TEXTS = [
    "Hello world",
    " the",
    "The quick brown fox jumps over the lazy dog.",
    "I'm sure they'll say it's fine, but we've seen what you'd do.",
    "DON'T SHOUT'S",
    "In 1969, astronauts landed on the",
    "The speed of light is approximately 300,000 km per",
    "Water boils at 100 degrees",
    "  leading and   inner   spaces  ",
    "trailing newline\n",
    "\n\n = Valkyria Chronicles III = \n\n",
    "tabs\tand\ttabs\t\t",
    "naïve café résumé",
    "Zürich Straße Ærøskøbing",
    "日本語のテキスト",
    "한국어 문장",
    "Привет, мир!",
    "emoji 😀🎉 mixed",
    "math: x² + y² = z², ∑ᵢ aᵢ",
    "numbers 3.14159 and 2,718 and 1e-10",
    "@-@ hyphenated @,@ wikitext style @.@ tokens",
    "<|endoftext|> is just text here",
    "After the dog struggled the vet took off the muzzle.",
    "After the dog scratched the vet took off the muzzle.",
    "The capital of France is",
    "The official language of Germany is",
    "a" * 40,
    "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaab",
    "!!!???...,,,;;;",
    "http://example.com/path?query=1&x=2",
    "fn main() { println!(\"{}\", 1 + 2); }",
    "    indented code line",
    "Mixed123Digits456",
    "١٢٣ Arabic-Indic digits",
    "Ⅻ roman numeral and ½ fraction",
    "He said, \"It's 5 o'clock.\"",
    "'s 't 're 've 'm 'll 'd",
    "ain't'll've",
    "  non-breaking space",
    "​zero width",
    "line one\r\nline two\r\n",
    "  \n  \n",
    " ",
    "x",
    "The Linux kernel was created by Linus",
    "A blue whale is the largest animal",
    "Ω≈ç√∫˜µ≤≥÷",
    "Tokens like Ġ and Ċ are just characters",
    "mañana ¿qué? ¡sí!",
    "Deoxyribonucleic acid and antidisestablishmentarianism",
]


def main():
    src, out = sys.argv[1], sys.argv[2]
    ranks = {}
    with open(src) as f:
        for line in f:
            tok, rank = line.split()
            ranks[base64.b64decode(tok)] = int(rank)
    assert len(ranks) == 50256
    enc = tiktoken.Encoding("gpt2_local", pat_str=PAT, mergeable_ranks=ranks, special_tokens={"<|endoftext|>": 50256})

    b2u = bytes_to_unicode()
    to_str = lambda bs: "".join(b2u[b] for b in bs)
    vocab = {to_str(t): r for t, r in ranks.items()}
    vocab["<|endoftext|>"] = 50256
    with open(f"{out}/vocab.json", "w", encoding="utf-8") as f:
        json.dump(vocab, f, ensure_ascii=False)

    by_rank = sorted((r, t) for t, r in ranks.items() if len(t) > 1)
    with open(f"{out}/merges.txt", "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for expect, (r, t) in enumerate(by_rank, start=256):
            assert r == expect
            a, b = recover_merge(t, ranks)
            f.write(f"{to_str(a)} {to_str(b)}\n")

    assert len(TEXTS) == 50, len(TEXTS)
    with open(f"{out}/tokenizer_fixture.jsonl", "w", encoding="utf-8") as f:
        for t in TEXTS:
            ids = enc.encode_ordinary(t)
            assert enc.decode(ids) == t
            f.write(json.dumps({"text": t, "ids": ids}, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
