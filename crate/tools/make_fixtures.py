#!/usr/bin/env python3
"""Regenerate the checked-in fixtures under crates/core/fixtures/.

Outputs:
  vocab.json / merges.txt   small byte-complete BPE vocabulary
  bpe_golden.json           reference tokenizations of 50 strings
  tiny_model.safetensors    seeded 2-layer model, config in __metadata__
  tiny_golden.json          float64 straight-line forward logits
  tasks/*.json              example stimulus files

The tokenizer below is an independent transcription of the byte-level BPE
algorithm (regex split, byte-to-unicode mapping, lowest-rank merges), and
the forward pass is an independent float64 numpy implementation. Both act
as oracles for the Rust test suite: the goldens they produce are frozen
into version control and asserted against.

Requires: python3, numpy, regex.
"""

import json
import os
import struct

import numpy as np
import regex

HERE = os.path.dirname(os.path.abspath(__file__))
FIXDIR = os.path.join(HERE, "..", "crates", "core", "fixtures")

# ---------------------------------------------------------------------------
# Byte-level BPE reference implementation
# ---------------------------------------------------------------------------

SPLIT_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


BYTE_ENCODER = bytes_to_unicode()


class RefBpe:
    def __init__(self, encoder, merges):
        self.encoder = encoder
        self.decoder = {v: k for k, v in encoder.items()}
        self.ranks = {pair: i for i, pair in enumerate(merges)}
        self.byte_decoder = {v: k for k, v in BYTE_ENCODER.items()}

    def bpe(self, token):
        word = tuple(token)
        while len(word) >= 2:
            pairs = {(word[i], word[i + 1]) for i in range(len(word) - 1)}
            bigram = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if bigram not in self.ranks:
                break
            first, second = bigram
            new_word = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
        return word

    def encode(self, text):
        ids = []
        for piece in SPLIT_PATTERN.findall(text):
            mapped = "".join(BYTE_ENCODER[b] for b in piece.encode("utf-8"))
            ids.extend(self.encoder[sym] for sym in self.bpe(mapped))
        return ids

    def decode(self, ids):
        text = "".join(self.decoder[i] for i in ids)
        return bytearray(self.byte_decoder[c] for c in text).decode(
            "utf-8", errors="replace"
        )


MERGES = [
    ("t", "h"),
    ("h", "e"),
    ("th", "e"),
    ("Ġ", "he"),
    ("s", "he"),
    ("Ġ", "she"),
    ("Ġ", "the"),
    ("Ġ", "A"),
    ("Ġ", "B"),
    ("r", "a"),
    ("ra", "d"),
    ("i", "n"),
    ("a", "n"),
    ("o", "n"),
    ("e", "r"),
    ("e", "d"),
    ("Ġ", "t"),
    ("Ġ", "w"),
    ("Ġ", "s"),
    ("Ġ", "b"),
    ("Ġ", "c"),
    ("a", "t"),
    ("o", "r"),
    ("an", "d"),
    ("Ġ", "and"),
    ("in", "g"),
    ("e", "n"),
    ("a", "l"),
    ("i", "s"),
    ("a", "s"),
    ("o", "u"),
    ("l", "d"),
    ("Ġ", "P"),
    ("Ġ", "G"),
]

GOLDEN_STRINGS = [
    "The man said that",
    "Gary scared Anna because he was violent.",
    "Gary feared Anna because she was violent.",
    "Although Pelcrad was sick,",
    "Although Pelcra was sick,",
    "the theory held",
    "spiky",
    " A",
    " B",
    " he",
    " she",
    "he said",
    "She sells seashells",
    "I'll go, you'll stay",
    "don't",
    "it's fine",
    "we're here",
    "I've seen it",
    "I'm ready",
    "he'd know",
    "12345",
    "pi is 3.14159",
    "x12y",
    "a  b   c",
    "tail   ",
    "   lead",
    "\n",
    "\n\nnew paragraph",
    "tab\there",
    "mixed \t \n ws",
    "hello world",
    "Hello, World!",
    "punct!!! ???",
    "em-dash -- here",
    "quote \"inside\" quote",
    "(parens) [brackets] {braces}",
    "semi;colon:and,comma",
    "café au lait",
    "naïve résumé",
    "über",
    "中文",
    "日本語の文",
    "\U0001f642",
    "mix 中 en été",
    "ALL CAPS HERE",
    "CamelCase and snake_case",
    "a",
    " ",
    "rad radar ran",
    "the she he and was",
]


def build_vocab():
    encoder = {}
    for b in range(256):
        encoder[BYTE_ENCODER[b]] = b
    for i, (l, r) in enumerate(MERGES):
        tok = l + r
        assert tok not in encoder, f"merge output {tok!r} collides"
        encoder[tok] = 256 + i
    return encoder


def write_vocab(encoder):
    os.makedirs(FIXDIR, exist_ok=True)
    with open(os.path.join(FIXDIR, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump(encoder, f, ensure_ascii=False, indent=0, sort_keys=True)
        f.write("\n")
    with open(os.path.join(FIXDIR, "merges.txt"), "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for l, r in MERGES:
            f.write(f"{l} {r}\n")


def write_bpe_golden(bpe):
    cases = []
    for s in GOLDEN_STRINGS:
        ids = bpe.encode(s)
        assert bpe.decode(ids) == s, f"round trip failed for {s!r}"
        cases.append({"text": s, "ids": ids})
    with open(os.path.join(FIXDIR, "bpe_golden.json"), "w", encoding="utf-8") as f:
        json.dump(cases, f, ensure_ascii=False, indent=1)
        f.write("\n")
    return cases


def check_constraints(bpe):
    for s in (" he", " she", " A", " B"):
        assert len(bpe.encode(s)) == 1, f"{s!r} must be a single token"
    assert len(bpe.encode("spiky")) > 1, "'spiky' must stay multi-token"
    a = bpe.encode(" Pelcrad")
    b = bpe.encode(" Pelcra")
    assert len(a) == len(b), f"name pair lengths differ: {len(a)} vs {len(b)}"
    # The implicit-causality fixture swaps these names between slots.
    assert len(bpe.encode(" Gary")) == len(bpe.encode(" Anna"))
    assert len(bpe.encode("Gary")) == len(bpe.encode("Anna"))


# ---------------------------------------------------------------------------
# Tiny model + float64 forward oracle
# ---------------------------------------------------------------------------


def tiny_tensors(n_vocab, seed=20260810):
    rng = np.random.default_rng(seed)
    n_layer, n_head, d, m, n_ctx = 2, 4, 16, 64, 32
    eps = 1e-5

    def uni(shape, amp):
        return rng.uniform(-amp, amp, size=shape).astype(np.float32)

    def ln(dim):
        gain = (1.0 + rng.uniform(-0.05, 0.05, size=dim)).astype(np.float32)
        bias = uni(dim, 0.02)
        return gain, bias

    tensors = {}
    tensors["wte"] = uni((n_vocab, d), 0.5)
    tensors["wpe"] = uni((n_ctx, d), 0.1)
    for l in range(n_layer):
        p = f"h.{l}"
        g, b = ln(d)
        tensors[f"{p}.ln_1.gain"], tensors[f"{p}.ln_1.bias"] = g, b
        tensors[f"{p}.attn.c_attn.weight"] = uni((d, 3 * d), 1.0 / np.sqrt(d))
        tensors[f"{p}.attn.c_attn.bias"] = uni(3 * d, 0.02)
        tensors[f"{p}.attn.c_proj.weight"] = uni((d, d), 1.0 / np.sqrt(d))
        tensors[f"{p}.attn.c_proj.bias"] = uni(d, 0.02)
        g, b = ln(d)
        tensors[f"{p}.ln_2.gain"], tensors[f"{p}.ln_2.bias"] = g, b
        tensors[f"{p}.mlp.c_fc.weight"] = uni((d, m), 1.0 / np.sqrt(d))
        tensors[f"{p}.mlp.c_fc.bias"] = uni(m, 0.02)
        tensors[f"{p}.mlp.c_proj.weight"] = uni((m, d), 1.0 / np.sqrt(m))
        tensors[f"{p}.mlp.c_proj.bias"] = uni(d, 0.02)
    g, b = ln(d)
    tensors["ln_f.gain"], tensors["ln_f.bias"] = g, b

    meta = {
        "n_layer": str(n_layer),
        "n_head": str(n_head),
        "d_model": str(d),
        "d_mlp": str(m),
        "n_ctx": str(n_ctx),
        "n_vocab": str(n_vocab),
        "ln_eps": "0.00001",
    }
    return tensors, meta


def write_safetensors(path, tensors, metadata):
    header = {"__metadata__": metadata}
    offset = 0
    names = sorted(tensors)
    for name in names:
        t = tensors[name]
        nbytes = t.size * 4
        header[name] = {
            "dtype": "F32",
            "shape": list(t.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for name in names:
            f.write(tensors[name].astype("<f4").tobytes())


def gelu64(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def layer_norm64(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + eps) + bias


def forward64(tensors, meta, ids):
    n_layer = int(meta["n_layer"])
    n_head = int(meta["n_head"])
    d = int(meta["d_model"])
    eps = float(meta["ln_eps"])
    dh = d // n_head
    t64 = {k: v.astype(np.float64) for k, v in tensors.items()}

    seq = len(ids)
    x = t64["wte"][ids] + t64["wpe"][:seq]
    for l in range(n_layer):
        p = f"h.{l}"
        h = layer_norm64(x, t64[f"{p}.ln_1.gain"], t64[f"{p}.ln_1.bias"], eps)
        qkv = h @ t64[f"{p}.attn.c_attn.weight"] + t64[f"{p}.attn.c_attn.bias"]
        z = np.zeros_like(x)
        for head in range(n_head):
            q = qkv[:, head * dh : (head + 1) * dh]
            k = qkv[:, d + head * dh : d + (head + 1) * dh]
            v = qkv[:, 2 * d + head * dh : 2 * d + (head + 1) * dh]
            scores = (q @ k.T) / np.sqrt(dh)
            mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
            scores[mask] = -np.inf
            scores = scores - scores.max(axis=-1, keepdims=True)
            p_attn = np.exp(scores)
            p_attn /= p_attn.sum(axis=-1, keepdims=True)
            z[:, head * dh : (head + 1) * dh] = p_attn @ v
        x = x + z @ t64[f"{p}.attn.c_proj.weight"] + t64[f"{p}.attn.c_proj.bias"]
        h2 = layer_norm64(x, t64[f"{p}.ln_2.gain"], t64[f"{p}.ln_2.bias"], eps)
        a = gelu64(h2 @ t64[f"{p}.mlp.c_fc.weight"] + t64[f"{p}.mlp.c_fc.bias"])
        x = x + a @ t64[f"{p}.mlp.c_proj.weight"] + t64[f"{p}.mlp.c_proj.bias"]
    y = layer_norm64(x[-1], t64["ln_f.gain"], t64["ln_f.bias"], eps)
    return t64["wte"] @ y


# ---------------------------------------------------------------------------
# Task fixtures
# ---------------------------------------------------------------------------

DEMO_PROMPTS = [
    "The man said that",
    "Tom said that",
    "The old man said that",
    "Ben told the boss that",
    "The father said that",
    "Dan said that",
]

TASKS = {
    "demo.json": {
        "name": "planted-demo",
        "counterbalanced": False,
        "pairs": [
            {
                "template": p,
                "variants": [
                    {
                        "prompt_bindings": {},
                        "target": " he",
                        "distractor": " she",
                        "condition": "male-subject",
                    }
                ],
            }
            for p in DEMO_PROMPTS
        ],
    },
    "implicit_causality.json": {
        "name": "implicit-causality",
        "counterbalanced": True,
        "pairs": [
            {
                "template": "{L1} scared {L2} because",
                "variants": [
                    {
                        "prompt_bindings": {"L1": "Gary", "L2": "Anna"},
                        "target": " he",
                        "distractor": " she",
                        "condition": "SE-verb",
                    },
                    {
                        "prompt_bindings": {"L1": "Anna", "L2": "Gary"},
                        "target": " she",
                        "distractor": " he",
                        "condition": "SE-verb",
                    },
                ],
            },
            {
                "template": "{L1} feared {L2} because",
                "variants": [
                    {
                        "prompt_bindings": {"L1": "Gary", "L2": "Anna"},
                        "target": " she",
                        "distractor": " he",
                        "condition": "ES-verb",
                    },
                    {
                        "prompt_bindings": {"L1": "Anna", "L2": "Gary"},
                        "target": " he",
                        "distractor": " she",
                        "condition": "ES-verb",
                    },
                ],
            },
        ],
    },
    "sound_gender.json": {
        "name": "sound-gender",
        "counterbalanced": True,
        "pairs": [
            {
                "template": "Although {L1} was sick,",
                "variants": [
                    {
                        "prompt_bindings": {"L1": "Pelcrad"},
                        "target": " he",
                        "distractor": " she",
                        "condition": "consonant-ending",
                    },
                    {
                        "prompt_bindings": {"L1": "Pelcra"},
                        "target": " she",
                        "distractor": " he",
                        "condition": "vowel-ending",
                    },
                ],
            }
        ],
    },
    "sound_shape.json": {
        "name": "sound-shape",
        "counterbalanced": True,
        "pairs": [
            {
                "template": 'Word A is "{L1}" and word B is "{L2}". The spiky shape is word',
                "variants": [
                    {
                        "prompt_bindings": {"L1": "takete", "L2": "maluma"},
                        "target": " A",
                        "distractor": " B",
                        "condition": "takete-spiky",
                    },
                    {
                        "prompt_bindings": {"L1": "maluma", "L2": "takete"},
                        "target": " B",
                        "distractor": " A",
                        "condition": "takete-spiky",
                    },
                ],
            },
            {
                "template": 'Word A is "{L1}" and word B is "{L2}". The spiky shape is word',
                "variants": [
                    {
                        "prompt_bindings": {"L1": "kiki", "L2": "bouba"},
                        "target": " A",
                        "distractor": " B",
                        "condition": "kiki-spiky",
                    },
                    {
                        "prompt_bindings": {"L1": "bouba", "L2": "kiki"},
                        "target": " B",
                        "distractor": " A",
                        "condition": "kiki-spiky",
                    },
                ],
            },
        ],
    },
}


def write_tasks():
    taskdir = os.path.join(FIXDIR, "tasks")
    os.makedirs(taskdir, exist_ok=True)
    for fname, body in TASKS.items():
        with open(os.path.join(taskdir, fname), "w", encoding="utf-8") as f:
            json.dump(body, f, ensure_ascii=False, indent=1)
            f.write("\n")


def main():
    encoder = build_vocab()
    bpe = RefBpe(encoder, MERGES)
    check_constraints(bpe)
    write_vocab(encoder)
    golden = write_bpe_golden(bpe)
    write_tasks()

    n_vocab = len(encoder)
    tensors, meta = tiny_tensors(n_vocab)
    write_safetensors(os.path.join(FIXDIR, "tiny_model.safetensors"), tensors, meta)

    prompt_ids = bpe.encode("The man said that")
    logits = forward64(tensors, meta, prompt_ids)
    with open(os.path.join(FIXDIR, "tiny_golden.json"), "w", encoding="utf-8") as f:
        json.dump(
            {"prompt_ids": prompt_ids, "logits": [float(v) for v in logits]},
            f,
            indent=1,
        )
        f.write("\n")

    print(f"vocab: {n_vocab} tokens, {len(MERGES)} merges")
    print(f"golden strings: {len(golden)}")
    print(f"tiny model prompt ids: {prompt_ids}")


if __name__ == "__main__":
    main()
