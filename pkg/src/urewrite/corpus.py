"""Tokenization, vocabulary and dialogue-sample I/O."""
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import DataError

PAD, UNK, EOT, BOS, EOS = "<pad>", "<unk>", "<eot>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, EOT, BOS, EOS)
PAD_ID, UNK_ID, EOT_ID, BOS_ID, EOS_ID = range(5)

# CJK Unified Ideographs, extensions A-F and compatibility ideographs
_CJK_RANGES = (
    "\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff"
    "\U00020000-\U0002a6df\U0002a700-\U0002ebef\U0002f800-\U0002fa1f\U00030000-\U0003134f"
)
_CJK_CHAR = re.compile(f"[{_CJK_RANGES}]")
_SPLIT = re.compile(f"([{_CJK_RANGES}])")


def is_cjk(ch):
    return bool(_CJK_CHAR.fullmatch(ch))


def is_cjk_token(tok):
    return len(tok) == 1 and is_cjk(tok)


def tokenize(text):
    """One token per CJK ideograph; other runs split on whitespace."""
    tokens = []
    for piece in _SPLIT.split(text):
        if not piece:
            continue
        if len(piece) == 1 and is_cjk(piece):
            tokens.append(piece)
        else:
            tokens.extend(piece.split())
    return tokens


def detokenize(tokens):
    """Inverse of :func:`tokenize` up to whitespace."""
    out = []
    prev = None
    for tok in tokens:
        if prev is not None and not is_cjk_token(prev) and not is_cjk_token(tok):
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------

@dataclass
class Coref:
    span: Tuple[int, int]  # half-open [start, end) in the utterance
    antecedent: List[str]


@dataclass
class Omission:
    pos: int  # insertion point in the utterance (before token ``pos``)
    tokens: List[str]


@dataclass
class DialogueSample:
    history: List[List[str]]
    utterance: List[str]
    reference: List[str]
    gold_corefs: Optional[List[Coref]] = None
    gold_omissions: Optional[List[Omission]] = None
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def is_positive(self):
        return self.reference != self.utterance

    def history_tokens(self):
        return [t for turn in self.history for t in turn]

    def validate(self):
        hist = self.history_tokens()
        for c in self.gold_corefs or ():
            if not _contains(hist, c.antecedent):
                raise DataError(f"coref antecedent {c.antecedent} does not occur in the history")
            s, e = c.span
            if not 0 <= s < e <= len(self.utterance):
                raise DataError(f"coref span {c.span} outside utterance of length {len(self.utterance)}")
        for o in self.gold_omissions or ():
            if not _contains(hist, o.tokens):
                raise DataError(f"omitted tokens {o.tokens} do not occur in the history")
            if not 0 <= o.pos <= len(self.utterance):
                raise DataError(f"omission position {o.pos} outside utterance")
        return self


def _contains(seq, sub):
    n = len(sub)
    if n == 0:
        return True
    return any(seq[i:i + n] == sub for i in range(len(seq) - n + 1))


def apply_annotations(utterance, corefs, omissions):
    """Rebuild a rewrite from the utterance and its gold edits.

    Returns ``(tokens, sources)`` where ``sources[k]`` is ``"U"`` for tokens
    kept from the utterance and ``"H"`` for tokens restored from history.
    Insertions at a position come before a substitution starting there.
    """
    ins = {}
    for o in omissions or ():
        ins.setdefault(o.pos, []).append(o)
    subs = {c.span[0]: c for c in corefs or ()}
    out, src = [], []
    i = 0
    n = len(utterance)
    while i <= n:
        for o in ins.get(i, ()):
            out.extend(o.tokens)
            src.extend("H" * len(o.tokens))
        if i == n:
            break
        c = subs.get(i)
        if c is not None:
            out.extend(c.antecedent)
            src.extend("H" * len(c.antecedent))
            i = c.span[1]
        else:
            out.append(utterance[i])
            src.append("U")
            i += 1
    return out, src


def sample_from_text(history, utterance, reference=None):
    """Build a sample from raw strings, tokenizing each turn."""
    u = tokenize(utterance)
    return DialogueSample(
        history=[tokenize(t) for t in history],
        utterance=u,
        reference=tokenize(reference) if reference is not None else list(u),
    )


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise DataError(f"vocabulary must start with the specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def id(self, tok):
        return self.stoi.get(tok, UNK_ID)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def token_counts(corpus):
    counts = Counter()
    for s in corpus:
        for turn in s.history:
            counts.update(turn)
        counts.update(s.utterance)
        counts.update(s.reference)
    return counts


def build_vocab(corpus, min_count_noncjk=3):
    """Keep every CJK character and non-CJK words seen at least ``min_count_noncjk`` times."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = token_counts(corpus)
    kept = [t for t, c in counts.items()
            if t not in SPECIALS and (is_cjk_token(t) or c >= min_count_noncjk)]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept)


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

def sample_to_dict(s):
    d = {"history": s.history, "utterance": s.utterance, "reference": s.reference}
    if s.gold_corefs is not None:
        d["corefs"] = [{"span": list(c.span), "antecedent": c.antecedent} for c in s.gold_corefs]
    if s.gold_omissions is not None:
        d["omissions"] = [{"pos": o.pos, "tokens": o.tokens} for o in s.gold_omissions]
    return d


def _tokens_field(d, key, lineno):
    if key not in d:
        raise DataError(f"line {lineno}: missing field '{key}'")
    v = d[key]
    if isinstance(v, str):
        return tokenize(v)
    if not isinstance(v, list) or not all(isinstance(t, str) for t in v):
        raise DataError(f"line {lineno}: field '{key}' must be a token list or a string")
    return list(v)


def sample_from_dict(d, lineno=0):
    if not isinstance(d, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    if "history" not in d:
        raise DataError(f"line {lineno}: missing field 'history'")
    if not isinstance(d["history"], list):
        raise DataError(f"line {lineno}: field 'history' must be a list of turns")
    history = [_tokens_field({"history": t}, "history", lineno) for t in d["history"]]
    utterance = _tokens_field(d, "utterance", lineno)
    reference = _tokens_field(d, "reference", lineno)
    corefs = omissions = None
    try:
        if d.get("corefs") is not None:
            corefs = [Coref(tuple(c["span"]), list(c["antecedent"])) for c in d["corefs"]]
        if d.get("omissions") is not None:
            omissions = [Omission(int(o["pos"]), list(o["tokens"])) for o in d["omissions"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"line {lineno}: malformed annotation field: {exc}") from None
    return DialogueSample(history, utterance, reference, corefs, omissions)


def save_jsonl(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s), ensure_ascii=False) + "\n")


def load_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            out.append(sample_from_dict(d, lineno))
    return out


def parse_turn_line(line):
    """Parse ``turn<TAB>turn<TAB>...<TAB>utterance``; the last field is the utterance."""
    fields = line.rstrip("\n").split("\t")
    return sample_from_text(fields[:-1], fields[-1])


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

def split_corpus(samples, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Stratified (on ``is_positive``) train/valid/test split."""
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for label in (True, False):
        idx = [i for i, s in enumerate(samples) if s.is_positive == label]
        idx = [idx[i] for i in rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_valid = int(round(fractions[1] * len(idx)))
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_valid])
        parts[2].extend(idx[n_train + n_valid:])
    return tuple([samples[i] for i in sorted(p)] for p in parts)
