"""BLEU, ROUGE, exact match and the coreference / completion scores.

Everything works on token lists.  Coreference and completion precision need
a notion of a predicted edit: the output is diffed against the utterance and
every changed segment containing a history token is a predicted edit.  A
predicted substitution that does not produce a correct gold coreference, or
a predicted insertion sharing no token with a gold omission, is a false
positive.
"""
import difflib
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

from ._kernels import lcs_length
from .errors import DataError

log = logging.getLogger(__name__)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _prf(tp, n_pred, n_gold):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, f1(p, r)


def f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _brevity(c, r):
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def modified_precision(candidate, reference, n):
    """(clipped matches, candidate n-gram count) for order ``n``."""
    cand = ngrams(candidate, n)
    ref = ngrams(reference, n)
    return sum(min(c, ref[g]) for g, c in cand.items()), max(len(candidate) - n + 1, 0)


def bleu_n(candidate, reference, n=4, smooth=True):
    """Sentence BLEU with uniform weights over orders 1..n.

    With ``smooth`` an order above 1 with no matches contributes
    1 / (count + 1) instead of zeroing the score.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not candidate:
        return 0.0
    logs = 0.0
    for i in range(1, n + 1):
        m, c = modified_precision(candidate, reference, i)
        if m == 0:
            if i == 1 or not smooth:
                return 0.0
            p = 1.0 / (c + 1)
        else:
            p = m / c
        logs += math.log(p)
    return _brevity(len(candidate), len(reference)) * math.exp(logs / n)


def corpus_bleu(pairs, n=4):
    """BLEU over pooled n-gram counts of ``(candidate, reference)`` pairs."""
    match = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for cand, ref in pairs:
        c_len += len(cand)
        r_len += len(ref)
        for i in range(1, n + 1):
            m, c = modified_precision(cand, ref, i)
            match[i - 1] += m
            total[i - 1] += c
    if c_len == 0 or min(match) == 0:
        return 0.0
    logs = sum(math.log(m / t) for m, t in zip(match, total))
    return _brevity(c_len, r_len) * math.exp(logs / n)


def rouge_n(candidate, reference, n=1):
    """ROUGE-n F1."""
    if not reference:
        raise DataError("ROUGE needs a non-empty reference")
    ref = ngrams(reference, n)
    cand = ngrams(candidate, n)
    if not ref and not cand:
        # both shorter than n: nothing to compare beyond identity
        return float(candidate == reference)
    overlap = sum((cand & ref).values())
    return _prf(overlap, sum(cand.values()), sum(ref.values()))[2]


def rouge_l_prf(candidate, reference):
    if not reference:
        raise DataError("ROUGE needs a non-empty reference")
    ids = {}
    a = [ids.setdefault(t, len(ids)) for t in candidate]
    b = [ids.setdefault(t, len(ids)) for t in reference]
    lcs = lcs_length(a, b)
    return _prf(lcs, len(candidate), len(reference))


def rouge_l(candidate, reference):
    """ROUGE-L F1 from the longest common subsequence."""
    return rouge_l_prf(candidate, reference)[2]


def exact_match_split(triples):
    """``(output, reference, is_positive)`` triples -> (em_pos, em_neg).

    A label with no samples scores 0.0.
    """
    hit = {True: 0, False: 0}
    cnt = {True: 0, False: 0}
    for out, ref, pos in triples:
        cnt[bool(pos)] += 1
        hit[bool(pos)] += list(out) == list(ref)
    em = lambda k: hit[k] / cnt[k] if cnt[k] else 0.0
    return em(True), em(False)


# -- coreference and completion ---------------------------------------------

def _contains(seq, sub):
    n = len(sub)
    return any(seq[i:i + n] == sub for i in range(len(seq) - n + 1)) if n else True


def _edits(utterance, output, history_types):
    """History-sourced changed segments of the output, as diff opcodes."""
    sm = difflib.SequenceMatcher(a=utterance, b=output, autojunk=False)
    kept = [False] * len(utterance)
    edits = []
    for tag, i1, i2, j1, j2 in sm.get_opcodes():
        if tag == "equal":
            for i in range(i1, i2):
                kept[i] = True
        elif tag in ("replace", "insert") and any(t in history_types for t in output[j1:j2]):
            edits.append((tag, i1, i2, output[j1:j2]))
    return kept, edits


def _annotated(samples, key):
    use = [k for k, s in enumerate(samples) if getattr(s, key) is not None]
    skipped = len(samples) - len(use)
    if skipped:
        log.warning("%d samples without %s annotations excluded", skipped, key)
    return use, skipped


def coref_score(samples, outputs):
    """(P, R, F1) of coreference resolution.

    A gold coreference is resolved when the output contains the antecedent
    and the pronoun span was not kept as-is by the diff alignment.
    """
    use, _ = _annotated(samples, "gold_corefs")
    tp = n_gold = fp = 0
    for k in use:
        s, out = samples[k], list(outputs[k])
        kept, edits = _edits(s.utterance, out, set(s.history_tokens()))
        good_spans = []
        for c in s.gold_corefs:
            n_gold += 1
            a, b = c.span
            if _contains(out, list(c.antecedent)) and not all(kept[a:b]):
                tp += 1
                good_spans.append((a, b))
        for tag, i1, i2, _ in edits:
            if tag != "replace":
                continue
            if not any(i1 < b and a < i2 for a, b in good_spans):
                fp += 1
    return _prf(tp, tp + fp, n_gold)


def completion_score(samples, outputs):
    """(P, R, F1) of omission recovery.

    A gold omission is recovered when every omitted token occurs in the
    output more often than the utterance alone accounts for.
    """
    use, _ = _annotated(samples, "gold_omissions")
    tp = n_gold = fp = 0
    for k in use:
        s, out = samples[k], list(outputs[k])
        have = Counter(out)
        base = Counter(s.utterance)
        for o in s.gold_omissions:
            n_gold += 1
            need = Counter(o.tokens)
            if all(have[t] >= base[t] + c for t, c in need.items()):
                tp += 1
        gold_types = {t for o in s.gold_omissions for t in o.tokens}
        _, edits = _edits(s.utterance, out, set(s.history_tokens()))
        for tag, _, _, seg in edits:
            if tag == "insert" and not gold_types.intersection(seg):
                fp += 1
    return _prf(tp, tp + fp, n_gold)


# -- report -------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu1: float = 0.0
    bleu2: float = 0.0
    bleu4: float = 0.0
    sent_bleu1: float = 0.0
    sent_bleu2: float = 0.0
    sent_bleu4: float = 0.0
    rouge1_f: float = 0.0
    rouge2_f: float = 0.0
    rougeL_f: float = 0.0
    em_positive: float = 0.0
    em_negative: float = 0.0
    coref_p: float = 0.0
    coref_r: float = 0.0
    coref_f1: float = 0.0
    compl_p: float = 0.0
    compl_r: float = 0.0
    compl_f1: float = 0.0
    n_samples: int = 0
    n_positive: int = 0
    n_negative: int = 0
    n_coref: int = 0
    n_omission: int = 0
    n_unannotated: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def table(self):
        rows = []
        for f in fields(self):
            v = getattr(self, f.name)
            rows.append(f"{f.name:<14}{v:>10d}" if isinstance(v, int) else f"{f.name:<14}{100 * v:>10.2f}")
        return "\n".join(rows) + "\n"


def _mean(xs):
    return math.fsum(xs) / len(xs) if xs else 0.0


def evaluate(samples, outputs):
    """Score ``outputs`` (token lists, aligned with ``samples``)."""
    if len(samples) != len(outputs):
        raise DataError(f"{len(samples)} samples but {len(outputs)} outputs")
    outputs = [list(o) for o in outputs]
    pairs = [(o, list(s.reference)) for s, o in zip(samples, outputs)]
    em_pos, em_neg = exact_match_split((o, r, s.is_positive) for (o, r), s in zip(pairs, samples))
    cp, cr, cf = coref_score(samples, outputs)
    op, orr, of = completion_score(samples, outputs)
    return MetricReport(
        bleu1=corpus_bleu(pairs, 1), bleu2=corpus_bleu(pairs, 2), bleu4=corpus_bleu(pairs, 4),
        sent_bleu1=_mean([bleu_n(o, r, 1) for o, r in pairs]),
        sent_bleu2=_mean([bleu_n(o, r, 2) for o, r in pairs]),
        sent_bleu4=_mean([bleu_n(o, r, 4) for o, r in pairs]),
        rouge1_f=_mean([rouge_n(o, r, 1) for o, r in pairs]),
        rouge2_f=_mean([rouge_n(o, r, 2) for o, r in pairs]),
        rougeL_f=_mean([rouge_l(o, r) for o, r in pairs]),
        em_positive=em_pos, em_negative=em_neg,
        coref_p=cp, coref_r=cr, coref_f1=cf, compl_p=op, compl_r=orr, compl_f1=of,
        n_samples=len(samples),
        n_positive=sum(s.is_positive for s in samples),
        n_negative=sum(not s.is_positive for s in samples),
        n_coref=sum(len(s.gold_corefs or ()) for s in samples),
        n_omission=sum(len(s.gold_omissions or ()) for s in samples),
        n_unannotated=sum(s.gold_corefs is None or s.gold_omissions is None for s in samples),
    )
