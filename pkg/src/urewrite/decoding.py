"""Greedy and beam-search generation, plus decode traces."""
import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .corpus import BOS_ID, EOS_ID, DialogueSample
from .errors import DataError
from .model import encode_batch


@dataclass
class Hypothesis:
    tokens: List[int]                 # extended ids, EOS included once finished
    score: float = 0.0                # cumulative log-probability
    finished: bool = False
    truncated: bool = False
    lambdas: List[float] = field(default_factory=list)
    attention: List[np.ndarray] = field(default_factory=list)  # copy weights per input position

    def extend(self, tok, logp, lam, attn):
        return Hypothesis(self.tokens + [tok], self.score + logp, tok == EOS_ID, False,
                          self.lambdas + ([lam] if lam is not None else []),
                          self.attention + ([attn] if attn is not None else []))


class StepScorer:
    """Runs the encoder once and scores next-token distributions for prefixes."""

    def __init__(self, model, batch):
        self.model = model
        self.batch = batch
        self.enc = model.encode(batch)
        self.valid = batch.src_mask[0]
        self._cache = {}

    def __call__(self, prefixes):
        """Next-step distributions ``[len(prefixes), ext_size]`` plus per-row (λ, attention)."""
        n = len(prefixes)
        T = len(prefixes[0]) + 1
        tgt = np.empty((n, T), dtype=np.int64)
        tgt[:, 0] = BOS_ID
        for i, p in enumerate(prefixes):
            tgt[i, 1:] = p
        if n not in self._cache:
            self._cache[n] = (self.batch.tile(n), self.model.tile_encoding(self.enc, n))
        batch, enc = self._cache[n]
        out = self.model.forward(batch, tgt_in=tgt, tgt_mask=np.ones((n, T), dtype=bool), enc=enc)
        probs = out["probs"].data[:, -1, :]
        lam = out["lam"].data[:, -1] if "lam" in out else [None] * n
        pos = out["pos_weights"].data[:, -1, :][:, self.valid] if "pos_weights" in out else [None] * n
        return probs, lam, pos


def _prepare(model, vocab, sample):
    if not sample.utterance:
        raise DataError("cannot rewrite an empty utterance")
    return encode_batch([sample], vocab, model.config, with_target=False)


def default_max_len(sample):
    return len(sample.utterance) + 10


def greedy_decode(model, vocab, sample, max_len=None):
    batch = _prepare(model, vocab, sample)
    scorer = StepScorer(model, batch)
    max_len = default_max_len(sample) if max_len is None else max_len
    hyp = Hypothesis([])
    for _ in range(max_len):
        probs, lam, pos = scorer([hyp.tokens])
        tok = int(np.argmax(probs[0]))
        hyp = hyp.extend(tok, float(np.log(probs[0, tok])), lam[0], pos[0])
        if hyp.finished:
            break
    hyp.truncated = not hyp.finished
    return hyp


def beam_search(model, vocab, sample, beam_size=4, max_len=None):
    """Beam search over the active head's distribution; returns hypotheses best first.

    Finished hypotheses stay in the beam and compete on raw log-probability
    (no length normalization).  Ties go to the lexicographically smaller
    token sequence.
    """
    batch = _prepare(model, vocab, sample)
    scorer = StepScorer(model, batch)
    max_len = default_max_len(sample) if max_len is None else max_len
    beams = [Hypothesis([])]
    for _ in range(max_len):
        alive = [h for h in beams if not h.finished]
        if not alive:
            break
        probs, lam, pos = scorer([h.tokens for h in alive])
        cands = [(h.score, h.tokens, None, h) for h in beams if h.finished]
        for i, h in enumerate(alive):
            row = probs[i]
            nz = np.flatnonzero(row > 0)
            # at most beam_size extensions of one parent can survive pruning
            top = nz[np.lexsort((nz, -row[nz]))][:beam_size]
            for tok in top:
                cands.append((h.score + float(np.log(row[tok])), h.tokens + [int(tok)], (i, int(tok)), h))
        cands.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for score, _, ext, h in cands[:beam_size]:
            if ext is None:
                beams.append(h)
            else:
                i, tok = ext
                beams.append(h.extend(tok, float(np.log(probs[i, tok])), lam[i], pos[i]))
    for h in beams:
        h.truncated = not h.finished
    beams.sort(key=lambda h: (-h.score, h.tokens))
    return beams


def ids_to_tokens(ids, vocab, oovs):
    V = len(vocab)
    return [vocab.itos[i] if i < V else oovs[i - V] for i in ids]


def input_tokens(sample):
    from .model import unfold
    hist, _, utt, _ = unfold(sample)
    return hist + utt


def rewrite(model, vocab, history, utterance, beam_size=4, max_len=None):
    """Rewrite ``utterance`` given ``history`` (token lists).

    Returns ``(tokens, trace)``; the trace carries per-step λ (ptr-lambda
    only), copy attention over the unfolded input and the chosen tokens.
    """
    sample = DialogueSample([list(t) for t in history], list(utterance), list(utterance))
    batch = _prepare(model, vocab, sample)
    hyps = beam_search(model, vocab, sample, beam_size, max_len)
    best = hyps[0]
    out_ids = best.tokens[:-1] if best.finished else best.tokens
    tokens = ids_to_tokens(out_ids, vocab, batch.oovs[0])
    trace = {
        "input_tokens": input_tokens(sample),
        "output_tokens": ids_to_tokens(best.tokens, vocab, batch.oovs[0]),
        "lambdas": list(best.lambdas),
        "attention": np.array(best.attention) if best.attention else np.zeros((0, batch.src_mask.sum())),
        "score": best.score,
        "truncated": best.truncated,
        "head": model.config.head.value,
    }
    return tokens, trace


def teacher_forced_trace(model, vocab, sample):
    """λ and copy attention at every reference step under teacher forcing."""
    batch = encode_batch([sample], vocab, model.config)
    out = model.forward(batch)
    valid = batch.src_mask[0]
    return {
        "lambdas": out["lam"].data[0].tolist() if "lam" in out else [],
        "attention": out["pos_weights"].data[0][:, valid],
        "input_tokens": input_tokens(sample),
        "target_tokens": list(sample.reference) + ["<eos>"],
    }


def write_trace_csv(trace, fh):
    """Rows are decode steps, columns the input positions plus a λ column."""
    w = csv.writer(fh)
    w.writerow(list(trace["input_tokens"]) + ["lambda"])
    lams = trace["lambdas"]
    for t, row in enumerate(trace["attention"]):
        lam = f"{lams[t]:.6f}" if t < len(lams) else ""
        w.writerow([f"{v:.6f}" for v in row] + [lam])


def heatmap_text(trace, width=None):
    """Plain-text heatmap: one line per step with the most-attended input token."""
    shades = " .:-=+*#%@"
    toks = trace["input_tokens"]
    lines = ["input: " + " ".join(f"{i}:{t}" for i, t in enumerate(toks))]
    lams = trace["lambdas"]
    for t, row in enumerate(trace["attention"]):
        peak = float(row.max()) if row.size else 0.0
        cells = "".join(shades[min(len(shades) - 1, int(v / peak * (len(shades) - 1)))] if peak > 0 else " "
                        for v in row)
        j = int(np.argmax(row)) if row.size else -1
        out_tok = trace["output_tokens"][t] if t < len(trace["output_tokens"]) else "?"
        lam = f" λ={lams[t]:.3f}" if t < len(lams) else ""
        lines.append(f"{t:3d} {out_tok:>6} |{cells}| max@{j}:{toks[j] if j >= 0 else '-'}{lam}")
    return "\n".join(lines)
