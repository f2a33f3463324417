"""Transformer utterance rewriter with four output heads.

The encoder reads the unfolded dialogue (history turns separated by an
end-of-turn token, then the current utterance followed by EOS).  Batches are
laid out as ``[history block | utterance block]``, each block padded on its
own, so splitting the encodings into history and utterance parts is a
slice.  Positions and turn ids are explicit per token, so padding in the
middle of a row changes nothing.
"""
import enum
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import numerics as nx
from .corpus import BOS_ID, EOS, EOS_ID, EOT, PAD_ID, UNK_ID
from .errors import ConfigError, ContractError, DataError
from .numerics import Tensor


class OutputHead(str, enum.Enum):
    GEN = "gen"
    PTR_NET = "ptr-net"
    PTR_GEN = "ptr-gen"
    PTR_LAMBDA = "ptr-lambda"

    @property
    def is_pointer(self):
        return self in (OutputHead.PTR_NET, OutputHead.PTR_LAMBDA)

    @property
    def splits_source(self):
        return self is OutputHead.PTR_LAMBDA


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 2048
    max_positions: int = 256
    max_turns: int = 16
    head: OutputHead = OutputHead.PTR_LAMBDA
    dropout_rate: float = 0.1
    # which copy distribution the gate weights: "utterance" (default) or "history"
    lambda_weights: str = "utterance"
    # starting point of the (trainable) position table: "sinusoidal" or "xavier"
    position_init: str = "sinusoidal"

    def __post_init__(self):
        self.head = OutputHead(self.head)

    def validate(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "max_positions", "max_turns"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.lambda_weights not in ("utterance", "history"):
            raise ConfigError("lambda_weights must be 'utterance' or 'history'")
        if self.position_init not in ("sinusoidal", "xavier"):
            raise ConfigError("position_init must be 'sinusoidal' or 'xavier'")
        return self

    def to_dict(self):
        d = asdict(self)
        d["head"] = self.head.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class EncodedBatch:
    src_ids: np.ndarray       # [B, S] vocabulary ids (OOV -> UNK)
    src_ext: np.ndarray       # [B, S] extended ids (per-sample OOVs >= vocab_size)
    positions: np.ndarray     # [B, S]
    turns: np.ndarray         # [B, S]
    src_mask: np.ndarray      # [B, S] bool, real tokens
    n_hist: int               # width of the history block
    has_history: np.ndarray   # [B] bool
    oovs: List[List[str]]     # per-sample extended-id -> token (offset by vocab_size)
    ext_size: int
    tgt_in: Optional[np.ndarray] = None   # [B, T]
    tgt_out: Optional[np.ndarray] = None  # [B, T]
    tgt_mask: Optional[np.ndarray] = None  # [B, T] bool

    @property
    def size(self):
        return self.src_ids.shape[0]

    @property
    def is_history(self):
        """[B, S] True for history-side positions (including their delimiters)."""
        out = np.zeros(self.src_mask.shape, dtype=bool)
        out[:, :self.n_hist] = True
        return out & self.src_mask

    def tile(self, n):
        """Repeat a single-sample batch ``n`` times (beam search)."""
        rep = lambda a: None if a is None else np.repeat(a, n, axis=0)
        return EncodedBatch(rep(self.src_ids), rep(self.src_ext), rep(self.positions),
                            rep(self.turns), rep(self.src_mask), self.n_hist,
                            rep(self.has_history), self.oovs * n, self.ext_size)


def unfold(sample):
    """Unfolded history (with EOT after every turn) and utterance (with EOS)."""
    hist, hist_turn = [], []
    for k, turn in enumerate(sample.history):
        hist.extend(turn)
        hist.append(EOT)
        hist_turn.extend([k] * (len(turn) + 1))
    utt = list(sample.utterance) + [EOS]
    return hist, hist_turn, utt, len(sample.history)


def encode_batch(samples, vocab, config, with_target=True):
    """Build padded id arrays for a list of samples."""
    V = len(vocab)
    if V != config.vocab_size:
        raise ConfigError(f"vocabulary has {V} entries but the model expects {config.vocab_size}")
    rows = []
    for i, s in enumerate(samples):
        if not s.utterance:
            raise DataError(f"sample {i}: empty utterance")
        hist, hist_turn, utt, n_turn = unfold(s)
        if len(hist) + len(utt) > config.max_positions:
            raise DataError(f"sample {i}: input length {len(hist) + len(utt)} exceeds "
                            f"max_positions={config.max_positions}")
        oov = []
        ext = []
        for tok in hist + utt:
            j = vocab.stoi.get(tok)
            if j is None:
                if tok not in oov:
                    oov.append(tok)
                j = V + oov.index(tok)
            ext.append(j)
        rows.append((hist, hist_turn, utt, n_turn, oov, ext))

    B = len(rows)
    Hn = max(1, max(len(r[0]) for r in rows))
    Un = max(len(r[2]) for r in rows)
    S = Hn + Un
    src_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    src_ext = np.full((B, S), PAD_ID, dtype=np.int64)
    positions = np.zeros((B, S), dtype=np.int64)
    turns = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    clip = config.max_turns - 1
    for b, (hist, hist_turn, utt, n_turn, oov, ext) in enumerate(rows):
        h, u = len(hist), len(utt)
        ids = [min(e, UNK_ID) if e >= V else e for e in ext]
        src_ids[b, :h] = ids[:h]
        src_ext[b, :h] = ext[:h]
        src_ids[b, Hn:Hn + u] = ids[h:]
        src_ext[b, Hn:Hn + u] = ext[h:]
        positions[b, :h] = np.arange(h)
        positions[b, Hn:Hn + u] = np.arange(h, h + u)
        turns[b, :h] = np.minimum(hist_turn, clip)
        turns[b, Hn:Hn + u] = min(n_turn, clip)
        mask[b, :h] = True
        mask[b, Hn:Hn + u] = True
    batch = EncodedBatch(src_ids, src_ext, positions, turns, mask, Hn,
                         np.array([len(r[0]) > 0 for r in rows]),
                         [r[4] for r in rows], V + max(len(r[4]) for r in rows))
    if with_target:
        _attach_targets(batch, samples, vocab, config)
    return batch


def _attach_targets(batch, samples, vocab, config):
    V = len(vocab)
    T = max(len(s.reference) for s in samples) + 1
    if T > config.max_positions:
        raise DataError(f"reference length {T - 1} exceeds max_positions={config.max_positions}")
    B = len(samples)
    tgt_in = np.full((B, T), PAD_ID, dtype=np.int64)
    tgt_out = np.full((B, T), PAD_ID, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    head = config.head
    for b, s in enumerate(samples):
        oov = batch.oovs[b]
        out = []
        for tok in s.reference:
            j = vocab.stoi.get(tok)
            if j is None:
                j = V + oov.index(tok) if (tok in oov and head is not OutputHead.GEN) else UNK_ID
            out.append(j)
        out.append(EOS_ID)
        if head.is_pointer:
            support = set(batch.src_ext[b][batch.src_mask[b]].tolist())
            for k, j in enumerate(out):
                if j not in support:
                    tok = s.reference[k] if k < len(s.reference) else EOS
                    raise DataError(f"sample {b}: reference token {tok!r} at position {k} "
                                    f"cannot be copied from the input")
        n = len(out)
        tgt_out[b, :n] = out
        tgt_in[b, 0] = BOS_ID
        tgt_in[b, 1:n] = [min(j, UNK_ID) if j >= V else j for j in out[:-1]]
        tmask[b, :n] = True
    batch.tgt_in, batch.tgt_out, batch.tgt_mask = tgt_in, tgt_out, tmask


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

def sinusoidal_table(n, d):
    """Fixed sine/cosine position codes, used to initialise the position table."""
    pos = np.arange(n)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(pos * rate)
    out[:, 1::2] = np.cos(pos * rate[: d // 2])
    return out


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class StepState:
    """Last-layer quantities at one decoding step, enough to form p(R_t)."""
    vocab_size: int
    h_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    u_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    attn_h: Optional[np.ndarray] = None    # over history positions
    attn_u: Optional[np.ndarray] = None    # over utterance positions
    attn_all: Optional[np.ndarray] = None  # over history + utterance positions
    lam: Optional[float] = None
    vocab_probs: Optional[np.ndarray] = None
    p_gen: Optional[float] = None


class RewriterModel:
    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.params: Dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _init(self, rng):
        c = self.config
        d, f = c.d_model, c.d_ff
        self._add("embed.word", _xavier(rng, c.vocab_size, d))
        # sinusoidal start makes relative offsets linear from step 0, which
        # copying multi-token names relies on; the table is trained either way
        if c.position_init == "sinusoidal":
            self._add("embed.pos", sinusoidal_table(c.max_positions, d))
        else:
            self._add("embed.pos", _xavier(rng, c.max_positions, d))
        self._add("embed.turn", _xavier(rng, c.max_turns, d))

        def attn(prefix):
            for m in ("q", "k", "v", "o"):
                self._add(f"{prefix}.w{m}", _xavier(rng, d, d))
                self._add(f"{prefix}.b{m}", np.zeros(d))

        def norm(prefix):
            self._add(f"{prefix}.gain", np.ones(d))
            self._add(f"{prefix}.bias", np.zeros(d))

        def ffn(prefix, d_in):
            self._add(f"{prefix}.w1", _xavier(rng, d_in, f))
            self._add(f"{prefix}.b1", np.zeros(f))
            self._add(f"{prefix}.w2", _xavier(rng, f, d))
            self._add(f"{prefix}.b2", np.zeros(d))

        for l in range(c.n_layers):
            p = f"enc.{l}"
            attn(f"{p}.self")
            norm(f"{p}.ln1")
            ffn(f"{p}.ffn", d)
            norm(f"{p}.ln2")
        split = c.head.splits_source
        for l in range(c.n_layers):
            p = f"dec.{l}"
            attn(f"{p}.self")
            norm(f"{p}.ln1")
            if split:
                attn(f"{p}.cross_h")
                norm(f"{p}.ln_h")
                attn(f"{p}.cross_u")
                norm(f"{p}.ln_u")
                ffn(f"{p}.ffn", 2 * d)
            else:
                attn(f"{p}.cross")
                norm(f"{p}.ln2")
                ffn(f"{p}.ffn", d)
            norm(f"{p}.ln3")
        if split:
            self._add("enc.sentinel", _xavier(rng, 1, d, shape=(d,)))
            for g in ("w_d", "w_h", "w_u"):
                self._add(f"gate.{g}", np.zeros(d))
        if c.head in (OutputHead.GEN, OutputHead.PTR_GEN):
            self._add("out.w", _xavier(rng, d, c.vocab_size))
            self._add("out.b", np.zeros(c.vocab_size))
        if c.head is OutputHead.PTR_GEN:
            for g in ("w_d", "w_c", "w_x"):
                self._add(f"pgen.{g}", np.zeros(d))
            self._add("pgen.b", np.zeros(1))

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    # -- building blocks -----------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _mha(self, prefix, q_in, kv_in, mask, rng):
        """Multi-head attention; returns (output [B,Tq,d], weights [B,h,Tq,Tk])."""
        c = self.config
        B, Tq, d = q_in.shape
        Tk = kv_in.shape[1]
        h = c.n_heads
        dk = d // h
        P = self._p

        def heads(x, m, T):
            y = nx.linear(x, P(f"{prefix}.w{m}"), P(f"{prefix}.b{m}"))
            return y.reshape(B, T, h, dk).transpose(0, 2, 1, 3)

        q = heads(q_in, "q", Tq)
        k = heads(kv_in, "k", Tk)
        v = heads(kv_in, "v", Tk)
        scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(dk))
        weights = nx.softmax_masked(scores, mask)
        ctx = nx.matmul(nx.dropout(weights, c.dropout_rate, rng), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return nx.linear(ctx, P(f"{prefix}.wo"), P(f"{prefix}.bo")), weights

    def _ffn(self, prefix, x, rng):
        P = self._p
        hdn = nx.relu(nx.linear(x, P(f"{prefix}.w1"), P(f"{prefix}.b1")))
        return nx.linear(nx.dropout(hdn, self.config.dropout_rate, rng), P(f"{prefix}.w2"), P(f"{prefix}.b2"))

    def _norm(self, prefix, x):
        return nx.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _drop(self, x, rng):
        return nx.dropout(x, self.config.dropout_rate, rng)

    # -- encoder ---------------------------------------------------------------

    def embed_inputs(self, ids, positions, turns):
        """Word + position + turn embedding for every input token."""
        P = self._p
        return (nx.embedding(P("embed.word"), ids, "word")
                + nx.embedding(P("embed.pos"), positions, "position")
                + nx.embedding(P("embed.turn"), turns, "turn"))

    def encode(self, batch, rng=None):
        """Run the encoder stack.

        Returns a dict with the full encodings ``E``, the split ``E_H``/``E_U``
        (history side gets a learned sentinel row where the history is empty),
        their key masks, and per-layer self-attention weights.
        """
        c = self.config
        mask = batch.src_mask
        E = self._drop(self.embed_inputs(batch.src_ids, batch.positions, batch.turns), rng)
        key_mask = mask[:, None, None, :]
        attns = []
        for l in range(c.n_layers):
            p = f"enc.{l}"
            a, w = self._mha(f"{p}.self", E, E, key_mask, rng)
            attns.append(w)
            E = self._norm(f"{p}.ln1", E + self._drop(a, rng))
            E = self._norm(f"{p}.ln2", E + self._drop(self._ffn(f"{p}.ffn", E, rng), rng))
        Hn = batch.n_hist
        out = {"E": E, "mask": mask, "self_attn": attns}
        if c.head.splits_source:
            E_H = E[:, :Hn, :]
            h_mask = mask[:, :Hn].copy()
            empty = ~batch.has_history
            if empty.any():
                sel = np.zeros((batch.size, Hn, 1))
                sel[empty, 0, 0] = 1.0
                E_H = E_H + nx.mul(self._p("enc.sentinel") - E_H, sel)
                h_mask[empty, 0] = True
            out.update(E_H=E_H, E_U=E[:, Hn:, :], h_mask=h_mask, u_mask=mask[:, Hn:])
        return out

    # -- decoder ---------------------------------------------------------------

    def decode_layer(self, l, D_prev, enc, tgt_key_mask, rng=None):
        """One decoder layer.  Returns (D_l, info) where info holds the
        sub-layer outputs and cross-attention weights of this layer."""
        T = D_prev.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_mask = causal[None, None] & tgt_key_mask[:, None, None, :]
        p = f"dec.{l}"
        m_raw, m_w = self._mha(f"{p}.self", D_prev, D_prev, self_mask, rng)
        M = self._norm(f"{p}.ln1", D_prev + self._drop(m_raw, rng))
        info = {"M": M, "self_attn": m_w}
        if self.config.head.splits_source:
            ch, wh = self._mha(f"{p}.cross_h", M, enc["E_H"], enc["h_mask"][:, None, None, :], rng)
            cu, wu = self._mha(f"{p}.cross_u", M, enc["E_U"], enc["u_mask"][:, None, None, :], rng)
            CH = self._norm(f"{p}.ln_h", M + self._drop(ch, rng))
            CU = self._norm(f"{p}.ln_u", M + self._drop(cu, rng))
            f = self._ffn(f"{p}.ffn", nx.concat([CH, CU]), rng)
            D = self._norm(f"{p}.ln3", CH + CU + self._drop(f, rng))
            info.update(C_H=ch, C_U=cu, attn_h=wh, attn_u=wu, ffn_in_width=2 * self.config.d_model)
        else:
            cr, w = self._mha(f"{p}.cross", M, enc["E"], enc["mask"][:, None, None, :], rng)
            C = self._norm(f"{p}.ln2", M + self._drop(cr, rng))
            f = self._ffn(f"{p}.ffn", C, rng)
            D = self._norm(f"{p}.ln3", C + self._drop(f, rng))
            info.update(C=cr, attn=w, ffn_in_width=self.config.d_model)
        return D, info

    def decode(self, tgt_in, enc, tgt_mask=None, rng=None):
        B, T = tgt_in.shape
        if T > self.config.max_positions:
            raise DataError(f"decoder length {T} exceeds max_positions={self.config.max_positions}")
        if tgt_mask is None:
            tgt_mask = np.ones((B, T), dtype=bool)
        ids = np.where(tgt_in >= self.config.vocab_size, UNK_ID, tgt_in)
        x = (nx.embedding(self._p("embed.word"), ids, "word")
             + nx.embedding(self._p("embed.pos"), np.broadcast_to(np.arange(T), (B, T)), "position"))
        D = self._drop(x, rng)
        infos = []
        for l in range(self.config.n_layers):
            D, info = self.decode_layer(l, D, enc, tgt_mask, rng)
            infos.append(info)
        return D, x, infos

    # -- output ----------------------------------------------------------------

    @staticmethod
    def tile_encoding(enc, n):
        """Repeat a single-sample encoding ``n`` times along the batch (inference only)."""
        out = {}
        for k, v in enc.items():
            if isinstance(v, Tensor):
                out[k] = Tensor(np.repeat(v.data, n, axis=0))
            elif isinstance(v, np.ndarray):
                out[k] = np.repeat(v, n, axis=0)
            else:
                out[k] = v
        return out

    def compute_lambda(self, D_t, C_H_t, C_U_t):
        """Gate between copying from the utterance and from the history."""
        if self.config.head is not OutputHead.PTR_LAMBDA:
            raise ContractError(f"compute_lambda needs the ptr-lambda head, model has {self.config.head.value}")
        P = self._p
        D_t, C_H_t, C_U_t = (x if isinstance(x, Tensor) else Tensor(x) for x in (D_t, C_H_t, C_U_t))
        pre = (nx.tsum(nx.mul(D_t, P("gate.w_d")), axis=-1)
               + nx.tsum(nx.mul(C_H_t, P("gate.w_h")), axis=-1)
               + nx.tsum(nx.mul(C_U_t, P("gate.w_u")), axis=-1))
        return nx.sigmoid(pre)

    def _source_weights(self, batch, lam, attn_h, attn_u):
        """Per-position copy weights [B, T, S] for the split pointer."""
        has_h = batch.has_history.astype(float)[:, None]
        if self.config.lambda_weights == "utterance":
            w_h = nx.mul(1.0 - lam, has_h)
            w_u = lam + nx.mul(1.0 - lam, 1.0 - has_h)
        else:
            w_h = nx.mul(lam, has_h)
            w_u = (1.0 - lam) + nx.mul(lam, 1.0 - has_h)
        B, T = lam.shape
        return nx.concat([nx.mul(attn_h, w_h.reshape(B, T, 1)), nx.mul(attn_u, w_u.reshape(B, T, 1))])

    def forward(self, batch, tgt_in=None, tgt_mask=None, rng=None, enc=None):
        """Distribution over extended ids at every decoder step.

        Returns a dict with ``probs`` [B, T, ext_size] and, for inspection,
        ``pos_weights`` [B, T, S] (copy mass per input position, when the head
        copies), ``lam`` [B, T] (ptr-lambda) and ``p_gen`` (ptr-gen).
        """
        c = self.config
        tgt_in = batch.tgt_in if tgt_in is None else tgt_in
        tgt_mask = batch.tgt_mask if tgt_mask is None else tgt_mask
        if enc is None:
            enc = self.encode(batch, rng)
        D, x, infos = self.decode(tgt_in, enc, tgt_mask, rng)
        B, T = tgt_in.shape
        out = {"enc": enc, "layers": infos, "D": D}
        head = c.head
        if c.n_layers == 0:
            raise ConfigError("the output heads need at least one decoder layer")
        last = infos[-1]
        if head is OutputHead.PTR_LAMBDA:
            lam = self.compute_lambda(D, last["C_H"], last["C_U"])
            attn_h = nx.mean(last["attn_h"], axis=1)
            attn_u = nx.mean(last["attn_u"], axis=1)
            pos = self._source_weights(batch, lam, attn_h, attn_u)
            probs = nx.copy_scatter(pos, batch.src_ext, batch.ext_size)
            out.update(lam=lam, pos_weights=pos)
        elif head is OutputHead.PTR_NET:
            pos = nx.mean(last["attn"], axis=1)
            probs = nx.copy_scatter(pos, batch.src_ext, batch.ext_size)
            out.update(pos_weights=pos)
        else:
            P = self._p
            vocab = nx.softmax_masked(nx.linear(D, P("out.w"), P("out.b")))
            if head is OutputHead.GEN:
                probs = vocab
            else:
                pre = (nx.tsum(nx.mul(D, P("pgen.w_d")), axis=-1)
                       + nx.tsum(nx.mul(last["C"], P("pgen.w_c")), axis=-1)
                       + nx.tsum(nx.mul(x, P("pgen.w_x")), axis=-1)) + P("pgen.b")
                p_gen = nx.sigmoid(pre)
                attn = nx.mean(last["attn"], axis=1)
                extra = batch.ext_size - c.vocab_size
                if extra:
                    vocab = nx.concat([vocab, np.zeros((B, T, extra))])
                pg = p_gen.reshape(B, T, 1)
                pos = nx.mul(attn, 1.0 - pg)
                probs = nx.mul(vocab, pg) + nx.copy_scatter(pos, batch.src_ext, batch.ext_size)
                out.update(p_gen=p_gen, pos_weights=pos)
            if head is OutputHead.GEN:
                out.update(pos_weights=nx.mean(last["attn"], axis=1))
        out["probs"] = probs
        return out

    def output_distribution(self, state):
        """Probability map ``{extended id: p}`` for one step state.

        Goes through the same combination code as :meth:`forward`.
        """
        head = self.config.head
        V = state.vocab_size
        if head is OutputHead.PTR_LAMBDA:
            h_ids = np.asarray(state.h_ids, dtype=np.int64)
            u_ids = np.asarray(state.u_ids, dtype=np.int64)
            has_h = len(h_ids) > 0
            ah = np.asarray(state.attn_h, dtype=float) if has_h else np.ones(1)
            if not has_h:
                h_ids = np.array([PAD_ID])
            ids = np.concatenate([h_ids, u_ids])
            size = max(V, int(ids.max()) + 1)
            fake = EncodedBatch(ids[None], ids[None], None, None, None, len(h_ids),
                                np.array([has_h]), [[]], size)
            lam = Tensor(np.array([[state.lam]]))
            pos = self._source_weights(fake, lam, Tensor(ah[None, None]),
                                       Tensor(np.asarray(state.attn_u, dtype=float)[None, None]))
            probs = nx.copy_scatter(pos, ids[None], size).data[0, 0]
        elif head is OutputHead.PTR_NET:
            ids = np.concatenate([np.asarray(state.h_ids, dtype=np.int64),
                                  np.asarray(state.u_ids, dtype=np.int64)])
            size = max(V, int(ids.max()) + 1)
            probs = nx.copy_scatter(Tensor(np.asarray(state.attn_all, dtype=float)[None, None]),
                                    ids[None], size).data[0, 0]
        elif head is OutputHead.GEN:
            probs = np.asarray(state.vocab_probs, dtype=float)
        else:
            ids = np.concatenate([np.asarray(state.h_ids, dtype=np.int64),
                                  np.asarray(state.u_ids, dtype=np.int64)])
            size = max(V, int(ids.max()) + 1)
            vocab = np.zeros(size)
            vocab[:V] = state.vocab_probs
            copy = nx.copy_scatter(Tensor(np.asarray(state.attn_all, dtype=float)[None, None]),
                                   ids[None], size).data[0, 0]
            probs = state.p_gen * vocab + (1.0 - state.p_gen) * copy
        return {int(i): float(probs[i]) for i in np.flatnonzero(probs)}

    def nll_loss(self, batch, rng=None):
        """Per-token negative log-likelihood of the references (teacher forcing)."""
        out = self.forward(batch, rng=rng)
        p_ref = nx.gather_last(out["probs"], batch.tgt_out)
        nll = nx.neg(nx.log(p_ref))
        n_tok = batch.tgt_mask.sum()
        return nx.mul(nx.tsum(nx.mul(nll, batch.tgt_mask.astype(float))), 1.0 / n_tok)

    def token_nll(self, batch):
        """Summed NLL and token count, without recording gradients."""
        out = self.forward(batch)
        p_ref = np.take_along_axis(out["probs"].data, batch.tgt_out[..., None], axis=-1)[..., 0]
        nll = -np.log(np.maximum(p_ref, 1e-12))
        return float((nll * batch.tgt_mask).sum()), int(batch.tgt_mask.sum())

    # -- persistence -----------------------------------------------------------

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v
